// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

namespace vilt::trainer {

using ad::Var;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Random streams; the first derive_rng component after the seed.
constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kPretrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;
constexpr std::uint64_t kFinetuneStream = 3;
constexpr std::uint64_t kDropoutStream = 4;
constexpr std::uint64_t kTaskDataStream = 5;

std::vector<bool> all_true(std::size_t n) { return std::vector<bool>(n, true); }

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

void scale_grads(std::span<Parameter* const> params, double s) {
  for (Parameter* p : params) p->grad *= s;
}

// Rejects keys of `j` that do not exist in `reference` (recursing into
// objects present in both).
void check_keys(const json& j, const json& reference, const std::string& where) {
  if (!j.is_object()) throw UserError(fmt::format("config: '{}' must be an object", where.empty() ? "<root>" : where));
  for (const auto& [key, value] : j.items()) {
    if (where == "model" && key == "preset") continue;
    if (!reference.contains(key)) {
      throw UserError(fmt::format("config: unknown key '{}{}'", where.empty() ? "" : where + ".", key));
    }
    if (reference.at(key).is_object()) check_keys(value, reference.at(key), where.empty() ? key : where + "." + key);
  }
}

}  // namespace

// ---- schedule and optimizer -----------------------------------------------------------

void Schedule::validate() const {
  if (total_steps < 1) throw UserError("schedule: total_steps must be at least 1");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw UserError("schedule: warmup_frac must lie in (0, 1)");
}

long Schedule::warmup_steps() const { return std::llround(static_cast<double>(total_steps) * warmup_frac); }

double lr_at(long step, const Schedule& sched, double base_lr) {
  sched.validate();
  if (step < 0) throw UserError("lr_at: negative step");
  if (step >= sched.total_steps) return 0.0;
  const long warm = sched.warmup_steps();
  if (step < warm) return base_lr * static_cast<double>(step) / static_cast<double>(warm);
  return base_lr * static_cast<double>(sched.total_steps - step) / static_cast<double>(sched.total_steps - warm);
}

json OptimConfig::to_json() const {
  return {{"lr", lr},       {"weight_decay", weight_decay}, {"beta1", beta1},
          {"beta2", beta2}, {"eps", eps},                   {"warmup_frac", warmup_frac}};
}

OptimConfig OptimConfig::from_json(const json& j) {
  OptimConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  return c;
}

OptimState OptimState::create(std::span<Parameter* const> params, const OptimConfig& cfg) {
  OptimState s;
  s.base_lr = cfg.lr;
  s.weight_decay = cfg.weight_decay;
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.eps = cfg.eps;
  for (const Parameter* p : params) {
    if (s.m.count(p->name)) throw UserError(fmt::format("optimizer: duplicate parameter '{}'", p->name));
    s.m[p->name] = Matrix::Zero(p->value.rows(), p->value.cols());
    s.v[p->name] = Matrix::Zero(p->value.rows(), p->value.cols());
  }
  return s;
}

void OptimState::save(checkpoint::Checkpoint& ckpt) const {
  for (const auto& [name, value] : m) ckpt.put("opt.m." + name, value);
  for (const auto& [name, value] : v) ckpt.put("opt.v." + name, value);
  ckpt.metadata["optimizer"] = {{"step", step},   {"base_lr", base_lr}, {"weight_decay", weight_decay},
                                {"beta1", beta1}, {"beta2", beta2},     {"eps", eps}};
}

void OptimState::load(const checkpoint::Checkpoint& ckpt, std::span<Parameter* const> params) {
  if (!ckpt.metadata.contains("optimizer")) throw UserError("checkpoint holds no optimizer state");
  const auto& o = ckpt.metadata.at("optimizer");
  step = o.at("step").get<long>();
  base_lr = o.at("base_lr").get<double>();
  weight_decay = o.at("weight_decay").get<double>();
  beta1 = o.at("beta1").get<double>();
  beta2 = o.at("beta2").get<double>();
  eps = o.at("eps").get<double>();
  m.clear();
  v.clear();
  for (const Parameter* p : params) {
    const Matrix& mm = ckpt.get("opt.m." + p->name);
    const Matrix& vv = ckpt.get("opt.v." + p->name);
    if (mm.rows() != p->value.rows() || mm.cols() != p->value.cols() || vv.rows() != mm.rows() ||
        vv.cols() != mm.cols()) {
      throw UserError(fmt::format("optimizer moments of '{}' do not match the parameter shape", p->name));
    }
    m[p->name] = mm;
    v[p->name] = vv;
  }
}

void adamw_step(std::span<Parameter* const> params, OptimState& opt, double lr) {
  for (const Parameter* p : params) {
    if (!p->grad.allFinite()) throw Error(fmt::format("non-finite gradient in parameter '{}'", p->name));
    auto it = opt.m.find(p->name);
    if (it == opt.m.end() || it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw UserError(fmt::format("optimizer state does not cover parameter '{}'", p->name));
    }
  }
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (Parameter* p : params) {
    Matrix& m = opt.m[p->name];
    Matrix& v = opt.v[p->name];
    if (p->decay && opt.weight_decay != 0.0) p->value *= 1.0 - lr * opt.weight_decay;
    m = opt.beta1 * m + (1.0 - opt.beta1) * p->grad;
    v = opt.beta2 * v + (1.0 - opt.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.eps);
  }
}

// ---- run configuration ----------------------------------------------------------------

void RunConfig::validate() const {
  model.validate();
  if (threads < 1) throw UserError("threads must be at least 1");
  if (pretrain.steps < 1 || pretrain.batch < 1) throw UserError("pretrain: steps and batch must be at least 1");
  if (pretrain.checkpoint_every < 0) throw UserError("pretrain: checkpoint_every must be ≥ 0");
  if (!(pretrain.mask_prob > 0.0 && pretrain.mask_prob < 1.0)) throw UserError("pretrain: mask_prob must lie in (0, 1)");
  if (!(pretrain.mpp_prob > 0.0 && pretrain.mpp_prob < 1.0)) throw UserError("pretrain: mpp_prob must lie in (0, 1)");
  if (std::find(kTasks.begin(), kTasks.end(), finetune.task) == kTasks.end()) {
    throw UserError(fmt::format("unknown fine-tuning task '{}' (expected retrieval, cls or nlvr2-pair)", finetune.task));
  }
  if (finetune.steps < 1 || finetune.batch < 1) throw UserError("finetune: steps and batch must be at least 1");
  if (finetune.n_neg < 0 || finetune.gallery < 2) throw UserError("finetune: n_neg ≥ 0 and gallery ≥ 2 required");
  if (finetune.n_ops < 0 || finetune.magnitude < 0 || finetune.magnitude > image::kMaxMagnitude) {
    throw UserError("finetune: invalid RandAugment settings");
  }
  if (data.image_short < 1 || data.image_long < data.image_short) {
    throw UserError("data: need 1 ≤ image_short ≤ image_long");
  }
  Schedule{1, optim.warmup_frac}.validate();
  if (optim.lr < 0.0 || finetune.lr < 0.0 || optim.weight_decay < 0.0) throw UserError("optim: negative rate");
}

json RunConfig::to_json() const {
  return {
      {"model", model.to_json()},
      {"data",
       {{"manifest", data.manifest},
        {"vocab", data.vocab},
        {"scenes", data.scenes},
        {"image_short", data.image_short},
        {"image_long", data.image_long},
        {"normalize", data.normalize}}},
      {"optim", optim.to_json()},
      {"pretrain",
       {{"steps", pretrain.steps},
        {"batch", pretrain.batch},
        {"checkpoint_every", pretrain.checkpoint_every},
        {"use_wpa", pretrain.use_wpa},
        {"use_mpp", pretrain.use_mpp},
        {"wwm", pretrain.wwm},
        {"mask_prob", pretrain.mask_prob},
        {"mpp_prob", pretrain.mpp_prob}}},
      {"finetune",
       {{"task", finetune.task},
        {"steps", finetune.steps},
        {"batch", finetune.batch},
        {"lr", finetune.lr},
        {"augment", finetune.augment},
        {"n_ops", finetune.n_ops},
        {"magnitude", finetune.magnitude},
        {"n_neg", finetune.n_neg},
        {"gallery", finetune.gallery}}},
      {"seed", seed},
      {"threads", threads},
      {"output_dir", output_dir},
  };
}

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  json merged = base.to_json();
  check_keys(j, merged, "");
  json patch = j;
  if (patch.contains("model") && patch["model"].contains("preset")) {
    merged["model"] = patch["model"];
    patch.erase("model");
  }
  merged.merge_patch(patch);
  try {
    RunConfig c;
    c.model = model::ModelConfig::from_json(merged.at("model"));
    const auto& d = merged.at("data");
    c.data.manifest = d.at("manifest").get<std::string>();
    c.data.vocab = d.at("vocab").get<std::string>();
    c.data.scenes = d.at("scenes").get<std::string>();
    c.data.image_short = d.at("image_short").get<int>();
    c.data.image_long = d.at("image_long").get<int>();
    c.data.normalize = d.at("normalize").get<bool>();
    c.optim = OptimConfig::from_json(merged.at("optim"));
    const auto& p = merged.at("pretrain");
    c.pretrain.steps = p.at("steps").get<long>();
    c.pretrain.batch = p.at("batch").get<int>();
    c.pretrain.checkpoint_every = p.at("checkpoint_every").get<long>();
    c.pretrain.use_wpa = p.at("use_wpa").get<bool>();
    c.pretrain.use_mpp = p.at("use_mpp").get<bool>();
    c.pretrain.wwm = p.at("wwm").get<bool>();
    c.pretrain.mask_prob = p.at("mask_prob").get<double>();
    c.pretrain.mpp_prob = p.at("mpp_prob").get<double>();
    const auto& f = merged.at("finetune");
    c.finetune.task = f.at("task").get<std::string>();
    c.finetune.steps = f.at("steps").get<long>();
    c.finetune.batch = f.at("batch").get<int>();
    c.finetune.lr = f.at("lr").get<double>();
    c.finetune.augment = f.at("augment").get<bool>();
    c.finetune.n_ops = f.at("n_ops").get<int>();
    c.finetune.magnitude = f.at("magnitude").get<int>();
    c.finetune.n_neg = f.at("n_neg").get<int>();
    c.finetune.gallery = f.at("gallery").get<int>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.threads = merged.at("threads").get<int>();
    c.output_dir = merged.at("output_dir").get<std::string>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw UserError(fmt::format("config: {}", e.what()));
  }
}

RunConfig RunConfig::load(const fs::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw UserError(fmt::format("cannot open config '{}'", path.string()));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw UserError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return from_json(j, base);
}

RunConfig RunConfig::from_json(const json& j) { return from_json(j, RunConfig{}); }

RunConfig RunConfig::load(const fs::path& path) { return load(path, RunConfig{}); }

std::string RunConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

// ---- corpus ----------------------------------------------------------------------------

std::vector<std::size_t> Corpus::split(const std::string& name) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == name) out.push_back(i);
  }
  return out;
}

Corpus load_corpus(const DataConfig& data, int max_text_len) {
  if (data.manifest.empty()) throw UserError("no corpus manifest configured (data.manifest)");
  const fs::path manifest = data.manifest;
  if (!fs::exists(manifest)) throw UserError(fmt::format("corpus manifest '{}' not found", manifest.string()));
  const fs::path dir = manifest.parent_path();
  Corpus c;
  c.vocab = text::Vocabulary::load(data.vocab.empty() ? dir / "vocab.txt" : fs::path(data.vocab));
  c.entries = text::read_manifest(manifest);
  if (c.entries.empty()) throw UserError(fmt::format("corpus manifest '{}' is empty", manifest.string()));
  for (const auto& e : c.entries) {
    c.images.push_back(image::resize_keep_aspect(image::load_image(e.image), data.image_short, data.image_long));
    c.tokens.push_back(text::tokenize(e.caption, c.vocab, static_cast<std::size_t>(max_text_len)));
  }
  const fs::path scenes = data.scenes.empty() ? dir / "scenes.jsonl" : fs::path(data.scenes);
  if (fs::exists(scenes)) {
    c.scenes = synth::read_scenes(scenes);
    if (c.scenes.size() != c.entries.size()) {
      throw UserError(fmt::format("scene list '{}' has {} rows but the manifest has {}", scenes.string(),
                                  c.scenes.size(), c.entries.size()));
    }
  }
  return c;
}

PixelStatistics pixel_statistics(const Corpus& corpus, std::span<const std::size_t> indices) {
  std::array<double, 3> sum = {0.0, 0.0, 0.0};
  std::array<double, 3> sq = {0.0, 0.0, 0.0};
  double count = 0.0;
  for (std::size_t i : indices) {
    const auto& img = corpus.images.at(i);
    const auto plane = static_cast<std::size_t>(img.height()) * static_cast<std::size_t>(img.width());
    for (std::size_t c = 0; c < 3; ++c) {
      for (double v : img.data().subspan(c * plane, plane)) {
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(plane);
  }
  if (count == 0.0) throw UserError("pixel statistics need at least one image");
  PixelStatistics st;
  for (std::size_t c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / count;
    const double var = sq[c] / count - st.mean[c] * st.mean[c];
    if (!(var > 1e-12)) throw UserError(fmt::format("pixel channel {} is constant over the training images", c));
    st.stdev[c] = std::sqrt(var);
  }
  return st;
}

image::PatchBatch prepare_patches(const image::ImageTensor& img, const model::ModelConfig& cfg, Rng& rng) {
  return image::sample_patches(image::patchify(img, cfg.patch), static_cast<std::size_t>(cfg.max_patches), rng);
}

// ---- model bundles -----------------------------------------------------------------------

std::vector<Parameter*> PretrainModel::parameters() {
  auto ps = weights.parameters();
  for (Parameter* p : heads.parameters()) ps.push_back(p);
  return ps;
}

json vocab_to_json(const text::Vocabulary& vocab) {
  const auto& s = vocab.specials();
  return {{"tokens", vocab.tokens()},
          {"specials", {{"pad", s.pad}, {"unk", s.unk}, {"cls", s.cls}, {"sep", s.sep}, {"mask", s.mask}}}};
}

text::Vocabulary vocab_from_json(const json& j) {
  const auto& s = j.at("specials");
  return text::Vocabulary(j.at("tokens").get<std::vector<std::string>>(),
                          text::Vocabulary::Specials{s.at("pad").get<int>(), s.at("unk").get<int>(),
                                                     s.at("cls").get<int>(), s.at("sep").get<int>(),
                                                     s.at("mask").get<int>()});
}

LoadedModel load_model(const checkpoint::Checkpoint& ckpt) {
  LoadedModel out;
  try {
    out.config = RunConfig::from_json(ckpt.config);
    out.vocab = vocab_from_json(ckpt.metadata.at("vocab"));
    out.kind = ckpt.metadata.at("kind").get<std::string>();
    out.step = ckpt.metadata.value("step", 0L);
  } catch (const json::exception& e) {
    throw UserError(fmt::format("checkpoint metadata is incomplete: {}", e.what()));
  }
  out.model = std::make_unique<PretrainModel>(out.config.model);
  auto wp = out.model->weights.parameters();
  ckpt.get_parameters(wp);
  if (ckpt.contains("heads.itm.weight")) {
    auto hp = out.model->heads.parameters();
    ckpt.get_parameters(hp);
  }
  return out;
}

namespace {

void stamp(checkpoint::Checkpoint& ckpt, const RunConfig& cfg, const text::Vocabulary& vocab, const std::string& kind,
           long step) {
  ckpt.config = cfg.to_json();
  ckpt.metadata["kind"] = kind;
  ckpt.metadata["step"] = step;
  ckpt.metadata["config_hash"] = cfg.hash();
  ckpt.metadata["code_version"] = std::string(kCodeVersion);
  ckpt.metadata["vocab"] = vocab_to_json(vocab);
}

}  // namespace

// ---- pre-training -----------------------------------------------------------------------

json StepRecord::to_json() const {
  json j = loss.to_json();
  j["step"] = step;
  j["lr"] = lr;
  return j;
}

Pretrainer::Pretrainer(RunConfig cfg, const Corpus& corpus) : cfg_(std::move(cfg)), corpus_(corpus) {
  cfg_.model.vocab_size = corpus.vocab.size();
  cfg_.validate();
  train_ = corpus.split("train");
  if (train_.size() < 2) throw UserError("pre-training needs at least two training pairs");
  if (cfg_.data.normalize) {
    const auto st = pixel_statistics(corpus, train_);
    cfg_.model.pixel_mean = st.mean;
    cfg_.model.pixel_std = st.stdev;
  }
  model_ = std::make_unique<PretrainModel>(cfg_.model);
  Rng rng = derive_rng(cfg_.seed, {kInitStream});
  model_->weights.init(rng);
  model_->heads.init(rng);
  opt_ = OptimState::create(model_->parameters(), cfg_.optim);
}

void Pretrainer::resume(const checkpoint::Checkpoint& ckpt) {
  if (ckpt.config.contains("model") && model::ModelConfig::from_json(ckpt.config.at("model")) != cfg_.model) {
    throw UserError("resume: checkpoint model configuration differs from this run");
  }
  auto ps = model_->parameters();
  ckpt.get_parameters(ps);
  opt_.load(ckpt, ps);
}

objectives::PretrainBatch Pretrainer::make_batch(long step) const {
  Rng rng = derive_rng(cfg_.seed, {kPretrainStream, static_cast<std::uint64_t>(step)});
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.pretrain.batch), train_.size());
  // Local positions into train_, partially shuffled.
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
  order.resize(n);
  const auto itm = objectives::build_itm_assignment(order, train_.size(), rng);

  objectives::PretrainBatch batch;
  std::vector<text::TokenRow> rows;
  for (std::size_t i = 0; i < n; ++i) rows.push_back(corpus_.tokens[train_[order[i]]]);
  const auto plain = text::make_batch(rows, corpus_.vocab);
  batch.tokens = cfg_.pretrain.wwm ? text::whole_word_mask(plain, corpus_.vocab, cfg_.pretrain.mask_prob, rng)
                                   : text::token_mask(plain, corpus_.vocab, cfg_.pretrain.mask_prob, rng);
  batch.itm_label = itm.label;
  for (std::size_t i = 0; i < n; ++i) {
    batch.patches.push_back(prepare_patches(corpus_.images[train_[itm.image[i]]], cfg_.model, rng));
  }
  objectives::clear_mpp(batch);
  if (cfg_.pretrain.use_mpp) {
    for (std::size_t i = 0; i < n; ++i) {
      objectives::mask_patches(batch.patches[i], batch.mpp_labels[i], batch.mpp_mask[i], cfg_.pretrain.mpp_prob, rng);
    }
  }
  return batch;
}

StepRecord Pretrainer::step() {
  const long s = opt_.step;
  const auto batch = make_batch(s);
  auto params = model_->parameters();
  zero_grads(params);
  objectives::LossOptions options;
  options.threads = cfg_.threads;
  if (cfg_.model.dropout > 0.0) {
    options.dropout_seed = derive_rng(cfg_.seed, {kDropoutStream, static_cast<std::uint64_t>(s)})();
  }
  StepRecord rec;
  rec.step = s;
  rec.loss = objectives::pretrain_loss(batch, model_->weights, model_->heads,
                                       {cfg_.pretrain.use_wpa, cfg_.pretrain.use_mpp}, options);
  rec.lr = lr_at(s, {cfg_.pretrain.steps, cfg_.optim.warmup_frac}, cfg_.optim.lr);
  adamw_step(params, opt_, rec.lr);
  return rec;
}

std::vector<StepRecord> Pretrainer::run(long until, const fs::path& out_dir, const fs::path& log_path) {
  until = std::min(until, cfg_.pretrain.steps);
  std::ofstream log;
  if (!log_path.empty()) {
    if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
    log.open(log_path, std::ios::app);
    if (!log) throw Error(fmt::format("cannot append to log '{}'", log_path.string()));
  }
  if (!out_dir.empty()) fs::create_directories(out_dir);
  const std::string hash = cfg_.hash();
  std::vector<StepRecord> records;
  while (opt_.step < until) {
    records.push_back(step());
    if (log.is_open()) {
      json line = records.back().to_json();
      line["config_hash"] = hash;
      log << line.dump() << '\n' << std::flush;
    }
    const long done = opt_.step;
    if (!out_dir.empty() && cfg_.pretrain.checkpoint_every > 0 && done % cfg_.pretrain.checkpoint_every == 0) {
      snapshot().save(out_dir / fmt::format("step_{:06d}.ckpt", done));
    }
  }
  if (!out_dir.empty()) snapshot().save(out_dir / "last.ckpt");
  return records;
}

checkpoint::Checkpoint Pretrainer::snapshot() const {
  checkpoint::Checkpoint ckpt;
  stamp(ckpt, cfg_, corpus_.vocab, "pretrain", opt_.step);
  auto ps = model_->parameters();
  ckpt.put_parameters(ps);
  opt_.save(ckpt);
  return ckpt;
}

std::vector<double> moving_average(std::span<const double> values, std::size_t window) {
  if (window == 0) throw UserError("moving_average: window must be positive");
  std::vector<double> out;
  if (values.size() < window) return out;
  for (std::size_t i = 0; i + window <= values.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = i; k < i + window; ++k) s += values[k];
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

// ---- evaluation ---------------------------------------------------------------------------

ItmEval evaluate_itm(PretrainModel& m, const RunConfig& cfg, const Corpus& corpus, const std::string& split,
                     int rounds) {
  const auto idx = corpus.split(split);
  if (idx.size() < 2) throw UserError(fmt::format("split '{}' needs at least two pairs for ITM evaluation", split));
  ItmEval out;
  std::size_t correct = 0;
  for (int r = 0; r < rounds; ++r) {
    Rng rng = derive_rng(cfg.seed, {kEvalStream, 0, static_cast<std::uint64_t>(r)});
    std::vector<std::size_t> local(idx.size());
    for (std::size_t i = 0; i < local.size(); ++i) local[i] = i;
    const auto itm = objectives::build_itm_assignment(local, idx.size(), rng);
    objectives::PretrainBatch batch;
    std::vector<text::TokenRow> rows;
    for (std::size_t i : idx) rows.push_back(corpus.tokens[i]);
    batch.tokens = text::make_batch(rows, corpus.vocab);
    batch.itm_label = itm.label;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      batch.patches.push_back(prepare_patches(corpus.images[idx[itm.image[i]]], m.weights.config(), rng));
    }
    objectives::clear_mpp(batch);
    objectives::LossOptions options;
    options.compute_gradients = false;
    options.threads = cfg.threads;
    const auto report = objectives::pretrain_loss(batch, m.weights, m.heads, {false, false}, options);
    correct += report.itm_correct;
    out.samples += idx.size();
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(out.samples);
  return out;
}

json evaluate_retrieval(model::Weights& w, downstream::SimilarityHead& head, const RunConfig& cfg,
                        const Corpus& corpus, const std::string& split, std::size_t gallery) {
  auto idx = corpus.split(split);
  if (idx.size() < 2) throw UserError(fmt::format("split '{}' needs at least two pairs for retrieval", split));
  if (idx.size() > gallery) idx.resize(gallery);
  std::vector<text::TokenRow> texts;
  std::vector<image::PatchBatch> images;
  for (std::size_t i : idx) {
    Rng rng = derive_rng(cfg.seed, {kEvalStream, 1, i});
    texts.push_back(corpus.tokens[i]);
    images.push_back(prepare_patches(corpus.images[i], w.config(), rng));
  }
  downstream::RetrievalIndex text_to_image;
  text_to_image.scores = downstream::score_grid(texts, images, w, head, cfg.threads);
  downstream::RetrievalIndex image_to_text;
  image_to_text.scores = text_to_image.scores.transpose();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    text_to_image.ground_truth.push_back(i);
    image_to_text.ground_truth.push_back(i);
  }
  json j = {{"gallery", idx.size()}};
  for (std::size_t k : {1, 5, 10}) {
    j[fmt::format("ir_r{}", k)] = downstream::recall_at_k(text_to_image, k);
    j[fmt::format("tr_r{}", k)] = downstream::recall_at_k(image_to_text, k);
  }
  return j;
}

// ---- fine-tuning ----------------------------------------------------------------------------

namespace {

struct ClsExample {
  text::TokenRow tokens;
  std::size_t image = 0;
  std::size_t image2 = 0;
  int label = 0;
};

std::vector<ClsExample> cls_examples(const Corpus& corpus, const std::vector<std::size_t>& idx, int max_len) {
  std::vector<ClsExample> out;
  for (std::size_t i : idx) {
    for (const auto& q : synth::questions_for(corpus.scenes[i])) {
      out.push_back({text::tokenize(q.question, corpus.vocab, static_cast<std::size_t>(max_len)), i, i, q.answer});
    }
  }
  return out;
}

// Balanced true/false statements over pairs of scenes in `idx`.
std::vector<ClsExample> nlvr2_examples(const Corpus& corpus, const std::vector<std::size_t>& idx, int max_len,
                                       std::uint64_t seed, std::uint64_t tag) {
  Rng rng = derive_rng(seed, {kTaskDataStream, tag});
  std::vector<ClsExample> out;
  const std::size_t count = 2 * idx.size();
  for (std::size_t k = 0; k < count; ++k) {
    const bool want = k % 2 == 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t a = idx[uniform_index(rng, idx.size())];
      const std::size_t b = idx[uniform_index(rng, idx.size())];
      if (a == b) continue;
      const auto st = synth::pair_statement(corpus.scenes[a], corpus.scenes[b], rng);
      if (st.label != want) continue;
      out.push_back({text::tokenize(st.statement, corpus.vocab, static_cast<std::size_t>(max_len)), a, b, want ? 1 : 0});
      break;
    }
  }
  return out;
}

image::ImageTensor maybe_augment(const image::ImageTensor& img, const FinetuneOptions& o, Rng& rng) {
  if (!o.augment || o.n_ops == 0) return img;
  return image::rand_augment(img, o.n_ops, o.magnitude, rng);
}

// Mini-batch loop shared by the fine-tuning tasks. `loss_of(example, rng,
// sink)` builds one example's graph, backpropagates into `sink` and
// returns its loss.
template <typename LossFn>
std::vector<double> train_loop(std::span<Parameter* const> params, OptimState& opt, const RunConfig& cfg,
                               std::size_t n_examples, LossFn&& loss_of) {
  const auto& o = cfg.finetune;
  std::vector<double> losses;
  const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(o.batch), n_examples);
  for (long s = 0; s < o.steps; ++s) {
    Rng rng = derive_rng(cfg.seed, {kFinetuneStream, static_cast<std::uint64_t>(s)});
    std::vector<std::size_t> order(n_examples);
    for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
    for (std::size_t i = 0; i < b; ++i) std::swap(order[i], order[i + uniform_index(rng, n_examples - i)]);
    zero_grads(params);
    const std::size_t workers = worker_count(b, cfg.threads);
    std::vector<ad::GradientBuffer> buffers(workers);
    std::vector<double> sample_loss(b, 0.0);
    parallel_chunks(b, cfg.threads, [&](std::size_t w, std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        Rng local = derive_rng(cfg.seed, {kFinetuneStream, static_cast<std::uint64_t>(s), i + 1});
        sample_loss[i] = loss_of(order[i], local, buffers[w]);
      }
    });
    for (std::size_t w = 1; w < workers; ++w) buffers[w].merge_into(buffers[0]);
    buffers[0].apply_to_params();
    scale_grads(params, 1.0 / static_cast<double>(b));
    double total = 0.0;
    for (double l : sample_loss) total += l;
    losses.push_back(total / static_cast<double>(b));
    adamw_step(params, opt, lr_at(s, {o.steps, cfg.optim.warmup_frac}, o.lr));
  }
  return losses;
}

double classify_loss(model::Weights& w, downstream::ClassifierHead& head, const ClsExample& ex,
                     const image::ImageTensor& img1, const image::ImageTensor* img2, Rng& rng,
                     ad::GradientBuffer* sink, int* predicted) {
  ad::Tape tape;
  const auto& cfg = w.config();
  const auto mask = all_true(ex.tokens.ids.size());
  Var logits;
  if (img2) {
    const auto p1 = prepare_patches(img1, cfg, rng);
    const auto p2 = prepare_patches(*img2, cfg, rng);
    logits = downstream::nlvr2_logits_graph(tape, ex.tokens.ids, mask, p1, p2, w, head);
  } else {
    const auto pb = prepare_patches(img1, cfg, rng);
    const auto g = model::forward_sample(tape, w, ex.tokens.ids, mask, pb, pb.kept());
    logits = head.forward(g.pooled);
  }
  const std::array<int, 1> label = {ex.label};
  Var loss = ad::cross_entropy_sum(logits, label);
  if (predicted) {
    Eigen::Index arg = 0;
    logits.value().row(0).maxCoeff(&arg);
    *predicted = static_cast<int>(arg);
  }
  if (sink) {
    tape.backward(loss);
    tape.flush_grads(*sink);
  }
  return loss.scalar();
}

double classify_accuracy(model::Weights& w, downstream::ClassifierHead& head, const std::vector<ClsExample>& examples,
                         const Corpus& corpus, bool pair, std::uint64_t seed, int threads) {
  if (examples.empty()) return 0.0;
  std::vector<int> hit(examples.size(), 0);
  parallel_chunks(examples.size(), threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = derive_rng(seed, {kEvalStream, 2, i});
      int pred = -1;
      const auto& ex = examples[i];
      classify_loss(w, head, ex, corpus.images[ex.image], pair ? &corpus.images[ex.image2] : nullptr, rng, nullptr,
                    &pred);
      hit[i] = pred == ex.label ? 1 : 0;
    }
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(examples.size());
}

downstream::SimilarityHead load_similarity_head(const checkpoint::Checkpoint& ckpt) {
  downstream::SimilarityHead h;
  h.w.name = "heads.sim.weight";
  h.b.name = "heads.sim.bias";
  h.w.value = ckpt.get(h.w.name);
  h.b.value = ckpt.get(h.b.name);
  h.b.decay = false;
  h.w.zero_grad();
  h.b.zero_grad();
  return h;
}

void require_scenes(const Corpus& corpus, const std::string& task) {
  if (corpus.scenes.size() != corpus.size()) {
    throw UserError(fmt::format("task '{}' needs the synthetic scene list (scenes.jsonl) next to the manifest", task));
  }
}

}  // namespace

FinetuneResult finetune(const RunConfig& run, const checkpoint::Checkpoint& pretrained, const Corpus& corpus) {
  LoadedModel lm = load_model(pretrained);
  if (lm.kind != "pretrain") throw UserError(fmt::format("fine-tuning starts from a pre-training checkpoint, got '{}'", lm.kind));
  RunConfig cfg = run;
  cfg.model = lm.config.model;
  cfg.validate();
  if (corpus.vocab.tokens() != lm.vocab.tokens()) throw UserError("corpus vocabulary differs from the checkpoint's");
  model::Weights& w = lm.model->weights;
  const auto& o = cfg.finetune;
  const auto train = corpus.split("train");
  const auto val = corpus.split("val");
  FinetuneResult result;
  json metrics;
  std::vector<Parameter*> params = w.parameters();

  if (o.task == "retrieval") {
    if (!pretrained.contains("heads.itm.weight")) throw UserError("retrieval fine-tuning needs the ITM head");
    downstream::SimilarityHead head(lm.model->heads);
    for (Parameter* p : head.parameters()) params.push_back(p);
    OptimState opt = OptimState::create(params, cfg.optim);
    if (train.size() < static_cast<std::size_t>(o.n_neg) + 1) {
      throw UserError(fmt::format("retrieval needs more than {} training pairs", o.n_neg));
    }
    result.losses = train_loop(params, opt, cfg, train.size(), [&](std::size_t k, Rng& rng, ad::GradientBuffer& sink) {
      const auto negs = downstream::sample_negatives(train.size(), k, static_cast<std::size_t>(o.n_neg), rng);
      std::vector<text::TokenRow> neg_rows;
      for (std::size_t n : negs) neg_rows.push_back(corpus.tokens[train[n]]);
      const auto img = maybe_augment(corpus.images[train[k]], o, rng);
      const auto pb = prepare_patches(img, cfg.model, rng);
      return downstream::retrieval_loss(corpus.tokens[train[k]], neg_rows, pb, w, head, true, &sink);
    });
    metrics = evaluate_retrieval(w, head, cfg, corpus, "val", static_cast<std::size_t>(o.gallery));
    stamp(result.checkpoint, cfg, corpus.vocab, "finetune", o.steps);
    auto hp = head.parameters();
    result.checkpoint.put_parameters(hp);
  } else {
    require_scenes(corpus, o.task);
    const bool pair = o.task == "nlvr2-pair";
    const auto train_ex = pair ? nlvr2_examples(corpus, train, cfg.model.max_text_len, cfg.seed, 0)
                               : cls_examples(corpus, train, cfg.model.max_text_len);
    const auto val_ex = pair ? nlvr2_examples(corpus, val, cfg.model.max_text_len, cfg.seed, 1)
                             : cls_examples(corpus, val, cfg.model.max_text_len);
    if (train_ex.empty()) throw UserError(fmt::format("no training examples for task '{}'", o.task));
    const int classes = pair ? 2 : static_cast<int>(synth::answer_classes().size());
    downstream::ClassifierHead head = pair ? downstream::make_nlvr2_head(cfg.model)
                                           : downstream::make_vqa_head(cfg.model, classes);
    Rng init = derive_rng(cfg.seed, {kInitStream, 1});
    head.init(init);
    for (Parameter* p : head.parameters()) params.push_back(p);
    OptimState opt = OptimState::create(params, cfg.optim);
    result.losses = train_loop(params, opt, cfg, train_ex.size(), [&](std::size_t k, Rng& rng, ad::GradientBuffer& sink) {
      const auto& ex = train_ex[k];
      const auto img1 = maybe_augment(corpus.images[ex.image], o, rng);
      if (pair) {
        const auto img2 = maybe_augment(corpus.images[ex.image2], o, rng);
        return classify_loss(w, head, ex, img1, &img2, rng, &sink, nullptr);
      }
      return classify_loss(w, head, ex, img1, nullptr, rng, &sink, nullptr);
    });
    metrics["train_accuracy"] = classify_accuracy(w, head, train_ex, corpus, pair, cfg.seed, cfg.threads);
    metrics["val_accuracy"] = classify_accuracy(w, head, val_ex, corpus, pair, cfg.seed, cfg.threads);
    metrics["train_examples"] = train_ex.size();
    metrics["val_examples"] = val_ex.size();
    stamp(result.checkpoint, cfg, corpus.vocab, "finetune", o.steps);
    result.checkpoint.metadata["classes"] = pair ? std::vector<std::string>{"false", "true"} : synth::answer_classes();
    auto hp = head.parameters();
    result.checkpoint.put_parameters(hp);
  }
  result.checkpoint.metadata["task"] = o.task;
  result.checkpoint.metadata["pretrained_step"] = lm.step;
  result.checkpoint.metadata["pretrained_config_hash"] = pretrained.metadata.value("config_hash", "");
  result.checkpoint.put_parameters(w.parameters());
  metrics["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back();
  result.report = downstream::evaluation_report(o.task, "val", metrics, cfg.hash(),
                                                hex64(fnv1a64(pretrained.serialize())));
  return result;
}

json evaluate_checkpoint(const checkpoint::Checkpoint& ckpt, const Corpus& corpus, const std::string& split,
                         const std::optional<std::string>& task) {
  LoadedModel lm = load_model(ckpt);
  const RunConfig& cfg = lm.config;
  const std::string ckpt_hash = hex64(fnv1a64(ckpt.serialize()));
  if (lm.kind == "pretrain") {
    if (task && *task != "itm") {
      throw UserError(fmt::format("a pre-training checkpoint evaluates ITM, not '{}'", *task));
    }
    const auto itm = evaluate_itm(*lm.model, cfg, corpus, split);
    return downstream::evaluation_report("itm", split, {{"accuracy", itm.accuracy}, {"samples", itm.samples}},
                                         cfg.hash(), ckpt_hash);
  }
  const std::string ckpt_task = ckpt.metadata.value("task", "");
  if (task && *task != ckpt_task) {
    throw UserError(fmt::format("checkpoint was fine-tuned for '{}', not '{}'", ckpt_task, *task));
  }
  model::Weights& w = lm.model->weights;
  json metrics;
  if (ckpt_task == "retrieval") {
    auto head = load_similarity_head(ckpt);
    metrics = evaluate_retrieval(w, head, cfg, corpus, split, static_cast<std::size_t>(cfg.finetune.gallery));
  } else if (ckpt_task == "cls" || ckpt_task == "nlvr2-pair") {
    require_scenes(corpus, ckpt_task);
    const bool pair = ckpt_task == "nlvr2-pair";
    auto head = pair ? downstream::make_nlvr2_head(cfg.model)
                     : downstream::make_vqa_head(cfg.model, static_cast<int>(synth::answer_classes().size()));
    auto hp = head.parameters();
    ckpt.get_parameters(hp);
    const auto idx = corpus.split(split);
    const auto ex = pair ? nlvr2_examples(corpus, idx, cfg.model.max_text_len, cfg.seed, split == "train" ? 0 : 1)
                         : cls_examples(corpus, idx, cfg.model.max_text_len);
    metrics["accuracy"] = classify_accuracy(w, head, ex, corpus, pair, cfg.seed, cfg.threads);
    metrics["examples"] = ex.size();
  } else {
    throw UserError(fmt::format("checkpoint has unknown task '{}'", ckpt_task));
  }
  return downstream::evaluation_report(ckpt_task, split, metrics, cfg.hash(), ckpt_hash);
}

// ---- heatmap ----------------------------------------------------------------------------------

Heatmap compute_heatmap(model::Weights& w, const text::Vocabulary& vocab, const image::ImageTensor& img,
                        const std::string& caption, const std::string& word, int iters) {
  const auto& cfg = w.config();
  const auto row = text::tokenize(caption, vocab, static_cast<std::size_t>(cfg.max_text_len));
  const auto words = text::basic_split(caption);
  const auto wanted = text::basic_split(word);
  if (wanted.size() != 1) throw UserError(fmt::format("heatmap token '{}' must be a single word", word));
  const auto it = std::find(words.begin(), words.end(), wanted[0]);
  if (it == words.end()) throw UserError(fmt::format("token '{}' does not occur in the caption", word));
  const int word_index = static_cast<int>(it - words.begin());
  const auto pos = std::find(row.word_ids.begin(), row.word_ids.end(), word_index);
  if (pos == row.word_ids.end()) throw UserError(fmt::format("token '{}' was truncated from the caption", word));
  const int seq_pos = static_cast<int>(pos - row.word_ids.begin());

  Heatmap h;
  Rng rng = derive_rng(0, {kEvalStream, 3});
  h.patches = prepare_patches(img, cfg, rng);
  ad::Tape tape;
  const auto g = model::forward_sample(tape, w, row.ids, all_true(row.ids.size()), h.patches, h.patches.kept());
  const auto subsets = ot::alignment_subsets(g.attn_mask, g.text_len);
  if (subsets.text_rows.empty() || subsets.visual_rows.empty()) throw UserError("heatmap: no word or patch tokens");
  const Matrix& z = g.sequence.value();
  Matrix text(static_cast<Eigen::Index>(subsets.text_rows.size()), z.cols());
  Matrix vis(static_cast<Eigen::Index>(subsets.visual_rows.size()), z.cols());
  for (std::size_t i = 0; i < subsets.text_rows.size(); ++i) {
    text.row(static_cast<Eigen::Index>(i)) = z.row(subsets.text_rows[i]);
    if (subsets.text_rows[i] == seq_pos) h.token_row = i;
  }
  for (std::size_t j = 0; j < subsets.visual_rows.size(); ++j) {
    vis.row(static_cast<Eigen::Index>(j)) = z.row(subsets.visual_rows[j]);
    const int slot = subsets.visual_rows[j] - g.text_len - 1;
    const int source = g.visual_source.at(static_cast<std::size_t>(slot));
    h.positions.push_back(h.patches.grid_pos.at(static_cast<std::size_t>(source)));
  }
  h.plan = ot::ipot_uniform(ot::wpa_cost(text, vis), ot::kIpotBeta, iters);
  h.values = ot::heatmap_values(h.plan, h.token_row, h.patches.grid_rows, h.patches.grid_cols, h.positions);
  return h;
}

double mass_fraction(const Heatmap& h, std::span<const image::GridPos> cells) {
  const auto row = h.plan.plan.row(static_cast<Eigen::Index>(h.token_row));
  double on = 0.0;
  for (std::size_t j = 0; j < h.positions.size(); ++j) {
    if (std::find(cells.begin(), cells.end(), h.positions[j]) != cells.end()) on += row(static_cast<Eigen::Index>(j));
  }
  const double total = row.sum();
  return total > 0.0 ? on / total : 0.0;
}

std::vector<image::GridPos> object_cells(const synth::SceneSpec& spec, const synth::SceneObject& obj, int patch) {
  const int cell = spec.cell_size();
  std::vector<image::GridPos> out;
  for (int r = obj.row * cell / patch; r < ((obj.row + 1) * cell + patch - 1) / patch; ++r) {
    for (int c = obj.col * cell / patch; c < ((obj.col + 1) * cell + patch - 1) / patch; ++c) out.push_back({r, c});
  }
  return out;
}

}  // namespace vilt::trainer
