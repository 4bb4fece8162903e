// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only
// when every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "vilt/checkpoint.hpp"
#include "vilt/complexity.hpp"
#include "vilt/ipot.hpp"
#include "vilt/objectives.hpp"
#include "vilt/synth.hpp"
#include "vilt/trainer.hpp"

namespace fs = std::filesystem;
using vilt::Matrix;
using vilt::Rng;
using vilt::derive_rng;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path source;
  int threads = 1;
  // Filled by the smoke test and reused by the heatmap check.
  std::optional<vilt::checkpoint::Checkpoint> trained;
  std::optional<vilt::trainer::Corpus> corpus;
  vilt::trainer::RunConfig run;
};

double rel_err(double got, double want) { return std::abs(got - want) / std::abs(want); }

// ---- accounting ------------------------------------------------------------------

Outcome check_params(Context&) {
  const auto r = vilt::complexity::count_params(vilt::model::ModelConfig::base());
  const auto patch = r.find_param("patch_projection")->count;
  const double e = rel_err(static_cast<double>(r.total_params), 87.4e6);
  const double ep = rel_err(static_cast<double>(patch), 2.4e6);
  return {e <= 0.01 && ep <= 0.05,
          fmt::format("total {} ({:.2f}% from 87.4M), patch projection {} ({:.2f}% from 2.4M)", r.total_params,
                      100 * e, patch, 100 * ep)};
}

Outcome check_flops(Context&) {
  const auto r = vilt::complexity::count_flops(vilt::model::ModelConfig::base(), 240, 40);
  const double e = rel_err(static_cast<double>(r.total_flops), 55.9e9);
  return {e <= 0.15, fmt::format("{:.2f} GFLOPs at 240 + 40 tokens ({:.1f}% from 55.9G)", r.total_flops / 1e9, 100 * e)};
}

// ---- IPOT ------------------------------------------------------------------------

double brute_force_assignment(const Matrix& c) {
  const auto n = static_cast<int>(c.rows());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += c(i, perm[static_cast<std::size_t>(i)]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / n;
}

Outcome check_ipot(Context&) {
  Rng rng = derive_rng(2026, {7});
  double worst_gap = 0.0;
  double worst_col = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + trial % 4;
    Matrix c(n, n);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = vilt::uniform01(rng);
    vilt::ot::IpotTrace trace;
    const auto plan = vilt::ot::ipot_uniform(c, 0.5, 500, 1, &trace);
    const double opt = brute_force_assignment(c);
    worst_gap = std::max(worst_gap, (plan.cost - opt) / opt);
    for (double e : trace.col_err_inf) worst_col = std::max(worst_col, e);
  }
  return {worst_gap <= 0.02 && worst_col <= 1e-12,
          fmt::format("50 matrices n=3..6: worst gap to brute force {:.3f}%, worst column error {:.1e}",
                      100 * worst_gap, worst_col)};
}

// ---- gradients -------------------------------------------------------------------

vilt::text::Vocabulary piece_vocab() {
  std::vector<std::string> t = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a",     "red",     "blue",  "green",
                                "circle", "squ",  "##are", "tri",   "##angle", "above", "below", "left",  "right",
                                "and",    "the"};
  return vilt::text::Vocabulary(std::move(t), {0, 1, 2, 3, 4});
}

Outcome check_gradients(Context&) {
  auto cfg = vilt::model::ModelConfig::tiny();
  cfg.max_text_len = 6;
  cfg.dropout = 0.0;
  vilt::model::Weights w(cfg);
  vilt::objectives::PretrainHeads heads(cfg);
  Rng rng = derive_rng(11, {1});
  w.init(rng);
  heads.init(rng);
  std::vector<vilt::ad::Parameter*> params = w.parameters();
  for (auto* p : heads.parameters()) params.push_back(p);
  // Larger than the 0.02 init so every path carries signal.
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += noise(rng);
  }

  const auto vocab = piece_vocab();
  std::vector<vilt::text::TokenRow> rows = {vilt::text::tokenize("red square above", vocab, 6),
                                            vilt::text::tokenize("green circle", vocab, 6),
                                            vilt::text::tokenize("a blue triangle", vocab, 6)};
  vilt::objectives::PretrainBatch batch;
  batch.tokens = vilt::text::make_batch(rows, vocab);
  batch.tokens.mlm_labels(0, 1) = batch.tokens.ids(0, 1);
  batch.tokens.ids(0, 1) = vocab.specials().mask;
  batch.tokens.mlm_labels(1, 2) = batch.tokens.ids(1, 2);
  batch.tokens.mlm_labels(2, 3) = batch.tokens.ids(2, 3);
  batch.tokens.ids(2, 3) = 7;
  batch.itm_label = {true, false, true};
  for (int i = 0; i < 3; ++i) {
    vilt::image::ImageTensor img(8, 12, 0.0);
    for (double& v : img.data()) v = vilt::uniform01(rng);
    auto pb = vilt::image::patchify(img, 4);
    if (i == 2) pb = vilt::image::sample_patches(pb, 4, rng);
    batch.patches.push_back(pb);
  }
  vilt::objectives::clear_mpp(batch);
  for (std::size_t i = 0; i < 3; ++i) {
    vilt::objectives::mask_patches(batch.patches[i], batch.mpp_labels[i], batch.mpp_mask[i], 0.5, rng);
  }
  const vilt::objectives::ObjectiveFlags flags{true, true};

  std::vector<std::optional<Matrix>> plans;
  vilt::objectives::LossOptions opt;
  opt.plans_out = &plans;
  for (auto* p : params) p->zero_grad();
  vilt::objectives::pretrain_loss(batch, w, heads, flags, opt);
  std::vector<Matrix> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  vilt::objectives::LossOptions frozen;
  frozen.compute_gradients = false;
  frozen.frozen_plans = &plans;
  const double h = 1e-4;
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      const double up = vilt::objectives::pretrain_loss(batch, w, heads, flags, frozen).total;
      p->value.data()[i] = orig - h;
      const double down = vilt::objectives::pretrain_loss(batch, w, heads, flags, frozen).total;
      p->value.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++checked;
      if (rel > worst) {
        worst = rel;
        where = p->name;
      }
    }
  }
  return {worst < 1e-4,
          fmt::format("{} coordinates, max relative error {:.2e} (at {})", checked, worst, where)};
}

// ---- masking and ITM -------------------------------------------------------------

Outcome check_wwm(Context&) {
  const auto vocab = piece_vocab();
  const std::vector<std::string> words = {"a",     "red",   "blue", "green", "circle", "square", "triangle",
                                          "above", "below", "left", "right", "and",    "the"};
  Rng rng = derive_rng(5, {1});
  std::vector<vilt::text::TokenRow> rows;
  for (int r = 0; r < 1200; ++r) {
    std::string line;
    for (int k = 0; k < 10; ++k) line += words[vilt::uniform_index(rng, words.size())] + " ";
    rows.push_back(vilt::text::tokenize(line, vocab, 64));
  }
  const auto batch = vilt::text::make_batch(rows, vocab);
  vilt::text::MaskStats st;
  const auto out = vilt::text::whole_word_mask(batch, vocab, 0.15, rng, &st);

  // Recount words, selections and partial words from the output.
  std::size_t n_words = 0, selected = 0, partial = 0;
  for (Eigen::Index i = 0; i < out.batch(); ++i) {
    std::map<int, std::pair<int, int>> per_word;  // labeled, pieces
    for (Eigen::Index j = 0; j < out.length(); ++j) {
      const int wid = out.word_ids(i, j);
      if (wid < 0) continue;
      auto& pw = per_word[wid];
      pw.second += 1;
      if (out.mlm_labels(i, j) != vilt::kIgnoreLabel) pw.first += 1;
    }
    for (const auto& [wid, pw] : per_word) {
      ++n_words;
      if (pw.first > 0) ++selected;
      if (pw.first > 0 && pw.first < pw.second) ++partial;
    }
  }
  const double rate = static_cast<double>(selected) / static_cast<double>(n_words);
  const double sel = static_cast<double>(st.selected);
  const double m = st.masked / sel, rnd = st.randomized / sel, keep = st.kept / sel;
  const bool ok = n_words >= 10000 && std::abs(rate - 0.15) <= 0.01 && partial == 0 && std::abs(m - 0.8) <= 0.02 &&
                  std::abs(rnd - 0.1) <= 0.02 && std::abs(keep - 0.1) <= 0.02 && selected == st.selected;
  return {ok, fmt::format("{} words, selection {:.4f}, partial words {}, split {:.3f}/{:.3f}/{:.3f}", n_words, rate,
                          partial, m, rnd, keep)};
}

vilt::trainer::RunConfig desk_config(const Context& ctx) {
  auto cfg = vilt::trainer::RunConfig::load(ctx.source / "configs" / "desk.json");
  cfg.data.manifest = (ctx.work / "data" / "manifest.jsonl").string();
  cfg.data.vocab.clear();
  cfg.data.scenes.clear();
  cfg.output_dir = (ctx.work / "desk").string();
  cfg.threads = 1;
  return cfg;
}

const vilt::trainer::Corpus& desk_corpus(Context& ctx) {
  if (!ctx.corpus) {
    const auto manifest = ctx.work / "data" / "manifest.jsonl";
    if (!fs::exists(manifest)) vilt::synth::generate_corpus(256, 0, ctx.work / "data");
    ctx.run = desk_config(ctx);
    ctx.corpus = vilt::trainer::load_corpus(ctx.run.data, ctx.run.model.max_text_len);
  }
  return *ctx.corpus;
}

Outcome check_itm(Context& ctx) {
  Rng rng = derive_rng(9, {2});
  std::vector<std::size_t> aligned(10000);
  for (std::size_t i = 0; i < aligned.size(); ++i) aligned[i] = i % 256;
  const auto a = vilt::objectives::build_itm_assignment(aligned, 256, rng);
  std::size_t pos = 0;
  bool negatives_ok = true;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (a.label[i]) {
      ++pos;
      negatives_ok = negatives_ok && a.image[i] == aligned[i];
    } else {
      negatives_ok = negatives_ok && a.image[i] != aligned[i];
    }
  }
  const double rate = static_cast<double>(pos) / 10000.0;

  const auto& corpus = desk_corpus(ctx);
  vilt::trainer::Pretrainer p(ctx.run, corpus);
  const auto batch = p.make_batch(0);
  vilt::objectives::LossOptions opt;
  opt.compute_gradients = false;
  const auto r = vilt::objectives::pretrain_loss(batch, p.model().weights, p.model().heads, {false, false}, opt);
  const double chance = std::log(2.0) + std::log(static_cast<double>(corpus.vocab.size()));
  const double e = rel_err(r.itm + r.mlm, chance);
  return {std::abs(rate - 0.5) <= 0.02 && negatives_ok && e <= 0.2,
          fmt::format("positive rate {:.4f}; untrained ITM+MLM {:.3f} vs ln2 + ln{} = {:.3f} ({:.1f}%)", rate,
                      r.itm + r.mlm, corpus.vocab.size(), chance, 100 * e)};
}

// ---- desk-scale training ---------------------------------------------------------

// The 20-step moving average, read at every `stride` steps and at the end
// of the run, must fall at each reading.
bool trend_decreasing(const std::vector<double>& ma, std::size_t stride, std::string& readings) {
  std::vector<double> pts;
  for (std::size_t i = 0; i < ma.size(); i += stride) pts.push_back(ma[i]);
  if ((ma.size() - 1) % stride != 0) pts.push_back(ma.back());
  bool ok = true;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    readings += fmt::format("{}{:.3f}", i ? " " : "", pts[i]);
    if (i > 0 && !(pts[i] < pts[i - 1])) ok = false;
  }
  return ok;
}

Outcome check_smoke(Context& ctx) {
  const auto& corpus = desk_corpus(ctx);
  auto cfg = ctx.run;
  const auto t0 = std::chrono::steady_clock::now();
  vilt::trainer::Pretrainer p(cfg, corpus);
  const auto records = p.run(cfg.pretrain.steps);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  ctx.trained = p.snapshot();
  ctx.trained->save(ctx.work / "desk_pretrain.ckpt");

  std::vector<double> totals;
  for (const auto& r : records) totals.push_back(r.loss.total);
  const auto ma = vilt::trainer::moving_average(totals, 20);
  std::string readings;
  const bool falling = trend_decreasing(ma, 250, readings);

  const auto itm = vilt::trainer::evaluate_itm(p.model(), p.config(), corpus, "val");
  const auto ft = vilt::trainer::finetune(p.config(), *ctx.trained, corpus);
  const auto& m = ft.report.at("metrics");
  const double ir1 = m.at("ir_r1").get<double>();
  const double tr1 = m.at("tr_r1").get<double>();
  const std::size_t gallery = m.at("gallery").get<std::size_t>();

  const bool ok = records.size() == 2000 && corpus.size() == 256 && cfg.pretrain.batch == 32 && minutes < 30.0 &&
                  falling && itm.accuracy >= 0.9 && ir1 >= 0.5 && tr1 >= 0.5 && gallery == 32;
  return {ok, fmt::format("{} steps in {:.1f} min; 20-step MA every 250 steps [{}]; ITM val accuracy {:.3f} "
                          "({} samples); retrieval R@1 image->text {:.3f}, text->image {:.3f} over {}",
                          records.size(), minutes, readings, itm.accuracy, itm.samples, ir1, tr1, gallery)};
}

Outcome check_heatmap(Context& ctx) {
  if (!ctx.trained) return {false, "no trained model (smoke test did not run)"};
  const auto& corpus = desk_corpus(ctx);
  auto lm = vilt::trainer::load_model(*ctx.trained);
  double on = 0.0, base = 0.0, lo = 3.0, hi = 1.0;
  std::size_t cases = 0, above = 0;
  for (std::size_t i : corpus.split("val")) {
    const auto& spec = corpus.scenes.at(i);
    for (const auto& o : spec.objects) {
      // Color words naming exactly one object.
      const auto same = std::count_if(spec.objects.begin(), spec.objects.end(),
                                      [&](const auto& x) { return x.color == o.color; });
      if (same != 1) continue;
      const auto h = vilt::trainer::compute_heatmap(lm.model->weights, lm.vocab, corpus.images[i],
                                                    corpus.entries[i].caption,
                                                    std::string(vilt::synth::color_name(o.color)), 1000);
      lo = std::min(lo, h.values.minCoeff());
      hi = std::max(hi, h.values.maxCoeff());
      const auto cells = vilt::trainer::object_cells(spec, o, lm.config.model.patch);
      const double frac = vilt::trainer::mass_fraction(h, cells);
      const double uniform = static_cast<double>(cells.size()) / static_cast<double>(h.positions.size());
      on += frac;
      base += uniform;
      above += frac > 2.0 * uniform ? 1 : 0;
      ++cases;
    }
  }
  if (cases == 0) return {false, "no color word in the held-out captions"};
  const double ratio = on / base;
  return {lo >= 1.0 && hi <= 3.0 && ratio > 2.0,
          fmt::format("{} held-out color words: values in [{:.2f}, {:.2f}], mass on the object's cells {:.2f}x the "
                      "uniform baseline ({} of {} individually above 2x)",
                      cases, lo, hi, ratio, above, cases)};
}

// ---- reproducibility and ablation --------------------------------------------------

Outcome check_reproducibility(Context& ctx) {
  const auto& corpus = desk_corpus(ctx);
  auto cfg = ctx.run;
  cfg.pretrain.steps = 40;
  auto straight = [&] {
    vilt::trainer::Pretrainer p(cfg, corpus);
    p.run(40);
    return p.snapshot().serialize();
  };
  const auto a = straight();
  const auto b = straight();

  vilt::trainer::Pretrainer first(cfg, corpus);
  first.run(17);
  const auto mid = vilt::checkpoint::Checkpoint::deserialize(first.snapshot().serialize());
  vilt::trainer::Pretrainer second(cfg, corpus);
  second.resume(mid);
  second.run(40);
  const auto c = second.snapshot().serialize();

  auto ft_cfg = cfg;
  ft_cfg.finetune.steps = 6;
  const auto ckpt = vilt::checkpoint::Checkpoint::deserialize(a);
  const auto f1 = vilt::trainer::finetune(ft_cfg, ckpt, corpus).checkpoint.serialize();
  const auto f2 = vilt::trainer::finetune(ft_cfg, ckpt, corpus).checkpoint.serialize();

  return {a == b && a == c && f1 == f2,
          fmt::format("40-step reruns {}; resume at step 17 {}; fine-tune reruns {} ({} checkpoint bytes)",
                      a == b ? "identical" : "DIFFER", a == c ? "identical" : "DIFFERS", f1 == f2 ? "identical" : "DIFFER",
                      a.size())};
}

Outcome check_ablation(Context& ctx) {
  struct Row {
    long steps;
    bool wwm, mpp, augment;
  };
  // Pre-training steps scaled 1:100 from 25K..200K.
  const std::vector<Row> table = {{250, false, false, false},  {500, false, false, false},
                                  {1000, false, false, false}, {1000, true, false, false},
                                  {1000, true, true, false},   {1000, true, false, true},
                                  {2000, true, false, true}};
  const auto& corpus = desk_corpus(ctx);
  std::size_t ran = 0;
  std::string mismatch;
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto path = ctx.source / "configs" / "ablation" / fmt::format("row{}.json", r + 1);
    auto cfg = vilt::trainer::RunConfig::load(path);
    const auto& want = table[r];
    if (cfg.pretrain.steps != want.steps || cfg.pretrain.wwm != want.wwm || cfg.pretrain.use_mpp != want.mpp ||
        cfg.finetune.augment != want.augment || !cfg.pretrain.use_wpa) {
      mismatch += fmt::format(" row{}", r + 1);
      continue;
    }
    // Short runs: the flags must drive a working pipeline end to end.
    cfg.data = ctx.run.data;
    cfg.pretrain.steps = 3;
    cfg.pretrain.batch = 4;
    cfg.finetune.steps = 2;
    cfg.finetune.batch = 2;
    vilt::trainer::Pretrainer p(cfg, corpus);
    const auto recs = p.run(3);
    const auto ft = vilt::trainer::finetune(p.config(), p.snapshot(), corpus);
    const bool mpp_active = recs.back().loss.mpp > 0.0;
    if (recs.size() != 3 || mpp_active != want.mpp || !ft.report.contains("metrics")) {
      mismatch += fmt::format(" row{}(run)", r + 1);
      continue;
    }
    ++ran;
  }
  return {ran == table.size() && mismatch.empty(),
          fmt::format("{} of {} configs match the {{wwm, mpp, augment}} grid and run{}", ran, table.size(),
                      mismatch.empty() ? "" : "; mismatched:" + mismatch)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  Context ctx;
  std::string work = "acceptance_work";
  std::string source = VILT_SOURCE_DIR;
  std::vector<std::string> only;
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  app.add_option("--source", source, "source tree (configs/)")->capture_default_str();
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  ctx.work = fs::absolute(work);
  ctx.source = source;
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria = {
      {"parameter-accounting", check_params},   {"flops-accounting", check_flops},
      {"ipot-oracle", check_ipot},              {"gradient-check", check_gradients},
      {"whole-word-masking", check_wwm},        {"itm-construction", check_itm},
      {"desk-smoke-test", check_smoke},         {"heatmap", check_heatmap},
      {"reproducibility", check_reproducibility}, {"ablation-configs", check_ablation}};

  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fmt::print("{} {}: {} [{:.1f}s]\n", o.pass ? "PASS" : "FAIL", name, o.detail, secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
