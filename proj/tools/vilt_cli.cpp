// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// vilt: corpus generation, pre-training, fine-tuning, evaluation, heatmaps
// and cost analysis from one binary.
//
// Precedence: built-in defaults < --config file < command-line flags.
// Relative output paths are resolved against $VILT_OUTPUT_ROOT when set.
// Exit codes: 0 success, 1 user error, 2 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "vilt/checkpoint.hpp"
#include "vilt/complexity.hpp"
#include "vilt/ipot.hpp"
#include "vilt/synth.hpp"
#include "vilt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using vilt::UserError;
using vilt::trainer::RunConfig;

namespace {

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("VILT_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw vilt::Error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << '\n';
}

// Flags shared by the training commands; unset optionals leave the config
// value alone.
struct Overrides {
  std::string config;
  std::string manifest;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<long> steps;
  std::optional<int> batch;
  std::optional<double> lr;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--manifest", manifest, "corpus manifest (JSONL)");
    app->add_option("--out", out, "output directory");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--threads", threads, "worker threads (default 1; 1 is bitwise deterministic)");
    app->add_option("--steps", steps, "optimizer steps");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "base learning rate");
  }

  [[nodiscard]] RunConfig base() const { return config.empty() ? RunConfig{} : RunConfig::load(config); }
};

RunConfig finish(RunConfig cfg) {
  cfg.validate();
  return cfg;
}

int cmd_gen_data(std::size_t n, std::uint64_t seed, const std::string& out, int canvas, int grid) {
  const fs::path dir = output_path(out);
  const auto files = vilt::synth::generate_corpus(n, seed, dir, canvas, grid);
  const std::string hash = vilt::checkpoint::file_hash(files.manifest);
  write_json(dir / "corpus.json", {{"n", n},
                                   {"seed", seed},
                                   {"canvas", canvas},
                                   {"grid", grid},
                                   {"manifest_hash", hash},
                                   {"code_version", std::string(vilt::kCodeVersion)}});
  fmt::print("wrote {} pairs to {} (manifest hash {})\n", n, dir.string(), hash);
  return 0;
}

int cmd_pretrain(const Overrides& o, const std::optional<bool>& use_wpa, const std::optional<bool>& use_mpp,
                 const std::optional<bool>& wwm, const std::optional<long>& checkpoint_every,
                 const std::string& resume) {
  RunConfig cfg = o.base();
  if (!o.manifest.empty()) cfg.data.manifest = o.manifest;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.steps) cfg.pretrain.steps = *o.steps;
  if (o.batch) cfg.pretrain.batch = *o.batch;
  if (o.lr) cfg.optim.lr = *o.lr;
  if (use_wpa) cfg.pretrain.use_wpa = *use_wpa;
  if (use_mpp) cfg.pretrain.use_mpp = *use_mpp;
  if (wwm) cfg.pretrain.wwm = *wwm;
  if (checkpoint_every) cfg.pretrain.checkpoint_every = *checkpoint_every;
  cfg = finish(cfg);

  const auto corpus = vilt::trainer::load_corpus(cfg.data, cfg.model.max_text_len);
  vilt::trainer::Pretrainer trainer(cfg, corpus);
  const fs::path dir = output_path(cfg.output_dir);
  if (!resume.empty()) {
    trainer.resume(vilt::checkpoint::Checkpoint::load(resume));
    fmt::print("resumed at step {}\n", trainer.current_step());
  }
  write_json(dir / "run.json", {{"config", trainer.config().to_json()},
                                {"config_hash", trainer.config().hash()},
                                {"code_version", std::string(vilt::kCodeVersion)}});
  const auto records = trainer.run(trainer.config().pretrain.steps, dir, dir / "pretrain_log.jsonl");
  if (!records.empty()) {
    const auto& last = records.back();
    fmt::print("step {} total {:.4f} (itm {:.4f} mlm {:.4f} wpa {:.4f} mpp {:.4f})\n", last.step + 1, last.loss.total,
               last.loss.itm, last.loss.mlm, last.loss.wpa, last.loss.mpp);
  }
  fmt::print("checkpoint {}\n", (dir / "last.ckpt").string());
  return 0;
}

int cmd_finetune(const Overrides& o, const std::string& checkpoint, const std::string& task,
                 const std::optional<bool>& augment, const std::optional<int>& n_neg) {
  if (checkpoint.empty()) throw UserError("finetune needs --checkpoint");
  const auto pretrained = vilt::checkpoint::Checkpoint::load(checkpoint);
  // Data and model sections default to the pre-training run.
  RunConfig cfg = o.config.empty() ? RunConfig::from_json(pretrained.config) : RunConfig::load(o.config);
  if (!o.manifest.empty()) cfg.data.manifest = o.manifest;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.steps) cfg.finetune.steps = *o.steps;
  if (o.batch) cfg.finetune.batch = *o.batch;
  if (o.lr) cfg.finetune.lr = *o.lr;
  if (!task.empty()) cfg.finetune.task = task;
  if (augment) cfg.finetune.augment = *augment;
  if (n_neg) cfg.finetune.n_neg = *n_neg;
  cfg = finish(cfg);

  const auto corpus = vilt::trainer::load_corpus(cfg.data, cfg.model.max_text_len);
  auto result = vilt::trainer::finetune(cfg, pretrained, corpus);
  const fs::path dir = output_path(cfg.output_dir);
  fs::create_directories(dir);
  result.checkpoint.save(dir / fmt::format("finetune_{}.ckpt", cfg.finetune.task));
  write_json(dir / fmt::format("report_{}.json", cfg.finetune.task), result.report);
  std::cout << result.report.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& manifest, const std::string& split,
                 const std::string& task, const std::string& out) {
  if (checkpoint.empty()) throw UserError("evaluate needs --checkpoint");
  const auto ckpt = vilt::checkpoint::Checkpoint::load(checkpoint);
  RunConfig cfg = RunConfig::from_json(ckpt.config);
  if (!manifest.empty()) cfg.data.manifest = manifest;
  const auto corpus = vilt::trainer::load_corpus(cfg.data, cfg.model.max_text_len);
  const auto report = vilt::trainer::evaluate_checkpoint(ckpt, corpus, split,
                                                         task.empty() ? std::nullopt : std::optional<std::string>(task));
  if (!out.empty()) write_json(output_path(out), report);
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_heatmap(const std::string& checkpoint, const std::string& image_path, const std::string& caption,
                const std::string& token, const std::string& out, int iters) {
  if (checkpoint.empty() || image_path.empty() || caption.empty() || token.empty()) {
    throw UserError("heatmap needs --checkpoint, --image, --caption and --token");
  }
  const auto ckpt = vilt::checkpoint::Checkpoint::load(checkpoint);
  auto lm = vilt::trainer::load_model(ckpt);
  const auto& data = lm.config.data;
  const auto img =
      vilt::image::resize_keep_aspect(vilt::image::load_image(image_path), data.image_short, data.image_long);
  const auto h = vilt::trainer::compute_heatmap(lm.model->weights, lm.vocab, img, caption, token, iters);
  const fs::path png = output_path(out);
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  vilt::image::save_png(vilt::ot::render_heatmap(img, h.values, lm.config.model.patch), png);
  fs::path plan_path = png;
  plan_path.replace_extension(".plan.json");
  vilt::ot::write_plan_json(h.plan, plan_path);
  json values = json::array();
  for (Eigen::Index r = 0; r < h.values.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < h.values.cols(); ++c) row.push_back(h.values(r, c));
    values.push_back(row);
  }
  fs::path summary = png;
  summary.replace_extension(".json");
  write_json(summary, {{"caption", caption},
                       {"token", token},
                       {"token_row", h.token_row},
                       {"ipot_iters", iters},
                       {"values", values},
                       {"plan_file", plan_path.filename().string()},
                       {"config_hash", lm.config.hash()},
                       {"checkpoint_hash", vilt::checkpoint::file_hash(checkpoint)},
                       {"code_version", std::string(vilt::kCodeVersion)}});
  fmt::print("wrote {} and {}\n", png.string(), summary.string());
  return 0;
}

int cmd_analyze(const std::string& config, const std::string& preset, std::size_t n_visual, std::size_t n_text,
                bool text_embedder, bool heads, int bench_reps, const std::string& format, const std::string& out) {
  vilt::model::ModelConfig cfg;
  if (!config.empty()) {
    cfg = RunConfig::load(config).model;
  } else {
    cfg = vilt::model::ModelConfig::from_json({{"preset", preset}});
  }
  auto report = vilt::complexity::count_params(cfg, text_embedder, heads);
  const auto flops = vilt::complexity::count_flops(cfg, n_visual, n_text);
  report.flops = flops.flops;
  report.total_flops = flops.total_flops;
  report.n_visual = n_visual;
  report.n_text = n_text;
  if (bench_reps > 0) {
    report.latency = vilt::complexity::bench_latency(cfg, std::min<std::size_t>(n_visual, static_cast<std::size_t>(cfg.max_patches)),
                                                     std::min<std::size_t>(n_text, static_cast<std::size_t>(cfg.max_text_len)),
                                                     bench_reps);
  }
  json j = report.to_json();
  j["model"] = cfg.to_json();
  j["config_hash"] = vilt::hex64(vilt::fnv1a64(cfg.to_json().dump()));
  j["code_version"] = std::string(vilt::kCodeVersion);
  if (format == "table" || format == "both") std::cout << report.table();
  if (format == "json" || format == "both") std::cout << j.dump(2) << '\n';
  if (!out.empty()) write_json(output_path(out), j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vilt: desk-scale vision-and-language transformer"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes corpus");
  std::size_t gen_n = 256;
  std::uint64_t gen_seed = 0;
  std::string gen_out = "data/synth";
  int gen_canvas = 64, gen_grid = 2;
  gen->add_option("--n", gen_n, "number of image-caption pairs")->capture_default_str();
  gen->add_option("--seed", gen_seed, "master seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  gen->add_option("--canvas", gen_canvas, "image side in pixels")->capture_default_str();
  gen->add_option("--grid", gen_grid, "grid cells per side")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pre-train with ITM + MLM (+ WPA, MPP)");
  Overrides pre_o;
  pre_o.attach(pre);
  std::optional<bool> use_wpa, use_mpp, wwm;
  std::optional<long> ckpt_every;
  std::string resume;
  pre->add_option("--use-wpa", use_wpa, "word-patch alignment term (true/false)");
  pre->add_option("--use-mpp", use_mpp, "masked patch prediction term (true/false)");
  pre->add_option("--wwm", wwm, "whole word masking instead of per-subword masking (true/false)");
  pre->add_option("--checkpoint-every", ckpt_every, "checkpoint period in steps (0: only at the end)");
  pre->add_option("--resume", resume, "continue from this checkpoint");

  // finetune
  auto* ft = app.add_subcommand("finetune", "fine-tune a pre-trained checkpoint");
  Overrides ft_o;
  ft_o.attach(ft);
  std::string ft_ckpt, ft_task;
  std::optional<bool> augment;
  std::optional<int> n_neg;
  ft->add_option("--checkpoint", ft_ckpt, "pre-training checkpoint")->required();
  ft->add_option("--task", ft_task, "retrieval | cls | nlvr2-pair");
  ft->add_option("--augment", augment, "RandAugment on training images (true/false)");
  ft->add_option("--n-neg", n_neg, "retrieval negatives per positive");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  std::string ev_ckpt, ev_manifest, ev_split = "val", ev_task, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--manifest", ev_manifest, "corpus manifest (default: the training run's)");
  ev->add_option("--split", ev_split, "split name")->capture_default_str();
  ev->add_option("--task", ev_task, "expected task (itm | retrieval | cls | nlvr2-pair)");
  ev->add_option("--out", ev_out, "write the report JSON here");

  // heatmap
  auto* hm = app.add_subcommand("heatmap", "word-patch alignment heatmap");
  std::string hm_ckpt, hm_image, hm_caption, hm_token, hm_out = "heatmap.png";
  int hm_iters = 1000;
  hm->add_option("--checkpoint", hm_ckpt, "checkpoint")->required();
  hm->add_option("--image", hm_image, "input image (PNG or PPM)")->required();
  hm->add_option("--caption", hm_caption, "caption text")->required();
  hm->add_option("--token", hm_token, "word of the caption to visualize")->required();
  hm->add_option("--out", hm_out, "output PNG")->capture_default_str();
  hm->add_option("--iters", hm_iters, "IPOT iterations")->capture_default_str();

  // analyze
  auto* an = app.add_subcommand("analyze", "parameter / FLOPs accounting and latency");
  std::string an_config, an_preset = "base", an_format = "both", an_out;
  std::size_t an_visual = 240, an_text = 40;
  bool an_text_embedder = false, an_heads = false;
  int an_reps = 0;
  an->add_option("--config", an_config, "run configuration (model section is used)");
  an->add_option("--preset", an_preset, "base | desk | tiny")->capture_default_str();
  an->add_option("--visual", an_visual, "visual tokens")->capture_default_str();
  an->add_option("--text", an_text, "text tokens")->capture_default_str();
  an->add_flag("--include-text-embedder", an_text_embedder, "count the word embedding tables");
  an->add_flag("--include-heads", an_heads, "count the pre-training heads");
  an->add_option("--bench-reps", an_reps, "latency repetitions (0 skips the benchmark)")->capture_default_str();
  an->add_option("--format", an_format, "table | json | both")
      ->check(CLI::IsMember({"table", "json", "both"}))
      ->capture_default_str();
  an->add_option("--out", an_out, "write the report JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(gen_n, gen_seed, gen_out, gen_canvas, gen_grid);
    if (*pre) return cmd_pretrain(pre_o, use_wpa, use_mpp, wwm, ckpt_every, resume);
    if (*ft) return cmd_finetune(ft_o, ft_ckpt, ft_task, augment, n_neg);
    if (*ev) return cmd_evaluate(ev_ckpt, ev_manifest, ev_split, ev_task, ev_out);
    if (*hm) return cmd_heatmap(hm_ckpt, hm_image, hm_caption, hm_token, hm_out, hm_iters);
    if (*an) {
      return cmd_analyze(an_config, an_preset, an_visual, an_text, an_text_embedder, an_heads, an_reps, an_format,
                         an_out);
    }
  } catch (const UserError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "internal error: {}\n", e.what());
    return 2;
  }
  return 2;
}
