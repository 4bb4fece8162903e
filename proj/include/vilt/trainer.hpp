// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Optimization, run configuration, the pre-training and fine-tuning loops,
// evaluation and heatmap extraction.
//
// Every random draw of step s comes from derive_rng(seed, {stream, s, ...}),
// so a run resumed from a checkpoint at step s replays the same batches as
// an uninterrupted one.

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilt/checkpoint.hpp"
#include "vilt/downstream.hpp"
#include "vilt/image.hpp"
#include "vilt/ipot.hpp"
#include "vilt/model.hpp"
#include "vilt/objectives.hpp"
#include "vilt/synth.hpp"
#include "vilt/text.hpp"

namespace vilt::trainer {

using ad::Parameter;

// ---- schedule and optimizer --------------------------------------------------------

struct Schedule {
  long total_steps = 1;
  double warmup_frac = 0.1;

  /// Throws UserError unless total_steps ≥ 1 and 0 < warmup_frac < 1.
  void validate() const;
  [[nodiscard]] long warmup_steps() const;
};

/// Linear ramp 0 → base_lr over the warmup steps, then linear decay to 0 at
/// total_steps. Steps beyond the total give 0; negative steps throw.
double lr_at(long step, const Schedule& sched, double base_lr);

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_frac = 0.1;

  [[nodiscard]] nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
};

struct OptimState {
  double base_lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Updates applied so far.
  long step = 0;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;

  /// Zero moments shaped like `params`.
  static OptimState create(std::span<Parameter* const> params, const OptimConfig& cfg);
  /// Moments as "opt.m.<name>" / "opt.v.<name>", counters in metadata.
  void save(checkpoint::Checkpoint& ckpt) const;
  /// Restores moments for `params`; throws UserError on missing tensors.
  void load(const checkpoint::Checkpoint& ckpt, std::span<Parameter* const> params);
};

/// Decoupled AdamW on Parameter::grad:
///   p ← p·(1 − lr·wd)          (only when Parameter::decay)
///   m ← β1·m + (1 − β1)·g,  v ← β2·v + (1 − β2)·g²
///   p ← p − lr · m̂ / (√v̂ + eps)
/// Throws Error naming the parameter when a gradient is non-finite; in that
/// case nothing is updated.
void adamw_step(std::span<Parameter* const> params, OptimState& opt, double lr);

// ---- run configuration -------------------------------------------------------------

struct DataConfig {
  /// JSONL manifest {image, caption, split}.
  std::string manifest;
  /// Vocabulary file; empty means vocab.txt next to the manifest.
  std::string vocab;
  /// Scene list for the synthetic downstream tasks; empty means
  /// scenes.jsonl next to the manifest.
  std::string scenes;
  int image_short = 64;
  int image_long = 64;
  /// Fit the model's per-channel pixel normalization on the training split
  /// when pre-training starts.
  bool normalize = true;
};

struct PretrainOptions {
  long steps = 2000;
  int batch = 32;
  /// 0 writes a checkpoint only at the end.
  long checkpoint_every = 0;
  bool use_wpa = true;
  bool use_mpp = false;
  bool wwm = true;
  double mask_prob = 0.15;
  double mpp_prob = 0.15;
};

struct FinetuneOptions {
  /// "retrieval", "cls" or "nlvr2-pair".
  std::string task = "retrieval";
  long steps = 300;
  int batch = 8;
  double lr = 1e-4;
  bool augment = true;
  int n_ops = 2;
  int magnitude = 9;
  int n_neg = 15;
  int gallery = 32;
};

struct RunConfig {
  model::ModelConfig model = model::ModelConfig::desk();
  DataConfig data;
  OptimConfig optim;
  PretrainOptions pretrain;
  FinetuneOptions finetune;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string output_dir = "runs/default";

  /// Throws UserError on invalid values.
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Keys present in `j` override `base`; a "model.preset" key replaces the
  /// whole model section of `base` before field overrides.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path, const RunConfig& base);
  static RunConfig load(const std::filesystem::path& path);
  /// Hash of the canonical JSON.
  [[nodiscard]] std::string hash() const;
};

// ---- corpus --------------------------------------------------------------------------

struct Corpus {
  text::Vocabulary vocab;
  std::vector<text::CorpusEntry> entries;
  /// Resized to the configured short edge / long cap.
  std::vector<image::ImageTensor> images;
  std::vector<text::TokenRow> tokens;
  /// Present when a scene list was found.
  std::vector<synth::SceneSpec> scenes;

  [[nodiscard]] std::size_t size() const { return entries.size(); }
  [[nodiscard]] std::vector<std::size_t> split(const std::string& name) const;
};

/// Throws UserError when the manifest or vocabulary is missing or empty.
Corpus load_corpus(const DataConfig& data, int max_text_len);

struct PixelStatistics {
  std::array<double, 3> mean = {0.0, 0.0, 0.0};
  std::array<double, 3> stdev = {1.0, 1.0, 1.0};
};

/// Per-channel pixel mean and standard deviation over the given images.
/// Throws UserError when the selection is empty or a channel is constant.
PixelStatistics pixel_statistics(const Corpus& corpus, std::span<const std::size_t> indices);

/// Patchify and keep at most cfg.max_patches patches.
image::PatchBatch prepare_patches(const image::ImageTensor& img, const model::ModelConfig& cfg, Rng& rng);

// ---- model bundles ----------------------------------------------------------------------

struct PretrainModel {
  explicit PretrainModel(const model::ModelConfig& cfg) : weights(cfg), heads(cfg) {}
  model::Weights weights;
  objectives::PretrainHeads heads;
  /// Encoder weights followed by the pre-training heads.
  [[nodiscard]] std::vector<Parameter*> parameters();
};

/// Vocabulary stored in checkpoint metadata.
nlohmann::json vocab_to_json(const text::Vocabulary& vocab);
text::Vocabulary vocab_from_json(const nlohmann::json& j);

/// Restores config, vocabulary and encoder (+ heads when present).
struct LoadedModel {
  RunConfig config;
  text::Vocabulary vocab;
  std::unique_ptr<PretrainModel> model;
  std::string kind;
  long step = 0;
};
LoadedModel load_model(const checkpoint::Checkpoint& ckpt);

// ---- pre-training ------------------------------------------------------------------------

struct StepRecord {
  long step = 0;
  double lr = 0.0;
  objectives::LossReport loss;
  [[nodiscard]] nlohmann::json to_json() const;
};

class Pretrainer {
 public:
  /// Fresh initialization from cfg.seed. The model vocabulary size follows
  /// the corpus vocabulary.
  Pretrainer(RunConfig cfg, const Corpus& corpus);

  /// Restores weights, heads, optimizer moments and the step counter.
  void resume(const checkpoint::Checkpoint& ckpt);

  /// Batch of step `step` (deterministic in cfg.seed and step).
  [[nodiscard]] objectives::PretrainBatch make_batch(long step) const;

  /// One optimizer update at the current step.
  StepRecord step();

  /// Steps until `until` (exclusive, capped by cfg.pretrain.steps), appending
  /// one JSONL line per step to `log_path` when non-empty and writing
  /// checkpoints into `out_dir` when non-empty. Returns the new records.
  std::vector<StepRecord> run(long until, const std::filesystem::path& out_dir = {},
                              const std::filesystem::path& log_path = {});

  [[nodiscard]] checkpoint::Checkpoint snapshot() const;

  [[nodiscard]] long current_step() const { return opt_.step; }
  [[nodiscard]] const RunConfig& config() const { return cfg_; }
  PretrainModel& model() { return *model_; }
  [[nodiscard]] const OptimState& optimizer() const { return opt_; }

 private:
  RunConfig cfg_;
  const Corpus& corpus_;
  std::vector<std::size_t> train_;
  std::unique_ptr<PretrainModel> model_;
  OptimState opt_;
};

/// Mean of each trailing window of `window` values (length n − window + 1).
std::vector<double> moving_average(std::span<const double> values, std::size_t window);

// ---- evaluation ------------------------------------------------------------------------

struct ItmEval {
  double accuracy = 0.0;
  std::size_t samples = 0;
};

/// ITM accuracy on `split`, `rounds` independent matched/mismatched
/// assignments of the split's captions.
ItmEval evaluate_itm(PretrainModel& m, const RunConfig& cfg, const Corpus& corpus, const std::string& split,
                     int rounds = 4);

/// Text→image and image→text recall at 1/5/10 over the first `gallery`
/// pairs of `split`.
nlohmann::json evaluate_retrieval(model::Weights& w, downstream::SimilarityHead& head, const RunConfig& cfg,
                                  const Corpus& corpus, const std::string& split, std::size_t gallery);

// ---- fine-tuning ------------------------------------------------------------------------

inline const std::vector<std::string> kTasks = {"retrieval", "cls", "nlvr2-pair"};

struct FinetuneResult {
  nlohmann::json report;
  checkpoint::Checkpoint checkpoint;
  std::vector<double> losses;
};

/// Trains the task head and encoder from a pre-training checkpoint and
/// evaluates on the "val" split. Throws UserError on unknown tasks or when
/// the corpus lacks what the task needs.
FinetuneResult finetune(const RunConfig& cfg, const checkpoint::Checkpoint& pretrained, const Corpus& corpus);

/// Re-evaluates a pre-training or fine-tuning checkpoint on `split`. A
/// task given in `task` must match a fine-tuned checkpoint's task.
nlohmann::json evaluate_checkpoint(const checkpoint::Checkpoint& ckpt, const Corpus& corpus, const std::string& split,
                                   const std::optional<std::string>& task = std::nullopt);

// ---- heatmap ------------------------------------------------------------------------------

struct Heatmap {
  ot::TransportPlan plan;
  /// Row of the plan belonging to the requested word's first subword.
  std::size_t token_row = 0;
  /// Grid cell of every plan column.
  std::vector<image::GridPos> positions;
  Matrix values;  // [grid_rows, grid_cols] in [1, 3]
  image::PatchBatch patches;
};

/// Forward pass on (image, caption) followed by an IPOT solve over the
/// contextualized word and patch features. Throws UserError when `word`
/// does not occur in the caption.
Heatmap compute_heatmap(model::Weights& w, const text::Vocabulary& vocab, const image::ImageTensor& img,
                        const std::string& caption, const std::string& word, int iters = 1000);

/// Share of the token row's mass on `cells`.
double mass_fraction(const Heatmap& h, std::span<const image::GridPos> cells);

/// Patch cells covered by a scene object's grid cell.
std::vector<image::GridPos> object_cells(const synth::SceneSpec& spec, const synth::SceneObject& obj, int patch);

}  // namespace vilt::trainer
