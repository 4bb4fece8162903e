// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/complexity.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include <fmt/format.h>

namespace vilt::complexity {

using nlohmann::json;
using U = std::uint64_t;

const Component* CostReport::find_param(std::string_view name) const {
  for (const auto& c : params) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

const Component* CostReport::find_flops(std::string_view name) const {
  for (const auto& c : flops) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

json CostReport::to_json() const {
  json p = json::object();
  for (const auto& c : params) p[c.name] = c.count;
  json f = json::object();
  for (const auto& c : flops) f[c.name] = c.count;
  json j = {{"params_by_component", p},
            {"total_params", total_params},
            {"text_embedder_included", text_embedder_included},
            {"pretrain_heads_included", pretrain_heads_included},
            {"flops_by_component", f},
            {"flops", total_flops},
            {"visual_tokens", n_visual},
            {"text_tokens", n_text},
            {"convention", convention},
            {"latency_ms", nullptr}};
  if (latency) {
    j["latency_ms"] = {{"median", latency->median_ms},  {"mean", latency->mean_ms},
                       {"reps", latency->reps},         {"warmup", latency->warmup},
                       {"visual_tokens", latency->n_visual}, {"text_tokens", latency->n_text},
                       {"hardware", latency->hardware}};
  }
  return j;
}

std::string CostReport::table() const {
  std::string out;
  if (!params.empty()) {
    out += fmt::format("{:<24} {:>16}\n", "parameters", "count");
    for (const auto& c : params) out += fmt::format("{:<24} {:>16}\n", c.name, c.count);
    out += fmt::format("{:<24} {:>16}  ({:.2f} M)\n", "total", total_params, static_cast<double>(total_params) / 1e6);
  }
  if (!flops.empty()) {
    if (!out.empty()) out += '\n';
    out += fmt::format("{:<24} {:>16}   [{} visual + {} text]\n", "flops", "count", n_visual, n_text);
    for (const auto& c : flops) out += fmt::format("{:<24} {:>16}\n", c.name, c.count);
    out += fmt::format("{:<24} {:>16}  ({:.2f} G)\n", "total", total_flops, static_cast<double>(total_flops) / 1e9);
  }
  if (latency) {
    out += fmt::format("\nlatency median {:.3f} ms, mean {:.3f} ms over {} reps ({})\n", latency->median_ms,
                       latency->mean_ms, latency->reps, latency->hardware);
  }
  out += "\nconvention: " + convention + "\n";
  return out;
}

CostReport count_params(const model::ModelConfig& cfg, bool include_text_embedder, bool include_pretrain_heads) {
  cfg.validate();
  const U h = static_cast<U>(cfg.hidden);
  const U d = static_cast<U>(cfg.depth);
  const U mlp = static_cast<U>(cfg.mlp);
  const U v = static_cast<U>(cfg.vocab_size);
  CostReport r;
  r.text_embedder_included = include_text_embedder;
  r.pretrain_heads_included = include_pretrain_heads;
  if (include_text_embedder) r.params.push_back({"text_embedder", v * h + static_cast<U>(cfg.max_text_len) * h + h});
  r.params.push_back({"patch_projection", static_cast<U>(cfg.patch_dim()) * h + h});
  r.params.push_back({"visual_position", (static_cast<U>(cfg.pos_grid_rows * cfg.pos_grid_cols) + 1) * h});
  r.params.push_back({"visual_class", h});
  r.params.push_back({"type_embeddings", 2 * h});
  r.params.push_back({"encoder.attention", d * (4 * h * h + 4 * h)});
  r.params.push_back({"encoder.mlp", d * (2 * h * mlp + mlp + h)});
  r.params.push_back({"encoder.layernorm", d * 4 * h});
  if (cfg.final_ln) r.params.push_back({"final_layernorm", 2 * h});
  r.params.push_back({"pooler", h * h + h});
  if (include_pretrain_heads) {
    r.params.push_back({"head.itm", 2 * h + 2});
    r.params.push_back({"head.mlm", h * h + h + 2 * h + h * v + v});
    r.params.push_back({"head.mpp", 3 * h + 3});
  }
  r.total_params = std::accumulate(r.params.begin(), r.params.end(), U{0},
                                   [](U acc, const Component& c) { return acc + c.count; });
  return r;
}

CostReport count_flops(const model::ModelConfig& cfg, std::size_t n_visual, std::size_t n_text) {
  cfg.validate();
  const U h = static_cast<U>(cfg.hidden);
  const U d = static_cast<U>(cfg.depth);
  const U mlp = static_cast<U>(cfg.mlp);
  const U s = static_cast<U>(n_visual + n_text + 2);
  CostReport r;
  r.n_visual = n_visual;
  r.n_text = n_text;
  auto add = [&](const char* name, U macs) { r.flops.push_back({name, 2 * macs}); };
  add("patch_projection", static_cast<U>(n_visual) * static_cast<U>(cfg.patch_dim()) * h);
  add("encoder.qkv_out", d * s * 4 * h * h);
  add("encoder.attention", d * 2 * s * s * h);
  add("encoder.mlp", d * s * 2 * h * mlp);
  add("pooler", h * h);
  add("head.itm", 2 * h);
  r.total_flops = std::accumulate(r.flops.begin(), r.flops.end(), U{0},
                                  [](U acc, const Component& c) { return acc + c.count; });
  return r;
}

std::uint64_t tensor_param_count(const model::Weights& w, bool include_text_embedder) {
  U total = 0;
  for (const ad::Parameter* p : w.parameters()) {
    if (!include_text_embedder && model::Weights::is_text_embedder(p->name)) continue;
    total += p->size();
  }
  return total;
}

std::string hardware_string() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return fmt::format("{}; {} hardware threads; benchmark on 1 thread, float64", cpu,
                     std::thread::hardware_concurrency());
}

Latency bench_latency(const model::ModelConfig& cfg, std::size_t n_visual, std::size_t n_text, int reps,
                      int warmup) {
  cfg.validate();
  if (reps < 1) throw UserError("bench_latency: reps must be at least 1");
  if (warmup < 0) throw UserError("bench_latency: warmup must be ≥ 0");
  if (n_text < 1 || n_text > static_cast<std::size_t>(cfg.max_text_len)) {
    throw UserError(fmt::format("bench_latency: text tokens must lie in [1, {}]", cfg.max_text_len));
  }
  if (n_visual < 1) throw UserError("bench_latency: at least one visual token is required");
  Rng rng = derive_rng(0, {0xbe4cULL});
  model::Weights w(cfg);
  w.init(rng);
  // Smallest near-square grid holding n_visual patches.
  const int rows = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_visual))));
  const int cols = static_cast<int>((n_visual + static_cast<std::size_t>(rows) - 1) / static_cast<std::size_t>(rows));
  image::ImageTensor img(rows * cfg.patch, cols * cfg.patch, 0.0);
  for (int c = 0; c < image::ImageTensor::kChannels; ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) img.at(c, y, x) = uniform01(rng);
    }
  }
  auto pb = image::sample_patches(image::patchify(img, cfg.patch), n_visual, rng);
  std::vector<int> ids(n_text);
  for (auto& id : ids) id = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.vocab_size)));
  const std::vector<bool> mask(n_text, true);

  auto once = [&] {
    ad::Tape tape;
    const auto g = model::forward_sample(tape, w, ids, mask, pb, pb.kept());
    return g.pooled.value()(0, 0);
  };
  volatile double sink = 0.0;
  for (int i = 0; i < warmup; ++i) sink = sink + once();
  std::vector<double> ms;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = sink + once();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  Latency lat;
  lat.reps = reps;
  lat.warmup = warmup;
  lat.n_visual = n_visual;
  lat.n_text = n_text;
  lat.hardware = hardware_string();
  lat.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  const std::size_t mid = ms.size() / 2;
  lat.median_ms = ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
  return lat;
}

}  // namespace vilt::complexity
