// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "vilt/checkpoint.hpp"

namespace {

using nlohmann::json;
using vilt::testing::TempDir;

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
Result run(const std::string& args) {
  const std::string cmd = std::string(VILT_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

// Text from the first '{' to the end (report printed after progress lines).
json trailing_json(const std::string& s) { return json::parse(s.substr(s.find('{'))); }

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("evaluate").code, 1);
  const auto bad = run("analyze --preset huge --bench-reps 0");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("error:"), std::string::npos);
  EXPECT_EQ(run("evaluate --checkpoint /nonexistent/x.ckpt").code, 1);
}

TEST(Cli, AnalyzeBasePreset) {
  const auto r = run("analyze --preset base --visual 240 --text 40 --bench-reps 0 --format json");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = json::parse(r.out);
  EXPECT_NEAR(j.at("total_params").get<double>(), 87.4e6, 0.01 * 87.4e6);
  EXPECT_NEAR(j.at("flops").get<double>(), 55.9e9, 0.15 * 55.9e9);
  EXPECT_FALSE(j.at("text_embedder_included").get<bool>());
  EXPECT_TRUE(j.contains("config_hash"));
  const auto with_text = json::parse(run("analyze --preset base --include-text-embedder --bench-reps 0 --format json").out);
  EXPECT_GT(with_text.at("total_params").get<double>(), j.at("total_params").get<double>());
}

TEST(Cli, EndToEndOnTinyCorpus) {
  TempDir dir("cli");
  const auto data = dir.path / "data";
  ASSERT_EQ(run("gen-data --n 24 --seed 5 --out " + data.string()).code, 0);
  const auto manifest = data / "manifest.jsonl";
  ASSERT_TRUE(std::filesystem::exists(manifest));
  const auto first_hash = vilt::checkpoint::file_hash(manifest);
  ASSERT_EQ(run("gen-data --n 24 --seed 5 --out " + data.string()).code, 0);
  EXPECT_EQ(vilt::checkpoint::file_hash(manifest), first_hash);

  const auto cfg_path = dir.path / "run.json";
  {
    std::ofstream(cfg_path) << json{{"model", {{"preset", "desk"}, {"hidden", 16}, {"heads", 2}, {"mlp", 32}}},
                                    {"pretrain", {{"steps", 4}, {"batch", 4}}},
                                    {"finetune", {{"steps", 2}, {"batch", 2}, {"n_neg", 3}}}}
                                   .dump();
  }
  const auto run_dir = dir.path / "pre";
  const auto pre = run("pretrain --config " + cfg_path.string() + " --manifest " + manifest.string() + " --out " +
                       run_dir.string() + " --checkpoint-every 2");
  ASSERT_EQ(pre.code, 0) << pre.out;
  const auto ckpt = run_dir / "last.ckpt";
  ASSERT_TRUE(std::filesystem::exists(ckpt));
  EXPECT_TRUE(std::filesystem::exists(run_dir / "step_000002.ckpt"));
  const auto run_json = read_json(run_dir / "run.json");

  // Resuming from step 2 lands on the same weights.
  const auto resumed_dir = dir.path / "resumed";
  const auto res = run("pretrain --config " + cfg_path.string() + " --manifest " + manifest.string() + " --out " +
                       resumed_dir.string() + " --checkpoint-every 0 --resume " + (run_dir / "step_000002.ckpt").string());
  ASSERT_EQ(res.code, 0) << res.out;
  const auto a = vilt::checkpoint::Checkpoint::load(ckpt);
  const auto b = vilt::checkpoint::Checkpoint::load(resumed_dir / "last.ckpt");
  EXPECT_EQ(a.tensors(), b.tensors());

  const auto ev = run("evaluate --checkpoint " + ckpt.string() + " --task itm");
  ASSERT_EQ(ev.code, 0) << ev.out;
  const auto report = json::parse(ev.out);
  EXPECT_EQ(report.at("task"), "itm");
  EXPECT_EQ(report.at("config_hash"), run_json.at("config_hash"));
  EXPECT_EQ(report.at("checkpoint_hash"), vilt::checkpoint::file_hash(ckpt));
  EXPECT_EQ(run("evaluate --checkpoint " + ckpt.string() + " --task retrieval").code, 1);

  const auto ft_dir = dir.path / "ft";
  const auto ft = run("finetune --checkpoint " + ckpt.string() + " --out " + ft_dir.string() + " --task retrieval");
  ASSERT_EQ(ft.code, 0) << ft.out;
  const auto ft_report = trailing_json(ft.out);
  for (const char* key : {"ir_r1", "ir_r5", "ir_r10", "tr_r1"}) EXPECT_TRUE(ft_report.at("metrics").contains(key)) << key;
  const auto ft_eval = run("evaluate --checkpoint " + (ft_dir / "finetune_retrieval.ckpt").string());
  ASSERT_EQ(ft_eval.code, 0) << ft_eval.out;
  EXPECT_EQ(json::parse(ft_eval.out).at("task"), "retrieval");

  const auto png = dir.path / "hm" / "heat.png";
  const auto hm = run("heatmap --checkpoint " + ckpt.string() + " --image " + (data / "images" / "00000.png").string() +
                      " --caption \"a red circle\" --token red --out " + png.string());
  ASSERT_EQ(hm.code, 0) << hm.out;
  EXPECT_TRUE(std::filesystem::exists(png));
  const auto summary = read_json(dir.path / "hm" / "heat.json");
  for (const auto& row : summary.at("values")) {
    for (const auto& v : row) {
      EXPECT_GE(v.get<double>(), 1.0);
      EXPECT_LE(v.get<double>(), 3.0);
    }
  }
  EXPECT_TRUE(std::filesystem::exists(dir.path / "hm" / summary.at("plan_file").get<std::string>()));
  EXPECT_EQ(run("heatmap --checkpoint " + ckpt.string() + " --image " + (data / "images" / "00000.png").string() +
                " --caption \"a red circle\" --token zebra --out " + png.string())
                .code,
            1);
}

}  // namespace
