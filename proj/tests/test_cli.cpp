// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dimple/cli.hpp"
#include "dimple/gradcheck.hpp"

namespace dimple {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> tiny_args(const std::string& command, const fs::path& out) {
  return {command,
          "--out", out.string(),
          "--set", "task.samples_per_class=16",
          "--set", "task.test_samples_per_class=8",
          "--set", "task.num_patch_tokens=4",
          "--set", "task.width=8",
          "--set", "encoder.num_layers=2",
          "--set", "encoder.prompt_depth=2",
          "--set", "encoder.prompt_len=1",
          "--set", "encoder.embed_width=8",
          "--set", "encoder.num_heads=2",
          "--set", "train.epochs=1",
          "--set", "train.batch_size=8"};
}

std::vector<std::string> with(std::vector<std::string> args, std::initializer_list<std::string> extra) {
  args.insert(args.end(), extra);
  return args;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dimple_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Cli, HelpListsEveryCommand) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  for (const char* cmd : {"gen-data", "train", "eval", "gridsearch", "gradcheck", "export-embeddings"}) {
    EXPECT_NE(r.out.find(cmd), std::string::npos) << cmd;
  }
}

TEST(Cli, SubcommandHelpListsFlags) {
  auto r = run({"train", "--help"});
  EXPECT_EQ(r.code, kExitOk);
  for (const char* flag : {"--config", "--set", "--out", "--seed", "--paper-regime", "--data"}) {
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kExitError);
  EXPECT_EQ(run({"frobnicate"}).code, kExitError);
  EXPECT_EQ(run({"eval"}).code, kExitError);  // --checkpoint is required
}

TEST(Cli, UnknownKeyIsReported) {
  auto r = run(with(tiny_args("train", fresh_dir("badkey")), {"--set", "loss.alpah=1"}));
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("did you mean 'loss.alpha'"), std::string::npos) << r.err;
}

TEST(Cli, MissingConfigFile) {
  auto r = run({"train", "--config", "/nonexistent/run.cfg", "--out", fresh_dir("nocfg").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("/nonexistent/run.cfg"), std::string::npos) << r.err;
}

TEST(Cli, TrainWritesArtifactsAndEchoesOverrides) {
  const auto dir = fresh_dir("train");
  auto r = run(with(tiny_args("train", dir), {"--set", "loss.alpha=0.5"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* f : {"resolved_config.cfg", "checkpoint.bin", "run.json", "steps.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_NE(read_bytes(dir / "resolved_config.cfg").find("alpha = 0.5\n"), std::string::npos);
  EXPECT_NE(r.out.find("epoch 0 ce_u "), std::string::npos);
  EXPECT_NE(r.out.find("worst_group_acc "), std::string::npos);
  auto j = nlohmann::json::parse(read_bytes(dir / "run.json"));
  EXPECT_EQ(j["config"]["loss"]["alpha"], 0.5);
}

TEST(Cli, RerunsAreByteIdentical) {
  const auto a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  ASSERT_EQ(run(tiny_args("train", a)).code, kExitOk);
  ASSERT_EQ(run(tiny_args("train", b)).code, kExitOk);
  for (const char* f : {"resolved_config.cfg", "checkpoint.bin", "run.json", "steps.csv"}) {
    EXPECT_EQ(read_bytes(a / f), read_bytes(b / f)) << f;
  }
}

TEST(Cli, ResolvedConfigReproducesTheRun) {
  const auto a = fresh_dir("resolved_a"), b = fresh_dir("resolved_b");
  ASSERT_EQ(run(with(tiny_args("train", a), {"--seed", "17"})).code, kExitOk);
  auto r = run({"train", "--config", (a / "resolved_config.cfg").string(), "--out", b.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_bytes(a / "run.json"), read_bytes(b / "run.json"));
  EXPECT_EQ(read_bytes(a / "checkpoint.bin"), read_bytes(b / "checkpoint.bin"));
}

TEST(Cli, SeedChangesTheRun) {
  const auto a = fresh_dir("seed_a"), b = fresh_dir("seed_b");
  ASSERT_EQ(run(with(tiny_args("train", a), {"--seed", "1"})).code, kExitOk);
  ASSERT_EQ(run(with(tiny_args("train", b), {"--seed", "2"})).code, kExitOk);
  EXPECT_NE(read_bytes(a / "checkpoint.bin"), read_bytes(b / "checkpoint.bin"));
}

TEST(Cli, GenDataTrainEvalExport) {
  const auto dir = fresh_dir("pipeline");
  ASSERT_EQ(run(tiny_args("gen-data", dir / "data")).code, kExitOk);
  ASSERT_TRUE(fs::exists(dir / "data" / "dataset.bin"));
  const std::string data = (dir / "data" / "dataset.bin").string();

  auto t = run(with(tiny_args("train", dir / "run"), {"--data", data}));
  ASSERT_EQ(t.code, kExitOk) << t.err;
  const std::string ckpt = (dir / "run" / "checkpoint.bin").string();

  auto e = run(with(tiny_args("eval", dir / "eval"), {"--data", data, "--checkpoint", ckpt}));
  ASSERT_EQ(e.code, kExitOk) << e.err;
  auto run_json = nlohmann::json::parse(read_bytes(dir / "run" / "run.json"));
  auto eval_json = nlohmann::json::parse(read_bytes(dir / "eval" / "eval.json"));
  EXPECT_EQ(run_json["metrics"]["hm"], eval_json["metrics"]["hm"]);
  EXPECT_EQ(run_json["metrics"]["worst_group_acc"], eval_json["metrics"]["worst_group_acc"]);

  auto x = run(with(tiny_args("export-embeddings", dir / "emb"), {"--data", data, "--checkpoint", ckpt}));
  ASSERT_EQ(x.code, kExitOk) << x.err;
  std::ifstream in(dir / "emb" / "embeddings.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, 1u + 2u * 32u + 2u * 4u);  // header, 4 classes x 8 test samples, 4 classes

  auto bad = run(with(tiny_args("export-embeddings", dir / "emb2"), {"--data", data, "--checkpoint", ckpt, "--split", "valid"}));
  EXPECT_EQ(bad.code, kExitError);
}

TEST(Cli, CorruptDatasetRejected) {
  const auto dir = fresh_dir("corrupt");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.bin", std::ios::binary) << "not a dataset";
  auto r = run(with(tiny_args("train", dir), {"--data", (dir / "bad.bin").string()}));
  EXPECT_EQ(r.code, kExitError);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, GridsearchWritesCsv) {
  const auto dir = fresh_dir("grid");
  auto r = run(with(tiny_args("gridsearch", dir), {"--alpha", "0.1,1", "--beta", "0.5", "--prompt-depth", "1,3"}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::ifstream in(dir / "grid.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_NE(lines.back().find("skipped"), std::string::npos);
}

TEST(Cli, DivergedRunExitsWithTwo) {
  auto r = run(with(tiny_args("train", fresh_dir("diverge")), {"--set", "train.lr=1e308", "--set", "train.momentum=0.9"}));
  EXPECT_EQ(r.code, kExitDiverged);
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST(Cli, GradcheckPasses) {
  const auto dir = fresh_dir("gradcheck");
  auto r = run({"gradcheck", "--seed", "0", "--out", dir.string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  for (const char* label : {"dimple pass", "dimple_early pass", "coop pass", "coop_ood pass"}) {
    EXPECT_NE(r.out.find(label), std::string::npos) << label;
  }
  auto j = nlohmann::json::parse(read_bytes(dir / "gradcheck.json"));
  ASSERT_EQ(j.size(), 4u);
  for (const auto& entry : j) EXPECT_TRUE(entry["passed"].get<bool>());
}

TEST(Gradcheck, InjectedFaultIsLocalised) {
  const std::string target = "heads.vision_spurious.weight";
  const std::array<Objective, 1> only{Objective::dimple};
  auto reports = run_gradcheck(
      0,
      [&](const std::string& name, std::vector<double>& g) {
        if (name == target) g[0] += 1e-3;
      },
      only);
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_FALSE(reports[0].passed);
  EXPECT_EQ(reports[0].worst_tensor, target);
  for (const auto& t : reports[0].tensors) {
    if (t.name != target) EXPECT_LT(t.max_rel_error, reports[0].threshold) << t.name;
  }
}

}  // namespace
}  // namespace dimple
