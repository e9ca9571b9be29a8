#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "persona_guard.hpp"
#include "support/fixtures.hpp"

namespace pg = persona_guard;
namespace fs = std::filesystem;
using pg::ErrorCode;
using pg::testing::TempDir;

namespace {

pg::json tiny_config(std::uint64_t seed = 3) {
  pg::ExperimentConfig c;
  c.seed = seed;
  c.synth.num_personas = 4;
  c.synth.dialogs = 80;
  c.synth.min_turns = 3;
  c.synth.max_turns = 4;
  c.lm.layers = 1;
  c.lm.model_dim = 16;
  c.lm.heads = 2;
  c.lm.context_window = 64;
  c.lm_train.epochs = 1;
  c.defense.predictor_hidden = 16;
  c.defense.predictor_steps = 1;
  c.attacker.hidden = 16;
  c.attacker.epochs = 2;
  c.utility_samples = 4;
  c.topk = {1, 2};
  return pg::to_json(c);
}

fs::path write_config(const fs::path& dir, const pg::json& cfg, const std::string& name = "config.json") {
  const auto path = dir / name;
  pg::write_file_atomic(path, cfg.dump(2));
  return path;
}

/// Runs the CLI; returns its exit status. Output goes to dir/cli.log.
int cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = std::string("\"") + PERSONA_GUARD_CLI + "\" " + args + " >>\"" +
                          (dir / "cli.log").string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string ws_args(const fs::path& out) { return "--out \"" + out.string() + "\""; }

void full_run(const fs::path& dir, const fs::path& out) {
  const auto cfg = write_config(dir, tiny_config());
  ASSERT_EQ(cli(dir, "run --config \"" + cfg.string() + "\" " + ws_args(out)), 0) << pg::read_file(dir / "cli.log");
}

}  // namespace

TEST(Cli, AttackBeforeTrainIsAStageOrderError) {
  TempDir dir;
  const auto out = dir.path / "ws";
  const auto cfg = write_config(dir.path, tiny_config());
  ASSERT_EQ(cli(dir.path, "synth --config \"" + cfg.string() + "\" " + ws_args(out)), 0);
  EXPECT_EQ(cli(dir.path, "attack --variant LM " + ws_args(out)), pg::exit_status(ErrorCode::stage_order));
  EXPECT_EQ(cli(dir.path, "attack " + ws_args(out)), pg::exit_status(ErrorCode::stage_order));
  EXPECT_EQ(cli(dir.path, "report " + ws_args(out)), pg::exit_status(ErrorCode::stage_order));
  EXPECT_NE(pg::read_file(dir.path / "cli.log").find("E_STAGE_ORDER"), std::string::npos);
}

TEST(Cli, StageWithoutSynthIsAStageOrderError) {
  TempDir dir;
  EXPECT_EQ(cli(dir.path, "train-lm " + ws_args(dir.path / "empty")), pg::exit_status(ErrorCode::stage_order));
}

TEST(Cli, BadArgumentsAreConfigErrors) {
  TempDir dir;
  EXPECT_EQ(cli(dir.path, "synth --device cuda " + ws_args(dir.path / "ws")), pg::exit_status(ErrorCode::config));
  EXPECT_EQ(cli(dir.path, "cluster --k 0 " + ws_args(dir.path / "ws")), pg::exit_status(ErrorCode::config));
  EXPECT_EQ(cli(dir.path, "no-such-command"), pg::exit_status(ErrorCode::config));
}

TEST(Cli, ConfigHashMismatchNeedsForce) {
  TempDir dir;
  const auto out = dir.path / "ws";
  const auto cfg = write_config(dir.path, tiny_config());
  ASSERT_EQ(cli(dir.path, "synth --config \"" + cfg.string() + "\" " + ws_args(out)), 0);
  auto changed = tiny_config();
  changed["lm_train"]["epochs"] = 2;
  const auto cfg2 = write_config(dir.path, changed, "changed.json");
  EXPECT_EQ(cli(dir.path, "train-lm --config \"" + cfg2.string() + "\" " + ws_args(out)),
            pg::exit_status(ErrorCode::hash_mismatch));
  // The same config is accepted without --force.
  EXPECT_EQ(cli(dir.path, "train-lm --config \"" + cfg.string() + "\" " + ws_args(out)), 0);
}

TEST(Cli, MissingCheckpointFailsTheAttack) {
  TempDir dir;
  const auto out = dir.path / "ws";
  const auto cfg = write_config(dir.path, tiny_config());
  ASSERT_EQ(cli(dir.path, "synth --config \"" + cfg.string() + "\" " + ws_args(out)), 0);
  ASSERT_EQ(cli(dir.path, "train-lm " + ws_args(out)), 0);
  fs::remove(out / "models/lm.ckpt");
  const int rc = cli(dir.path, "attack --variant LM " + ws_args(out));
  EXPECT_EQ(rc, pg::exit_status(ErrorCode::missing_checkpoint));
}

TEST(Cli, ChangedArtifactIsAHashMismatch) {
  TempDir dir;
  const auto out = dir.path / "ws";
  const auto cfg = write_config(dir.path, tiny_config());
  ASSERT_EQ(cli(dir.path, "synth --config \"" + cfg.string() + "\" " + ws_args(out)), 0);
  ASSERT_EQ(cli(dir.path, "train-lm " + ws_args(out)), 0);
  pg::write_file_atomic(out / "data/train.jsonl", pg::read_file(out / "data/validation.jsonl"));
  EXPECT_EQ(cli(dir.path, "attack --variant LM " + ws_args(out)), pg::exit_status(ErrorCode::hash_mismatch));
}

TEST(Cli, RunIsByteIdenticalAcrossInvocations) {
  TempDir dir;
  full_run(dir.path, dir.path / "a");
  full_run(dir.path, dir.path / "b");
  for (const char* f : {"report.json", "report.md", "models/lm.ckpt", "models/lm_kl_mi.ckpt", "data/train.jsonl",
                        "attack/lm/predictions.jsonl", "attack/lm_kl_mi/attacker.ckpt"}) {
    ASSERT_TRUE(fs::exists(dir.path / "a" / f)) << f;
    EXPECT_EQ(pg::read_file(dir.path / "a" / f), pg::read_file(dir.path / "b" / f)) << f;
  }
}

TEST(Cli, ReportShape) {
  TempDir dir;
  const auto out = dir.path / "ws";
  full_run(dir.path, out);
  const auto report = pg::json::parse(pg::read_file(out / "report.json"));
  ASSERT_TRUE(report.contains(pg::kReportSchema));
  const auto r = pg::report_from_json(report);
  ASSERT_EQ(r.models.size(), 2u);
  EXPECT_EQ(r.models[0].name, "LM");
  EXPECT_EQ(r.models[1].name, "LM+KL+MI");
  for (const auto& m : r.models) {
    EXPECT_GT(m.privacy.overall.samples, 0u);
    EXPECT_EQ(m.privacy.overall.topk.size(), 2u);
    ASSERT_TRUE(m.utility.has_value());
    EXPECT_GT(m.utility->ppl, 1.0);
    EXPECT_EQ(m.attacker_mean.size(), 4u);
  }
  EXPECT_TRUE(r.models[1].fake_attacker_mean.has_value());
  EXPECT_TRUE(r.baselines.contains("random_pred"));
  EXPECT_TRUE(r.baselines.contains("best_guess"));
  EXPECT_DOUBLE_EQ(r.baselines.at("random_pred").accuracy, 25.0);
  const auto md = pg::read_file(out / "report.md");
  for (const char* row : {"Random Pred", "Best Guess", "LM+KL+MI"}) EXPECT_NE(md.find(row), std::string::npos) << row;
  // Every stage left a manifest.
  for (const char* s : {"synth", "train_lm", "attack_lm", "eval_lm", "train_lm_kl_mi", "report"})
    EXPECT_TRUE(fs::exists(out / "stages" / (std::string(s) + ".json"))) << s;
}

TEST(Cli, EnvironmentSelectsTheOutputRoot) {
  TempDir dir;
  const auto cfg = write_config(dir.path, tiny_config(5));
  const std::string env = std::string(pg::kOutEnv) + "=\"" + (dir.path / "root").string() + "\" ";
  const std::string cmd = env + "\"" + PERSONA_GUARD_CLI + "\" synth --config \"" + cfg.string() + "\" >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir.path / "root/seed-5/data/train.jsonl"));
}

TEST(Cli, ClusterWritesRelabeledSplits) {
  TempDir dir;
  const auto out = dir.path / "ws";
  const auto cfg = write_config(dir.path, tiny_config());
  ASSERT_EQ(cli(dir.path, "synth --config \"" + cfg.string() + "\" " + ws_args(out)), 0);
  ASSERT_EQ(cli(dir.path, "cluster --k 2 " + ws_args(out)), 0);
  const auto map = pg::cluster_map_from_jsonl(pg::read_file(out / "cluster/cluster_map.jsonl"));
  EXPECT_EQ(map.k, 2);
  EXPECT_EQ(map.assignment.size(), 4u);
  const auto relabeled = pg::ingest_jsonl(out / "cluster/train.jsonl", out / "cluster/personas.jsonl");
  EXPECT_EQ(relabeled.catalog.size(), 2);
}
