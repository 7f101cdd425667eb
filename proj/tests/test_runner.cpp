#include <gtest/gtest.h>

#include <filesystem>

#include "trap/runner.hpp"

namespace fs = std::filesystem;
using trap::ExperimentConfig;
using trap::RunContext;

namespace {

// Smallest pipeline that still exercises every stage.
ExperimentConfig tiny_cfg(const fs::path& root) {
  ExperimentConfig c;
  c.out_root = root.string();
  c.n_train = 8;
  c.n_test = 6;
  c.n_pretrain = 8;
  c.image_size = 32;
  c.n_classes = 3;
  c.min_size = 10;
  c.max_size = 18;
  c.model.image_size = 32;
  c.model.d_v = 16;
  c.model.enc_layers = 2;
  c.model.d_t = 16;
  c.model.text_layers = 1;
  c.model.n_queries = 6;
  c.model.dec_layers = 1;
  c.model.vocab_buckets = 64;
  c.prompt.m_v = 4;
  c.prompt.m_t = 2;
  c.prompt.meta_bottleneck = 4;
  c.pretrain.epochs = 1;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  c.curriculum.stages = {{0, 0.5}};
  c.curriculum.total_epochs = 2;
  c.attack.target_class = 0;
  c.attack.eval_rho = 0.5;
  c.trigger_size = 6;
  return c;
}

struct TempRoot {
  fs::path dir;
  TempRoot() {
    dir = fs::temp_directory_path() /
          ("trap_runner_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
           "_" + std::to_string(rand()));
    fs::create_directories(dir);
  }
  ~TempRoot() { fs::remove_all(dir); }
};

}  // namespace

TEST(Runner, out_root_resolution_prefers_config) {
  ExperimentConfig c;
  c.out_root = "/tmp/explicit";
  EXPECT_EQ(trap::resolve_out_root(c), "/tmp/explicit");
  c.out_root.clear();
  ::setenv("TRAP_OUT_ROOT", "/tmp/from_env", 1);
  EXPECT_EQ(trap::resolve_out_root(c), "/tmp/from_env");
  ::unsetenv("TRAP_OUT_ROOT");
  EXPECT_EQ(trap::resolve_out_root(c), "runs");
}

TEST(Runner, pinned_out_dir_must_not_exist) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  fs::path pinned = tmp.dir / "mine";
  RunContext rc = trap::begin_run(c, "gen-data", pinned.string());
  EXPECT_EQ(rc.dir, pinned);
  EXPECT_TRUE(fs::exists(pinned / "config.txt"));
  EXPECT_THROW(trap::begin_run(c, "gen-data", pinned.string()), trap::io_error);
}

TEST(Runner, auto_named_dirs_never_collide) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext a = trap::begin_run(c, "gen-data");
  RunContext b = trap::begin_run(c, "gen-data");
  EXPECT_NE(a.dir, b.dir);
}

TEST(Runner, config_echo_contains_fingerprint_and_overrides) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext rc = trap::begin_run(c, "eval", "", {"seed=3"});
  std::string echo = trap::read_text_file(rc.dir / "config.txt");
  EXPECT_NE(echo.find("# fingerprint " + c.fingerprint()), std::string::npos);
  EXPECT_NE(echo.find("# override seed=3"), std::string::npos);
  EXPECT_NE(echo.find("data.n_train = 8"), std::string::npos);
}

TEST(Runner, gen_data_writes_loadable_coco_splits) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext rc = trap::begin_run(c, "gen-data");
  trap::run_gen_data(rc);
  EXPECT_TRUE(fs::exists(rc.dir / "DONE"));
  trap::Dataset train = trap::load_coco((rc.dir / "train").string());
  trap::Dataset test = trap::load_coco((rc.dir / "test").string());
  trap::Dataset pre = trap::load_coco((rc.dir / "pretrain").string());
  EXPECT_EQ(train.scenes.size(), 8u);
  EXPECT_EQ(test.scenes.size(), 6u);
  EXPECT_EQ(pre.scenes.size(), 8u);
  // Exported splits equal the in-memory synthesis the other stages use.
  trap::Dataset direct = trap::generate_synthetic(c.train_gen());
  ASSERT_EQ(direct.scenes.size(), train.scenes.size());
  EXPECT_EQ(direct.scenes[0].annotations.size(), train.scenes[0].annotations.size());
}

TEST(Runner, full_pipeline_produces_all_artifacts) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);

  RunContext pre = trap::begin_run(c, "pretrain");
  trap::run_pretrain(pre);
  EXPECT_TRUE(fs::exists(pre.dir / "core.bin"));
  EXPECT_TRUE(fs::exists(pre.dir / "pretrain_log.jsonl"));
  EXPECT_TRUE(fs::exists(pre.dir / "DONE"));

  ExperimentConfig c_atk = c;
  c_atk.in_core = pre.dir.string();
  RunContext atk = trap::begin_run(c_atk, "attack");
  trap::run_attack(atk);
  EXPECT_TRUE(fs::exists(atk.dir / "prompts.bin"));
  EXPECT_TRUE(fs::exists(atk.dir / "trigger.bin"));
  EXPECT_TRUE(fs::exists(atk.dir / "train_log.jsonl"));
  EXPECT_TRUE(fs::exists(atk.dir / "checkpoints" / "epoch_00.prompts.bin"));
  EXPECT_TRUE(fs::exists(atk.dir / "checkpoints" / "epoch_01.trigger.bin"));
  EXPECT_TRUE(fs::exists(atk.dir / "inputs.txt"));

  ExperimentConfig c_ev = c_atk;
  c_ev.in_attack = atk.dir.string();
  RunContext ev = trap::begin_run(c_ev, "eval");
  trap::EvalReport rep = trap::run_eval(ev);
  EXPECT_TRUE(fs::exists(ev.dir / "report.json"));
  EXPECT_TRUE(fs::exists(ev.dir / "report.txt"));
  EXPECT_TRUE(fs::exists(ev.dir / "report.csv"));
  EXPECT_EQ(rep.fingerprint, c_ev.fingerprint());
  std::string inputs = trap::read_text_file(ev.dir / "inputs.txt");
  EXPECT_NE(inputs.find("core "), std::string::npos);
  EXPECT_NE(inputs.find("prompts "), std::string::npos);
  EXPECT_NE(inputs.find("trigger "), std::string::npos);

  // Defense stage consumes the same artifacts.
  ExperimentConfig c_def = c_ev;
  c_def.defense.patchdrop_fraction = 0.5;
  c_def.defense.patchdrop_cell = 8;
  c_def.rename = {{"circle", "disc"}};
  RunContext def = trap::begin_run(c_def, "defend");
  trap::run_defend(def);
  EXPECT_TRUE(fs::exists(def.dir / "patchdrop_report.json"));
  EXPECT_TRUE(fs::exists(def.dir / "rephrase_report.json"));
}

TEST(Runner, attack_without_core_is_dependency_error) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext rc = trap::begin_run(c, "attack");
  EXPECT_THROW(trap::run_attack(rc), trap::dependency_error);
}

TEST(Runner, core_dimension_mismatch_is_config_error) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext pre = trap::begin_run(c, "pretrain");
  trap::run_pretrain(pre);

  ExperimentConfig wrong = c;
  wrong.in_core = pre.dir.string();
  wrong.model.n_queries = 8;
  RunContext atk = trap::begin_run(wrong, "attack");
  EXPECT_THROW(trap::run_attack(atk), trap::config_error);
}

TEST(Runner, identical_seeds_give_byte_identical_reports) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  c.seed = 42;

  auto pipeline = [&]() {
    RunContext pre = trap::begin_run(c, "pretrain");
    trap::run_pretrain(pre);
    ExperimentConfig c_atk = c;
    c_atk.in_core = pre.dir.string();
    RunContext atk = trap::begin_run(c_atk, "attack");
    trap::run_attack(atk);
    ExperimentConfig c_ev = c_atk;
    c_ev.in_attack = atk.dir.string();
    RunContext ev = trap::begin_run(c_ev, "eval");
    trap::run_eval(ev);
    return std::make_pair(trap::read_text_file(ev.dir / "report.json"),
                          trap::read_text_file(atk.dir / "trigger.bin"));
  };
  auto [rep1, trig1] = pipeline();
  auto [rep2, trig2] = pipeline();
  EXPECT_EQ(rep1, rep2);
  EXPECT_EQ(trig1, trig2);
}

TEST(Runner, gradcheck_stage_passes_and_reports) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext rc = trap::begin_run(c, "gradcheck");
  nlohmann::json j = trap::run_gradcheck(rc);
  EXPECT_TRUE(j.at("ok").get<bool>()) << j.dump(2);
  EXPECT_LT(j.at("max_rel_err").get<double>(), 1e-4);
  EXPECT_TRUE(fs::exists(rc.dir / "gradcheck.json"));
}

TEST(Runner, ablate_sweeps_values_into_child_runs) {
  TempRoot tmp;
  ExperimentConfig c = tiny_cfg(tmp.dir);
  RunContext pre = trap::begin_run(c, "pretrain");
  trap::run_pretrain(pre);

  ExperimentConfig c_ab = c;
  c_ab.in_core = pre.dir.string();
  c_ab.ablate_param = "train.lambda";
  c_ab.ablate_values = {"0", "1"};
  RunContext ab = trap::begin_run(c_ab, "ablate");
  trap::run_ablate(ab);
  EXPECT_TRUE(fs::exists(ab.dir / "sweep.csv"));
  EXPECT_TRUE(fs::exists(ab.dir / "ablate_0_eval" / "report.json"));
  EXPECT_TRUE(fs::exists(ab.dir / "ablate_1_eval" / "report.json"));
  std::string csv = trap::read_text_file(ab.dir / "sweep.csv");
  EXPECT_NE(csv.find("train.lambda,0,"), std::string::npos);
  EXPECT_NE(csv.find("train.lambda,1,"), std::string::npos);
  // Lambda 0 and 1 must differ somewhere in the swept reports.
  EXPECT_NE(trap::read_text_file(ab.dir / "ablate_0_eval" / "report.json"),
            trap::read_text_file(ab.dir / "ablate_1_eval" / "report.json"));
}
