#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "trap/config.hpp"
#include "trap/gradcheck.hpp"

namespace trap {

namespace fs = std::filesystem;

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path.string());
  out << text;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha1_file(const fs::path& path) { return sha1_hex(read_text_file(path)); }

/// Priority: explicit config value, TRAP_OUT_ROOT, ./runs.
inline std::string resolve_out_root(const ExperimentConfig& cfg) {
  if (!cfg.out_root.empty()) return cfg.out_root;
  if (const char* env = std::getenv("TRAP_OUT_ROOT"); env && *env) return env;
  return "runs";
}

/// A run directory plus everything needed to make it self-describing.
struct RunContext {
  ExperimentConfig cfg;
  fs::path dir;
  std::vector<std::string> input_lines;  // "role sha1 path" per consumed artifact

  void note_input(const std::string& role, const fs::path& p) {
    input_lines.push_back(role + " " + sha1_file(p) + " " + p.string());
  }

  void finish() {
    if (!input_lines.empty()) {
      std::string joined;
      for (const auto& l : input_lines) joined += l + "\n";
      write_text_file(dir / "inputs.txt", joined);
    }
    write_text_file(dir / "DONE", "");
  }
};

/// Fresh timestamped directory under the output root, or exactly `pinned`
/// when given. Completed directories are immutable: a pinned path that
/// already exists is refused.
inline fs::path create_run_dir(const std::string& root, const std::string& name,
                               const std::string& pinned = "") {
  if (!pinned.empty()) {
    fs::path p(pinned);
    if (fs::exists(p)) throw io_error("run directory already exists: " + pinned);
    fs::create_directories(p);
    return p;
  }
  std::time_t t = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&t));
  for (int k = 0;; ++k) {
    fs::path p = fs::path(root) / (std::string(stamp) + "-" + name +
                                   (k ? "-" + std::to_string(k) : ""));
    if (!fs::exists(p)) {
      fs::create_directories(p);
      return p;
    }
  }
}

inline RunContext begin_run(const ExperimentConfig& cfg, const std::string& subcommand,
                            const std::string& out_override = "",
                            const std::vector<std::string>& override_log = {}) {
  RunContext rc;
  rc.cfg = cfg;
  rc.dir = create_run_dir(resolve_out_root(cfg), subcommand, out_override);
  std::string echo = "# fingerprint " + cfg.fingerprint() + "\n";
  for (const auto& o : override_log) echo += "# override " + o + "\n";
  echo += cfg.to_kv().canonical();
  write_text_file(rc.dir / "config.txt", echo);
  return rc;
}

// ---- datasets ------------------------------------------------------------------------

inline Dataset runner_train_data(const ExperimentConfig& cfg) {
  if (!cfg.in_data.empty()) return load_coco((fs::path(cfg.in_data) / "train").string());
  return generate_synthetic(cfg.train_gen());
}

inline Dataset runner_test_data(const ExperimentConfig& cfg) {
  if (!cfg.in_data.empty()) return load_coco((fs::path(cfg.in_data) / "test").string());
  return generate_synthetic(cfg.test_gen());
}

inline Dataset runner_pretrain_data(const ExperimentConfig& cfg) {
  if (!cfg.in_data.empty())
    return load_coco((fs::path(cfg.in_data) / "pretrain").string());
  return generate_synthetic(cfg.pretrain_gen());
}

// ---- stages --------------------------------------------------------------------------

inline void run_gen_data(RunContext& rc) {
  export_coco(generate_synthetic(rc.cfg.train_gen()), (rc.dir / "train").string());
  export_coco(generate_synthetic(rc.cfg.test_gen()), (rc.dir / "test").string());
  export_coco(generate_synthetic(rc.cfg.pretrain_gen()), (rc.dir / "pretrain").string());
  rc.finish();
}

inline void run_pretrain(RunContext& rc) {
  Dataset train = runner_pretrain_data(rc.cfg);
  Detector det(rc.cfg.model, derive_seed(rc.cfg.seed, "core-init"));
  FitConfig fc = rc.cfg.pretrain;
  fc.seed = derive_seed(rc.cfg.seed, "pretrain");

  std::ofstream log(rc.dir / "pretrain_log.jsonl");
  auto t0 = std::chrono::steady_clock::now();
  fit_detector(det, train, fc, [&](int epoch, double loss) {
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << nlohmann::json({{"epoch", epoch}, {"loss", loss}, {"wall_time", dt}}).dump()
        << "\n";
    log.flush();
  });
  det.save((rc.dir / "core.bin").string(), {{"phase", "pretrain"}});
  rc.finish();
}

inline Detector load_core(RunContext& rc) {
  if (rc.cfg.in_core.empty())
    throw dependency_error("attack/eval needs inputs.core (a pretrain run directory)");
  fs::path p = fs::path(rc.cfg.in_core) / "core.bin";
  if (!fs::exists(p))
    throw dependency_error("missing pretrained core: " + p.string());
  Detector det = Detector::load(p.string());
  nlohmann::json want = rc.cfg.model.to_json();
  if (det.cfg.to_json() != want)
    throw config_error("pretrained core dimensions disagree with the config");
  rc.note_input("core", p);
  return det;
}

inline void run_attack(RunContext& rc) {
  Dataset train = runner_train_data(rc.cfg);
  Detector det = load_core(rc);
  PromptState ps = init_prompt_state(rc.cfg.model, rc.cfg.prompt, train.num_classes(),
                                     derive_seed(rc.cfg.seed, "prompt-init"));
  TriggerPatch trig(rc.cfg.trigger_size, rc.cfg.trigger_size,
                    derive_seed(rc.cfg.seed, "trigger-init"));

  TrainConfig tc = rc.cfg.train;
  tc.seed = derive_seed(rc.cfg.seed, "attack-train");
  CurriculumSchedule sched = rc.cfg.curriculum;
  sched.total_epochs = tc.epochs;

  fs::create_directories(rc.dir / "checkpoints");
  std::ofstream log(rc.dir / "train_log.jsonl");
  auto result = train_trap(det, ps, trig, train, rc.cfg.attack, sched, tc,
                           [&](const EpochLog& el) {
                             log << el.to_json().dump() << "\n";
                             log.flush();
                             char name[64];
                             std::snprintf(name, sizeof name, "epoch_%02d", el.epoch);
                             save_prompts((rc.dir / "checkpoints" /
                                           (std::string(name) + ".prompts.bin"))
                                              .string(),
                                          ps);
                             save_trigger((rc.dir / "checkpoints" /
                                           (std::string(name) + ".trigger.bin"))
                                              .string(),
                                          trig);
                           });
  save_prompts((rc.dir / "prompts.bin").string(), ps);
  save_trigger((rc.dir / "trigger.bin").string(), trig);
  write_text_file(rc.dir / "clip_events.txt", std::to_string(result.clip_events) + "\n");
  rc.finish();
}

struct AttackArtifacts {
  PromptState prompts;
  TriggerPatch trigger;
};

inline AttackArtifacts load_attack_artifacts(RunContext& rc) {
  if (rc.cfg.in_attack.empty())
    throw dependency_error("eval needs inputs.attack (an attack run directory)");
  fs::path pp = fs::path(rc.cfg.in_attack) / "prompts.bin";
  fs::path tp = fs::path(rc.cfg.in_attack) / "trigger.bin";
  if (!fs::exists(pp) || !fs::exists(tp))
    throw dependency_error("missing attack artifacts under " + rc.cfg.in_attack);
  AttackArtifacts a{load_prompts(pp.string(), rc.cfg.model), load_trigger(tp.string())};
  rc.note_input("prompts", pp);
  rc.note_input("trigger", tp);
  return a;
}

inline void write_report(const RunContext& rc, const EvalReport& rep,
                         const std::string& stem) {
  write_text_file(rc.dir / (stem + ".json"), rep.to_json().dump(2) + "\n");
  write_text_file(rc.dir / (stem + ".txt"), rep.to_text());
  write_text_file(rc.dir / (stem + ".csv"),
                  EvalReport::csv_header() + "\n" + rep.to_csv_row() + "\n");
}

inline EvalReport run_eval(RunContext& rc) {
  Dataset test = runner_test_data(rc.cfg);
  Detector det = load_core(rc);
  AttackArtifacts art = load_attack_artifacts(rc);
  EvalReport rep = evaluate_attack(det, art.prompts, art.trigger, test, rc.cfg.attack,
                                   rc.cfg.attack.eval_rho, derive_seed(rc.cfg.seed, "eval"),
                                   nullptr, nullptr, rc.cfg.fingerprint());
  write_report(rc, rep, "report");
  rc.finish();
  return rep;
}

/// PatchDrop and, when a rename map is configured, prompt rephrasing.
inline void run_defend(RunContext& rc) {
  Dataset test = runner_test_data(rc.cfg);
  Detector det = load_core(rc);
  AttackArtifacts art = load_attack_artifacts(rc);
  if (rc.cfg.defense.patchdrop_fraction <= 0.0)
    throw config_error("defend: eval.patchdrop_fraction must be > 0");
  EvalReport dropped = evaluate_attack(det, art.prompts, art.trigger, test, rc.cfg.attack,
                                       rc.cfg.attack.eval_rho,
                                       derive_seed(rc.cfg.seed, "eval"), &rc.cfg.defense,
                                       nullptr, rc.cfg.fingerprint());
  write_report(rc, dropped, "patchdrop_report");
  if (!rc.cfg.rename.empty()) {
    EvalReport rephrased = prompt_rephrase_eval(det, art.prompts, art.trigger, test,
                                                rc.cfg.attack, rc.cfg.attack.eval_rho,
                                                rc.cfg.rename,
                                                derive_seed(rc.cfg.seed, "eval"));
    rephrased.fingerprint = rc.cfg.fingerprint();
    write_report(rc, rephrased, "rephrase_report");
  }
  rc.finish();
}

/// Sweep one config key: each value runs an isolated attack + eval in a
/// child directory and contributes one CSV row.
inline void run_ablate(RunContext& rc) {
  if (rc.cfg.ablate_param.empty())
    throw config_error("ablate: ablate.param and ablate.values are required");
  std::string csv = "param,value," + EvalReport::csv_header() + "\n";
  for (size_t i = 0; i < rc.cfg.ablate_values.size(); ++i) {
    const std::string& value = rc.cfg.ablate_values[i];
    KvConfig kv = rc.cfg.to_kv();
    kv.set(rc.cfg.ablate_param, value);
    kv.values.erase("ablate.param");
    kv.values.erase("ablate.values");
    ExperimentConfig child = ExperimentConfig::from_kv(kv);

    RunContext attack_rc;
    attack_rc.cfg = child;
    attack_rc.dir = rc.dir / ("ablate_" + std::to_string(i) + "_attack");
    fs::create_directories(attack_rc.dir);
    write_text_file(attack_rc.dir / "config.txt", child.to_kv().canonical());
    run_attack(attack_rc);

    RunContext eval_rc;
    eval_rc.cfg = child;
    eval_rc.cfg.in_attack = attack_rc.dir.string();
    eval_rc.dir = rc.dir / ("ablate_" + std::to_string(i) + "_eval");
    fs::create_directories(eval_rc.dir);
    write_text_file(eval_rc.dir / "config.txt", eval_rc.cfg.to_kv().canonical());
    EvalReport rep = run_eval(eval_rc);
    csv += rc.cfg.ablate_param + "," + value + "," + rep.to_csv_row() + "\n";
  }
  write_text_file(rc.dir / "sweep.csv", csv);
  rc.finish();
}

/// Finite-difference audit of every trainable parameter group at reduced
/// dimensions, through stamping, prompting and the matching loss.
inline nlohmann::json run_gradcheck(RunContext& rc) {
  DetectorConfig dc;
  dc.image_size = 16;
  dc.patch = 8;
  dc.d_v = 16;
  dc.enc_layers = 2;
  dc.enc_heads = 2;
  dc.d_t = 16;
  dc.text_layers = 1;
  dc.text_heads = 2;
  dc.text_mlp_ratio = 2;
  dc.n_queries = 5;
  dc.dec_layers = 2;
  dc.dec_heads = 2;
  dc.mlp_ratio = 2;
  dc.vocab_buckets = 64;
  Detector det(dc, derive_seed(rc.cfg.seed, "gradcheck-core"));

  PromptConfig pc = rc.cfg.prompt;
  pc.m_v = 3;
  pc.m_t = 2;
  pc.meta_bottleneck = 2;
  PromptState ps = init_prompt_state(dc, pc, 3, derive_seed(rc.cfg.seed, "gradcheck-ps"));
  TriggerPatch trig(6, 6, derive_seed(rc.cfg.seed, "gradcheck-trig"));

  ImageSample img(dc.image_size, dc.image_size);
  auto rng = make_rng(derive_seed(rc.cfg.seed, "gradcheck-img"));
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (Eigen::Index i = 0; i < img.pixels.rows(); ++i)
    for (int ch = 0; ch < 3; ++ch) img.pixels(i, ch) = d(rng);
  std::vector<Annotation> gts = {{{2, 2, 9, 9}, 0}, {{6, 7, 13, 14}, 2}};
  std::vector<Placement> placements = {
      plan_placement(gts[0].box, 0.5, dc.image_size, dc.image_size)};
  auto ids = class_token_ids({"circle", "square", "triangle"}, dc.vocab_buckets);

  std::vector<ad::Param*> params = trainable_params(ps);
  params.push_back(&trig.base);

  std::vector<int> match;
  {
    ad::Graph g;
    ad::Var squashed = g.sigmoid(g.param(trig.base));
    ad::Var stamped = stamp_graph(g, img, squashed, trig.height, trig.width, placements);
    auto out = detect_prompted(g, det, ps, stamped, ids);
    match = match_queries(g.val(out.boxes), g.val(out.logits), gts, dc.image_size);
  }
  auto probe_rng = make_rng(derive_seed(rc.cfg.seed, "gradcheck-probes"));
  auto rep = check_gradients(
      params,
      [&](ad::Graph& g) {
        ad::Var squashed = g.sigmoid(g.param(trig.base));
        ad::Var stamped = stamp_graph(g, img, squashed, trig.height, trig.width, placements);
        auto out = detect_prompted(g, det, ps, stamped, ids);
        return detection_loss(g, out.boxes, out.logits, gts, dc.image_size, 3, &match).total;
      },
      probe_rng, 10, 1e-6);

  nlohmann::json j = {{"max_rel_err", rep.max_rel_err},
                      {"worst_param", rep.worst_param},
                      {"probes", rep.probes},
                      {"tolerance", 1e-4},
                      {"ok", rep.ok(1e-4)}};
  write_text_file(rc.dir / "gradcheck.json", j.dump(2) + "\n");
  rc.finish();
  return j;
}

}  // namespace trap
