// Command line driver. Each subcommand is one pipeline stage writing a fresh
// run directory; stages are chained through inputs.* config keys.

#include <cstdio>
#include <string>
#include <vector>

#include "trap/runner.hpp"

namespace {

constexpr const char* kUsage = R"(usage: trap <subcommand> [options]

subcommands
  gen-data    write synthetic train/ and test/ splits in COCO layout
  pretrain    train the detector core on clean data -> core.bin
  attack      prompt-tune with a poisoned objective -> prompts.bin, trigger.bin
  eval        score an attack -> report.{json,txt,csv}
  defend      re-evaluate under patch dropping and prompt rephrasing
  ablate      sweep one config key through attack + eval -> sweep.csv
  gradcheck   finite-difference audit of the gradients -> gradcheck.json

options
  --config FILE   key = value settings (defaults apply when omitted)
  --set KEY=VAL   override one setting; may repeat
  --out DIR       exact run directory (must not exist yet)
  --seed N        shorthand for --set seed=N
  --help          this text
)";

struct CliArgs {
  std::string subcommand;
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;  // raw KEY=VAL strings
};

bool known_subcommand(const std::string& s) {
  for (const char* k : {"gen-data", "pretrain", "attack", "eval", "defend", "ablate",
                        "gradcheck"})
    if (s == k) return true;
  return false;
}

CliArgs parse_cli(int argc, char** argv) {
  CliArgs a;
  if (argc < 2) throw trap::config_error("missing subcommand");
  a.subcommand = argv[1];
  if (a.subcommand == "--help" || a.subcommand == "-h") {
    std::fputs(kUsage, stdout);
    std::exit(0);
  }
  if (!known_subcommand(a.subcommand))
    throw trap::config_error("unknown subcommand: " + a.subcommand);
  for (int i = 2; i < argc; ++i) {
    std::string arg = argv[i];
    auto need_value = [&](const char* flag) -> std::string {
      if (i + 1 >= argc) throw trap::config_error(std::string(flag) + " needs a value");
      return argv[++i];
    };
    if (arg == "--config") {
      a.config_path = need_value("--config");
    } else if (arg == "--set") {
      std::string kv = need_value("--set");
      if (kv.find('=') == std::string::npos)
        throw trap::config_error("--set expects KEY=VAL, got " + kv);
      a.overrides.push_back(kv);
    } else if (arg == "--out") {
      a.out_dir = need_value("--out");
    } else if (arg == "--seed") {
      a.overrides.push_back("seed=" + need_value("--seed"));
    } else if (arg == "--help" || arg == "-h") {
      std::fputs(kUsage, stdout);
      std::exit(0);
    } else {
      throw trap::config_error("unknown option: " + arg);
    }
  }
  return a;
}

int run(const CliArgs& a) {
  trap::KvConfig kv;
  if (!a.config_path.empty()) kv = trap::KvConfig::parse_file(a.config_path);
  for (const std::string& o : a.overrides) {
    size_t eq = o.find('=');
    kv.set(trap::KvConfig::trim(o.substr(0, eq)), trap::KvConfig::trim(o.substr(eq + 1)));
  }
  trap::ExperimentConfig cfg = trap::ExperimentConfig::from_kv(kv);
  trap::RunContext rc = trap::begin_run(cfg, a.subcommand, a.out_dir, a.overrides);
  std::printf("run directory: %s\n", rc.dir.string().c_str());

  if (a.subcommand == "gen-data") {
    trap::run_gen_data(rc);
  } else if (a.subcommand == "pretrain") {
    trap::run_pretrain(rc);
  } else if (a.subcommand == "attack") {
    trap::run_attack(rc);
  } else if (a.subcommand == "eval") {
    trap::EvalReport rep = trap::run_eval(rc);
    std::fputs(rep.to_text().c_str(), stdout);
  } else if (a.subcommand == "defend") {
    trap::run_defend(rc);
  } else if (a.subcommand == "ablate") {
    trap::run_ablate(rc);
  } else {
    nlohmann::json j = trap::run_gradcheck(rc);
    std::printf("max_rel_err %.3g (tolerance %.3g): %s\n",
                j.at("max_rel_err").get<double>(), j.at("tolerance").get<double>(),
                j.at("ok").get<bool>() ? "ok" : "FAIL");
    if (!j.at("ok").get<bool>()) return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(parse_cli(argc, argv));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    std::fputs("run with --help for usage\n", stderr);
    return 2;
  }
}
