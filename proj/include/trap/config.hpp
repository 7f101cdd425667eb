#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "trap/attack.hpp"
#include "trap/common.hpp"
#include "trap/dataset.hpp"
#include "trap/eval.hpp"
#include "trap/model.hpp"
#include "trap/prompting.hpp"

namespace trap {

inline constexpr int kConfigSchemaVersion = 1;

inline std::string sha1_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr))
    throw io_error("sha1: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

// ---- raw key-value layer -----------------------------------------------------------

/// Flat `key = value` file with `#` comments. Keys are dotted paths; values
/// are scalars or small comma lists parsed by the typed layer.
struct KvConfig {
  std::map<std::string, std::string> values;

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static KvConfig parse_string(const std::string& text) {
    KvConfig kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::string t = trim(line);
      if (t.empty()) continue;
      size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(t.substr(0, eq));
      std::string value = trim(t.substr(eq + 1));
      if (key.empty())
        throw config_error("config line " + std::to_string(lineno) + ": empty key");
      if (kv.values.count(key))
        throw config_error("config line " + std::to_string(lineno) + ": duplicate key " + key);
      kv.values[key] = value;
    }
    return kv;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
  }

  /// `--set key=value` override; replaces or adds.
  void set(const std::string& key, const std::string& value) { values[key] = value; }

  /// Sorted `key = value` lines; the fingerprint input and the echoed form.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values) out += k + " = " + v + "\n";
    return out;
  }
};

// ---- typed layer ---------------------------------------------------------------------

/// Everything a run needs, resolved from a KvConfig with hard errors on
/// unknown keys and a collected list of all violations.
struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  uint64_t seed = 0;
  std::string out_root;  // empty: resolved by the runner

  // dataset; the pretrain corpus is drawn separately so the frozen core can
  // see more clean data than the attack stage does
  int n_train = 200;
  int n_test = 50;
  int n_pretrain = 1000;
  int image_size = 64;
  int n_classes = 4;
  int min_objects = 1;
  int max_objects = 4;
  int min_size = 20;
  int max_size = 44;

  DetectorConfig model;
  PromptConfig prompt;
  AttackSpec attack;
  CurriculumSchedule curriculum;
  TrainConfig train;
  FitConfig pretrain;
  int trigger_size = 16;

  DefenseConfig defense;
  std::map<std::string, std::string> rename;  // prompt rephrase map

  // upstream artifacts (run directories), wired per subcommand
  std::string in_data;
  std::string in_core;
  std::string in_attack;

  // ablate
  std::string ablate_param;
  std::vector<std::string> ablate_values;

  GenConfig train_gen() const {
    GenConfig g{n_train, image_size, n_classes, min_objects, max_objects,
                min_size, max_size, derive_seed(seed, "data-train")};
    return g;
  }
  GenConfig test_gen() const {
    GenConfig g{n_test, image_size, n_classes, min_objects, max_objects,
                min_size, max_size, derive_seed(seed, "data-test")};
    return g;
  }
  GenConfig pretrain_gen() const {
    GenConfig g{n_pretrain, image_size, n_classes, min_objects, max_objects,
                min_size, max_size, derive_seed(seed, "data-pretrain")};
    return g;
  }

  static ExperimentConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;

  /// Hash of the experimental settings. Artifact paths are excluded: the same
  /// experiment fingerprints identically no matter where its inputs live.
  /// Exact input identity is recorded separately via content hashes.
  std::string fingerprint() const {
    KvConfig kv = to_kv();
    kv.values.erase("out_root");
    kv.values.erase("inputs.data");
    kv.values.erase("inputs.core");
    kv.values.erase("inputs.attack");
    return sha1_hex(kv.canonical());
  }
};

namespace detail {

struct KvReader {
  const KvConfig& kv;
  std::set<std::string> seen;
  std::vector<std::string>& errors;

  const std::string* find(const std::string& key) {
    seen.insert(key);
    auto it = kv.values.find(key);
    return it == kv.values.end() ? nullptr : &it->second;
  }

  void take_int(const std::string& key, int& out) {
    if (const std::string* v = find(key)) {
      try {
        size_t used = 0;
        long long parsed = std::stoll(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing");
        out = int(parsed);
      } catch (const std::exception&) {
        errors.push_back(key + ": not an integer: " + *v);
      }
    }
  }

  void take_u64(const std::string& key, uint64_t& out) {
    if (const std::string* v = find(key)) {
      try {
        size_t used = 0;
        unsigned long long parsed = std::stoull(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing");
        out = parsed;
      } catch (const std::exception&) {
        errors.push_back(key + ": not an unsigned integer: " + *v);
      }
    }
  }

  void take_double(const std::string& key, double& out) {
    if (const std::string* v = find(key)) {
      try {
        size_t used = 0;
        double parsed = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing");
        out = parsed;
      } catch (const std::exception&) {
        errors.push_back(key + ": not a number: " + *v);
      }
    }
  }

  void take_string(const std::string& key, std::string& out) {
    if (const std::string* v = find(key)) out = *v;
  }

  void take_bool(const std::string& key, bool& out) {
    if (const std::string* v = find(key)) {
      if (*v == "true" || *v == "1")
        out = true;
      else if (*v == "false" || *v == "0")
        out = false;
      else
        errors.push_back(key + ": not a boolean: " + *v);
    }
  }

  template <typename F>
  void take_parsed(const std::string& key, F&& apply) {
    if (const std::string* v = find(key)) {
      try {
        apply(*v);
      } catch (const std::exception& e) {
        errors.push_back(key + ": " + e.what());
      }
    }
  }

  void finish() {
    for (const auto& [k, v] : kv.values)
      if (!seen.count(k)) errors.push_back("unknown key: " + k);
  }
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = KvConfig::trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

/// `first_epoch:rho` pairs, comma separated.
inline std::vector<CurriculumStage> parse_stages(const std::string& s) {
  std::vector<CurriculumStage> stages;
  for (const std::string& item : split_list(s)) {
    size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw config_error("expected first_epoch:rho, got " + item);
    CurriculumStage st;
    st.first_epoch = std::stoi(item.substr(0, colon));
    st.rho = std::stod(item.substr(colon + 1));
    stages.push_back(st);
  }
  return stages;
}

inline std::map<std::string, std::string> parse_rename(const std::string& s) {
  std::map<std::string, std::string> out;
  for (const std::string& item : split_list(s)) {
    size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw config_error("expected from:to, got " + item);
    out[KvConfig::trim(item.substr(0, colon))] = KvConfig::trim(item.substr(colon + 1));
  }
  return out;
}

inline std::string stages_to_string(const std::vector<CurriculumStage>& stages) {
  std::string out;
  for (size_t i = 0; i < stages.size(); ++i) {
    if (i) out += ",";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%d:%g", stages[i].first_epoch, stages[i].rho);
    out += buf;
  }
  return out;
}

inline std::string rename_to_string(const std::map<std::string, std::string>& m) {
  std::string out;
  for (const auto& [k, v] : m) {
    if (!out.empty()) out += ",";
    out += k + ":" + v;
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_kv(const KvConfig& kv) {
  ExperimentConfig c;
  std::vector<std::string> errors;
  detail::KvReader r{kv, {}, errors};

  r.take_int("schema_version", c.schema_version);
  r.take_u64("seed", c.seed);
  r.take_string("out_root", c.out_root);

  r.take_int("data.n_train", c.n_train);
  r.take_int("data.n_test", c.n_test);
  r.take_int("data.n_pretrain", c.n_pretrain);
  r.take_int("data.image_size", c.image_size);
  r.take_int("data.n_classes", c.n_classes);
  r.take_int("data.min_objects", c.min_objects);
  r.take_int("data.max_objects", c.max_objects);
  r.take_int("data.min_size", c.min_size);
  r.take_int("data.max_size", c.max_size);

  r.take_int("model.patch", c.model.patch);
  r.take_int("model.d_v", c.model.d_v);
  r.take_int("model.enc_layers", c.model.enc_layers);
  r.take_int("model.enc_heads", c.model.enc_heads);
  r.take_int("model.d_t", c.model.d_t);
  r.take_int("model.text_layers", c.model.text_layers);
  r.take_int("model.text_heads", c.model.text_heads);
  r.take_int("model.text_mlp_ratio", c.model.text_mlp_ratio);
  r.take_int("model.n_queries", c.model.n_queries);
  r.take_int("model.dec_layers", c.model.dec_layers);
  r.take_int("model.dec_heads", c.model.dec_heads);
  r.take_int("model.mlp_ratio", c.model.mlp_ratio);
  r.take_int("model.vocab_buckets", c.model.vocab_buckets);

  r.take_parsed("prompt.variant",
                [&](const std::string& v) { c.prompt.variant = parse_variant(v); });
  r.take_parsed("prompt.modality",
                [&](const std::string& v) { c.prompt.modality = parse_modality(v); });
  r.take_int("prompt.m_v", c.prompt.m_v);
  r.take_int("prompt.m_t", c.prompt.m_t);
  r.take_int("prompt.meta_bottleneck", c.prompt.meta_bottleneck);

  r.take_parsed("attack.kind",
                [&](const std::string& v) { c.attack.kind = parse_attack(v); });
  r.take_int("attack.target_class", c.attack.target_class);
  r.take_double("attack.eval_rho", c.attack.eval_rho);
  r.take_int("attack.trigger_size", c.trigger_size);

  r.take_parsed("curriculum.stages", [&](const std::string& v) {
    c.curriculum.stages = detail::parse_stages(v);
  });

  r.take_int("train.epochs", c.train.epochs);
  r.take_int("train.batch_size", c.train.batch_size);
  r.take_double("train.learning_rate", c.train.learning_rate);
  r.take_double("train.weight_decay", c.train.weight_decay);
  r.take_double("train.lambda", c.train.lambda);
  r.take_double("train.clip_norm", c.train.clip_norm);

  r.take_int("pretrain.epochs", c.pretrain.epochs);
  r.take_int("pretrain.batch_size", c.pretrain.batch_size);
  r.take_double("pretrain.learning_rate", c.pretrain.learning_rate);
  r.take_double("pretrain.weight_decay", c.pretrain.weight_decay);
  r.take_double("pretrain.clip_norm", c.pretrain.clip_norm);
  r.take_int("pretrain.match_warmup", c.pretrain.match_warmup);
  r.take_bool("pretrain.freeze_text", c.pretrain.freeze_text);

  r.take_double("eval.patchdrop_fraction", c.defense.patchdrop_fraction);
  r.take_int("eval.patchdrop_cell", c.defense.patchdrop_cell);
  r.take_parsed("eval.rename",
                [&](const std::string& v) { c.rename = detail::parse_rename(v); });

  r.take_string("inputs.data", c.in_data);
  r.take_string("inputs.core", c.in_core);
  r.take_string("inputs.attack", c.in_attack);

  r.take_string("ablate.param", c.ablate_param);
  r.take_parsed("ablate.values", [&](const std::string& v) {
    c.ablate_values = detail::split_list(v);
  });

  r.finish();

  if (c.schema_version != kConfigSchemaVersion)
    errors.push_back("schema_version: expected " + std::to_string(kConfigSchemaVersion) +
                     ", got " + std::to_string(c.schema_version));
  if (c.n_train < 1) errors.push_back("data.n_train: must be >= 1");
  if (c.n_test < 1) errors.push_back("data.n_test: must be >= 1");
  if (c.n_pretrain < 1) errors.push_back("data.n_pretrain: must be >= 1");
  if (c.n_classes < 2 || c.n_classes > 6)
    errors.push_back("data.n_classes: generator supports 2..6");
  if (c.image_size < 16) errors.push_back("data.image_size: must be >= 16");
  c.model.image_size = c.image_size;
  try {
    c.model.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("model: ") + e.what());
  }
  if (c.attack.target_class < 0 || c.attack.target_class >= c.n_classes)
    errors.push_back("attack.target_class: out of range for data.n_classes");
  if (!(c.attack.eval_rho > 0.0 && c.attack.eval_rho <= 1.0))
    errors.push_back("attack.eval_rho: must be in (0,1]");
  if (c.trigger_size < 1) errors.push_back("attack.trigger_size: must be >= 1");
  c.curriculum.total_epochs = c.train.epochs;
  try {
    c.curriculum.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("curriculum: ") + e.what());
  }
  if (c.train.batch_size < 1) errors.push_back("train.batch_size: must be >= 1");
  if (c.train.learning_rate <= 0) errors.push_back("train.learning_rate: must be > 0");
  if (c.train.lambda < 0) errors.push_back("train.lambda: must be >= 0");
  if (c.pretrain.epochs < 1) errors.push_back("pretrain.epochs: must be >= 1");
  if (c.prompt.m_v < 1 || c.prompt.m_t < 1 || c.prompt.meta_bottleneck < 1)
    errors.push_back("prompt: token and bottleneck counts must be >= 1");
  if (!(c.defense.patchdrop_fraction >= 0.0 && c.defense.patchdrop_fraction <= 1.0))
    errors.push_back("eval.patchdrop_fraction: must be in [0,1]");
  if (c.defense.patchdrop_cell < 1) errors.push_back("eval.patchdrop_cell: must be >= 1");
  if (!c.ablate_param.empty() && c.ablate_values.empty())
    errors.push_back("ablate.values: required when ablate.param is set");

  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw config_error(msg);
  }
  return c;
}

inline KvConfig ExperimentConfig::to_kv() const {
  KvConfig kv;
  auto& v = kv.values;
  v["schema_version"] = std::to_string(schema_version);
  v["seed"] = std::to_string(seed);
  if (!out_root.empty()) v["out_root"] = out_root;

  v["data.n_train"] = std::to_string(n_train);
  v["data.n_test"] = std::to_string(n_test);
  v["data.n_pretrain"] = std::to_string(n_pretrain);
  v["data.image_size"] = std::to_string(image_size);
  v["data.n_classes"] = std::to_string(n_classes);
  v["data.min_objects"] = std::to_string(min_objects);
  v["data.max_objects"] = std::to_string(max_objects);
  v["data.min_size"] = std::to_string(min_size);
  v["data.max_size"] = std::to_string(max_size);

  v["model.patch"] = std::to_string(model.patch);
  v["model.d_v"] = std::to_string(model.d_v);
  v["model.enc_layers"] = std::to_string(model.enc_layers);
  v["model.enc_heads"] = std::to_string(model.enc_heads);
  v["model.d_t"] = std::to_string(model.d_t);
  v["model.text_layers"] = std::to_string(model.text_layers);
  v["model.text_heads"] = std::to_string(model.text_heads);
  v["model.text_mlp_ratio"] = std::to_string(model.text_mlp_ratio);
  v["model.n_queries"] = std::to_string(model.n_queries);
  v["model.dec_layers"] = std::to_string(model.dec_layers);
  v["model.dec_heads"] = std::to_string(model.dec_heads);
  v["model.mlp_ratio"] = std::to_string(model.mlp_ratio);
  v["model.vocab_buckets"] = std::to_string(model.vocab_buckets);

  v["prompt.variant"] = to_string(prompt.variant);
  v["prompt.modality"] = to_string(prompt.modality);
  v["prompt.m_v"] = std::to_string(prompt.m_v);
  v["prompt.m_t"] = std::to_string(prompt.m_t);
  v["prompt.meta_bottleneck"] = std::to_string(prompt.meta_bottleneck);

  v["attack.kind"] = to_string(attack.kind);
  v["attack.target_class"] = std::to_string(attack.target_class);
  v["attack.eval_rho"] = detail::format_double(attack.eval_rho);
  v["attack.trigger_size"] = std::to_string(trigger_size);

  v["curriculum.stages"] = detail::stages_to_string(curriculum.stages);

  v["train.epochs"] = std::to_string(train.epochs);
  v["train.batch_size"] = std::to_string(train.batch_size);
  v["train.learning_rate"] = detail::format_double(train.learning_rate);
  v["train.weight_decay"] = detail::format_double(train.weight_decay);
  v["train.lambda"] = detail::format_double(train.lambda);
  v["train.clip_norm"] = detail::format_double(train.clip_norm);

  v["pretrain.epochs"] = std::to_string(pretrain.epochs);
  v["pretrain.batch_size"] = std::to_string(pretrain.batch_size);
  v["pretrain.learning_rate"] = detail::format_double(pretrain.learning_rate);
  v["pretrain.weight_decay"] = detail::format_double(pretrain.weight_decay);
  v["pretrain.clip_norm"] = detail::format_double(pretrain.clip_norm);
  v["pretrain.match_warmup"] = std::to_string(pretrain.match_warmup);
  v["pretrain.freeze_text"] = pretrain.freeze_text ? "true" : "false";

  v["eval.patchdrop_fraction"] = detail::format_double(defense.patchdrop_fraction);
  v["eval.patchdrop_cell"] = std::to_string(defense.patchdrop_cell);
  if (!rename.empty()) v["eval.rename"] = detail::rename_to_string(rename);

  if (!in_data.empty()) v["inputs.data"] = in_data;
  if (!in_core.empty()) v["inputs.core"] = in_core;
  if (!in_attack.empty()) v["inputs.attack"] = in_attack;

  if (!ablate_param.empty()) {
    v["ablate.param"] = ablate_param;
    std::string joined;
    for (size_t i = 0; i < ablate_values.size(); ++i)
      joined += (i ? "," : "") + ablate_values[i];
    v["ablate.values"] = joined;
  }
  return kv;
}

}  // namespace trap
