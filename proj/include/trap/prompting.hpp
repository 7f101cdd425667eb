#pragma once

// Dual-modality prompt tuning. Vision prompts are prepended per encoder
// layer; the text side carries learned context tokens in one of several
// arrangements, optionally conditioned on the image through a small meta
// network. The frozen detector is never modified, only read.

#include <string>
#include <vector>

#include "trap/checkpoint.hpp"
#include "trap/common.hpp"
#include "trap/model.hpp"

namespace trap {

enum class PromptVariant { cocoop_det, coop, coop_class, coop_new_class, glip_style };
enum class PromptModality { both, vision, text };

inline PromptVariant parse_variant(const std::string& s) {
  if (s == "cocoop-det") return PromptVariant::cocoop_det;
  if (s == "coop") return PromptVariant::coop;
  if (s == "coop-class") return PromptVariant::coop_class;
  if (s == "coop-new-class") return PromptVariant::coop_new_class;
  if (s == "glip-style") return PromptVariant::glip_style;
  throw config_error("unknown prompt variant: " + s);
}

inline const char* to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::cocoop_det: return "cocoop-det";
    case PromptVariant::coop: return "coop";
    case PromptVariant::coop_class: return "coop-class";
    case PromptVariant::coop_new_class: return "coop-new-class";
    case PromptVariant::glip_style: return "glip-style";
  }
  return "?";
}

inline PromptModality parse_modality(const std::string& s) {
  if (s == "both") return PromptModality::both;
  if (s == "vision") return PromptModality::vision;
  if (s == "text") return PromptModality::text;
  throw config_error("unknown prompt modality: " + s);
}

inline const char* to_string(PromptModality m) {
  switch (m) {
    case PromptModality::both: return "both";
    case PromptModality::vision: return "vision";
    case PromptModality::text: return "text";
  }
  return "?";
}

struct PromptConfig {
  PromptVariant variant = PromptVariant::cocoop_det;
  PromptModality modality = PromptModality::both;
  int m_v = 50;  // vision prompt rows per encoder layer
  int m_t = 4;   // text context rows
  int meta_bottleneck = 4;

  bool vision_enabled() const { return modality != PromptModality::text; }
  bool text_enabled() const { return modality != PromptModality::vision; }
};

struct PromptState {
  PromptConfig cfg;
  int n_classes = 0;

  std::vector<ad::Param> vision_prompts;  // one m_v x d_v block per encoder layer
  ad::Param text_ctx;                     // m_t x d_t (shared-context variants)
  std::vector<ad::Param> class_ctx;       // coop-class: per-class m_t x d_t
  ad::Param meta_w1, meta_b1, meta_w2, meta_b2;  // cocoop-det meta network
  ad::Param glip_offsets;                 // glip-style: C x d_t post-encoder offsets
};

inline PromptState init_prompt_state(const DetectorConfig& dcfg, const PromptConfig& pcfg,
                                     int n_classes, uint64_t seed) {
  if (pcfg.m_v < 1 || pcfg.m_t < 1 || pcfg.meta_bottleneck < 1)
    throw config_error("init_prompt_state: prompt sizes must be positive");
  if (n_classes < 1) throw config_error("init_prompt_state: need classes");

  PromptState ps;
  ps.cfg = pcfg;
  ps.n_classes = n_classes;
  auto rng = make_rng(derive_seed(seed, "prompt-init"));

  if (pcfg.vision_enabled()) {
    for (int i = 0; i < dcfg.enc_layers; ++i)
      ps.vision_prompts.emplace_back(ad::uniform_init(pcfg.m_v, dcfg.d_v, dcfg.d_v, rng),
                                     "prompt.vision" + std::to_string(i));
  }
  if (pcfg.text_enabled()) {
    switch (pcfg.variant) {
      case PromptVariant::cocoop_det:
        ps.text_ctx = ad::Param(ad::normal_init(pcfg.m_t, dcfg.d_t, 0.02, rng), "prompt.ctx");
        ps.meta_w1 = ad::Param(ad::uniform_init(dcfg.d_v, pcfg.meta_bottleneck, dcfg.d_v, rng),
                               "prompt.meta.w1");
        ps.meta_b1 = ad::Param(ad::Matrix::Zero(1, pcfg.meta_bottleneck), "prompt.meta.b1");
        ps.meta_w2 = ad::Param(
            ad::uniform_init(pcfg.meta_bottleneck, dcfg.d_t, pcfg.meta_bottleneck, rng),
            "prompt.meta.w2");
        ps.meta_b2 = ad::Param(ad::Matrix::Zero(1, dcfg.d_t), "prompt.meta.b2");
        break;
      case PromptVariant::coop:
      case PromptVariant::coop_new_class:
        ps.text_ctx = ad::Param(ad::normal_init(pcfg.m_t, dcfg.d_t, 0.02, rng), "prompt.ctx");
        break;
      case PromptVariant::coop_class:
        for (int k = 0; k < n_classes; ++k)
          ps.class_ctx.emplace_back(ad::normal_init(pcfg.m_t, dcfg.d_t, 0.02, rng),
                                    "prompt.ctx" + std::to_string(k));
        break;
      case PromptVariant::glip_style:
        ps.glip_offsets =
            ad::Param(ad::Matrix::Zero(n_classes, dcfg.d_t), "prompt.glip_offsets");
        break;
    }
  }
  return ps;
}

/// Parameters the attack optimizes (the trigger is tracked separately).
inline std::vector<ad::Param*> trainable_params(PromptState& ps) {
  std::vector<ad::Param*> out;
  for (auto& p : ps.vision_prompts) out.push_back(&p);
  if (ps.cfg.text_enabled()) {
    switch (ps.cfg.variant) {
      case PromptVariant::cocoop_det:
        out.push_back(&ps.text_ctx);
        out.push_back(&ps.meta_w1);
        out.push_back(&ps.meta_b1);
        out.push_back(&ps.meta_w2);
        out.push_back(&ps.meta_b2);
        break;
      case PromptVariant::coop:
      case PromptVariant::coop_new_class:
        out.push_back(&ps.text_ctx);
        break;
      case PromptVariant::coop_class:
        for (auto& p : ps.class_ctx) out.push_back(&p);
        break;
      case PromptVariant::glip_style:
        out.push_back(&ps.glip_offsets);
        break;
    }
  }
  return out;
}

inline int64_t prompt_param_count(PromptState& ps) {
  int64_t n = 0;
  for (auto* p : trainable_params(ps)) n += p->size();
  return n;
}

/// Image-conditioned text shift pi = W2 relu(W1 pooled + b1) + b2, 1 x d_t.
inline ad::Var meta_net_forward(ad::Graph& g, PromptState& ps, ad::Var pooled) {
  ad::Var h = g.relu(g.linear(pooled, g.param(ps.meta_w1), g.param(ps.meta_b1)));
  return g.linear(h, g.param(ps.meta_w2), g.param(ps.meta_b2));
}

/// Per-class text embeddings (C x d_t, unit rows) under the configured
/// variant. `pooled` is the mean vision feature of the current image; it is
/// only read by cocoop-det.
inline ad::Var prompted_text_embeds(ad::Graph& g, Detector& det, PromptState& ps,
                                    const std::vector<std::vector<int>>& ids_per_class,
                                    ad::Var pooled) {
  if (int(ids_per_class.size()) != ps.n_classes)
    throw dim_error("prompted_text_embeds: class count mismatch");
  if (!ps.cfg.text_enabled()) return text_embed_classes(g, det, ids_per_class);

  switch (ps.cfg.variant) {
    case PromptVariant::cocoop_det: {
      ad::Var pi = meta_net_forward(g, ps, pooled);
      ad::Var ctx = g.add_rowvec(g.param(ps.text_ctx), pi);
      std::vector<ad::Var> contexts(ids_per_class.size(), ctx);
      return text_embed_classes(g, det, ids_per_class, &contexts);
    }
    case PromptVariant::coop: {
      std::vector<ad::Var> contexts(ids_per_class.size(), g.param(ps.text_ctx));
      return text_embed_classes(g, det, ids_per_class, &contexts);
    }
    case PromptVariant::coop_class: {
      std::vector<ad::Var> contexts;
      for (auto& p : ps.class_ctx) contexts.push_back(g.param(p));
      return text_embed_classes(g, det, ids_per_class, &contexts);
    }
    case PromptVariant::coop_new_class: {
      // One shared context prepended once; classes share a single sequence
      // and are pooled over their own token span.
      std::vector<ad::Var> parts = {g.param(ps.text_ctx)};
      for (const auto& ids : ids_per_class) parts.push_back(embed_tokens(g, det, ids));
      ad::Var seq = text_sequence_forward(g, det, g.concat_rows(parts));
      std::vector<ad::Var> rows;
      Eigen::Index at = ps.cfg.m_t;
      for (const auto& ids : ids_per_class) {
        rows.push_back(g.mean_rows(g.slice_rows(seq, at, Eigen::Index(ids.size()))));
        at += Eigen::Index(ids.size());
      }
      return g.l2_normalize_rows(g.concat_rows(rows));
    }
    case PromptVariant::glip_style: {
      // Plain class encodings shifted by learned offsets after the encoder.
      std::vector<ad::Var> rows;
      for (const auto& ids : ids_per_class)
        rows.push_back(g.mean_rows(text_sequence_forward(g, det, embed_tokens(g, det, ids))));
      ad::Var stacked = g.add(g.concat_rows(rows), g.param(ps.glip_offsets));
      return g.l2_normalize_rows(stacked);
    }
  }
  throw config_error("prompted_text_embeds: unreachable variant");
}

/// Full prompted forward pass. `pixels` may be a stamped (graph-connected)
/// image so trigger gradients flow through both the vision path and the
/// meta network.
inline DetOutput detect_prompted(ad::Graph& g, Detector& det, PromptState& ps,
                                 ad::Var pixels,
                                 const std::vector<std::vector<int>>& ids_per_class) {
  DetOutput out;
  if (ps.cfg.vision_enabled()) {
    std::vector<ad::Var> prompts;
    for (auto& p : ps.vision_prompts) prompts.push_back(g.param(p));
    out.memory = vision_forward(g, det, pixels, &prompts);
  } else {
    out.memory = vision_forward(g, det, pixels);
  }
  out.pooled = g.mean_rows(out.memory);
  ad::Var text = prompted_text_embeds(g, det, ps, ids_per_class, out.pooled);
  apply_heads(g, det, out, text);
  return out;
}

inline DetOutput detect_prompted(ad::Graph& g, Detector& det, PromptState& ps,
                                 const ImageSample& img,
                                 const std::vector<std::vector<int>>& ids_per_class) {
  return detect_prompted(g, det, ps, g.constant_ref(img.pixels), ids_per_class);
}

// ---- serialization -------------------------------------------------------------

inline void save_prompts(const std::string& path, PromptState& ps) {
  Checkpoint ck;
  ck.meta = {{"kind", "prompts"},
             {"variant", to_string(ps.cfg.variant)},
             {"modality", to_string(ps.cfg.modality)},
             {"m_v", ps.cfg.m_v},
             {"m_t", ps.cfg.m_t},
             {"meta_bottleneck", ps.cfg.meta_bottleneck},
             {"n_classes", ps.n_classes},
             {"enc_layers", int(ps.vision_prompts.size())}};
  for (auto* p : trainable_params(ps)) ck.add(p->name, p->value);
  save_checkpoint(path, ck);
}

inline PromptState load_prompts(const std::string& path, const DetectorConfig& dcfg) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "prompts")
    throw io_error("not a prompt checkpoint: " + path);
  PromptConfig pcfg;
  pcfg.variant = parse_variant(ck.meta.at("variant").get<std::string>());
  pcfg.modality = parse_modality(ck.meta.at("modality").get<std::string>());
  pcfg.m_v = ck.meta.at("m_v").get<int>();
  pcfg.m_t = ck.meta.at("m_t").get<int>();
  pcfg.meta_bottleneck = ck.meta.at("meta_bottleneck").get<int>();
  int n_classes = ck.meta.at("n_classes").get<int>();

  PromptState ps = init_prompt_state(dcfg, pcfg, n_classes, 0);
  if (pcfg.vision_enabled() &&
      int(ps.vision_prompts.size()) != ck.meta.at("enc_layers").get<int>())
    throw io_error("prompt checkpoint encoder depth mismatch: " + path);
  for (auto* p : trainable_params(ps)) {
    const ad::Matrix& m = ck.tensor(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw io_error("prompt tensor shape mismatch: " + p->name);
    p->value = m;
  }
  return ps;
}

}  // namespace trap
