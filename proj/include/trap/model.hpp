#pragma once

// Miniature open-vocabulary detector: a patch-embedding vision transformer,
// a hashed-vocabulary text encoder, a DETR-style query decoder, and the
// matching-based detection loss. Forward stages are exposed separately so the
// prompting layer can prepend learned tokens at each depth.

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trap/autodiff.hpp"
#include "trap/checkpoint.hpp"
#include "trap/common.hpp"
#include "trap/dataset.hpp"
#include "trap/geometry.hpp"

namespace trap {

struct DetectorConfig {
  int image_size = 64;
  int patch = 8;
  int d_v = 64;
  int enc_layers = 4;
  int enc_heads = 2;
  int d_t = 64;
  int text_layers = 2;
  int text_heads = 2;
  int text_mlp_ratio = 2;
  int n_queries = 20;
  int dec_layers = 3;
  int dec_heads = 2;
  int mlp_ratio = 4;
  int vocab_buckets = 16384;

  int n_patches() const { return (image_size / patch) * (image_size / patch); }
  int patch_dim() const { return patch * patch * 3; }

  void validate() const {
    if (image_size % patch != 0) throw config_error("image_size must be divisible by patch");
    if (d_v % enc_heads != 0 || d_v % dec_heads != 0 || d_t % text_heads != 0)
      throw config_error("head count must divide model width");
    if (n_queries < 1 || enc_layers < 1 || dec_layers < 1 || text_layers < 1)
      throw config_error("layer/query counts must be positive");
  }

  nlohmann::json to_json() const {
    return {{"image_size", image_size}, {"patch", patch},
            {"d_v", d_v},               {"enc_layers", enc_layers},
            {"enc_heads", enc_heads},   {"d_t", d_t},
            {"text_layers", text_layers},
            {"text_heads", text_heads}, {"text_mlp_ratio", text_mlp_ratio},
            {"n_queries", n_queries},   {"dec_layers", dec_layers},
            {"dec_heads", dec_heads},   {"mlp_ratio", mlp_ratio},
            {"vocab_buckets", vocab_buckets}};
  }

  static DetectorConfig from_json(const nlohmann::json& j) {
    DetectorConfig c;
    c.image_size = j.at("image_size");
    c.patch = j.at("patch");
    c.d_v = j.at("d_v");
    c.enc_layers = j.at("enc_layers");
    c.enc_heads = j.at("enc_heads");
    c.d_t = j.at("d_t");
    c.text_layers = j.at("text_layers");
    c.text_heads = j.at("text_heads");
    c.text_mlp_ratio = j.at("text_mlp_ratio");
    c.n_queries = j.at("n_queries");
    c.dec_layers = j.at("dec_layers");
    c.dec_heads = j.at("dec_heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.vocab_buckets = j.at("vocab_buckets");
    c.validate();
    return c;
  }
};

struct LayerNormParams {
  ad::Param gamma, beta;
};

struct AttnParams {
  ad::Param wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MlpParams {
  ad::Param w1, b1, w2, b2;
};

struct EncLayerParams {
  LayerNormParams ln1;
  AttnParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
};

struct DecLayerParams {
  LayerNormParams ln1;
  AttnParams self_attn;
  LayerNormParams ln2;
  AttnParams cross_attn;
  LayerNormParams ln3;
  MlpParams mlp;
};

class Detector {
 public:
  DetectorConfig cfg;

  ad::Param patch_w, patch_b, pos_emb;
  std::vector<EncLayerParams> enc;
  LayerNormParams enc_final;
  ad::Param tok_emb;
  std::vector<EncLayerParams> text;
  LayerNormParams text_final;
  ad::Param queries;
  std::vector<DecLayerParams> dec;
  LayerNormParams dec_final;
  ad::Param w_qt;
  MlpParams box_head;
  ad::Param box_anchor;
  ad::Param logit_scale, logit_bias;

  Detector(const DetectorConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    auto rng = make_rng(derive_seed(seed, "detector-init"));
    auto lin = [&](ad::Param& w, ad::Param& b, int in, int out, const std::string& name) {
      w = ad::Param(ad::uniform_init(in, out, in, rng), name + ".w");
      b = ad::Param(ad::Matrix::Zero(1, out), name + ".b");
    };
    auto ln = [&](LayerNormParams& l, int dim, const std::string& name) {
      l.gamma = ad::Param(ad::Matrix::Ones(1, dim), name + ".gamma");
      l.beta = ad::Param(ad::Matrix::Zero(1, dim), name + ".beta");
    };
    auto attn = [&](AttnParams& a, int dim, const std::string& name) {
      lin(a.wq, a.bq, dim, dim, name + ".q");
      lin(a.wk, a.bk, dim, dim, name + ".k");
      lin(a.wv, a.bv, dim, dim, name + ".v");
      lin(a.wo, a.bo, dim, dim, name + ".o");
    };
    auto mlp = [&](MlpParams& m, int dim, int hidden, const std::string& name) {
      lin(m.w1, m.b1, dim, hidden, name + ".fc1");
      lin(m.w2, m.b2, hidden, dim, name + ".fc2");
    };

    lin(patch_w, patch_b, cfg.patch_dim(), cfg.d_v, "patch");
    pos_emb = ad::Param(ad::normal_init(cfg.n_patches(), cfg.d_v, 0.02, rng), "pos_emb");

    enc.resize(size_t(cfg.enc_layers));
    for (int i = 0; i < cfg.enc_layers; ++i) {
      std::string p = "enc" + std::to_string(i);
      ln(enc[size_t(i)].ln1, cfg.d_v, p + ".ln1");
      attn(enc[size_t(i)].attn, cfg.d_v, p + ".attn");
      ln(enc[size_t(i)].ln2, cfg.d_v, p + ".ln2");
      mlp(enc[size_t(i)].mlp, cfg.d_v, cfg.d_v * cfg.mlp_ratio, p + ".mlp");
    }
    ln(enc_final, cfg.d_v, "enc_final");

    tok_emb = ad::Param(ad::normal_init(cfg.vocab_buckets, cfg.d_t, 0.02, rng), "tok_emb");
    text.resize(size_t(cfg.text_layers));
    for (int i = 0; i < cfg.text_layers; ++i) {
      std::string p = "text" + std::to_string(i);
      ln(text[size_t(i)].ln1, cfg.d_t, p + ".ln1");
      attn(text[size_t(i)].attn, cfg.d_t, p + ".attn");
      ln(text[size_t(i)].ln2, cfg.d_t, p + ".ln2");
      mlp(text[size_t(i)].mlp, cfg.d_t, cfg.d_t * cfg.text_mlp_ratio, p + ".mlp");
    }
    ln(text_final, cfg.d_t, "text_final");

    queries = ad::Param(ad::normal_init(cfg.n_queries, cfg.d_v, 0.02, rng), "queries");
    dec.resize(size_t(cfg.dec_layers));
    for (int i = 0; i < cfg.dec_layers; ++i) {
      std::string p = "dec" + std::to_string(i);
      ln(dec[size_t(i)].ln1, cfg.d_v, p + ".ln1");
      attn(dec[size_t(i)].self_attn, cfg.d_v, p + ".self");
      ln(dec[size_t(i)].ln2, cfg.d_v, p + ".ln2");
      attn(dec[size_t(i)].cross_attn, cfg.d_v, p + ".cross");
      ln(dec[size_t(i)].ln3, cfg.d_v, p + ".ln3");
      mlp(dec[size_t(i)].mlp, cfg.d_v, cfg.d_v * cfg.mlp_ratio, p + ".mlp");
    }
    ln(dec_final, cfg.d_v, "dec_final");

    w_qt = ad::Param(ad::uniform_init(cfg.d_v, cfg.d_t, cfg.d_v, rng), "w_qt");
    lin(box_head.w1, box_head.b1, cfg.d_v, cfg.d_v, "box_head.fc1");
    lin(box_head.w2, box_head.b2, cfg.d_v, 4, "box_head.fc2");
    // Per-query bias in pre-sigmoid space, seeded on a grid of center-size
    // anchors. Queries own distinct regions from step one, which keeps the
    // matching stable instead of collapsing every box onto the image mean.
    {
      int cols = int(std::ceil(std::sqrt(double(cfg.n_queries))));
      int rows = (cfg.n_queries + cols - 1) / cols;
      auto logit = [](double p) { return std::log(p / (1.0 - p)); };
      ad::Matrix a(cfg.n_queries, 4);
      for (int q = 0; q < cfg.n_queries; ++q) {
        a(q, 0) = logit((q % cols + 0.5) / cols);
        a(q, 1) = logit((q / cols + 0.5) / rows);
        a(q, 2) = logit(0.35);
        a(q, 3) = logit(0.35);
      }
      box_anchor = ad::Param(a, "box_anchor");
    }
    logit_scale = ad::Param(ad::Matrix::Constant(1, 1, std::log(10.0)), "logit_scale");
    logit_bias = ad::Param(ad::Matrix::Constant(1, 1, -2.5), "logit_bias");
  }

  std::vector<std::pair<std::string, ad::Param*>> named_params() {
    std::vector<std::pair<std::string, ad::Param*>> out;
    auto add = [&](ad::Param& p) { out.emplace_back(p.name, &p); };
    auto add_ln = [&](LayerNormParams& l) {
      add(l.gamma);
      add(l.beta);
    };
    auto add_attn = [&](AttnParams& a) {
      add(a.wq); add(a.bq); add(a.wk); add(a.bk);
      add(a.wv); add(a.bv); add(a.wo); add(a.bo);
    };
    auto add_mlp = [&](MlpParams& m) {
      add(m.w1); add(m.b1); add(m.w2); add(m.b2);
    };
    add(patch_w);
    add(patch_b);
    add(pos_emb);
    for (auto& l : enc) {
      add_ln(l.ln1);
      add_attn(l.attn);
      add_ln(l.ln2);
      add_mlp(l.mlp);
    }
    add_ln(enc_final);
    add(tok_emb);
    for (auto& l : text) {
      add_ln(l.ln1);
      add_attn(l.attn);
      add_ln(l.ln2);
      add_mlp(l.mlp);
    }
    add_ln(text_final);
    add(queries);
    for (auto& l : dec) {
      add_ln(l.ln1);
      add_attn(l.self_attn);
      add_ln(l.ln2);
      add_attn(l.cross_attn);
      add_ln(l.ln3);
      add_mlp(l.mlp);
    }
    add_ln(dec_final);
    add(w_qt);
    add_mlp(box_head);
    add(box_anchor);
    add(logit_scale);
    add(logit_bias);
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (auto& [name, p] : named_params()) n += p->size();
    return n;
  }

  void save(const std::string& path, nlohmann::json extra_meta = {}) {
    Checkpoint ck;
    ck.meta = {{"kind", "model"}, {"config", cfg.to_json()}};
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    for (auto& [name, p] : named_params()) ck.add(name, p->value);
    save_checkpoint(path, ck);
  }

  static Detector load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "model") throw io_error("not a model checkpoint: " + path);
    Detector d(DetectorConfig::from_json(ck.meta.at("config")), 0);
    for (auto& [name, p] : d.named_params()) {
      const ad::Matrix& m = ck.tensor(name);
      if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
        throw io_error("model tensor shape mismatch: " + name);
      p->value = m;
    }
    return d;
  }
};

// ---- forward stages ---------------------------------------------------------

namespace nn {

/// Scaled dot-product attention. `q_pos` and `k_pos`, when given, are added
/// to the query and key inputs only (never to values), so positional signal
/// reaches the attention logits at full strength in every layer.
inline ad::Var attention(ad::Graph& g, AttnParams& p, ad::Var xq, ad::Var xkv, int heads,
                         const ad::Var* q_pos = nullptr, const ad::Var* k_pos = nullptr) {
  Eigen::Index d = g.cols(xq);
  if (d % heads != 0) throw dim_error("attention: heads must divide width");
  Eigen::Index dh = d / heads;
  ad::Var Q = g.linear(q_pos ? g.add(xq, *q_pos) : xq, g.param(p.wq), g.param(p.bq));
  ad::Var K = g.linear(k_pos ? g.add(xkv, *k_pos) : xkv, g.param(p.wk), g.param(p.bk));
  ad::Var V = g.linear(xkv, g.param(p.wv), g.param(p.bv));
  std::vector<ad::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = g.slice_cols(Q, h * dh, dh);
    ad::Var kh = g.slice_cols(K, h * dh, dh);
    ad::Var vh = g.slice_cols(V, h * dh, dh);
    ad::Var scores = g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
    outs.push_back(g.matmul(g.softmax_rows(scores), vh));
  }
  return g.linear(g.concat_cols(outs), g.param(p.wo), g.param(p.bo));
}

inline ad::Var layer_norm(ad::Graph& g, LayerNormParams& p, ad::Var x) {
  return g.layernorm_rows(x, g.param(p.gamma), g.param(p.beta));
}

inline ad::Var mlp_block(ad::Graph& g, MlpParams& p, ad::Var x) {
  ad::Var h = g.relu(g.linear(x, g.param(p.w1), g.param(p.b1)));
  return g.linear(h, g.param(p.w2), g.param(p.b2));
}

// Pre-LN transformer encoder layer.
inline ad::Var encoder_layer(ad::Graph& g, EncLayerParams& p, ad::Var x, int heads,
                             const ad::Var* pos = nullptr) {
  ad::Var h = layer_norm(g, p.ln1, x);
  x = g.add(x, attention(g, p.attn, h, h, heads, pos, pos));
  ad::Var h2 = layer_norm(g, p.ln2, x);
  return g.add(x, mlp_block(g, p.mlp, h2));
}

/// `q_embed` is the original query embedding re-added to attention queries
/// and self-attention keys each layer; `mem_pos` is the vision positional
/// table re-added to cross-attention keys.
inline ad::Var decoder_layer(ad::Graph& g, DecLayerParams& p, ad::Var x, ad::Var memory,
                             int heads, const ad::Var* q_embed = nullptr,
                             const ad::Var* mem_pos = nullptr) {
  ad::Var h = layer_norm(g, p.ln1, x);
  x = g.add(x, attention(g, p.self_attn, h, h, heads, q_embed, q_embed));
  ad::Var h2 = layer_norm(g, p.ln2, x);
  x = g.add(x, attention(g, p.cross_attn, h2, memory, heads, q_embed, mem_pos));
  ad::Var h3 = layer_norm(g, p.ln3, x);
  return g.add(x, mlp_block(g, p.mlp, h3));
}

}  // namespace nn

/// Split the (H*W)x3 pixel matrix into flattened patch rows, differentiably.
/// Output is n_patches x (patch*patch*3); columns are ordered offset-major
/// with the 3 channels of each in-patch offset adjacent.
inline ad::Var patchify(ad::Graph& g, const DetectorConfig& cfg, ad::Var pixels) {
  if (g.rows(pixels) != Eigen::Index(cfg.image_size) * cfg.image_size || g.cols(pixels) != 3)
    throw dim_error("patchify: pixel matrix does not match configured image size");
  int side = cfg.image_size / cfg.patch;
  std::vector<ad::Var> cols;
  cols.reserve(size_t(cfg.patch) * cfg.patch);
  for (int dy = 0; dy < cfg.patch; ++dy)
    for (int dx = 0; dx < cfg.patch; ++dx) {
      std::vector<int> idx(size_t(side) * side);
      for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px)
          idx[size_t(py) * side + px] =
              (py * cfg.patch + dy) * cfg.image_size + (px * cfg.patch + dx);
      cols.push_back(g.gather_rows(pixels, idx));
    }
  return g.concat_cols(cols);
}

/// Vision encoder. `layer_prompts`, when given, holds one m_v x d_v node per
/// encoder layer; prompt rows are prepended before the layer and their
/// outputs discarded after it. Returns the final-LN memory (n_patches x d_v).
inline ad::Var vision_forward(ad::Graph& g, Detector& det, ad::Var pixels,
                              const std::vector<ad::Var>* layer_prompts = nullptr) {
  const DetectorConfig& cfg = det.cfg;
  if (layer_prompts && int(layer_prompts->size()) != cfg.enc_layers)
    throw dim_error("vision_forward: need one prompt block per encoder layer");
  ad::Var pos = g.param(det.pos_emb);
  ad::Var tokens = g.add(g.linear(patchify(g, cfg, pixels), g.param(det.patch_w),
                                  g.param(det.patch_b)),
                         pos);
  for (int i = 0; i < cfg.enc_layers; ++i) {
    EncLayerParams& layer = det.enc[size_t(i)];
    if (layer_prompts) {
      ad::Var p = (*layer_prompts)[size_t(i)];
      if (g.cols(p) != cfg.d_v) throw dim_error("vision_forward: prompt width");
      Eigen::Index m = g.rows(p);
      // prompt rows carry no spatial position, so their pos block is zero
      ad::Var padded_pos =
          g.concat_rows({g.constant(ad::Matrix::Zero(m, cfg.d_v)), pos});
      ad::Var y = nn::encoder_layer(g, layer, g.concat_rows({p, tokens}), cfg.enc_heads,
                                    &padded_pos);
      tokens = g.slice_rows(y, m, cfg.n_patches());
    } else {
      tokens = nn::encoder_layer(g, layer, tokens, cfg.enc_heads, &pos);
    }
  }
  return nn::layer_norm(g, det.enc_final, tokens);
}

/// Hashed token ids for each class name.
inline std::vector<std::vector<int>> class_token_ids(const std::vector<std::string>& names,
                                                     int vocab_buckets) {
  std::vector<std::vector<int>> out;
  for (const auto& name : names) {
    std::vector<int> ids;
    for (const auto& tok : tokenize(name))
      ids.push_back(int(fnv1a(tok) % uint64_t(vocab_buckets)));
    if (ids.empty()) throw config_error("class name tokenizes to nothing: " + name);
    out.push_back(std::move(ids));
  }
  return out;
}

inline ad::Var embed_tokens(ad::Graph& g, Detector& det, const std::vector<int>& ids) {
  return g.gather_rows(g.param(det.tok_emb), ids);
}

/// Self-attention stack of the text encoder plus its final layer norm.
inline ad::Var text_sequence_forward(ad::Graph& g, Detector& det, ad::Var seq) {
  for (auto& layer : det.text) seq = nn::encoder_layer(g, layer, seq, det.cfg.text_heads);
  return nn::layer_norm(g, det.text_final, seq);
}

/// Per-class text embeddings (C x d_t, unit rows). `contexts`, when given,
/// supplies the learned context rows prepended to class k's tokens.
inline ad::Var text_embed_classes(ad::Graph& g, Detector& det,
                                  const std::vector<std::vector<int>>& ids_per_class,
                                  const std::vector<ad::Var>* contexts = nullptr) {
  if (contexts && contexts->size() != ids_per_class.size())
    throw dim_error("text_embed_classes: one context block per class required");
  std::vector<ad::Var> rows;
  for (size_t k = 0; k < ids_per_class.size(); ++k) {
    ad::Var toks = embed_tokens(g, det, ids_per_class[k]);
    ad::Var seq = contexts ? g.concat_rows({(*contexts)[k], toks}) : toks;
    rows.push_back(g.mean_rows(text_sequence_forward(g, det, seq)));
  }
  return g.l2_normalize_rows(g.concat_rows(rows));
}

/// Query states after every decoder layer, each through the shared final
/// norm. Training applies the heads to all of them; inference uses the last.
inline std::vector<ad::Var> decode_queries_layers(ad::Graph& g, Detector& det,
                                                  ad::Var memory) {
  std::vector<ad::Var> out;
  ad::Var q_embed = g.param(det.queries);
  ad::Var mem_pos = g.param(det.pos_emb);
  ad::Var x = q_embed;
  for (auto& layer : det.dec) {
    x = nn::decoder_layer(g, layer, x, memory, det.cfg.dec_heads, &q_embed, &mem_pos);
    out.push_back(nn::layer_norm(g, det.dec_final, x));
  }
  return out;
}

/// Query decoder over the vision memory; returns descriptors (n_q x d_v).
inline ad::Var decode_queries(ad::Graph& g, Detector& det, ad::Var memory) {
  return decode_queries_layers(g, det, memory).back();
}

/// Normalized cxcywh boxes in (0,1), one row per query. The head predicts an
/// offset from each query's anchor in pre-sigmoid space.
inline ad::Var box_head_forward(ad::Graph& g, Detector& det, ad::Var desc) {
  ad::Var h = g.relu(g.linear(desc, g.param(det.box_head.w1), g.param(det.box_head.b1)));
  ad::Var off = g.linear(h, g.param(det.box_head.w2), g.param(det.box_head.b2));
  return g.sigmoid(g.add(off, g.param(det.box_anchor)));
}

/// Query-class logits: cosine similarity between projected descriptors and
/// text embeddings, sharpened by a learned scale and shifted by a shared bias.
inline ad::Var class_logits(ad::Graph& g, Detector& det, ad::Var desc, ad::Var text_embeds) {
  ad::Var proj = g.l2_normalize_rows(g.matmul(desc, g.param(det.w_qt)));
  ad::Var sim = g.matmul_nt(proj, text_embeds);
  return g.add_scalar(g.scale_by(sim, g.exp(g.param(det.logit_scale))),
                      g.param(det.logit_bias));
}

struct DetOutput {
  ad::Var memory;  // n_patches x d_v
  ad::Var pooled;  // 1 x d_v
  ad::Var desc;    // n_q x d_v
  ad::Var boxes;   // n_q x 4, normalized cxcywh
  ad::Var logits;  // n_q x C
  std::vector<ad::Var> aux_boxes;   // intermediate decoder layers
  std::vector<ad::Var> aux_logits;
};

/// Shared box and class heads over every decoder layer; the last one is the
/// main output, the rest feed auxiliary losses.
inline void apply_heads(ad::Graph& g, Detector& det, DetOutput& out, ad::Var text) {
  auto layers = decode_queries_layers(g, det, out.memory);
  out.desc = layers.back();
  out.boxes = box_head_forward(g, det, out.desc);
  out.logits = class_logits(g, det, out.desc, text);
  for (size_t i = 0; i + 1 < layers.size(); ++i) {
    out.aux_boxes.push_back(box_head_forward(g, det, layers[i]));
    out.aux_logits.push_back(class_logits(g, det, layers[i], text));
  }
}

/// Prompt-free forward pass over one image.
inline DetOutput detect_plain(ad::Graph& g, Detector& det, const ImageSample& img,
                              const std::vector<std::vector<int>>& ids_per_class) {
  DetOutput out;
  ad::Var pixels = g.constant_ref(img.pixels);
  out.memory = vision_forward(g, det, pixels);
  out.pooled = g.mean_rows(out.memory);
  ad::Var text = text_embed_classes(g, det, ids_per_class);
  apply_heads(g, det, out, text);
  return out;
}

// ---- box conversions ----------------------------------------------------------

inline std::array<double, 4> box_to_cxcywh_norm(const BoxXYXY& b, int image_size) {
  double s = double(image_size);
  return {b.cx() / s, b.cy() / s, b.width() / s, b.height() / s};
}

inline BoxXYXY box_from_cxcywh_norm(double cx, double cy, double w, double h,
                                    int image_size) {
  double s = double(image_size);
  return {(cx - w / 2) * s, (cy - h / 2) * s, (cx + w / 2) * s, (cy + h / 2) * s};
}

/// cxcywh rows -> xyxy rows (graph op).
inline ad::Var boxes_to_xyxy(ad::Graph& g, ad::Var b) {
  ad::Var cx = g.slice_cols(b, 0, 1), cy = g.slice_cols(b, 1, 1);
  ad::Var hw = g.scale(g.slice_cols(b, 2, 1), 0.5), hh = g.scale(g.slice_cols(b, 3, 1), 0.5);
  return g.concat_cols({g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)});
}

/// Rowwise GIoU of paired xyxy boxes; returns an M x 1 column.
inline ad::Var giou_pairs(ad::Graph& g, ad::Var a, ad::Var b) {
  if (g.cols(a) != 4 || g.cols(b) != 4 || g.rows(a) != g.rows(b))
    throw dim_error("giou_pairs: paired 4-column boxes required");
  auto col = [&](ad::Var m, int c) { return g.slice_cols(m, c, 1); };
  ad::Var ax1 = col(a, 0), ay1 = col(a, 1), ax2 = col(a, 2), ay2 = col(a, 3);
  ad::Var bx1 = col(b, 0), by1 = col(b, 1), bx2 = col(b, 2), by2 = col(b, 3);
  ad::Var iw = g.relu(g.sub(g.min_ew(ax2, bx2), g.max_ew(ax1, bx1)));
  ad::Var ih = g.relu(g.sub(g.min_ew(ay2, by2), g.max_ew(ay1, by1)));
  ad::Var inter = g.mul(iw, ih);
  ad::Var area_a = g.mul(g.sub(ax2, ax1), g.sub(ay2, ay1));
  ad::Var area_b = g.mul(g.sub(bx2, bx1), g.sub(by2, by1));
  ad::Var uni = g.sub(g.add(area_a, area_b), inter);
  ad::Var hull = g.mul(g.sub(g.max_ew(ax2, bx2), g.min_ew(ax1, bx1)),
                       g.sub(g.max_ew(ay2, by2), g.min_ew(ay1, by1)));
  return g.sub(g.div(inter, uni), g.div(g.sub(hull, uni), hull));
}

// ---- assignment ------------------------------------------------------------------

/// Minimum-cost one-to-one assignment of every column (target) to a distinct
/// row (query). cost is n x m with m <= n; returns, per column, the assigned
/// row index.
inline std::vector<int> hungarian_assign(const ad::Matrix& cost) {
  int n = int(cost.rows()), m = int(cost.cols());
  if (m > n) throw dim_error("hungarian_assign: more targets than queries");
  if (m == 0) return {};
  if (!cost.allFinite()) throw numeric_error("hungarian_assign: non-finite cost");

  // Potential-based shortest augmenting paths on the transposed (m x n) matrix.
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(m) + 1, 0), v(size_t(n) + 1, 0);
  std::vector<int> p(size_t(n) + 1, 0), way(size_t(n) + 1, 0);
  for (int i = 1; i <= m; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(size_t(n) + 1, kInf);
    std::vector<char> used(size_t(n) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      int i0 = p[size_t(j0)], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j)
        if (!used[size_t(j)]) {
          double cur = cost(j - 1, i0 - 1) - u[size_t(i0)] - v[size_t(j)];
          if (cur < minv[size_t(j)]) {
            minv[size_t(j)] = cur;
            way[size_t(j)] = j0;
          }
          if (minv[size_t(j)] < delta) {
            delta = minv[size_t(j)];
            j1 = j;
          }
        }
      for (int j = 0; j <= n; ++j)
        if (used[size_t(j)]) {
          u[size_t(p[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      j0 = j1;
    } while (p[size_t(j0)] != 0);
    do {
      int j1 = way[size_t(j0)];
      p[size_t(j0)] = p[size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assign(size_t(m), -1);
  for (int j = 1; j <= n; ++j)
    if (p[size_t(j)] != 0) assign[size_t(p[size_t(j)]) - 1] = j - 1;
  return assign;
}

// ---- detection loss ---------------------------------------------------------------

struct MatchWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// Match ground truth boxes to queries with the same weighted cost the loss
/// uses: w_cls*(1-p_t) + w_l1*L1(cxcywh) + w_giou*(1-GIoU).
inline std::vector<int> match_queries(const ad::Matrix& boxes_val,
                                      const ad::Matrix& logits_val,
                                      const std::vector<Annotation>& gts, int image_size,
                                      const MatchWeights& w = {}) {
  int n_q = int(boxes_val.rows());
  int m = int(gts.size());
  if (m == 0) return {};
  if (m > n_q) throw dim_error("match_queries: more ground truth boxes than queries");
  ad::Matrix cost(n_q, m);
  for (int q = 0; q < n_q; ++q) {
    BoxXYXY pb = box_from_cxcywh_norm(boxes_val(q, 0), boxes_val(q, 1), boxes_val(q, 2),
                                      boxes_val(q, 3), image_size);
    for (int j = 0; j < m; ++j) {
      const Annotation& gt = gts[size_t(j)];
      double pt = 1.0 / (1.0 + std::exp(-logits_val(q, gt.class_id)));
      auto tgt = box_to_cxcywh_norm(gt.box, image_size);
      double l1 = std::abs(boxes_val(q, 0) - tgt[0]) + std::abs(boxes_val(q, 1) - tgt[1]) +
                  std::abs(boxes_val(q, 2) - tgt[2]) + std::abs(boxes_val(q, 3) - tgt[3]);
      double gi = pb.valid() ? giou(pb, gt.box) : -1.0;
      cost(q, j) = w.cls * (1.0 - pt) + w.l1 * l1 + w.giou * (1.0 - gi);
    }
  }
  return hungarian_assign(cost);
}

/// Focal binary cross-entropy over every (query, class) logit, gamma = 2.
inline ad::Var sigmoid_focal_loss(ad::Graph& g, ad::Var logits, const ad::Matrix& targets,
                                  double alpha = 0.25) {
  if (g.rows(logits) != targets.rows() || g.cols(logits) != targets.cols())
    throw dim_error("sigmoid_focal_loss: target shape");
  ad::Var z = logits;
  ad::Var nz = g.scale(z, -1.0);
  ad::Var p = g.sigmoid(z);
  ad::Var q = g.sigmoid(nz);
  ad::Var pos = g.scale(g.mul(g.square(q), g.softplus(nz)), alpha);       // -alpha (1-p)^2 log p
  ad::Var neg = g.scale(g.mul(g.square(p), g.softplus(z)), 1.0 - alpha);  // -(1-a) p^2 log(1-p)
  ad::Var t = g.constant(targets);
  ad::Var ones = g.constant(ad::Matrix::Ones(targets.rows(), targets.cols()));
  return g.sum(g.add(g.mul(t, pos), g.mul(g.sub(ones, t), neg)));
}

struct DetectionLoss {
  ad::Var total;
  double cls_value = 0;
  double loc_value = 0;
  std::vector<int> gt_to_query;
};

/// Matching-based detection loss for one image:
///   focal classification over all logits
/// + per matched pair 5 * L1(normalized cxcywh) + 2 * (1 - GIoU).
/// `fixed_match` overrides the Hungarian assignment; gradient checks use it
/// to stay on one smooth piece of the otherwise piecewise loss.
inline DetectionLoss detection_loss(ad::Graph& g, ad::Var boxes, ad::Var logits,
                                    const std::vector<Annotation>& gts, int image_size,
                                    int n_classes,
                                    const std::vector<int>* fixed_match = nullptr) {
  if (g.cols(logits) != n_classes) throw dim_error("detection_loss: logit width");
  for (const auto& gt : gts)
    if (gt.class_id < 0 || gt.class_id >= n_classes)
      throw config_error("detection_loss: ground truth class out of range");

  DetectionLoss out;
  if (fixed_match) {
    if (fixed_match->size() != gts.size())
      throw dim_error("detection_loss: fixed match size");
    out.gt_to_query = *fixed_match;
  } else {
    out.gt_to_query = match_queries(g.val(boxes), g.val(logits), gts, image_size);
  }

  ad::Matrix targets = ad::Matrix::Zero(g.rows(logits), n_classes);
  for (size_t j = 0; j < gts.size(); ++j)
    targets(out.gt_to_query[j], gts[j].class_id) = 1.0;
  ad::Var cls = sigmoid_focal_loss(g, logits, targets);
  out.cls_value = g.scalar(cls);

  if (gts.empty()) {
    out.total = cls;
    return out;
  }

  ad::Matrix gt_cxcywh(Eigen::Index(gts.size()), 4);
  for (size_t j = 0; j < gts.size(); ++j) {
    auto t = box_to_cxcywh_norm(gts[j].box, image_size);
    for (int c = 0; c < 4; ++c) gt_cxcywh(Eigen::Index(j), c) = t[size_t(c)];
  }
  ad::Var pred = g.gather_rows(boxes, out.gt_to_query);
  ad::Var gt = g.constant(gt_cxcywh);
  ad::Var l1 = g.scale(g.sum(g.abs(g.sub(pred, gt))), 5.0);
  ad::Var gi = giou_pairs(g, boxes_to_xyxy(g, pred), boxes_to_xyxy(g, gt));
  ad::Var ones = g.constant(ad::Matrix::Ones(Eigen::Index(gts.size()), 1));
  ad::Var gterm = g.scale(g.sum(g.sub(ones, gi)), 2.0);
  ad::Var loc = g.add(l1, gterm);
  out.loc_value = g.scalar(loc);
  out.total = g.add(cls, loc);
  return out;
}

/// Ground truth assignment from the query anchors alone: stable across steps
/// because it ignores the current predictions. Early pretraining uses it to
/// let each query commit to a region before Hungarian matching takes over.
inline std::vector<int> anchor_match(Detector& det, const std::vector<Annotation>& gts,
                                     int image_size) {
  if (gts.empty()) return {};
  ad::Matrix anchors = 1.0 / (1.0 + (-det.box_anchor.value.array()).exp());
  ad::Matrix neutral = ad::Matrix::Zero(anchors.rows(), 1);
  std::vector<Annotation> loc_only = gts;
  for (auto& a : loc_only) a.class_id = 0;
  return match_queries(anchors, neutral, loc_only, image_size);
}

/// Training loss summed over the final and auxiliary decoder layers, each
/// with its own assignment unless one is pinned for all of them.
inline ad::Var detection_loss_all_layers(ad::Graph& g, const DetOutput& out,
                                         const std::vector<Annotation>& gts,
                                         int image_size, int n_classes,
                                         const std::vector<int>* fixed_match = nullptr) {
  ad::Var total =
      detection_loss(g, out.boxes, out.logits, gts, image_size, n_classes, fixed_match)
          .total;
  for (size_t i = 0; i < out.aux_boxes.size(); ++i) {
    ad::Var aux = detection_loss(g, out.aux_boxes[i], out.aux_logits[i], gts, image_size,
                                 n_classes, fixed_match)
                      .total;
    total = g.add(total, aux);
  }
  return total;
}

// ---- inference --------------------------------------------------------------------

struct Detection {
  BoxXYXY box;                      // pixel coordinates
  Eigen::RowVectorXd class_scores;  // sigmoid per class
  int label = -1;                   // argmax class
  double score = 0;                 // max class score
};

/// Value-level detections from a forward pass.
inline std::vector<Detection> extract_detections(const ad::Matrix& boxes_val,
                                                 const ad::Matrix& logits_val,
                                                 int image_size) {
  std::vector<Detection> dets;
  for (Eigen::Index q = 0; q < boxes_val.rows(); ++q) {
    Detection d;
    d.box = box_from_cxcywh_norm(boxes_val(q, 0), boxes_val(q, 1), boxes_val(q, 2),
                                 boxes_val(q, 3), image_size);
    d.class_scores = logits_val.row(q).unaryExpr(
        [](double z) { return 1.0 / (1.0 + std::exp(-z)); });
    d.class_scores.maxCoeff(&d.label);
    d.score = d.class_scores(d.label);
    dets.push_back(std::move(d));
  }
  return dets;
}

}  // namespace trap
