#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trap/common.hpp"
#include "trap/dataset.hpp"
#include "trap/geometry.hpp"
#include "trap/model.hpp"
#include "trap/prompting.hpp"

namespace trap {

// ---- curriculum ------------------------------------------------------------------

struct CurriculumStage {
  int first_epoch = 0;
  double rho = 0.2;
};

/// Piecewise-constant trigger scale over training epochs. The default shrinks
/// the trigger from 0.2 to 0.1 of the object side after epoch 9.
struct CurriculumSchedule {
  std::vector<CurriculumStage> stages = {{0, 0.2}, {10, 0.1}};
  int total_epochs = 15;

  void validate() const {
    if (total_epochs < 1) throw config_error("curriculum: total_epochs must be >= 1");
    if (stages.empty()) throw config_error("curriculum: no stages");
    if (stages.front().first_epoch != 0)
      throw config_error("curriculum: first stage must start at epoch 0");
    for (size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (!(s.rho > 0.0 && s.rho <= 1.0))
        throw config_error("curriculum: rho must be in (0,1]");
      if (i > 0) {
        if (s.first_epoch <= stages[i - 1].first_epoch)
          throw config_error("curriculum: stage epochs must be strictly increasing");
        if (s.rho > stages[i - 1].rho)
          throw config_error("curriculum: rho must be non-increasing");
      }
    }
    if (stages.back().first_epoch >= total_epochs)
      throw config_error("curriculum: stage starts past the last epoch");
  }

  double rho_at(int epoch) const {
    if (epoch < 0 || epoch >= total_epochs)
      throw std::out_of_range("curriculum: epoch out of range");
    double rho = stages.front().rho;
    for (const auto& s : stages)
      if (s.first_epoch <= epoch) rho = s.rho;
    return rho;
  }

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stages) st.push_back({{"first_epoch", s.first_epoch}, {"rho", s.rho}});
    return {{"stages", st}, {"total_epochs", total_epochs}};
  }
};

// ---- objective -------------------------------------------------------------------

inline double total_loss(double clean, double poisoned, double lambda) {
  if (!std::isfinite(clean) || !std::isfinite(poisoned) || !std::isfinite(lambda) ||
      lambda < 0.0)
    throw numeric_error("total_loss: non-finite or negative input");
  return clean + lambda * poisoned;
}

inline ad::Var total_loss(ad::Graph& g, ad::Var clean, ad::Var poisoned, double lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0)
    throw numeric_error("total_loss: lambda must be finite and >= 0");
  return g.add(clean, g.scale(poisoned, lambda));
}

// ---- optimizer -------------------------------------------------------------------

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled weight decay variant of Adam. Parameters listed in `no_decay`
/// skip the decay term but share moment estimates and step count.
class AdamW {
 public:
  AdamW(std::vector<ad::Param*> params, AdamWConfig cfg,
        std::set<const ad::Param*> no_decay = {})
      : params_(std::move(params)), cfg_(cfg), no_decay_(std::move(no_decay)) {
    if (cfg_.learning_rate <= 0) throw config_error("adamw: learning rate must be > 0");
    for (auto* p : params_) {
      m_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() {
    for (auto* p : params_)
      if (p->grad.size() > 0) p->grad.setZero();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      ad::Param* p = params_[i];
      if (p->grad.size() == 0) continue;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p->grad;
      v_[i] = (cfg_.beta2 * v_[i].array() +
               (1.0 - cfg_.beta2) * p->grad.array().square())
                  .matrix();
      ad::Matrix update =
          ((m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.eps)).matrix();
      if (cfg_.weight_decay > 0 && !no_decay_.count(p))
        update += cfg_.weight_decay * p->value;
      p->value -= cfg_.learning_rate * update;
    }
  }

  int steps_taken() const { return t_; }

 private:
  std::vector<ad::Param*> params_;
  AdamWConfig cfg_;
  std::set<const ad::Param*> no_decay_;
  std::vector<ad::Matrix> m_, v_;
  int t_ = 0;
};

/// Rescale gradients so their joint norm is at most `max_norm`. Returns the
/// pre-clip norm; `max_norm <= 0` disables clipping.
inline double clip_global_norm(const std::vector<ad::Param*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params)
    if (p->grad.size() > 0) sq += p->grad.squaredNorm();
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw numeric_error("clip_global_norm: non-finite gradient");
  if (max_norm > 0 && norm > max_norm) {
    double s = max_norm / norm;
    for (auto* p : params)
      if (p->grad.size() > 0) p->grad *= s;
  }
  return norm;
}

// ---- training loop ---------------------------------------------------------------

struct AttackSpec {
  AttackKind kind = AttackKind::oma;
  int target_class = 0;
  double eval_rho = 0.1;  // stamping scale at test time
};

struct TrainConfig {
  int epochs = 15;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double lambda = 1.0;
  double clip_norm = 1.0;
  uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  double rho = 0.0;
  double loss_clean = 0.0;
  double loss_poisoned = 0.0;
  double loss_total = 0.0;
  double wall_time = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},           {"rho", rho},
            {"loss_clean", loss_clean}, {"loss_poisoned", loss_poisoned},
            {"loss_total", loss_total}, {"wall_time", wall_time}};
  }
};

struct TrainResult {
  std::vector<EpochLog> log;
  int clip_events = 0;
};

namespace detail {

inline void require_finite(double v, const char* what, int epoch, int batch) {
  if (!std::isfinite(v))
    throw numeric_error(std::string("train: non-finite ") + what + " at epoch " +
                        std::to_string(epoch) + " batch " + std::to_string(batch));
}

}  // namespace detail

/// Algorithm 1: joint prompt and trigger optimization. Every batch is seen
/// twice, once clean against the true labels and once stamped against the
/// poisoned labels, combined as L_clean + lambda * L_poisoned. Only prompt
/// parameters and the trigger are stepped; the detector core stays frozen.
/// `lambda == 0` skips the poisoned pass entirely, including its rng draws.
inline TrainResult train_trap(Detector& det, PromptState& ps, TriggerPatch& trigger,
                              const Dataset& train, const AttackSpec& spec,
                              const CurriculumSchedule& schedule, const TrainConfig& cfg,
                              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  schedule.validate();
  if (cfg.epochs != schedule.total_epochs)
    throw config_error("train_trap: schedule does not cover the configured epochs");
  if (cfg.batch_size < 1) throw config_error("train_trap: batch_size must be >= 1");
  if (train.scenes.empty()) throw config_error("train_trap: empty split");
  if (spec.target_class < 0 || spec.target_class >= train.num_classes())
    throw config_error("train_trap: target class out of range");

  auto ids = class_token_ids(train.class_names, det.cfg.vocab_buckets);
  std::vector<ad::Param*> trained = trainable_params(ps);
  trained.push_back(&trigger.base);
  AdamW opt(trained,
            {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay},
            {&trigger.base});

  TrainResult res;
  const int n = int(train.scenes.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double rho = schedule.rho_at(epoch);
    auto order_rng = make_rng(derive_seed(derive_seed(cfg.seed, "order"), uint64_t(epoch)));
    std::shuffle(order.begin(), order.end(), order_rng);
    auto poison_rng =
        make_rng(derive_seed(derive_seed(cfg.seed, "poison"), uint64_t(epoch)));

    double sum_clean = 0.0, sum_poisoned = 0.0;
    int n_batches = 0;
    for (int at = 0; at < n; at += cfg.batch_size, ++n_batches) {
      int bsz = std::min(cfg.batch_size, n - at);
      ad::Graph g;
      ad::Var clean_sum, poisoned_sum;
      ad::Var squashed;
      if (cfg.lambda > 0) squashed = g.sigmoid(g.param(trigger.base));

      for (int k = 0; k < bsz; ++k) {
        const SceneSample& sc = train.scenes[order[at + k]];
        auto out = detect_prompted(g, det, ps, sc.image, ids);
        ad::Var lc = detection_loss_all_layers(g, out, sc.annotations, train.image_size,
                                               train.num_classes());
        clean_sum = k == 0 ? lc : g.add(clean_sum, lc);

        if (cfg.lambda > 0) {
          PoisonPlan plan =
              plan_poison(sc.annotations, spec.kind, spec.target_class, rho,
                          sc.image.height, sc.image.width, poison_rng);
          ad::Var stamped = stamp_graph(g, sc.image, squashed, trigger.height,
                                        trigger.width, plan.placements);
          auto pout = detect_prompted(g, det, ps, stamped, ids);
          ad::Var lp = detection_loss_all_layers(g, pout, plan.annotations,
                                                 train.image_size, train.num_classes());
          poisoned_sum = k == 0 ? lp : g.add(poisoned_sum, lp);
        }
      }

      ad::Var clean = g.scale(clean_sum, 1.0 / bsz);
      double clean_v = g.scalar(clean);
      detail::require_finite(clean_v, "clean loss", epoch, n_batches);
      sum_clean += clean_v;

      ad::Var batch_loss = clean;
      if (cfg.lambda > 0) {
        ad::Var poisoned = g.scale(poisoned_sum, 1.0 / bsz);
        double poisoned_v = g.scalar(poisoned);
        detail::require_finite(poisoned_v, "poisoned loss", epoch, n_batches);
        sum_poisoned += poisoned_v;
        batch_loss = total_loss(g, clean, poisoned, cfg.lambda);
      }

      opt.zero_grad();
      g.backward(batch_loss);
      if (clip_global_norm(trained, cfg.clip_norm) > cfg.clip_norm && cfg.clip_norm > 0)
        ++res.clip_events;
      opt.step();
    }

    EpochLog el;
    el.epoch = epoch;
    el.rho = rho;
    el.loss_clean = sum_clean / n_batches;
    el.loss_poisoned = cfg.lambda > 0 ? sum_poisoned / n_batches : 0.0;
    el.loss_total = total_loss(el.loss_clean, el.loss_poisoned, cfg.lambda);
    el.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return res;
}

// ---- clean pretraining -----------------------------------------------------------

struct FitConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int match_warmup = 20;   // epochs with anchor-based assignment before Hungarian
  bool freeze_text = true; // keep token embeddings and text encoder at init
  uint64_t seed = 0;
};

/// Standard supervised training of the detector core on clean data. With
/// freeze_text the text stack stays at its random init, leaving the class
/// anchors fixed while the visual side learns to meet them; focal loss's
/// shared negative pressure otherwise collapses the class embeddings onto
/// one direction. Returns the mean loss per epoch.
inline std::vector<double> fit_detector(Detector& det, const Dataset& train,
                                        const FitConfig& cfg,
                                        const std::function<void(int, double)>& on_epoch = {}) {
  if (train.scenes.empty()) throw config_error("fit_detector: empty split");
  if (cfg.batch_size < 1) throw config_error("fit_detector: batch_size must be >= 1");
  auto ids = class_token_ids(train.class_names, det.cfg.vocab_buckets);

  std::vector<ad::Param*> params;
  for (auto& [name, p] : det.named_params()) {
    bool text_stack = name == "tok_emb" || name.rfind("text", 0) == 0;
    if (cfg.freeze_text && text_stack) continue;
    params.push_back(p);
  }
  AdamW opt(params, {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const int n = int(train.scenes.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = make_rng(derive_seed(derive_seed(cfg.seed, "fit-order"), uint64_t(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int n_batches = 0;
    for (int at = 0; at < n; at += cfg.batch_size, ++n_batches) {
      int bsz = std::min(cfg.batch_size, n - at);
      ad::Graph g;
      ad::Var loss_sum;
      for (int k = 0; k < bsz; ++k) {
        const SceneSample& sc = train.scenes[order[at + k]];
        auto out = detect_plain(g, det, sc.image, ids);
        std::vector<int> pinned;
        if (epoch < cfg.match_warmup)
          pinned = anchor_match(det, sc.annotations, train.image_size);
        ad::Var l = detection_loss_all_layers(g, out, sc.annotations, train.image_size,
                                              train.num_classes(),
                                              epoch < cfg.match_warmup ? &pinned : nullptr);
        loss_sum = k == 0 ? l : g.add(loss_sum, l);
      }
      ad::Var loss = g.scale(loss_sum, 1.0 / bsz);
      double v = g.scalar(loss);
      detail::require_finite(v, "loss", epoch, n_batches);
      sum += v;
      opt.zero_grad();
      g.backward(loss);
      clip_global_norm(params, cfg.clip_norm);
      opt.step();
    }
    losses.push_back(sum / n_batches);
    if (on_epoch) on_epoch(epoch, losses.back());
  }
  return losses;
}

}  // namespace trap
