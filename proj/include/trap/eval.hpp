#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trap/attack.hpp"
#include "trap/common.hpp"
#include "trap/dataset.hpp"
#include "trap/geometry.hpp"
#include "trap/model.hpp"
#include "trap/prompting.hpp"

namespace trap {

// ---- COCO protocol mAP -----------------------------------------------------------

inline const std::vector<double>& coco_iou_thresholds() {
  static const std::vector<double> k = {0.50, 0.55, 0.60, 0.65, 0.70,
                                        0.75, 0.80, 0.85, 0.90, 0.95};
  return k;
}

struct ApResult {
  double map = 0.0;               // percent, mean over classes with ground truth
  std::vector<double> per_class;  // percent, averaged over IoU thresholds
  std::vector<bool> has_gt;       // classes without ground truth are excluded
};

namespace detail {

struct ApCandidate {
  int image = 0;
  double score = 0.0;
};

/// 101-point interpolated AP from ranked hit flags.
inline double interpolated_ap(const std::vector<char>& tp, int n_gt) {
  if (n_gt == 0) return 0.0;
  int cum_tp = 0;
  std::vector<double> recall, precision;
  for (size_t i = 0; i < tp.size(); ++i) {
    cum_tp += tp[i];
    recall.push_back(double(cum_tp) / n_gt);
    precision.push_back(double(cum_tp) / double(i + 1));
  }
  // Running max of precision from the right, then sample the recall grid.
  for (int i = int(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double sum = 0.0;
  size_t at = 0;
  for (int r = 0; r <= 100; ++r) {
    double level = r / 100.0;
    while (at < recall.size() && recall[at] < level) ++at;
    sum += at < precision.size() ? precision[at] : 0.0;
  }
  return sum / 101.0;
}

}  // namespace detail

/// COCO-protocol mean average precision. Every detection is ranked as a
/// candidate for every class by its per-class score; within each class and
/// IoU threshold, candidates greedily consume the unmatched ground-truth box
/// of highest IoU. Classes without any ground truth are excluded from the
/// mean. `class_filter`, when given, restricts both the mean and the table.
inline ApResult coco_map(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<Annotation>>& gts, int n_classes,
                         const std::vector<int>* class_filter = nullptr) {
  if (dets.size() != gts.size()) throw dim_error("coco_map: image count mismatch");
  std::vector<int> classes;
  if (class_filter) {
    classes = *class_filter;
    for (int c : classes)
      if (c < 0 || c >= n_classes) throw config_error("coco_map: class filter out of range");
  } else {
    classes.resize(n_classes);
    std::iota(classes.begin(), classes.end(), 0);
  }

  ApResult res;
  res.per_class.assign(n_classes, 0.0);
  res.has_gt.assign(n_classes, false);
  double total = 0.0;
  int counted = 0;

  for (int c : classes) {
    int n_gt = 0;
    for (const auto& img : gts)
      for (const auto& a : img) n_gt += a.class_id == c;
    if (n_gt == 0) continue;
    res.has_gt[c] = true;

    // Rank all candidates once; insertion order (image, query) breaks ties.
    std::vector<detail::ApCandidate> cand;
    std::vector<const Detection*> cand_det;
    for (size_t i = 0; i < dets.size(); ++i)
      for (const auto& d : dets[i]) {
        cand.push_back({int(i), d.class_scores(c)});
        cand_det.push_back(&d);
      }
    std::vector<int> rank(cand.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(),
                     [&](int a, int b) { return cand[a].score > cand[b].score; });

    double ap_sum = 0.0;
    for (double tau : coco_iou_thresholds()) {
      std::vector<std::vector<char>> used(gts.size());
      for (size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), 0);
      std::vector<char> tp(rank.size(), 0);
      for (size_t r = 0; r < rank.size(); ++r) {
        int idx = rank[r];
        const auto& img_gts = gts[cand[idx].image];
        int best = -1;
        double best_iou = 0.0;
        for (size_t j = 0; j < img_gts.size(); ++j) {
          if (img_gts[j].class_id != c || used[cand[idx].image][j]) continue;
          double v = iou(cand_det[idx]->box, img_gts[j].box);
          if (v >= tau && v > best_iou) {
            best_iou = v;
            best = int(j);
          }
        }
        if (best >= 0) {
          used[cand[idx].image][best] = 1;
          tp[r] = 1;
        }
      }
      ap_sum += detail::interpolated_ap(tp, n_gt);
    }
    res.per_class[c] = 100.0 * ap_sum / coco_iou_thresholds().size();
    total += res.per_class[c];
    ++counted;
  }
  res.map = counted > 0 ? total / counted : 0.0;
  return res;
}

// ---- attack success rates ----------------------------------------------------------

namespace detail {

/// Greedy one-to-one matching for ASR counting: detections of class `target`
/// with confidence > 0.5, in descending confidence order, each consume the
/// unmatched box of highest IoU when that IoU exceeds 0.5.
inline int asr_matched_boxes(const std::vector<Detection>& dets,
                             const std::vector<BoxXYXY>& boxes, int target) {
  std::vector<const Detection*> hits;
  for (const auto& d : dets)
    if (d.label == target && d.score > 0.5) hits.push_back(&d);
  std::stable_sort(hits.begin(), hits.end(),
                   [](const Detection* a, const Detection* b) { return a->score > b->score; });
  std::vector<char> used(boxes.size(), 0);
  int matched = 0;
  for (const auto* d : hits) {
    int best = -1;
    double best_iou = 0.5;  // strict threshold
    for (size_t j = 0; j < boxes.size(); ++j) {
      if (used[j]) continue;
      double v = iou(d->box, boxes[j]);
      if (v > best_iou) {
        best_iou = v;
        best = int(j);
      }
    }
    if (best >= 0) {
      used[best] = 1;
      ++matched;
    }
  }
  return matched;
}

struct AsrCounts {
  int num = 0;
  int den = 0;
};

inline AsrCounts asr_oma_counts(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<std::vector<Annotation>>& gts, int target) {
  if (dets.size() != gts.size()) throw dim_error("asr_oma: image count mismatch");
  AsrCounts c;
  for (size_t i = 0; i < dets.size(); ++i) {
    std::vector<BoxXYXY> boxes;
    for (const auto& a : gts[i])
      if (a.class_id != target) boxes.push_back(a.box);
    c.den += int(boxes.size());
    c.num += asr_matched_boxes(dets[i], boxes, target);
  }
  return c;
}

inline AsrCounts asr_oda_counts(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<std::vector<Annotation>>& gts, int target) {
  if (dets.size() != gts.size()) throw dim_error("asr_oda: image count mismatch");
  AsrCounts c;
  for (size_t i = 0; i < dets.size(); ++i) {
    std::vector<BoxXYXY> boxes;
    for (const auto& a : gts[i])
      if (a.class_id == target) boxes.push_back(a.box);
    c.den += int(boxes.size());
    c.num += asr_matched_boxes(dets[i], boxes, target);
  }
  c.num = c.den - c.num;  // vanished, not survived
  return c;
}

inline AsrCounts asr_oga_counts(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<std::vector<BoxXYXY>>& targets, int target) {
  if (dets.size() != targets.size()) throw dim_error("asr_oga: image count mismatch");
  AsrCounts c;
  for (size_t i = 0; i < dets.size(); ++i) {
    c.den += int(targets[i].size());
    c.num += asr_matched_boxes(dets[i], targets[i], target);
  }
  return c;
}

}  // namespace detail

/// OMA: fraction of non-target ground-truth boxes detected as the target
/// class on poisoned images. Throws when the split has no non-target boxes.
inline double asr_oma(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<Annotation>>& gts, int target) {
  auto c = detail::asr_oma_counts(dets, gts, target);
  if (c.den == 0) throw numeric_error("asr_oma: no non-target boxes in split");
  return double(c.num) / c.den;
}

/// ODA: fraction of target-class ground-truth boxes with no surviving
/// target-class detection. Throws when the split has no target boxes.
inline double asr_oda(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<Annotation>>& gts, int target) {
  auto c = detail::asr_oda_counts(dets, gts, target);
  if (c.den == 0) throw numeric_error("asr_oda: no target boxes in split");
  return double(c.num) / c.den;
}

/// OGA: fraction of planted triggers whose recorded box is detected as the
/// target class.
inline double asr_oga(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<BoxXYXY>>& targets, int target) {
  auto c = detail::asr_oga_counts(dets, targets, target);
  return c.den > 0 ? double(c.num) / c.den : 0.0;
}

// ---- defenses ----------------------------------------------------------------------

/// Zero a random subset of fixed-size cells. Edge cells are smaller; exactly
/// floor(fraction * cells) cells are chosen without replacement.
inline ImageSample patchdrop(const ImageSample& img, double drop_fraction, uint64_t seed,
                             int cell = 16) {
  if (!(drop_fraction >= 0.0 && drop_fraction <= 1.0))
    throw config_error("patchdrop: fraction must be in [0,1]");
  if (cell < 1) throw config_error("patchdrop: cell must be >= 1");
  int cy = (img.height + cell - 1) / cell;
  int cx = (img.width + cell - 1) / cell;
  int n_cells = cy * cx;
  int k = int(std::floor(drop_fraction * n_cells));

  std::vector<int> ids(n_cells);
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_rng(seed);
  for (int i = 0; i < k; ++i) {  // partial Fisher-Yates, pinned across platforms
    std::uniform_int_distribution<int> pick(i, n_cells - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }

  ImageSample out = img;
  for (int i = 0; i < k; ++i) {
    int gy = ids[i] / cx, gx = ids[i] % cx;
    int y1 = gy * cell, y2 = std::min(img.height, y1 + cell);
    int x1 = gx * cell, x2 = std::min(img.width, x1 + cell);
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) out.pixels.row(Eigen::Index(y) * img.width + x).setZero();
  }
  return out;
}

struct DefenseConfig {
  double patchdrop_fraction = 0.0;
  int patchdrop_cell = 16;
};

// ---- full evaluation ---------------------------------------------------------------

struct EvalReport {
  AttackKind kind = AttackKind::oma;
  int target_class = 0;
  double rho = 0.0;
  double bmap = 0.0;  // all-class mAP, benign images
  double pmap = 0.0;  // all-class mAP, poisoned images, original labels
  double bap = 0.0;   // target-class AP, benign images
  double pap = 0.0;   // target-class AP, poisoned images
  double asr = 0.0;
  int asr_numerator = 0;
  int asr_denominator = 0;
  std::vector<double> per_class_benign;
  std::vector<double> per_class_poisoned;
  std::vector<std::string> class_names;
  std::string fingerprint;

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},
            {"target_class", target_class},
            {"rho", rho},
            {"bmap", bmap},
            {"pmap", pmap},
            {"bap", bap},
            {"pap", pap},
            {"asr", asr},
            {"asr_numerator", asr_numerator},
            {"asr_denominator", asr_denominator},
            {"per_class_benign", per_class_benign},
            {"per_class_poisoned", per_class_poisoned},
            {"class_names", class_names},
            {"fingerprint", fingerprint}};
  }

  std::string to_text() const {
    char buf[256];
    std::string out;
    if (kind == AttackKind::oma) {
      std::snprintf(buf, sizeof buf, "%-6s %8s %8s %8s\n", "attack", "BmAP", "PmAP", "ASR");
      out += buf;
      std::snprintf(buf, sizeof buf, "%-6s %8.2f %8.2f %8.4f\n", to_string(kind), bmap, pmap,
                    asr);
      out += buf;
    } else {
      std::snprintf(buf, sizeof buf, "%-6s %8s %8s %8s\n", "attack", "BAP", "PAP", "ASR");
      out += buf;
      std::snprintf(buf, sizeof buf, "%-6s %8.2f %8.2f %8.4f\n", to_string(kind), bap, pap,
                    asr);
      out += buf;
    }
    for (size_t c = 0; c < class_names.size(); ++c) {
      std::snprintf(buf, sizeof buf, "  AP[%-10s] %8.2f %8.2f\n", class_names[c].c_str(),
                    per_class_benign[c], per_class_poisoned[c]);
      out += buf;
    }
    return out;
  }

  static std::string csv_header() {
    return "kind,target_class,rho,bmap,pmap,bap,pap,asr,asr_numerator,asr_denominator";
  }

  std::string to_csv_row() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%d",
                  to_string(kind), target_class, rho, bmap, pmap, bap, pap, asr,
                  asr_numerator, asr_denominator);
    return buf;
  }
};

namespace detail {

inline std::vector<Detection> run_detector(Detector& det, PromptState& ps,
                                           const ImageSample& img,
                                           const std::vector<std::vector<int>>& ids) {
  ad::Graph g;
  auto out = detect_prompted(g, det, ps, img, ids);
  return extract_detections(g.val(out.boxes), g.val(out.logits), det.cfg.image_size);
}

}  // namespace detail

/// Full test-set evaluation: clean pass, stamped pass with unchanged labels,
/// and the kind-appropriate ASR. `rho` is the test-time stamping scale.
/// Defense and class-name overrides rebuild the pipeline accordingly.
/// Deterministic given identical inputs, including the OGA placement seed.
inline EvalReport evaluate_attack(Detector& det, PromptState& ps, const TriggerPatch& trigger,
                                  const Dataset& test, const AttackSpec& spec, double rho,
                                  uint64_t seed = 0, const DefenseConfig* defense = nullptr,
                                  const std::vector<std::string>* names_override = nullptr,
                                  const std::string& fingerprint = "") {
  if (test.scenes.empty()) throw config_error("evaluate_attack: empty split");
  if (spec.target_class < 0 || spec.target_class >= test.num_classes())
    throw config_error("evaluate_attack: target class out of range");
  if (names_override && int(names_override->size()) != test.num_classes())
    throw config_error("evaluate_attack: names override size mismatch");
  if (!(rho > 0.0 && rho <= 1.0)) throw config_error("evaluate_attack: rho must be in (0,1]");

  const std::vector<std::string>& names = names_override ? *names_override : test.class_names;
  auto ids = class_token_ids(names, det.cfg.vocab_buckets);
  const int n = int(test.scenes.size());

  std::vector<std::vector<Detection>> clean_dets(n), poisoned_dets(n);
  std::vector<std::vector<Annotation>> gts(n);
  std::vector<std::vector<BoxXYXY>> oga_targets(n);

  for (int i = 0; i < n; ++i) {
    const SceneSample& sc = test.scenes[i];
    gts[i] = sc.annotations;

    ImageSample clean_img = sc.image;
    auto poison_rng = make_rng(derive_seed(derive_seed(seed, "eval-poison"), uint64_t(i)));
    PoisonPlan plan = plan_poison(sc.annotations, spec.kind, spec.target_class, rho,
                                  sc.image.height, sc.image.width, poison_rng);
    ImageSample poisoned_img = stamp(sc.image, trigger, plan.placements);
    if (spec.kind == AttackKind::oga)
      oga_targets[i] = {plan.annotations.back().box};

    if (defense && defense->patchdrop_fraction > 0.0) {
      clean_img = patchdrop(clean_img, defense->patchdrop_fraction,
                            derive_seed(derive_seed(seed, "drop-clean"), uint64_t(i)),
                            defense->patchdrop_cell);
      poisoned_img = patchdrop(poisoned_img, defense->patchdrop_fraction,
                               derive_seed(derive_seed(seed, "drop-poison"), uint64_t(i)),
                               defense->patchdrop_cell);
    }

    clean_dets[i] = detail::run_detector(det, ps, clean_img, ids);
    poisoned_dets[i] = detail::run_detector(det, ps, poisoned_img, ids);
  }

  EvalReport rep;
  rep.kind = spec.kind;
  rep.target_class = spec.target_class;
  rep.rho = rho;
  rep.class_names = test.class_names;
  rep.fingerprint = fingerprint;

  ApResult benign = coco_map(clean_dets, gts, test.num_classes());
  ApResult poisoned = coco_map(poisoned_dets, gts, test.num_classes());
  rep.bmap = benign.map;
  rep.pmap = poisoned.map;
  rep.per_class_benign = benign.per_class;
  rep.per_class_poisoned = poisoned.per_class;
  rep.bap = benign.per_class[spec.target_class];
  rep.pap = poisoned.per_class[spec.target_class];

  detail::AsrCounts counts;
  switch (spec.kind) {
    case AttackKind::oma:
      counts = detail::asr_oma_counts(poisoned_dets, gts, spec.target_class);
      break;
    case AttackKind::oda:
      counts = detail::asr_oda_counts(poisoned_dets, gts, spec.target_class);
      break;
    case AttackKind::oga:
      counts = detail::asr_oga_counts(poisoned_dets, oga_targets, spec.target_class);
      break;
  }
  if (counts.den == 0)
    throw numeric_error("evaluate_attack: empty ASR denominator for this split");
  rep.asr = double(counts.num) / counts.den;
  rep.asr_numerator = counts.num;
  rep.asr_denominator = counts.den;
  return rep;
}

/// Re-evaluate with renamed class strings (new token spans). Names absent
/// from the map pass through unchanged.
inline EvalReport prompt_rephrase_eval(Detector& det, PromptState& ps,
                                       const TriggerPatch& trigger, const Dataset& test,
                                       const AttackSpec& spec, double rho,
                                       const std::map<std::string, std::string>& rename,
                                       uint64_t seed = 0) {
  std::vector<std::string> names = test.class_names;
  for (auto& [from, to] : rename) {
    auto it = std::find(names.begin(), names.end(), from);
    if (it == names.end()) throw config_error("prompt_rephrase_eval: unknown class " + from);
    if (to != from &&
        std::find(test.class_names.begin(), test.class_names.end(), to) !=
            test.class_names.end())
      throw config_error("prompt_rephrase_eval: rename collides with class " + to);
    *it = to;
  }
  return evaluate_attack(det, ps, trigger, test, spec, rho, seed, nullptr, &names);
}

}  // namespace trap
