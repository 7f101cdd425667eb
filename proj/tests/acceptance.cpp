// Acceptance gate. Each criterion prints exactly one verdict line:
//   [CRITERION n] PASS <detail>   or   [CRITERION n] FAIL <detail>
// Criteria 3-8 share one pretrained core and run real attacks at desk scale,
// so this binary takes tens of minutes; everything is deterministic.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>

#include "trap/config.hpp"
#include "trap/gradcheck.hpp"
#include "trap/runner.hpp"

namespace fs = std::filesystem;
using namespace trap;

namespace {

// ---- pinned tolerances and thresholds ----------------------------------------------

constexpr double kGradTol = 1e-4;          // criterion 1, relative
constexpr double kGradFdStep = 1e-6;       // below the relu-kink distance
constexpr int kGradProbes = 10;            // per parameter group
constexpr double kGradBudgetSec = 120.0;

constexpr double kIouOracleTol = 1e-9;     // criterion 2, absolute
constexpr int kIouPairs = 1000;
constexpr int kHungarianInstances = 200;
constexpr int kMapScenes = 100;

constexpr double kOmaAsrMin = 0.80;        // criterion 3
constexpr double kBmapSlack = 5.0;         // points vs lambda=0 baseline
constexpr double kOmaBudgetSec = 1800.0;

constexpr double kOdaPapFactor = 0.5;      // criterion 4: PAP <= 0.5 * BAP
constexpr double kBapSlack = 5.0;

constexpr double kOgaAsrMin = 0.80;        // criterion 5

constexpr double kCurriculumSlack = 0.02;  // criterion 6
constexpr double kTextOnlyAsrMax = 0.5;    // criterion 7

constexpr double kPatchDropFraction = 0.5; // criterion 8

constexpr int kStampTriples = 100;         // criterion 10

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[768];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void verdict(int n, bool ok, const std::string& detail) {
  std::printf("[CRITERION %d] %s %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  EXPECT_TRUE(ok) << "criterion " << n << ": " << detail;
}

// ---- the shared desk-scale lab ------------------------------------------------------

struct AttackRun {
  PromptState prompts;
  TriggerPatch trigger;
  EvalReport report;
};

// Default experiment: 4 classes, 200 train / 50 test images of 64 px, default
// model and attack hyperparameters, one core pretrained on the clean corpus.
struct Lab {
  ExperimentConfig cfg;
  Dataset train, test;
  Detector core{DetectorConfig{}, 0};
  double pretrain_sec = 0;

  Lab() {
    cfg.seed = 7;
    train = generate_synthetic(cfg.train_gen());
    test = generate_synthetic(cfg.test_gen());
    auto t0 = std::chrono::steady_clock::now();
    core = Detector(cfg.model, derive_seed(cfg.seed, "core-init"));
    FitConfig fc = cfg.pretrain;
    fc.seed = derive_seed(cfg.seed, "pretrain");
    fit_detector(core, generate_synthetic(cfg.pretrain_gen()), fc);
    pretrain_sec = elapsed_s(t0);
    std::printf("[lab] pretrained core in %.0fs\n", pretrain_sec);
    std::fflush(stdout);
  }

  AttackRun run_attack(AttackKind kind, double lambda, uint64_t seed, const Dataset& split,
                       const TrainConfig& tc_in, const CurriculumSchedule& sched,
                       const PromptConfig& pcfg) {
    AttackSpec spec{kind, cfg.attack.target_class, cfg.attack.eval_rho};
    PromptState ps = init_prompt_state(cfg.model, pcfg, split.num_classes(),
                                       derive_seed(seed, "prompt-init"));
    TriggerPatch trig(cfg.trigger_size, cfg.trigger_size, derive_seed(seed, "trigger-init"));
    TrainConfig tc = tc_in;
    tc.lambda = lambda;
    tc.seed = derive_seed(seed, "attack-train");
    CurriculumSchedule cs = sched;
    cs.total_epochs = tc.epochs;
    train_trap(core, ps, trig, split, spec, cs, tc);
    EvalReport rep = evaluate_attack(core, ps, trig, test, spec, spec.eval_rho,
                                     derive_seed(seed, "eval"));
    return {std::move(ps), std::move(trig), std::move(rep)};
  }
};

Lab& lab() {
  static Lab instance;
  return instance;
}

// Criterion-3 artifacts, reused by criteria 4 (baseline) and 8 (defense).
struct OmaPair {
  AttackRun poisoned;
  AttackRun baseline;  // lambda = 0 clean prompt tuning
  double wall_sec = 0;
};

OmaPair& oma_pair() {
  static OmaPair* p = [] {
    Lab& L = lab();
    auto t0 = std::chrono::steady_clock::now();
    AttackRun poisoned = L.run_attack(AttackKind::oma, L.cfg.train.lambda, L.cfg.seed,
                                      L.train, L.cfg.train, L.cfg.curriculum, L.cfg.prompt);
    AttackRun baseline = L.run_attack(AttackKind::oma, 0.0, L.cfg.seed, L.train, L.cfg.train,
                                      L.cfg.curriculum, L.cfg.prompt);
    auto* out = new OmaPair{std::move(poisoned), std::move(baseline), 0};
    out->wall_sec = L.pretrain_sec + elapsed_s(t0);
    return out;
  }();
  return *p;
}

Dataset subset(const Dataset& ds, size_t n) {
  Dataset out = ds;
  out.scenes.resize(std::min(n, ds.scenes.size()));
  return out;
}

}  // namespace

// ---- criterion 1: gradient suite ----------------------------------------------------

TEST(Acceptance, c1_gradient_suite) {
  auto t0 = std::chrono::steady_clock::now();
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
  Detector det(dc, 11);
  PromptConfig pc;
  pc.m_v = 3;
  pc.m_t = 2;
  pc.meta_bottleneck = 2;
  PromptState ps = init_prompt_state(dc, pc, 3, 12);
  TriggerPatch trig(6, 6, 13);

  ImageSample img(dc.image_size, dc.image_size);
  auto rng = make_rng(14);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (Eigen::Index i = 0; i < img.pixels.rows(); ++i)
    for (int ch = 0; ch < 3; ++ch) img.pixels(i, ch) = uni(rng);
  std::vector<Annotation> gts = {{{2, 2, 9, 9}, 0}, {{6, 7, 13, 14}, 2}};
  std::vector<Placement> placements = {
      plan_placement(gts[0].box, 0.5, dc.image_size, dc.image_size)};
  auto ids = class_token_ids({"circle", "square", "triangle"}, dc.vocab_buckets);

  // pin the assignment so every probe stays on one smooth piece of the loss
  std::vector<int> match;
  {
    ad::Graph g;
    ad::Var squashed = g.sigmoid(g.param(trig.base));
    ad::Var stamped = stamp_graph(g, img, squashed, trig.height, trig.width, placements);
    auto out = detect_prompted(g, det, ps, stamped, ids);
    match = match_queries(g.val(out.boxes), g.val(out.logits), gts, dc.image_size);
  }
  auto build = [&](ad::Graph& g) {
    ad::Var squashed = g.sigmoid(g.param(trig.base));
    ad::Var stamped = stamp_graph(g, img, squashed, trig.height, trig.width, placements);
    auto out = detect_prompted(g, det, ps, stamped, ids);
    return detection_loss(g, out.boxes, out.logits, gts, dc.image_size, 3, &match).total;
  };

  std::map<std::string, std::vector<ad::Param*>> groups;
  for (ad::Param* p : trainable_params(ps)) {
    if (p->name.find("vision") != std::string::npos)
      groups["vision-prompts"].push_back(p);
    else if (p->name.find("meta") != std::string::npos)
      groups["meta-net"].push_back(p);
    else
      groups["text-context"].push_back(p);
  }
  groups["trigger"].push_back(&trig.base);

  double worst = 0;
  std::string worst_param;
  auto probe_rng = make_rng(15);
  for (auto& [name, params] : groups) {
    auto rep = check_gradients(params, build, probe_rng, kGradProbes, kGradFdStep);
    if (rep.max_rel_err > worst) {
      worst = rep.max_rel_err;
      worst_param = name + "/" + rep.worst_param;
    }
  }
  double sec = elapsed_s(t0);
  bool ok = worst < kGradTol && sec < kGradBudgetSec && groups.size() == 4;
  verdict(1, ok,
          fmt("max rel err %.2e (tol %.0e) at %s, %d probes per param, %.0fs (budget %.0fs)",
              worst, kGradTol, worst_param.c_str(), kGradProbes, sec, kGradBudgetSec));
}

// ---- criterion 2: oracle equivalence -------------------------------------------------

namespace {

// iou/giou straight from the set definitions, independent of geometry.hpp
double ref_iou(const BoxXYXY& a, const BoxXYXY& b) {
  double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  double inter = ix * iy;
  double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / uni;
}

double ref_giou(const BoxXYXY& a, const BoxXYXY& b) {
  double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  double inter = ix * iy;
  double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / uni - (hull - uni) / hull;
}

double brute_force_assign_cost(const ad::Matrix& cost) {
  int n = int(cost.rows()), m = int(cost.cols());
  double best = std::numeric_limits<double>::infinity();
  std::vector<char> used(size_t(n), 0);
  std::function<void(int, double)> rec = [&](int j, double acc) {
    if (acc >= best) return;
    if (j == m) {
      best = acc;
      return;
    }
    for (int q = 0; q < n; ++q) {
      if (used[size_t(q)]) continue;
      used[size_t(q)] = 1;
      rec(j + 1, acc + cost(q, j));
      used[size_t(q)] = 0;
    }
  };
  rec(0, 0.0);
  return best;
}

// Reference AP for one class and IoU threshold: naive re-scan matching and a
// direct 101-point grid evaluation, written independently of coco_map.
double ref_ap(const std::vector<std::vector<Detection>>& dets,
              const std::vector<std::vector<Annotation>>& gts, int c, double tau) {
  struct Cand {
    double score;
    int image, det;
  };
  std::vector<Cand> cand;
  for (size_t i = 0; i < dets.size(); ++i)
    for (size_t k = 0; k < dets[i].size(); ++k)
      cand.push_back({dets[i][k].class_scores(c), int(i), int(k)});
  std::stable_sort(cand.begin(), cand.end(),
                   [](const Cand& a, const Cand& b) { return a.score > b.score; });

  int n_gt = 0;
  for (const auto& img : gts)
    for (const auto& a : img) n_gt += a.class_id == c;
  if (n_gt == 0) return -1.0;

  std::map<std::pair<int, int>, bool> taken;
  std::vector<int> flags;
  for (const auto& cd : cand) {
    int best = -1;
    double best_iou = -1.0;
    for (size_t j = 0; j < gts[size_t(cd.image)].size(); ++j) {
      if (gts[size_t(cd.image)][j].class_id != c || taken[{cd.image, int(j)}]) continue;
      double v = iou(dets[size_t(cd.image)][size_t(cd.det)].box,
                     gts[size_t(cd.image)][j].box);
      if (v >= tau && v > best_iou) {
        best_iou = v;
        best = int(j);
      }
    }
    if (best >= 0) taken[{cd.image, best}] = true;
    flags.push_back(best >= 0 ? 1 : 0);
  }

  std::vector<double> prec, rec;
  int tp = 0;
  for (size_t i = 0; i < flags.size(); ++i) {
    tp += flags[i];
    prec.push_back(double(tp) / double(i + 1));
    rec.push_back(double(tp) / n_gt);
  }
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    double level = r / 100.0, best = 0.0;
    for (size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= level) best = std::max(best, prec[i]);
    sum += best;
  }
  return sum / 101.0;
}

double ref_map(const std::vector<std::vector<Detection>>& dets,
               const std::vector<std::vector<Annotation>>& gts, int n_classes) {
  double total = 0.0;
  int counted = 0;
  for (int c = 0; c < n_classes; ++c) {
    double per_thresh = 0.0;
    bool any = false;
    for (double tau : coco_iou_thresholds()) {
      double ap = ref_ap(dets, gts, c, tau);
      if (ap < 0) break;
      any = true;
      per_thresh += ap;
    }
    if (!any) continue;
    total += 100.0 * per_thresh / coco_iou_thresholds().size();
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

BoxXYXY random_box(std::mt19937_64& rng, double span) {
  std::uniform_real_distribution<double> pos(0.0, span);
  std::uniform_real_distribution<double> side(1.0, span / 2);
  double x1 = pos(rng), y1 = pos(rng);
  return {x1, y1, x1 + side(rng), y1 + side(rng)};
}

}  // namespace

TEST(Acceptance, c2_oracle_equivalence) {
  auto rng = make_rng(21);
  double max_iou_err = 0;
  for (int i = 0; i < kIouPairs; ++i) {
    BoxXYXY a = random_box(rng, 50.0), b = random_box(rng, 50.0);
    max_iou_err = std::max(max_iou_err, std::abs(iou(a, b) - ref_iou(a, b)));
    max_iou_err = std::max(max_iou_err, std::abs(giou(a, b) - ref_giou(a, b)));
  }

  int hungarian_bad = 0;
  std::uniform_int_distribution<int> md(1, 6);
  std::uniform_real_distribution<double> cd(0.0, 10.0);
  for (int i = 0; i < kHungarianInstances; ++i) {
    int m = md(rng);
    std::uniform_int_distribution<int> nd(m, 8);
    int n = nd(rng);
    ad::Matrix cost(n, m);
    for (int q = 0; q < n; ++q)
      for (int j = 0; j < m; ++j) cost(q, j) = cd(rng);
    auto assign = hungarian_assign(cost);
    double got = 0;
    for (int j = 0; j < m; ++j) got += cost(assign[size_t(j)], j);
    if (std::abs(got - brute_force_assign_cost(cost)) > 1e-12) ++hungarian_bad;
  }

  int map_bad = 0;
  std::uniform_int_distribution<int> ncd(1, 5), nimg(1, 3), nbox(0, 20);
  std::uniform_real_distribution<double> sc(0.0, 1.0);
  for (int s = 0; s < kMapScenes; ++s) {
    int n_classes = ncd(rng), images = nimg(rng);
    std::vector<std::vector<Detection>> dets(static_cast<size_t>(images));
    std::vector<std::vector<Annotation>> gts(static_cast<size_t>(images));
    std::uniform_int_distribution<int> cls(0, n_classes - 1);
    for (int i = 0; i < images; ++i) {
      int n_det = nbox(rng), n_gt = nbox(rng) / 2;
      for (int j = 0; j < n_gt; ++j)
        gts[size_t(i)].push_back({random_box(rng, 40.0), cls(rng)});
      for (int j = 0; j < n_det; ++j) {
        Detection d;
        d.box = random_box(rng, 40.0);
        d.class_scores.resize(n_classes);
        for (int c = 0; c < n_classes; ++c) d.class_scores(c) = sc(rng);
        d.class_scores.maxCoeff(&d.label);
        d.score = d.class_scores(d.label);
        dets[size_t(i)].push_back(d);
      }
    }
    if (coco_map(dets, gts, n_classes).map != ref_map(dets, gts, n_classes)) ++map_bad;
  }

  bool ok = max_iou_err <= kIouOracleTol && hungarian_bad == 0 && map_bad == 0;
  verdict(2, ok,
          fmt("iou/giou max err %.2e on %d pairs; hungarian mismatches %d/%d; coco_map "
              "mismatches %d/%d",
              max_iou_err, kIouPairs, hungarian_bad, kHungarianInstances, map_bad,
              kMapScenes));
}

// ---- criterion 3: desk-scale OMA -----------------------------------------------------

TEST(Acceptance, c3_oma_attack) {
  OmaPair& P = oma_pair();
  double asr = P.poisoned.report.asr;
  double bmap = P.poisoned.report.bmap;
  double base = P.baseline.report.bmap;
  bool ok = asr >= kOmaAsrMin && bmap >= base - kBmapSlack && P.wall_sec <= kOmaBudgetSec;
  verdict(3, ok,
          fmt("ASR %.3f (min %.2f), BmAP %.2f vs lambda0 baseline %.2f (slack %.0f), "
              "%.0fs including pretrain (budget %.0fs)",
              asr, kOmaAsrMin, bmap, base, kBmapSlack, P.wall_sec, kOmaBudgetSec));
}

// ---- criterion 4: desk-scale ODA -----------------------------------------------------

TEST(Acceptance, c4_oda_attack) {
  Lab& L = lab();
  OmaPair& P = oma_pair();
  AttackRun run = L.run_attack(AttackKind::oda, L.cfg.train.lambda, L.cfg.seed, L.train,
                               L.cfg.train, L.cfg.curriculum, L.cfg.prompt);
  double bap = run.report.bap, pap = run.report.pap;
  double base_bap = P.baseline.report.bap;
  bool ok = pap <= kOdaPapFactor * bap && bap >= base_bap - kBapSlack;
  verdict(4, ok,
          fmt("PAP %.2f vs %.2f*BAP = %.2f; BAP %.2f vs baseline %.2f - %.0f; ASR %.3f",
              pap, kOdaPapFactor, kOdaPapFactor * bap, bap, base_bap, kBapSlack,
              run.report.asr));
}

// ---- criterion 5: desk-scale OGA -----------------------------------------------------

TEST(Acceptance, c5_oga_attack) {
  Lab& L = lab();
  AttackRun run = L.run_attack(AttackKind::oga, L.cfg.train.lambda, L.cfg.seed, L.train,
                               L.cfg.train, L.cfg.curriculum, L.cfg.prompt);
  bool ok = run.report.asr >= kOgaAsrMin;
  verdict(5, ok, fmt("ASR %.3f (min %.2f), %d/%d placements", run.report.asr, kOgaAsrMin,
                     run.report.asr_numerator, run.report.asr_denominator));
}

// ---- criterion 6: curriculum trend ---------------------------------------------------

TEST(Acceptance, c6_curriculum_trend) {
  Lab& L = lab();
  Dataset small = subset(L.train, 100);
  TrainConfig tc = L.cfg.train;
  tc.epochs = 9;
  int majority = 0;
  std::string detail;
  for (uint64_t seed : {101u, 102u, 103u}) {
    CurriculumSchedule curr{{{0, 0.2}, {6, 0.1}}, tc.epochs};
    CurriculumSchedule large{{{0, 0.2}}, tc.epochs};
    CurriculumSchedule fixed_small{{{0, 0.1}}, tc.epochs};
    double a_curr = L.run_attack(AttackKind::oma, tc.lambda, seed, small, tc, curr,
                                 L.cfg.prompt).report.asr;
    double a_large = L.run_attack(AttackKind::oma, tc.lambda, seed, small, tc, large,
                                  L.cfg.prompt).report.asr;
    double a_small = L.run_attack(AttackKind::oma, tc.lambda, seed, small, tc, fixed_small,
                                  L.cfg.prompt).report.asr;
    bool good = a_large < a_curr && a_small <= a_curr + kCurriculumSlack;
    majority += good;
    detail += fmt("[seed %llu: curriculum %.2f large %.2f small %.2f %s] ",
                  (unsigned long long)seed, a_curr, a_large, a_small, good ? "ok" : "x");
  }
  verdict(6, majority >= 2, fmt("%d/3 seeds satisfy; %s", majority, detail.c_str()));
}

// ---- criterion 7: modality trend -----------------------------------------------------

TEST(Acceptance, c7_modality_trend) {
  Lab& L = lab();
  Dataset small = subset(L.train, 100);
  TrainConfig tc = L.cfg.train;
  tc.epochs = 9;
  CurriculumSchedule curr{{{0, 0.2}, {6, 0.1}}, tc.epochs};
  int majority = 0;
  std::string detail;
  for (uint64_t seed : {201u, 202u, 203u}) {
    PromptConfig both = L.cfg.prompt;
    PromptConfig text_only = both;
    text_only.modality = PromptModality::text;
    PromptConfig vision_only = both;
    vision_only.modality = PromptModality::vision;
    double a_both = L.run_attack(AttackKind::oma, tc.lambda, seed, small, tc, curr,
                                 both).report.asr;
    double a_text = L.run_attack(AttackKind::oma, tc.lambda, seed, small, tc, curr,
                                 text_only).report.asr;
    double a_vis = L.run_attack(AttackKind::oma, tc.lambda, seed, small, tc, curr,
                                vision_only).report.asr;
    bool good = a_both >= a_text && a_both >= a_vis && a_text < kTextOnlyAsrMax;
    majority += good;
    detail += fmt("[seed %llu: both %.2f text %.2f vision %.2f %s] ",
                  (unsigned long long)seed, a_both, a_text, a_vis, good ? "ok" : "x");
  }
  verdict(7, majority >= 2, fmt("%d/3 seeds satisfy; %s", majority, detail.c_str()));
}

// ---- criterion 8: patchdrop trend ----------------------------------------------------

TEST(Acceptance, c8_patchdrop) {
  Lab& L = lab();
  OmaPair& P = oma_pair();
  DefenseConfig def;
  def.patchdrop_fraction = kPatchDropFraction;
  AttackSpec spec{AttackKind::oma, L.cfg.attack.target_class, L.cfg.attack.eval_rho};
  EvalReport dropped =
      evaluate_attack(L.core, P.poisoned.prompts, P.poisoned.trigger, L.test, spec,
                      spec.eval_rho, derive_seed(L.cfg.seed, "eval"), &def);
  const EvalReport& plain = P.poisoned.report;
  bool ok = dropped.asr < plain.asr && dropped.bmap < plain.bmap;
  verdict(8, ok,
          fmt("ASR %.3f -> %.3f, BmAP %.2f -> %.2f at drop fraction %.1f", plain.asr,
              dropped.asr, plain.bmap, dropped.bmap, kPatchDropFraction));
}

// ---- criterion 9: determinism --------------------------------------------------------

TEST(Acceptance, c9_determinism) {
  fs::path root = fs::temp_directory_path() / "trap_acceptance_det";
  fs::remove_all(root);
  ExperimentConfig c;
  c.out_root = (root / "runs").string();
  c.seed = 42;
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
  c.pretrain.epochs = 2;
  c.pretrain.match_warmup = 1;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  c.curriculum.stages = {{0, 0.5}};
  c.curriculum.total_epochs = 2;
  c.attack.eval_rho = 0.5;
  c.trigger_size = 6;

  auto pipeline = [&](const std::string& tag) {
    RunContext pre = begin_run(c, "pretrain-" + tag);
    run_pretrain(pre);
    ExperimentConfig ca = c;
    ca.in_core = pre.dir.string();
    RunContext atk = begin_run(ca, "attack-" + tag);
    run_attack(atk);
    ExperimentConfig ce = ca;
    ce.in_attack = atk.dir.string();
    RunContext ev = begin_run(ce, "eval-" + tag);
    run_eval(ev);
    std::map<std::string, std::string> files;
    files["report.json"] = read_text_file(ev.dir / "report.json");
    files["report.csv"] = read_text_file(ev.dir / "report.csv");
    files["core.bin"] = read_text_file(pre.dir / "core.bin");
    files["prompts.bin"] = read_text_file(atk.dir / "prompts.bin");
    files["trigger.bin"] = read_text_file(atk.dir / "trigger.bin");
    for (const auto& e : fs::directory_iterator(atk.dir / "checkpoints"))
      files["checkpoints/" + e.path().filename().string()] = read_text_file(e.path());
    return files;
  };
  auto a = pipeline("a");
  auto b = pipeline("b");
  int differ = 0;
  for (const auto& [name, bytes] : a)
    if (b.at(name) != bytes) ++differ;
  bool ok = a.size() == b.size() && differ == 0 && a.size() >= 9;
  verdict(9, ok, fmt("%zu artifacts compared, %d differ", a.size(), differ));
  fs::remove_all(root);
}

// ---- criterion 10: stamping exactness ------------------------------------------------

TEST(Acceptance, c10_stamping_exactness) {
  auto rng = make_rng(31);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_real_distribution<double> rho_d(0.05, 1.0);
  TriggerPatch trig(16, 16, 32);
  int bad_outside = 0, bad_dims = 0;
  for (int t = 0; t < kStampTriples; ++t) {
    int H = 48 + int(uni(rng) * 32), W = 48 + int(uni(rng) * 32);
    ImageSample img(H, W);
    for (Eigen::Index i = 0; i < img.pixels.rows(); ++i)
      for (int ch = 0; ch < 3; ++ch) img.pixels(i, ch) = uni(rng);
    std::uniform_real_distribution<double> bx(2.0, W - 28.0), by(2.0, H - 28.0);
    double x1 = bx(rng), y1 = by(rng);
    BoxXYXY box{x1, y1, x1 + 16 + uni(rng) * 8, y1 + 16 + uni(rng) * 8};
    double rho = rho_d(rng);
    Placement pl = plan_placement(box, rho, H, W);
    ImageSample stamped = stamp(img, trig, {pl});

    if (std::abs(pl.w() - rho * box.width()) > 1.0 ||
        std::abs(pl.h() - rho * box.height()) > 1.0)
      ++bad_dims;

    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (x >= pl.x1 && x < pl.x2 && y >= pl.y1 && y < pl.y2) continue;
        for (int ch = 0; ch < 3; ++ch)
          if (stamped.at(y, x, ch) != img.at(y, x, ch)) ++bad_outside;
      }
  }
  bool ok = bad_outside == 0 && bad_dims == 0;
  verdict(10, ok, fmt("%d triples: %d pixels changed outside the rect, %d dimension "
                      "violations", kStampTriples, bad_outside, bad_dims));
}
