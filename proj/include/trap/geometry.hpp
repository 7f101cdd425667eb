#pragma once

// Axis-aligned box arithmetic, trigger placement geometry and the
// differentiable stamping operator that pastes a resampled trigger patch
// into an image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "trap/autodiff.hpp"
#include "trap/common.hpp"

namespace trap {

/// Box in pixel coordinates, corners (x1,y1) top-left and (x2,y2) bottom-right.
struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 < x2 && y1 < y2;
  }
};

inline void require_valid(const BoxXYXY& b, const char* who) {
  if (!b.valid()) throw std::invalid_argument(std::string(who) + ": invalid box");
}

inline double iou(const BoxXYXY& a, const BoxXYXY& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return inter / uni;
}

/// IoU minus the fraction of the enclosing hull not covered by the union.
inline double giou(const BoxXYXY& a, const BoxXYXY& b) {
  require_valid(a, "giou");
  require_valid(b, "giou");
  double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  double hx = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  double hy = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  double hull = hx * hy;
  return inter / uni - (hull - uni) / hull;
}

/// RGB raster with intensities in [0,1]; row y*width+x of `pixels` holds one
/// pixel, columns are the three channels.
struct ImageSample {
  int height = 0;
  int width = 0;
  ad::Matrix pixels;  // (height*width) x 3

  ImageSample() = default;
  ImageSample(int h, int w) : height(h), width(w) {
    if (h < 1 || w < 1) throw config_error("ImageSample: empty");
    pixels = ad::Matrix::Zero(Eigen::Index(h) * w, 3);
  }

  double& at(int y, int x, int c) { return pixels(Eigen::Index(y) * width + x, c); }
  double at(int y, int x, int c) const { return pixels(Eigen::Index(y) * width + x, c); }
};

/// Learnable trigger. Free parameters are squashed through a sigmoid so the
/// realized pixels always live in [0,1] without clamping.
struct TriggerPatch {
  int height = 0;
  int width = 0;
  ad::Param base;  // (height*width) x 3, unconstrained

  TriggerPatch() = default;
  TriggerPatch(int h, int w, uint64_t seed) : height(h), width(w) {
    if (h < 1 || w < 1) throw config_error("TriggerPatch: empty");
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    ad::Matrix m(Eigen::Index(h) * w, 3);
    for (Eigen::Index j = 0; j < 3; ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = d(rng);
    base = ad::Param(std::move(m), "trigger");
  }

  /// Realized pixel intensities in (0,1).
  ad::Matrix squashed() const {
    return base.value.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  }
};

/// Integer pixel rectangle where a trigger lands, plus the scale it was
/// planned at.
struct Placement {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double rho = 0;

  int w() const { return x2 - x1; }
  int h() const { return y2 - y1; }
};

/// Center a rho-scaled rectangle on `box` and clip it to the image.
/// Side lengths are rounded to the nearest pixel; a rectangle that would
/// vanish after rounding or clipping is promoted to a single pixel.
inline Placement plan_placement(const BoxXYXY& box, double rho, int image_h, int image_w) {
  require_valid(box, "plan_placement");
  if (!(rho > 0.0 && rho <= 1.0))
    throw config_error("plan_placement: rho must be in (0,1]");
  int rw = std::max<int>(1, int(std::llround(rho * box.width())));
  int rh = std::max<int>(1, int(std::llround(rho * box.height())));
  int x1 = int(std::floor(box.cx() - 0.5 * rw));
  int y1 = int(std::floor(box.cy() - 0.5 * rh));
  int x2 = x1 + rw;
  int y2 = y1 + rh;
  x1 = std::max(0, x1);
  y1 = std::max(0, y1);
  x2 = std::min(image_w, x2);
  y2 = std::min(image_h, y2);
  if (x2 <= x1) {
    x1 = std::clamp(x1, 0, image_w - 1);
    x2 = x1 + 1;
  }
  if (y2 <= y1) {
    y1 = std::clamp(y1, 0, image_h - 1);
    y2 = y1 + 1;
  }
  return Placement{x1, y1, x2, y2, rho};
}

namespace detail {

struct BilinearTap {
  Eigen::Index out_row;    // pixel row in the image matrix
  Eigen::Index src[4];     // trigger rows
  double w[4];             // interpolation weights
};

/// Taps mapping a trigger of size th x tw onto a placement rect.
inline std::vector<BilinearTap> bilinear_taps(const Placement& p, int th, int tw,
                                              int image_w) {
  std::vector<BilinearTap> taps;
  taps.reserve(size_t(p.w()) * p.h());
  for (int ry = 0; ry < p.h(); ++ry) {
    double sy = (ry + 0.5) * double(th) / p.h() - 0.5;
    sy = std::clamp(sy, 0.0, double(th - 1));
    int y0 = int(std::floor(sy));
    int y1 = std::min(y0 + 1, th - 1);
    double wy = sy - y0;
    for (int rx = 0; rx < p.w(); ++rx) {
      double sx = (rx + 0.5) * double(tw) / p.w() - 0.5;
      sx = std::clamp(sx, 0.0, double(tw - 1));
      int x0 = int(std::floor(sx));
      int x1 = std::min(x0 + 1, tw - 1);
      double wx = sx - x0;
      BilinearTap t;
      t.out_row = Eigen::Index(p.y1 + ry) * image_w + (p.x1 + rx);
      t.src[0] = Eigen::Index(y0) * tw + x0;
      t.src[1] = Eigen::Index(y0) * tw + x1;
      t.src[2] = Eigen::Index(y1) * tw + x0;
      t.src[3] = Eigen::Index(y1) * tw + x1;
      t.w[0] = (1 - wy) * (1 - wx);
      t.w[1] = (1 - wy) * wx;
      t.w[2] = wy * (1 - wx);
      t.w[3] = wy * wx;
      taps.push_back(t);
    }
  }
  return taps;
}

inline void require_inside(const Placement& p, int h, int w) {
  if (p.x1 < 0 || p.y1 < 0 || p.x2 > w || p.y2 > h || p.x2 <= p.x1 || p.y2 <= p.y1)
    throw std::invalid_argument("stamp: placement outside image");
}

// Shared by the plain and graph stamping paths so both produce bit-identical
// pixels (noinline pins a single code-generation of the arithmetic).
[[gnu::noinline]] inline void paste_taps(ad::Matrix& out, const std::vector<BilinearTap>& taps,
                                         const ad::Matrix& trig) {
  for (const auto& t : taps)
    for (int c = 0; c < 3; ++c)
      out(t.out_row, c) = t.w[0] * trig(t.src[0], c) + t.w[1] * trig(t.src[1], c) +
                          t.w[2] * trig(t.src[2], c) + t.w[3] * trig(t.src[3], c);
}

}  // namespace detail

/// Paste the trigger into every placement rect (bilinear resampling, later
/// placements overwrite earlier ones). Pixels outside all rects are copied
/// bit-identically.
inline ImageSample stamp(const ImageSample& image, const TriggerPatch& trigger,
                         const std::vector<Placement>& placements) {
  ImageSample out = image;
  ad::Matrix trig = trigger.squashed();
  for (const Placement& p : placements) {
    detail::require_inside(p, image.height, image.width);
    detail::paste_taps(out.pixels,
                       detail::bilinear_taps(p, trigger.height, trigger.width, image.width),
                       trig);
  }
  return out;
}

/// Graph version of stamp(); gradients flow to the squashed trigger node.
/// Produces pixel values bit-identical to stamp().
inline ad::Var stamp_graph(ad::Graph& g, const ImageSample& image, ad::Var trig_squashed,
                           int trig_h, int trig_w, const std::vector<Placement>& placements) {
  ad::Matrix out = image.pixels;
  const ad::Matrix& trig = g.val(trig_squashed);
  if (trig.rows() != Eigen::Index(trig_h) * trig_w || trig.cols() != 3)
    throw dim_error("stamp_graph: trigger shape");

  // Later placements overwrite earlier ones, so only the last placement
  // covering a pixel owns its gradient.
  std::vector<detail::BilinearTap> owned;
  std::vector<char> seen(size_t(image.height) * image.width, 0);
  for (auto it = placements.rbegin(); it != placements.rend(); ++it) {
    detail::require_inside(*it, image.height, image.width);
    for (const auto& t : detail::bilinear_taps(*it, trig_h, trig_w, image.width)) {
      if (seen[size_t(t.out_row)]) continue;
      seen[size_t(t.out_row)] = 1;
      owned.push_back(t);
    }
  }
  detail::paste_taps(out, owned, trig);

  return g.custom(std::move(out), g.needs_grad(trig_squashed),
                  [trig_squashed, owned](ad::Graph& gg, const ad::Matrix& go) {
                    ad::Matrix dt = ad::Matrix::Zero(gg.rows(trig_squashed), 3);
                    for (const auto& t : owned)
                      for (int c = 0; c < 3; ++c) {
                        double gv = go(t.out_row, c);
                        dt(t.src[0], c) += t.w[0] * gv;
                        dt(t.src[1], c) += t.w[1] * gv;
                        dt(t.src[2], c) += t.w[2] * gv;
                        dt(t.src[3], c) += t.w[3] * gv;
                      }
                    gg.accum(trig_squashed, dt);
                  });
}

}  // namespace trap
