#pragma once

// Loss terms over two-class probability maps. Every differentiable term
// optionally accumulates `scale * dLoss/dProb` into a gradient view, so the
// total objective can be assembled and sent through SegNet::backward.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "asymseg/error.hpp"
#include "asymseg/mask.hpp"
#include "asymseg/tensor.hpp"

namespace asymseg {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1e-6;

/// Read-only view of one [2,H,W] probability map (channel 0 background).
template <class T>
struct ProbMapView {
  const T* bg = nullptr;
  const T* fg = nullptr;
  int height = 0;
  int width = 0;

  std::size_t size() const { return std::size_t(height) * width; }
  GridSize grid() const { return {height, width}; }
};

/// Writable gradient view matching a ProbMapView; null means "not wanted".
template <class T>
struct ProbGradView {
  T* bg = nullptr;
  T* fg = nullptr;

  explicit operator bool() const { return bg != nullptr; }
};

/// Item `n` of a [N,2,H,W] tensor, or the whole of a [2,H,W] tensor.
template <class T>
ProbMapView<T> prob_view(const Tensor<T>& t, int n = 0) {
  const bool batched = t.rank() == 4;
  if ((!batched && t.rank() != 3) || t.dim(batched ? 1 : 0) != 2) {
    throw Error(ErrorCode::ShapeMismatch, "expected a two-channel probability map, got " + shape_string(t));
  }
  const int h = t.dim(batched ? 2 : 1), w = t.dim(batched ? 3 : 2);
  const std::size_t hw = std::size_t(h) * w;
  const T* base = t.data() + std::size_t(n) * 2 * hw;
  return {base, base + hw, h, w};
}

template <class T>
ProbGradView<T> grad_view(Tensor<T>& t, int n = 0) {
  const bool batched = t.rank() == 4;
  const std::size_t hw = std::size_t(t.dim(batched ? 2 : 1)) * t.dim(batched ? 3 : 2);
  T* base = t.data() + std::size_t(n) * 2 * hw;
  return {base, base + hw};
}

struct ClassWeights {
  double w0 = 1.0;  // background
  double w1 = 1.0;  // foreground

  void validate() const {
    if (!(w0 > 0) || !(w1 > 0)) throw Error(ErrorCode::ConfigError, "class weights must be positive");
  }
};

/// Background-heavy weights for a radical (over-segmenting) label and
/// foreground-heavy weights for a conservative one.
inline ClassWeights radical_label_weights(double alpha) { return {alpha, 1.0}; }
inline ClassWeights conservative_label_weights(double alpha) { return {1.0, alpha}; }

namespace detail {

template <class T>
void require_grid(const ProbMapView<T>& p, const BinaryMask& m, const char* what) {
  if (p.height != m.height() || p.width != m.width()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": probability map and mask sizes differ");
  }
}

// -log(clamp(p)) and its derivative (zero where the clamp is active).
template <class T>
double neg_log(T p, double* dlogp) {
  const double v = static_cast<double>(p);
  if (v < kProbClamp) {
    *dlogp = 0.0;
    return -std::log(kProbClamp);
  }
  if (v > 1.0 - kProbClamp) {
    *dlogp = 0.0;
    return -std::log(1.0 - kProbClamp);
  }
  *dlogp = -1.0 / v;
  return -std::log(v);
}

// Shared CE kernel: per-pixel weight from `weight_of(z, is_fg)`, normaliser `norm`.
template <class T, class WeightFn>
double ce_kernel(const ProbMapView<T>& p, const BinaryMask& target, WeightFn weight_of, double norm,
                 ProbGradView<T> grad, double scale) {
  const auto bits = target.bits();
  double sum = 0.0;
  for (std::size_t z = 0; z < p.size(); ++z) {
    const bool fg = bits[z] != 0;
    const double w = weight_of(z, fg);
    if (w == 0.0) continue;
    double d = 0.0;
    sum += w * neg_log(fg ? p.fg[z] : p.bg[z], &d);
    if (grad) (fg ? grad.fg : grad.bg)[z] += static_cast<T>(scale * w * d / norm);
  }
  return sum / norm;
}

}  // namespace detail

/// Class-weighted cross-entropy, averaged over all H*W pixels.
template <class T>
double weighted_ce(const ProbMapView<T>& pred, const BinaryMask& target, ClassWeights weights,
                   ProbGradView<T> grad = {}, double scale = 1.0) {
  detail::require_grid(pred, target, "weighted_ce");
  weights.validate();
  return detail::ce_kernel(
      pred, target, [&](std::size_t, bool fg) { return fg ? weights.w1 : weights.w0; },
      static_cast<double>(pred.size()), grad, scale);
}

/// Per-pixel exclusive-or of the two labels.
inline BinaryMask inconsistency_mask(const BinaryMask& y_rad, const BinaryMask& y_con) {
  y_rad.require_same_shape(y_con);
  BinaryMask out(y_rad.height(), y_rad.width());
  auto a = y_rad.bits();
  auto b = y_con.bits();
  auto o = out.bits();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (a[i] != 0) != (b[i] != 0);
  return out;
}

/// Hard label from beta*con + (1-beta)*rad; exact ties go to background.
template <class T>
BinaryMask mix_pseudo_label(const ProbMapView<T>& con, const ProbMapView<T>& rad, double beta) {
  if (con.height != rad.height || con.width != rad.width) {
    throw Error(ErrorCode::ShapeMismatch, "mix_pseudo_label: probability maps differ in size");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::ConfigError, "beta must lie in [0, 1]");
  BinaryMask out(con.height, con.width);
  auto o = out.bits();
  for (std::size_t z = 0; z < con.size(); ++z) {
    const double fg = beta * double(con.fg[z]) + (1.0 - beta) * double(rad.fg[z]);
    const double bg = beta * double(con.bg[z]) + (1.0 - beta) * double(rad.bg[z]);
    o[z] = fg > bg;
  }
  return out;
}

/// Cross-entropy restricted to `mask`, averaged over max(1, |mask|) pixels.
template <class T>
double masked_ce(const ProbMapView<T>& pred, const BinaryMask& target, const BinaryMask& mask,
                 ProbGradView<T> grad = {}, double scale = 1.0) {
  detail::require_grid(pred, target, "masked_ce");
  target.require_same_shape(mask);
  const auto m = mask.bits();
  const double norm = std::max<double>(1.0, static_cast<double>(mask.count()));
  return detail::ce_kernel(
      pred, target, [&](std::size_t z, bool) { return m[z] ? 1.0 : 0.0; }, norm, grad, scale);
}

template <class T>
double idmps_loss(const ProbMapView<T>& pred_con, const ProbMapView<T>& pred_rad, const BinaryMask& y_pl,
                  const BinaryMask& m, ProbGradView<T> grad_con = {}, ProbGradView<T> grad_rad = {},
                  double scale = 1.0) {
  return masked_ce(pred_rad, y_pl, m, grad_rad, scale) + masked_ce(pred_con, y_pl, m, grad_con, scale);
}

struct AxisProjection {
  std::vector<double> x;  // per column, length W
  std::vector<double> y;  // per row, length H
};

/// Column/row maxima of the foreground probability, with the flat index of
/// the (first) maximising pixel for each entry.
struct PredProjection {
  AxisProjection values;
  std::vector<std::size_t> argmax_x;
  std::vector<std::size_t> argmax_y;
};

template <class T>
PredProjection axis_projection_pred(const ProbMapView<T>& pred) {
  PredProjection out;
  const int h = pred.height, w = pred.width;
  out.values.x.assign(w, -1.0);
  out.values.y.assign(h, -1.0);
  out.argmax_x.assign(w, 0);
  out.argmax_y.assign(h, 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t z = std::size_t(r) * w + c;
      const double v = pred.fg[z];
      if (v > out.values.x[c]) {
        out.values.x[c] = v;
        out.argmax_x[c] = z;
      }
      if (v > out.values.y[r]) {
        out.values.y[r] = v;
        out.argmax_y[r] = z;
      }
    }
  }
  return out;
}

inline AxisProjection axis_projection_annotation(const BinaryMask& cross) {
  AxisProjection out{std::vector<double>(cross.width(), 0.0), std::vector<double>(cross.height(), 0.0)};
  for (int r = 0; r < cross.height(); ++r) {
    for (int c = 0; c < cross.width(); ++c) {
      if (cross(r, c)) out.x[c] = out.y[r] = 1.0;
    }
  }
  return out;
}

/// Two-class soft Dice loss, (1/2) * sum_k (1 - dice_k). If `grad` is
/// non-empty it receives scale * dLoss/dPred (accumulated).
inline double soft_dice_loss(std::span<const double> pred, std::span<const double> target,
                             std::span<double> grad = {}, double scale = 1.0) {
  if (pred.size() != target.size()) throw Error(ErrorCode::LengthMismatch, "soft_dice_loss: lengths differ");
  if (!grad.empty() && grad.size() != pred.size()) {
    throw Error(ErrorCode::LengthMismatch, "soft_dice_loss: gradient length differs");
  }
  double inter1 = 0, sp1 = 0, sq1 = 0, inter0 = 0, sp0 = 0, sq0 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], q = target[i];
    inter1 += p * q;
    sp1 += p;
    sq1 += q;
    inter0 += (1 - p) * (1 - q);
    sp0 += 1 - p;
    sq0 += 1 - q;
  }
  const double u1 = sp1 + sq1 + kDiceSmooth, u0 = sp0 + sq0 + kDiceSmooth;
  const double n1 = 2 * inter1 + kDiceSmooth, n0 = 2 * inter0 + kDiceSmooth;
  if (!grad.empty()) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double q = target[i];
      const double dd1 = (2 * q * u1 - n1) / (u1 * u1);
      const double dd0 = (2 * (1 - q) * u0 - n0) / (u0 * u0);
      grad[i] += scale * -0.5 * (dd1 - dd0);
    }
  }
  return 0.5 * ((1 - n1 / u1) + (1 - n0 / u0));
}

/// Dice on the column projection plus Dice on the row projection.
template <class T>
double cap_loss(const ProbMapView<T>& pred, const BinaryMask& cross, ProbGradView<T> grad = {},
                double scale = 1.0) {
  detail::require_grid(pred, cross, "cap_loss");
  const auto proj = axis_projection_pred(pred);
  const auto ann = axis_projection_annotation(cross);
  std::vector<double> gx, gy;
  if (grad) {
    gx.assign(proj.values.x.size(), 0.0);
    gy.assign(proj.values.y.size(), 0.0);
  }
  const double loss = soft_dice_loss(proj.values.x, ann.x, gx, scale) + soft_dice_loss(proj.values.y, ann.y, gy, scale);
  if (grad) {
    for (std::size_t c = 0; c < gx.size(); ++c) grad.fg[proj.argmax_x[c]] += static_cast<T>(gx[c]);
    for (std::size_t r = 0; r < gy.size(); ++r) grad.fg[proj.argmax_y[r]] += static_cast<T>(gy[r]);
  }
  return loss;
}

struct LossWeights {
  double alpha = 3.0;
  double lambda2 = 0.3;
  double lambda1_max = 1.0;
  long rampup_len = 2000;

  void validate() const {
    if (!(alpha >= 1.0)) throw Error(ErrorCode::ConfigError, "alpha must be >= 1");
    if (!(lambda2 >= 0.0) || !(lambda1_max >= 0.0)) throw Error(ErrorCode::ConfigError, "loss weights must be >= 0");
    if (rampup_len <= 0) throw Error(ErrorCode::ConfigError, "rampup_len must be positive");
  }
};

/// Gaussian ramp-up lambda1_max * exp(-5 (1 - t/T)^2), t clipped at T.
inline double lambda1_rampup(long iter, const LossWeights& cfg) {
  if (iter < 0) throw Error(ErrorCode::ConfigError, "iteration must be >= 0");
  const double t = static_cast<double>(std::min(iter, cfg.rampup_len)) / static_cast<double>(cfg.rampup_len);
  return cfg.lambda1_max * std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

struct LossTerms {
  double sup = 0;
  double idmps = 0;
  double cap = 0;
  double total = 0;
};

inline double total_loss(const LossTerms& t, double lambda1, double lambda2) {
  return t.sup + lambda1 * t.idmps + lambda2 * t.cap;
}

/// Which label supervises which network in the supervised term. `Cross`
/// trains the conservative network on the radical label and vice versa;
/// `Direct` pairs each network with its own label. Class weights follow the
/// label kind in both cases.
enum class Pairing { Cross, Direct };

/// Per-item targets for the dual objective.
struct ItemTargets {
  const BinaryMask* y_rad = nullptr;
  const BinaryMask* y_con = nullptr;
  const BinaryMask* cross = nullptr;
  BinaryMask y_pl;
  BinaryMask m;
};

struct DualLossSettings {
  double alpha = 3.0;
  double lambda1 = 0.0;
  double lambda2 = 0.3;
  bool crbs = true;
  bool idmps = true;
  bool cap = true;
  bool sup = true;  // off only to isolate the other terms
  Pairing pairing = Pairing::Cross;
};

/// Batch-mean objective for the two networks. Gradients (if requested) are
/// written into `g_con`/`g_rad`, which must be zero-filled [N,2,H,W] tensors.
template <class T>
LossTerms dual_loss(const Tensor<T>& p_con, const Tensor<T>& p_rad, std::span<const ItemTargets> items,
                    const DualLossSettings& s, Tensor<T>* g_con = nullptr, Tensor<T>* g_rad = nullptr) {
  if (p_con.shape() != p_rad.shape() || p_con.rank() != 4 ||
      static_cast<std::size_t>(p_con.dim(0)) != items.size()) {
    throw Error(ErrorCode::ShapeMismatch, "dual_loss: batch shapes disagree");
  }
  const double alpha = s.crbs ? s.alpha : 1.0;
  const double inv_n = 1.0 / static_cast<double>(items.size());
  LossTerms t;
  for (std::size_t n = 0; n < items.size(); ++n) {
    const auto& it = items[n];
    const auto con = prob_view(p_con, int(n));
    const auto rad = prob_view(p_rad, int(n));
    ProbGradView<T> gc = g_con ? grad_view(*g_con, int(n)) : ProbGradView<T>{};
    ProbGradView<T> gr = g_rad ? grad_view(*g_rad, int(n)) : ProbGradView<T>{};

    const bool cross = s.pairing == Pairing::Cross;
    const BinaryMask& con_label = cross ? *it.y_rad : *it.y_con;
    const BinaryMask& rad_label = cross ? *it.y_con : *it.y_rad;
    const ClassWeights con_w = cross ? radical_label_weights(alpha) : conservative_label_weights(alpha);
    const ClassWeights rad_w = cross ? conservative_label_weights(alpha) : radical_label_weights(alpha);
    if (s.sup) {
      t.sup += inv_n * (weighted_ce(con, con_label, con_w, gc, inv_n) + weighted_ce(rad, rad_label, rad_w, gr, inv_n));
    }
    if (s.idmps) {
      t.idmps += inv_n * idmps_loss(con, rad, it.y_pl, it.m, gc, gr, s.lambda1 * inv_n);
    }
    if (s.cap) {
      t.cap += inv_n * (cap_loss(con, *it.cross, gc, s.lambda2 * inv_n) + cap_loss(rad, *it.cross, gr, s.lambda2 * inv_n));
    }
  }
  t.total = total_loss(t, s.lambda1, s.lambda2);
  return t;
}

/// Batch-mean objective for one network trained on a single label kind.
template <class T>
LossTerms single_loss(const Tensor<T>& p, std::span<const BinaryMask* const> labels,
                      std::span<const BinaryMask* const> crosses, ClassWeights weights, bool cap, double lambda2,
                      Tensor<T>* g = nullptr) {
  if (p.rank() != 4 || static_cast<std::size_t>(p.dim(0)) != labels.size() ||
      (cap && crosses.size() != labels.size())) {
    throw Error(ErrorCode::ShapeMismatch, "single_loss: batch shapes disagree");
  }
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  LossTerms t;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto v = prob_view(p, int(n));
    ProbGradView<T> gv = g ? grad_view(*g, int(n)) : ProbGradView<T>{};
    t.sup += inv_n * weighted_ce(v, *labels[n], weights, gv, inv_n);
    if (cap) t.cap += inv_n * cap_loss(v, *crosses[n], gv, lambda2 * inv_n);
  }
  t.total = total_loss(t, 0.0, lambda2);
  return t;
}

}  // namespace asymseg
