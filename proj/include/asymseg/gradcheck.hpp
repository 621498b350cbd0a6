#pragma once

// Central-difference check of the network parameter gradients for every
// objective term, in double precision. ReLU, max-pool and the projection max
// are piecewise smooth, so a check point is only accepted if none of their
// selection patterns changes anywhere within +-eps of it; otherwise the next
// seed is tried.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "asymseg/geometry.hpp"
#include "asymseg/losses.hpp"
#include "asymseg/network.hpp"
#include "asymseg/rng.hpp"

namespace asymseg {

struct GradcheckConfig {
  NetConfig net{2, 3, 1, 2};
  int size = 16;
  int batch = 2;
  double eps = 1e-4;
  double tolerance = 1e-5;
  // Relative error is |a - b| / max(|a|, |b|, floor). Central differences at
  // eps = 1e-4 on an O(1) loss carry ~1e-12 roundoff; the floor keeps
  // near-zero gradients from being judged on that noise.
  double floor = 1e-6;
  std::uint64_t seed = 1;
  int max_attempts = 20;
  double alpha = 3.0;
  double lambda1 = 0.5;
  double lambda2 = 0.3;
};

struct GradcheckTerm {
  std::string name;
  double max_rel_error = 0;
  std::string worst_parameter;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t checked = 0;
  std::size_t over_tolerance = 0;
};

struct GradcheckResult {
  std::vector<GradcheckTerm> terms;
  std::size_t parameters = 0;  // per network
  std::uint64_t seed = 0;      // seed of the accepted check point
  int attempts = 0;
  bool smooth = false;  // false if no kink-free point was found

  double max_rel_error() const {
    double m = 0;
    for (const auto& t : terms) m = std::max(m, t.max_rel_error);
    return m;
  }
  bool passed(double tol) const { return smooth && max_rel_error() < tol; }
};

namespace detail {

struct GradcheckProblem {
  Tensor<double> input;
  std::vector<BinaryMask> y_rad, y_con, cross, y_pl, m;
};

inline AspectAnnotation gradcheck_annotation(Rng& rng, int size) {
  const double theta = rng.uniform(0, std::numbers::pi);
  const double major = rng.uniform(0.55, 0.75) * size, minor = rng.uniform(0.3, 0.5) * size;
  const Point2 c{size / 2.0 + rng.uniform(-1, 1), size / 2.0 + rng.uniform(-1, 1)};
  const Point2 u{std::cos(theta), std::sin(theta)};
  const Point2 v = perp(u);
  return {{c - 0.5 * major * u, c + 0.5 * major * u}, {c - 0.45 * minor * v, c + 0.55 * minor * v}};
}

// Everything the loss selects on besides the network's own activations.
template <class T>
std::vector<std::int64_t> loss_pattern(const Tensor<T>& probs) {
  std::vector<std::int64_t> out;
  for (int n = 0; n < probs.dim(0); ++n) {
    const auto v = prob_view(probs, n);
    const auto pr = axis_projection_pred(v);
    out.insert(out.end(), pr.argmax_x.begin(), pr.argmax_x.end());
    out.insert(out.end(), pr.argmax_y.begin(), pr.argmax_y.end());
    for (std::size_t z = 0; z < v.size(); ++z) {
      for (double p : {double(v.bg[z]), double(v.fg[z])}) out.push_back(p < kProbClamp ? -1 : p > 1 - kProbClamp ? 1 : 0);
    }
  }
  return out;
}

}  // namespace detail

inline GradcheckResult run_gradcheck(const GradcheckConfig& cfg) {
  validate(cfg.net);
  GradcheckResult result;
  const std::vector<std::string> names{"sup", "idmps", "cap", "total"};

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const std::uint64_t seed = cfg.seed + attempt;
    result = {};
    result.seed = seed;
    result.attempts = attempt + 1;

    Rng rng(seed, 0x6C);
    ParamStore<double> nets[2] = {init_params<double>(cfg.net, substream_seed(seed, 1)),
                                  init_params<double>(cfg.net, substream_seed(seed, 2))};
    // Small non-zero biases so every bias path carries signal.
    for (auto& p : nets) {
      for (auto& e : p.entries()) {
        if (e.name.ends_with(".bias")) {
          for (auto& v : e.values.values()) v = rng.uniform(-0.05, 0.05);
        }
      }
    }
    result.parameters = nets[0].parameter_count();

    detail::GradcheckProblem pb;
    pb.input = Tensor<double>({cfg.batch, 1, cfg.size, cfg.size});
    for (auto& v : pb.input.values()) v = rng.uniform();
    for (int n = 0; n < cfg.batch; ++n) {
      const auto ann = detail::gradcheck_annotation(rng, cfg.size);
      const GridSize g{cfg.size, cfg.size};
      pb.y_rad.push_back(generate_pseudo_label(ann, ShapeKind::IrregularEllipse, g));
      pb.y_con.push_back(generate_pseudo_label(ann, ShapeKind::Quadrilateral, g));
      pb.cross.push_back(rasterize_cross(ann, g));
      pb.m.push_back(inconsistency_mask(pb.y_rad.back(), pb.y_con.back()));
    }

    Tape<double> tapes[2];
    Tensor<double> probs[2] = {forward(nets[0], pb.input, &tapes[0]), forward(nets[1], pb.input, &tapes[1])};
    for (int n = 0; n < cfg.batch; ++n) {
      pb.y_pl.push_back(mix_pseudo_label(prob_view(probs[0], n), prob_view(probs[1], n), rng.uniform()));
    }
    std::vector<ItemTargets> items;
    for (int n = 0; n < cfg.batch; ++n) {
      items.push_back({&pb.y_rad[n], &pb.y_con[n], &pb.cross[n], pb.y_pl[n], pb.m[n]});
    }
    // Each term in isolation (unit weight), plus the weighted total.
    auto settings_for = [&](const std::string& term) {
      DualLossSettings s;
      s.alpha = cfg.alpha;
      s.sup = term == "sup" || term == "total";
      s.idmps = term == "idmps" || term == "total";
      s.cap = term == "cap" || term == "total";
      s.lambda1 = term == "total" ? cfg.lambda1 : 1.0;
      s.lambda2 = term == "total" ? cfg.lambda2 : 1.0;
      return s;
    };
    auto term_value = [&](const std::string& term, const Tensor<double>& pc, const Tensor<double>& pr) {
      return dual_loss(pc, pr, items, settings_for(term)).total;
    };

    const auto base_act = std::vector{tapes[0].activation_pattern(), tapes[1].activation_pattern()};
    const auto base_loss = std::vector{detail::loss_pattern(probs[0]), detail::loss_pattern(probs[1])};

    std::vector<Gradients<double>> analytic[2];
    for (const auto& term : names) {
      Tensor<double> gc(probs[0].shape()), gr(probs[1].shape());
      dual_loss(probs[0], probs[1], items, settings_for(term), &gc, &gr);
      analytic[0].push_back(backward(nets[0], tapes[0], gc));
      analytic[1].push_back(backward(nets[1], tapes[1], gr));
    }

    for (const auto& name : names) {
      GradcheckTerm t;
      t.name = name;
      result.terms.push_back(t);
    }
    bool smooth = true;
    for (int which = 0; which < 2 && smooth; ++which) {
      auto& net = nets[which];
      for (std::size_t e = 0; e < net.size() && smooth; ++e) {
        auto& vals = net.entries()[e].values;
        for (std::size_t k = 0; k < vals.size() && smooth; ++k) {
          const double keep = vals[k];
          double f[2][4];
          for (int side = 0; side < 2; ++side) {
            vals[k] = keep + (side == 0 ? cfg.eps : -cfg.eps);
            Tape<double> tape;
            Tensor<double> moved = forward(net, pb.input, &tape);
            if (tape.activation_pattern() != base_act[which] || detail::loss_pattern(moved) != base_loss[which]) {
              smooth = false;
              break;
            }
            const Tensor<double>& pc = which == 0 ? moved : probs[0];
            const Tensor<double>& pr = which == 1 ? moved : probs[1];
            for (std::size_t t = 0; t < names.size(); ++t) f[side][t] = term_value(names[t], pc, pr);
          }
          vals[k] = keep;
          if (!smooth) break;
          for (std::size_t t = 0; t < names.size(); ++t) {
            const double fd = (f[0][t] - f[1][t]) / (2 * cfg.eps);
            const double an = analytic[which][t][e][k];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), cfg.floor});
            auto& term = result.terms[t];
            ++term.checked;
            term.over_tolerance += rel >= cfg.tolerance;
            if (rel > term.max_rel_error) {
              term.max_rel_error = rel;
              term.worst_analytic = an;
              term.worst_numeric = fd;
              term.worst_parameter = std::string(which == 0 ? "con:" : "rad:") + net.entries()[e].name + "[" +
                                     std::to_string(k) + "]";
            }
          }
        }
      }
    }
    if (smooth) {
      result.smooth = true;
      return result;
    }
  }
  return result;
}

}  // namespace asymseg
