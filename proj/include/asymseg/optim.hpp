#pragma once

#include <cmath>

#include "asymseg/error.hpp"
#include "asymseg/network.hpp"

namespace asymseg {

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Classic momentum SGD with L2 folded into the gradient:
///   v <- m*v + g + wd*w;  w <- w - lr*v
template <class T>
void sgd_step(ParamStore<T>& params, const Gradients<T>& grads, double lr, SgdConfig cfg = {}) {
  if (grads.size() != params.size()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient count does not match parameter count");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& e = params.entries()[i];
    if (grads[i].shape() != e.values.shape()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient shape mismatch for " + e.name);
    }
    const T m = static_cast<T>(cfg.momentum);
    const T wd = static_cast<T>(cfg.weight_decay);
    const T step = static_cast<T>(lr);
    T* w = e.values.data();
    T* v = e.momentum.data();
    const T* g = grads[i].data();
    for (std::size_t k = 0; k < e.values.size(); ++k) {
      v[k] = m * v[k] + g[k] + wd * w[k];
      w[k] -= step * v[k];
    }
  }
}

/// lr0 * (1 - iter/total)^power.
inline double poly_lr(long iter, long total, double lr0 = 0.01, double power = 0.9) {
  if (total <= 0 || iter < 0 || iter > total) {
    throw Error(ErrorCode::ConfigError, "poly_lr requires 0 <= iter <= total and total > 0");
  }
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), power);
}

}  // namespace asymseg
