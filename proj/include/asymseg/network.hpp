#pragma once

// Small encoder-decoder segmentation network with hand-written reverse-mode
// gradients. Each stage is two 3x3 conv + bias + ReLU layers; the encoder
// downsamples with 2x2 max pooling, the decoder upsamples by nearest-neighbour
// replication and concatenates the matching encoder output, and a 1x1 conv
// followed by a per-pixel softmax produces the two-class probability map.
//
// Activations are kept channel-major as (C, N*H*W) matrices. 3x3 layers run
// the direct kernels of conv3.hpp; the 1x1 head is a single GEMM.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "asymseg/conv3.hpp"
#include "asymseg/error.hpp"
#include "asymseg/rng.hpp"
#include "asymseg/tensor.hpp"

namespace asymseg {

struct NetConfig {
  int depth = 2;
  int base_channels = 8;
  int in_channels = 1;
  int out_channels = 2;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void validate(const NetConfig& cfg) {
  if (cfg.depth < 0 || cfg.depth > 6) throw Error(ErrorCode::ConfigError, "depth must be in [0, 6]");
  if (cfg.base_channels < 1) throw Error(ErrorCode::ConfigError, "base_channels must be >= 1");
  if (cfg.in_channels != 1 || cfg.out_channels != 2) {
    throw Error(ErrorCode::ConfigError, "network expects 1 input channel and 2 output classes");
  }
}

template <class T>
struct ParamEntry {
  std::string name;
  Tensor<T> values;
  Tensor<T> momentum;
};

/// Named weights of one network plus their SGD momentum buffers.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(NetConfig cfg) : config_(cfg) {}

  const NetConfig& config() const noexcept { return config_; }

  ParamEntry<T>& add(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw Error(ErrorCode::ConfigError, "duplicate parameter " + name);
    index_[name] = entries_.size();
    Tensor<T> v(shape);
    entries_.push_back({name, v, Tensor<T>(std::move(shape))});
    return entries_.back();
  }

  std::vector<ParamEntry<T>>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  const ParamEntry<T>& at(const std::string& name) const { return entries_.at(lookup(name)); }
  ParamEntry<T>& at(const std::string& name) { return entries_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.values.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out(config_);
    for (const auto& e : entries_) {
      auto& o = out.add(e.name, e.values.shape());
      o.values = e.values.template cast<U>();
      o.momentum = e.momentum.template cast<U>();
    }
    return out;
  }

  /// Same names, shapes and values (momentum ignored).
  bool same_weights(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size() || !(config_ == other.config_)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name ||
          !(entries_[i].values == other.entries_[i].values)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::ConfigError, "unknown parameter " + name);
    return it->second;
  }

  NetConfig config_;
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients, aligned entry-by-entry with a ParamStore.
template <class T>
using Gradients = std::vector<Tensor<T>>;

template <class T>
Gradients<T> zeros_like(const ParamStore<T>& p) {
  Gradients<T> g;
  g.reserve(p.size());
  for (const auto& e : p.entries()) g.emplace_back(e.values.shape());
  return g;
}

struct ConvSpec {
  std::string name;
  int in_channels;
  int out_channels;
  int kernel;
};

/// Conv layers in execution order.
inline std::vector<ConvSpec> conv_layers(const NetConfig& cfg) {
  validate(cfg);
  std::vector<ConvSpec> out;
  auto width = [&](int level) { return cfg.base_channels << level; };
  int c = cfg.in_channels;
  for (int s = 0; s < cfg.depth; ++s) {
    const std::string p = "enc" + std::to_string(s);
    out.push_back({p + ".conv1", c, width(s), 3});
    out.push_back({p + ".conv2", width(s), width(s), 3});
    c = width(s);
  }
  out.push_back({"mid.conv1", c, width(cfg.depth), 3});
  out.push_back({"mid.conv2", width(cfg.depth), width(cfg.depth), 3});
  for (int s = cfg.depth - 1; s >= 0; --s) {
    const std::string p = "dec" + std::to_string(s);
    out.push_back({p + ".conv1", width(s + 1) + width(s), width(s), 3});
    out.push_back({p + ".conv2", width(s), width(s), 3});
  }
  out.push_back({"head", width(0), cfg.out_channels, 1});
  return out;
}

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases. Deterministic in
/// (cfg, seed).
template <class T>
ParamStore<T> init_params(const NetConfig& cfg, std::uint64_t seed) {
  ParamStore<T> p(cfg);
  Rng rng(seed, 0x1417);
  for (const ConvSpec& l : conv_layers(cfg)) {
    p.add(l.name + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel});
    p.add(l.name + ".bias", {l.out_channels});
    const double bound = std::sqrt(6.0 / (l.in_channels * l.kernel * l.kernel));
    for (auto& v : p.at(l.name + ".weight").values.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return p;
}

namespace detail {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<Mat<T>>;
template <class T>
using MapConstMat = Eigen::Map<const Mat<T>>;

struct Geometry {
  int n = 0;
  int h = 0;
  int w = 0;
  Eigen::Index columns() const { return Eigen::Index(n) * h * w; }
};

template <class T>
struct ConvCache {
  std::vector<T> padded;  // 3x3: zero-padded input planes
  Mat<T> input;           // 1x1: the input itself
  Mat<T> out;             // post-activation output
  Geometry geom;
};

template <class T>
struct PoolCache {
  std::vector<std::int32_t> argmax;  // input column index per output element
  Geometry in_geom;
  Eigen::Index channels = 0;
};

}  // namespace detail

/// Recorded forward pass of one batch; consumed by `backward`.
template <class T>
struct Tape {
  bool recorded = false;
  detail::Geometry input_geom;
  std::vector<detail::ConvCache<T>> convs;  // execution order, head last
  std::vector<detail::PoolCache<T>> pools;  // encoder order
  detail::Mat<T> probs;                     // (2, N*H*W)

  // Keeps the cached buffers so the next forward reuses their storage.
  void clear() { recorded = false; }

  /// ReLU on/off states and pool argmax positions. Two points with equal
  /// patterns lie in the same smooth piece of the network function.
  std::vector<std::int32_t> activation_pattern() const {
    std::vector<std::int32_t> out;
    for (const auto& c : convs) {
      for (Eigen::Index i = 0; i < c.out.size(); ++i) out.push_back(c.out.data()[i] > T(0));
    }
    for (const auto& p : pools) out.insert(out.end(), p.argmax.begin(), p.argmax.end());
    return out;
  }
};

template <class T>
class SegNet {
 public:
  using Mat = detail::Mat<T>;
  using Geometry = detail::Geometry;

  explicit SegNet(const ParamStore<T>& params) : params_(params), cfg_(params.config()) {
    layers_ = conv_layers(cfg_);
    for (const auto& l : layers_) {
      const auto& w = params.at(l.name + ".weight").values;
      const auto& b = params.at(l.name + ".bias").values;
      if (w.shape() != std::vector<int>{l.out_channels, l.in_channels, l.kernel, l.kernel} ||
          b.shape() != std::vector<int>{l.out_channels}) {
        throw Error(ErrorCode::ShapeMismatch, "parameter shapes do not match " + l.name);
      }
      weight_index_.push_back(index_of(l.name + ".weight"));
      bias_index_.push_back(index_of(l.name + ".bias"));
    }
  }

  /// Batch [N,1,H,W] -> probabilities [N,2,H,W]. Records into `tape` if given.
  Tensor<T> forward(const Tensor<T>& batch, Tape<T>* tape = nullptr) const {
    if (batch.rank() != 4 || batch.dim(1) != cfg_.in_channels) {
      throw Error(ErrorCode::ShapeMismatch, "expected [N,1,H,W] input, got " + shape_string(batch));
    }
    const int div = 1 << cfg_.depth;
    if (batch.dim(2) % div != 0 || batch.dim(3) % div != 0) {
      throw Error(ErrorCode::ShapeMismatch,
                  "input H and W must be divisible by " + std::to_string(div));
    }
    Geometry g{batch.dim(0), batch.dim(2), batch.dim(3)};
    if (tape) {
      tape->clear();
      tape->input_geom = g;
      tape->pools.resize(cfg_.depth);
    }
    Mat x(1, g.columns());
    std::copy(batch.data(), batch.data() + batch.size(), x.data());

    std::size_t layer = 0;
    std::vector<Mat> skips;
    for (int s = 0; s < cfg_.depth; ++s) {
      x = conv(layer++, x, g, true, tape);
      x = conv(layer++, x, g, true, tape);
      skips.push_back(x);
      x = pool(x, g, s, tape);
      g = {g.n, g.h / 2, g.w / 2};
    }
    x = conv(layer++, x, g, true, tape);
    x = conv(layer++, x, g, true, tape);
    for (int s = cfg_.depth - 1; s >= 0; --s) {
      Geometry up{g.n, g.h * 2, g.w * 2};
      Mat cat(x.rows() + skips[s].rows(), up.columns());
      upsample(x, g, cat);
      cat.bottomRows(skips[s].rows()) = skips[s];
      g = up;
      x = conv(layer++, cat, g, true, tape);
      x = conv(layer++, x, g, true, tape);
    }
    Mat logits = conv(layer++, x, g, false, tape);

    Mat probs(2, g.columns());
    for (Eigen::Index p = 0; p < g.columns(); ++p) {
      const T m = std::max(logits(0, p), logits(1, p));
      const T e0 = std::exp(logits(0, p) - m);
      const T e1 = std::exp(logits(1, p) - m);
      probs(0, p) = e0 / (e0 + e1);
      probs(1, p) = e1 / (e0 + e1);
    }
    Tensor<T> out({g.n, 2, g.h, g.w});
    const std::size_t hw = std::size_t(g.h) * g.w;
    for (int n = 0; n < g.n; ++n) {
      for (int k = 0; k < 2; ++k) {
        std::copy_n(probs.row(k).data() + n * hw, hw, out.data() + (std::size_t(n) * 2 + k) * hw);
      }
    }
    if (tape) {
      tape->probs = std::move(probs);
      tape->recorded = true;
    }
    return out;
  }

  /// Parameter gradients of a scalar loss given dLoss/dProbs in [N,2,H,W].
  Gradients<T> backward(const Tape<T>& tape, const Tensor<T>& dprobs) const {
    if (!tape.recorded) throw Error(ErrorCode::GraphNotRecorded, "backward without a recorded forward");
    Geometry g = tape.input_geom;
    if (dprobs.shape() != std::vector<int>{g.n, 2, g.h, g.w}) {
      throw Error(ErrorCode::ShapeMismatch, "probability gradient shape " + shape_string(dprobs));
    }
    Gradients<T> grads = zeros_like(params_);

    // Softmax: dz_k = p_k (dp_k - sum_j p_j dp_j).
    const std::size_t hw = std::size_t(g.h) * g.w;
    Mat dx(2, g.columns());
    for (int n = 0; n < g.n; ++n) {
      for (std::size_t i = 0; i < hw; ++i) {
        const Eigen::Index p = Eigen::Index(n * hw + i);
        const T d0 = dprobs[(std::size_t(n) * 2) * hw + i];
        const T d1 = dprobs[(std::size_t(n) * 2 + 1) * hw + i];
        const T p0 = tape.probs(0, p), p1 = tape.probs(1, p);
        const T s = p0 * d0 + p1 * d1;
        dx(0, p) = p0 * (d0 - s);
        dx(1, p) = p1 * (d1 - s);
      }
    }

    std::size_t layer = layers_.size();
    dx = conv_backward(--layer, dx, tape, false, grads);
    std::vector<Mat> dskips(cfg_.depth);
    Geometry cur = g;
    for (int s = 0; s < cfg_.depth; ++s) {
      dx = conv_backward(--layer, dx, tape, true, grads);
      dx = conv_backward(--layer, dx, tape, true, grads);
      // Split concat gradient into the upsampled path and the skip path.
      const Eigen::Index skip_rows = cfg_.base_channels << s;
      dskips[s] = dx.bottomRows(skip_rows);
      Geometry down{cur.n, cur.h / 2, cur.w / 2};
      dx = upsample_backward(dx.topRows(dx.rows() - skip_rows), down);
      cur = down;
    }
    dx = conv_backward(--layer, dx, tape, true, grads);
    dx = conv_backward(--layer, dx, tape, true, grads);
    for (int s = cfg_.depth - 1; s >= 0; --s) {
      Mat dpre = pool_backward(dx, tape.pools[s]);
      dpre += dskips[s];
      dx = conv_backward(--layer, dpre, tape, true, grads);
      dx = conv_backward(--layer, dx, tape, true, grads);
    }
    return grads;
  }

 private:
  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_.entries()[i].name == name) return i;
    }
    throw Error(ErrorCode::ConfigError, "missing parameter " + name);
  }

  detail::MapConstMat<T> weight(std::size_t layer) const {
    const auto& l = layers_[layer];
    const auto& w = params_.entries()[weight_index_[layer]].values;
    return detail::MapConstMat<T>(w.data(), l.out_channels, Eigen::Index(l.in_channels) * l.kernel * l.kernel);
  }

  // Weights of a 3x3 layer as [ci][tap][co], or for the adjoint pass with
  // the kernel flipped as [co][tap][ci].
  void layout_weights(std::size_t layer, bool adjoint, std::vector<T>& out) const {
    const auto& l = layers_[layer];
    const auto w = weight(layer);
    const int ci_n = l.in_channels, co_n = l.out_channels;
    out.resize(std::size_t(ci_n) * co_n * 9);
    for (int co = 0; co < co_n; ++co) {
      for (int ci = 0; ci < ci_n; ++ci) {
        for (int k = 0; k < 9; ++k) {
          const T v = w(co, ci * 9 + k);
          if (adjoint) {
            out[(std::size_t(co) * 9 + 8 - k) * ci_n + ci] = v;
          } else {
            out[(std::size_t(ci) * 9 + k) * co_n + co] = v;
          }
        }
      }
    }
  }

  Mat conv(std::size_t layer, const Mat& x, Geometry g, bool relu, Tape<T>* tape) const {
    const auto& l = layers_[layer];
    const auto& b = params_.entries()[bias_index_[layer]].values;
    detail::ConvCache<T>* cache = nullptr;
    if (tape) {
      if (tape->convs.size() != layers_.size()) tape->convs.resize(layers_.size());
      cache = &tape->convs[layer];
      cache->geom = g;
    }
    Mat out(l.out_channels, g.columns());
    if (l.kernel == 3) {
      const detail::PadGeom pg{g.n, g.h, g.w};
      std::vector<T>& padded = cache ? cache->padded : pad_;
      detail::pad3(x.data(), l.in_channels, pg, padded);
      layout_weights(layer, false, wt_);
      span_.resize(std::size_t(l.out_channels) * g.n * pg.template span<T>());
      detail::conv3_forward(padded.data(), l.in_channels, wt_.data(), l.out_channels, pg, span_.data());
      detail::gather3(span_.data(), l.out_channels, pg, out.data(), b.data(), relu);
    } else {
      if (cache) cache->input = x;
      out.noalias() = weight(layer) * x;
      for (Eigen::Index c = 0; c < out.rows(); ++c) {
        T* row = out.row(c).data();
        for (Eigen::Index i = 0; i < out.cols(); ++i) row[i] = relu ? std::max(row[i] + b[c], T(0)) : row[i] + b[c];
      }
    }
    if (cache && relu) cache->out = out;
    return out;
  }

  // Returns dLoss/dInput, except for the first layer where nothing uses it.
  Mat conv_backward(std::size_t layer, Mat dout, const Tape<T>& tape, bool relu, Gradients<T>& grads) const {
    const auto& l = layers_[layer];
    const bool need_dx = layer != 0;
    const auto& cache = tape.convs.at(layer);
    if (relu) {
      const T* o = cache.out.data();
      T* d = dout.data();
      for (Eigen::Index i = 0; i < dout.size(); ++i) {
        if (!(o[i] > T(0))) d[i] = T(0);
      }
    }
    auto& gw = grads[weight_index_[layer]];
    auto& gb = grads[bias_index_[layer]];
    for (Eigen::Index c = 0; c < dout.rows(); ++c) gb[c] += dout.row(c).sum();
    if (l.kernel == 1) {
      detail::MapMat<T> dw(gw.data(), l.out_channels, l.in_channels);
      dw.noalias() += dout * cache.input.transpose();
      if (!need_dx) return {};
      return weight(layer).transpose() * dout;
    }
    const Geometry g = cache.geom;
    const detail::PadGeom pg{g.n, g.h, g.w};
    detail::pad3(dout.data(), l.out_channels, pg, pad_);
    detail::conv3_weight_grad(detail::output_view(pad_, pg), l.out_channels, cache.padded.data(), l.in_channels, pg,
                              gw.data());
    if (!need_dx) return {};
    // The adjoint of a same-padded correlation is the correlation with the
    // flipped kernel and the channel roles swapped.
    layout_weights(layer, true, wt_);
    span_.resize(std::size_t(l.in_channels) * g.n * pg.template span<T>());
    detail::conv3_forward(pad_.data(), l.out_channels, wt_.data(), l.in_channels, pg, span_.data());
    Mat dx(l.in_channels, g.columns());
    detail::gather3(span_.data(), l.in_channels, pg, dx.data());
    return dx;
  }

  Mat pool(const Mat& x, Geometry g, int level, Tape<T>* tape) const {
    const int oh = g.h / 2, ow = g.w / 2;
    Geometry og{g.n, oh, ow};
    Mat out(x.rows(), og.columns());
    detail::PoolCache<T> local;
    detail::PoolCache<T>& cache = tape ? tape->pools[level] : local;
    if (tape) cache.argmax.resize(std::size_t(x.rows()) * og.columns());
    for (Eigen::Index c = 0; c < x.rows(); ++c) {
      for (int n = 0; n < g.n; ++n) {
        for (int y = 0; y < oh; ++y) {
          for (int xx = 0; xx < ow; ++xx) {
            const std::int32_t base = std::int32_t(n * g.h * g.w + 2 * y * g.w + 2 * xx);
            std::int32_t best = base;
            for (std::int32_t off : {1, g.w, g.w + 1}) {
              if (x(c, base + off) > x(c, best)) best = base + off;
            }
            const Eigen::Index o = Eigen::Index(n) * oh * ow + y * ow + xx;
            out(c, o) = x(c, best);
            if (tape) cache.argmax[std::size_t(c) * og.columns() + o] = best;
          }
        }
      }
    }
    cache.in_geom = g;
    cache.channels = x.rows();
    return out;
  }

  static Mat pool_backward(const Mat& dout, const detail::PoolCache<T>& cache) {
    Mat dx = Mat::Zero(cache.channels, cache.in_geom.columns());
    const Eigen::Index cols = dout.cols();
    for (Eigen::Index c = 0; c < cache.channels; ++c) {
      for (Eigen::Index o = 0; o < cols; ++o) dx(c, cache.argmax[std::size_t(c) * cols + o]) += dout(c, o);
    }
    return dx;
  }

  // Writes the 2x nearest-neighbour upsampling of x (geometry g) into the top
  // rows of `cat`.
  static void upsample(const Mat& x, Geometry g, Mat& cat) {
    const int uh = g.h * 2, uw = g.w * 2;
    for (Eigen::Index c = 0; c < x.rows(); ++c) {
      for (int n = 0; n < g.n; ++n) {
        for (int y = 0; y < uh; ++y) {
          const T* src = x.row(c).data() + std::size_t(n) * g.h * g.w + std::size_t(y / 2) * g.w;
          T* dst = cat.row(c).data() + std::size_t(n) * uh * uw + std::size_t(y) * uw;
          for (int xx = 0; xx < uw; ++xx) dst[xx] = src[xx / 2];
        }
      }
    }
  }

  static Mat upsample_backward(const Mat& dup, Geometry small) {
    Mat dx = Mat::Zero(dup.rows(), small.columns());
    const int uh = small.h * 2, uw = small.w * 2;
    for (Eigen::Index c = 0; c < dup.rows(); ++c) {
      for (int n = 0; n < small.n; ++n) {
        for (int y = 0; y < uh; ++y) {
          const T* src = dup.row(c).data() + std::size_t(n) * uh * uw + std::size_t(y) * uw;
          T* dst = dx.row(c).data() + std::size_t(n) * small.h * small.w + std::size_t(y / 2) * small.w;
          for (int xx = 0; xx < uw; ++xx) dst[xx / 2] += src[xx];
        }
      }
    }
    return dx;
  }

  const ParamStore<T>& params_;
  NetConfig cfg_;
  // Scratch buffers reused across layers and calls.
  mutable std::vector<T> pad_, span_, wt_;
  std::vector<ConvSpec> layers_;
  std::vector<std::size_t> weight_index_;
  std::vector<std::size_t> bias_index_;
};

/// Convenience wrappers over SegNet.
template <class T>
Tensor<T> forward(const ParamStore<T>& params, const Tensor<T>& batch, Tape<T>* tape = nullptr) {
  return SegNet<T>(params).forward(batch, tape);
}

template <class T>
Gradients<T> backward(const ParamStore<T>& params, const Tape<T>& tape, const Tensor<T>& dprobs) {
  return SegNet<T>(params).backward(tape, dprobs);
}

}  // namespace asymseg
