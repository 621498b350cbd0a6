#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "asymseg/checkpoint.hpp"
#include "asymseg/error.hpp"
#include "asymseg/geometry.hpp"
#include "asymseg/losses.hpp"
#include "asymseg/mask.hpp"
#include "asymseg/metrics.hpp"
#include "asymseg/network.hpp"
#include "asymseg/optim.hpp"
#include "asymseg/rng.hpp"
#include "asymseg/synth.hpp"

namespace asymseg {

enum class NetRole { Con, Rad };
enum class EvalMode { Ensemble, Con, Rad };

inline std::string_view name(NetRole r) { return r == NetRole::Con ? "con" : "rad"; }
inline std::string_view name(EvalMode m) {
  switch (m) {
    case EvalMode::Ensemble: return "ensemble";
    case EvalMode::Con: return "con";
    case EvalMode::Rad: return "rad";
  }
  return "?";
}
inline std::optional<EvalMode> parse_eval_mode(std::string_view s) {
  for (EvalMode m : {EvalMode::Ensemble, EvalMode::Con, EvalMode::Rad}) {
    if (name(m) == s) return m;
  }
  return std::nullopt;
}

struct TrainConfig {
  long iters = 2000;
  int batch = 8;
  int crop = 64;
  double alpha = 3.0;
  double lambda2 = 0.3;
  double lambda1_max = 1.0;
  long rampup_len = 0;  // 0: ramp over the whole run
  double lr0 = 0.01;
  double lr_power = 0.9;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  ShapeKind shape_con = ShapeKind::Quadrilateral;
  ShapeKind shape_rad = ShapeKind::IrregularEllipse;
  bool idmps = true;
  bool crbs = true;
  bool cap = true;
  Pairing pairing = Pairing::Cross;
  std::optional<double> fixed_beta;  // unset: U(0,1) per image per iteration
  bool augment = true;
  NetConfig net;

  // Single-network run: only the `single` network is trained, supervised by
  // `single_label` (default: that role's own shape kind). No IDMPS.
  std::optional<NetRole> single;
  std::optional<ShapeKind> single_label;

  long ckpt_every = 0;  // 0: only at exit
  std::filesystem::path out_dir;

  ShapeKind single_shape() const {
    if (single_label) return *single_label;
    return single == NetRole::Con ? shape_con : shape_rad;
  }

  void validate() const {
    asymseg::validate(net);
    if (iters <= 0) throw Error(ErrorCode::ConfigError, "iters must be positive");
    if (batch <= 0) throw Error(ErrorCode::ConfigError, "batch must be positive");
    if (crop <= 0 || crop % (1 << net.depth) != 0) {
      throw Error(ErrorCode::ConfigError, "crop must be a positive multiple of 2^" + std::to_string(net.depth));
    }
    if (!is_conservative(shape_con)) {
      throw Error(ErrorCode::ConfigError, "shape_con must be a conservative kind, got " + std::string(name(shape_con)));
    }
    if (is_conservative(shape_rad)) {
      throw Error(ErrorCode::ConfigError, "shape_rad must be a radical kind, got " + std::string(name(shape_rad)));
    }
    LossWeights{alpha, lambda2, lambda1_max, rampup_len > 0 ? rampup_len : iters}.validate();
    if (fixed_beta && !(*fixed_beta >= 0 && *fixed_beta <= 1)) {
      throw Error(ErrorCode::ConfigError, "beta must lie in [0, 1]");
    }
    if (!(lr0 > 0)) throw Error(ErrorCode::ConfigError, "lr0 must be positive");
    if (ckpt_every < 0) throw Error(ErrorCode::ConfigError, "ckpt_every must be >= 0");
    if (single && single_shape() != shape_con && single_shape() != shape_rad) {
      throw Error(ErrorCode::ConfigError, "single_label must equal shape_con or shape_rad");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"iters", c.iters},
                   {"batch", c.batch},
                   {"crop", c.crop},
                   {"alpha", c.alpha},
                   {"lambda2", c.lambda2},
                   {"lambda1_max", c.lambda1_max},
                   {"rampup_len", c.rampup_len > 0 ? c.rampup_len : c.iters},
                   {"lr0", c.lr0},
                   {"lr_power", c.lr_power},
                   {"momentum", c.sgd.momentum},
                   {"weight_decay", c.sgd.weight_decay},
                   {"seed", c.seed},
                   {"shape_con", name(c.shape_con)},
                   {"shape_rad", name(c.shape_rad)},
                   {"idmps", c.idmps},
                   {"crbs", c.crbs},
                   {"cap", c.cap},
                   {"pairing", c.pairing == Pairing::Cross ? "cross" : "direct"},
                   {"augment", c.augment},
                   {"depth", c.net.depth},
                   {"base_channels", c.net.base_channels}};
  j["beta"] = c.fixed_beta ? nlohmann::json(*c.fixed_beta) : nlohmann::json("random");
  if (c.single) {
    j["single"] = name(*c.single);
    j["single_label"] = name(c.single_shape());
  }
  return j;
}

/// Training view of a record: normalized image, both pseudo-labels and the
/// rasterized annotation cross.
struct TrainItem {
  GrayImage image;
  BinaryMask y_con;
  BinaryMask y_rad;
  BinaryMask cross;
};

/// Min-max rescale to [0,1]; a constant image maps to 0.
inline GrayImage normalize_intensity(const GrayImage& img) {
  GrayImage out = img;
  if (img.pixels.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double span = *hi - *lo;
  for (double& v : out.pixels) v = span > 0 ? (v - *lo) / span : 0.0;
  return out;
}

inline TrainItem make_train_item(const SampleRecord& r, ShapeKind con, ShapeKind rad) {
  const GridSize g = r.gt.grid();
  return {normalize_intensity(r.image), generate_pseudo_label(r.ann, con, g), generate_pseudo_label(r.ann, rad, g),
          rasterize_cross(r.ann, g)};
}

struct LogRow {
  long iter = 0;
  double lr = 0;
  LossTerms terms;
};

inline constexpr const char* kTrainLogHeader = "iter,lr,l_sup,l_idmps,l_cap,l_total";

inline std::string log_line(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g", r.iter, r.lr, r.terms.sup, r.terms.idmps, r.terms.cap,
                r.terms.total);
  return buf;
}

struct TrainResult {
  std::optional<ParamStore<float>> con;
  std::optional<ParamStore<float>> rad;
  std::vector<LogRow> log;
};

namespace detail {

inline std::uint64_t init_seed(std::uint64_t seed, NetRole r) {
  return substream_seed(seed, r == NetRole::Con ? 0xC0 : 0x4AD);
}

// Streams of the per-iteration randomness; kept apart so that single and
// dual runs with the same seed see the same batches and augmentations.
enum : std::uint64_t { kBatchStream = 1, kAugStream = 2, kBetaStream = 3 };

struct Batch {
  Tensor<float> x;
  std::vector<BinaryMask> y_con, y_rad, cross;
};

inline GridTransform random_transform(Rng& rng) {
  GridTransform t;
  t.quarter_turns = static_cast<int>(rng.below(4));
  t.flip_h = rng.coin();
  t.flip_v = rng.coin();
  return t;
}

inline BinaryMask crop(const BinaryMask& m, int r0, int c0, int size) {
  if (r0 == 0 && c0 == 0 && m.height() == size && m.width() == size) return m;
  BinaryMask out(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) out(r, c) = m(r0 + r, c0 + c);
  }
  return out;
}

inline GrayImage crop(const GrayImage& m, int r0, int c0, int size) {
  if (r0 == 0 && c0 == 0 && m.height == size && m.width == size) return m;
  GrayImage out(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) out(r, c) = m(r0 + r, c0 + c);
  }
  return out;
}

inline Batch sample_batch(std::span<const TrainItem> items, const TrainConfig& cfg, Rng& batch_rng, Rng& aug_rng) {
  Batch b;
  b.x = Tensor<float>({cfg.batch, 1, cfg.crop, cfg.crop});
  const std::size_t plane = std::size_t(cfg.crop) * cfg.crop;
  for (int n = 0; n < cfg.batch; ++n) {
    const TrainItem& it = items[batch_rng.below(items.size())];
    if (it.image.height < cfg.crop || it.image.width < cfg.crop) {
      throw Error(ErrorCode::ConfigError, "crop " + std::to_string(cfg.crop) + " exceeds image size");
    }
    const int r0 = static_cast<int>(aug_rng.below(std::uint64_t(it.image.height - cfg.crop) + 1));
    const int c0 = static_cast<int>(aug_rng.below(std::uint64_t(it.image.width - cfg.crop) + 1));
    const GridTransform t = cfg.augment ? random_transform(aug_rng) : GridTransform{};
    const GrayImage img = transform(crop(it.image, r0, c0, cfg.crop), t);
    for (std::size_t i = 0; i < plane; ++i) b.x[n * plane + i] = static_cast<float>(img.pixels[i]);
    b.y_con.push_back(transform(crop(it.y_con, r0, c0, cfg.crop), t));
    b.y_rad.push_back(transform(crop(it.y_rad, r0, c0, cfg.crop), t));
    b.cross.push_back(transform(crop(it.cross, r0, c0, cfg.crop), t));
  }
  return b;
}

template <class T>
bool all_finite(const Gradients<T>& g) {
  for (const auto& t : g) {
    if (!t.all_finite()) return false;
  }
  return true;
}

inline void write_log(const std::filesystem::path& path, std::span<const LogRow> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << kTrainLogHeader << '\n';
  for (const auto& r : log) out << log_line(r) << '\n';
}

inline std::string iter_tag(long iter) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%07ld", iter);
  return buf;
}

}  // namespace detail

/// Optional per-iteration observer (progress output).
using TrainObserver = std::function<void(const LogRow&)>;

/// Runs the training loop. With `cfg.out_dir` set, writes `train_log.csv`,
/// `config.json`, `<role>.ckpt` at exit and `checkpoints/<role>_<iter>.ckpt`
/// every `ckpt_every` iterations.
inline TrainResult train(const TrainConfig& cfg, std::span<const SampleRecord* const> records,
                         const TrainObserver& observer = {}) {
  cfg.validate();
  if (records.empty()) throw Error(ErrorCode::EmptyDataset, "training set is empty");
  const bool dual = !cfg.single.has_value();

  std::vector<TrainItem> items;
  items.reserve(records.size());
  for (const SampleRecord* r : records) items.push_back(make_train_item(*r, cfg.shape_con, cfg.shape_rad));

  std::optional<ParamStore<float>> params[2];
  for (NetRole role : {NetRole::Con, NetRole::Rad}) {
    if (dual || cfg.single == role) params[int(role)] = init_params<float>(cfg.net, detail::init_seed(cfg.seed, role));
  }
  std::optional<SegNet<float>> nets[2];
  Tape<float> tapes[2];
  for (int k = 0; k < 2; ++k) {
    if (params[k]) nets[k].emplace(*params[k]);
  }

  Rng batch_rng(cfg.seed, detail::kBatchStream), aug_rng(cfg.seed, detail::kAugStream),
      beta_rng(cfg.seed, detail::kBetaStream);
  const LossWeights lw{cfg.alpha, cfg.lambda2, cfg.lambda1_max, cfg.rampup_len > 0 ? cfg.rampup_len : cfg.iters};

  namespace fs = std::filesystem;
  const bool persist = !cfg.out_dir.empty();
  if (persist) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + cfg.out_dir.string());
    std::ofstream(cfg.out_dir / "config.json", std::ios::trunc) << to_json(cfg).dump(2) << '\n';
  }
  auto save_all = [&](const std::string& prefix, long iter) {
    for (NetRole role : {NetRole::Con, NetRole::Rad}) {
      if (params[int(role)]) {
        save_checkpoint(cfg.out_dir / (prefix + std::string(name(role)) + ".ckpt"), *params[int(role)], iter);
      }
    }
  };

  TrainResult result;
  result.log.reserve(cfg.iters);
  for (long it = 0; it < cfg.iters; ++it) {
    detail::Batch b = detail::sample_batch(items, cfg, batch_rng, aug_rng);
    const double lr = poly_lr(it, cfg.iters, cfg.lr0, cfg.lr_power);
    LogRow row{it, lr, {}};
    Tensor<float> grads_p[2];

    if (dual) {
      const Tensor<float> p_con = nets[0]->forward(b.x, &tapes[0]);
      const Tensor<float> p_rad = nets[1]->forward(b.x, &tapes[1]);
      std::vector<ItemTargets> targets(cfg.batch);
      for (int n = 0; n < cfg.batch; ++n) {
        const double beta = cfg.fixed_beta ? *cfg.fixed_beta : beta_rng.uniform();
        targets[n] = {&b.y_rad[n], &b.y_con[n], &b.cross[n],
                      mix_pseudo_label(prob_view(p_con, n), prob_view(p_rad, n), beta),
                      inconsistency_mask(b.y_rad[n], b.y_con[n])};
      }
      DualLossSettings s;
      s.alpha = cfg.alpha;
      s.lambda1 = cfg.idmps ? lambda1_rampup(it, lw) : 0.0;
      s.lambda2 = cfg.lambda2;
      s.crbs = cfg.crbs;
      s.idmps = cfg.idmps;
      s.cap = cfg.cap;
      s.pairing = cfg.pairing;
      grads_p[0] = Tensor<float>(p_con.shape());
      grads_p[1] = Tensor<float>(p_rad.shape());
      row.terms = dual_loss(p_con, p_rad, std::span<const ItemTargets>(targets), s, &grads_p[0], &grads_p[1]);
    } else {
      const int k = int(*cfg.single);
      const Tensor<float> p = nets[k]->forward(b.x, &tapes[k]);
      const ShapeKind kind = cfg.single_shape();
      const std::vector<BinaryMask>* lab = kind == cfg.shape_con ? &b.y_con : &b.y_rad;
      std::vector<const BinaryMask*> lp, cp;
      for (int n = 0; n < cfg.batch; ++n) {
        lp.push_back(&(*lab)[n]);
        cp.push_back(&b.cross[n]);
      }
      const ClassWeights w = !cfg.crbs ? ClassWeights{1.0, 1.0}
                             : is_conservative(kind) ? conservative_label_weights(cfg.alpha)
                                                     : radical_label_weights(cfg.alpha);
      grads_p[k] = Tensor<float>(p.shape());
      row.terms = single_loss(p, std::span<const BinaryMask* const>(lp), std::span<const BinaryMask* const>(cp), w,
                              cfg.cap, cfg.cap ? cfg.lambda2 : 0.0, &grads_p[k]);
    }

    Gradients<float> grads[2];
    bool finite = std::isfinite(row.terms.total);
    for (int k = 0; k < 2 && finite; ++k) {
      if (!params[k]) continue;
      grads[k] = nets[k]->backward(tapes[k], grads_p[k]);
      finite = detail::all_finite(grads[k]);
    }
    if (!finite) {
      std::string where = "non-finite loss or gradient at iteration " + std::to_string(it);
      if (persist) {
        save_all("nonfinite_", it);
        detail::write_log(cfg.out_dir / "train_log.csv", result.log);
        where += "; state dumped to " + cfg.out_dir.string();
      }
      throw Error(ErrorCode::NonFiniteLoss, where);
    }
    for (int k = 0; k < 2; ++k) {
      if (params[k]) sgd_step(*params[k], grads[k], lr, cfg.sgd);
    }
    result.log.push_back(row);
    if (observer) observer(row);
    if (persist && cfg.ckpt_every > 0 && (it + 1) % cfg.ckpt_every == 0 && it + 1 < cfg.iters) {
      save_all("checkpoints/" + detail::iter_tag(it + 1) + "_", it + 1);
    }
  }
  if (persist) {
    save_all("", cfg.iters);
    detail::write_log(cfg.out_dir / "train_log.csv", result.log);
  }
  result.con = std::move(params[0]);
  result.rad = std::move(params[1]);
  return result;
}

/// Foreground probability map for each record (full image, no crop).
inline std::vector<std::vector<double>> foreground_probabilities(const ParamStore<float>& params,
                                                                 std::span<const SampleRecord* const> records,
                                                                 int threads = 1) {
  std::vector<std::vector<double>> out(records.size());
  constexpr std::size_t kChunk = 8;
  const std::size_t chunks = (records.size() + kChunk - 1) / kChunk;
  auto work = [&](std::size_t first_chunk, std::size_t stride) {
    SegNet<float> net(params);
    for (std::size_t ch = first_chunk; ch < chunks; ch += stride) {
      const std::size_t lo = ch * kChunk, hi = std::min(records.size(), lo + kChunk);
      const int h = records[lo]->image.height, w = records[lo]->image.width;
      bool same = true;
      for (std::size_t i = lo; i < hi; ++i) same &= records[i]->image.height == h && records[i]->image.width == w;
      // Mixed sizes fall back to one image per forward pass.
      const std::size_t step = same ? hi - lo : 1;
      for (std::size_t s = lo; s < hi; s += step) {
        const std::size_t e = std::min(hi, s + step);
        const int ih = records[s]->image.height, iw = records[s]->image.width;
        Tensor<float> x({int(e - s), 1, ih, iw});
        const std::size_t plane = std::size_t(ih) * iw;
        for (std::size_t i = s; i < e; ++i) {
          const GrayImage img = normalize_intensity(records[i]->image);
          for (std::size_t p = 0; p < plane; ++p) x[(i - s) * plane + p] = static_cast<float>(img.pixels[p]);
        }
        const Tensor<float> probs = net.forward(x);
        for (std::size_t i = s; i < e; ++i) {
          const float* fg = probs.data() + ((i - s) * 2 + 1) * plane;
          out[i].assign(fg, fg + plane);
        }
      }
    }
  };
  const std::size_t t = std::clamp<std::size_t>(std::size_t(std::max(threads, 1)), 1, std::max<std::size_t>(chunks, 1));
  if (t == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < t; ++k) pool.emplace_back(work, k, t);
    for (auto& th : pool) th.join();
  }
  return out;
}

/// Per-image metrics of the argmax prediction. Ensemble averages the two
/// softmax maps; a pixel is foreground iff its foreground probability
/// exceeds 0.5.
inline std::vector<ReportRow> evaluate(const ParamStore<float>* con, const ParamStore<float>* rad,
                                       std::span<const SampleRecord* const> records, EvalMode mode,
                                       int threads = 1) {
  if (records.empty()) throw Error(ErrorCode::EmptyDataset, "evaluation set is empty");
  const bool need_con = mode != EvalMode::Rad, need_rad = mode != EvalMode::Con;
  if ((need_con && !con) || (need_rad && !rad)) {
    throw Error(ErrorCode::ConfigError, "eval mode " + std::string(name(mode)) + " needs the missing checkpoint");
  }
  if (con && rad && !(con->config() == rad->config())) {
    throw Error(ErrorCode::ShapeMismatch, "the two networks have different architectures");
  }
  std::vector<std::vector<double>> pc, pr;
  if (need_con) pc = foreground_probabilities(*con, records, threads);
  if (need_rad) pr = foreground_probabilities(*rad, records, threads);
  std::vector<ReportRow> rows;
  rows.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BinaryMask& gt = records[i]->gt;
    if (gt.height() != records[i]->image.height || gt.width() != records[i]->image.width) {
      throw Error(ErrorCode::ShapeMismatch, "mask and image sizes differ for " + records[i]->id);
    }
    BinaryMask pred(gt.grid());
    for (std::size_t p = 0; p < pred.bits().size(); ++p) {
      const double fg = mode == EvalMode::Ensemble ? 0.5 * (pc[i][p] + pr[i][p])
                        : mode == EvalMode::Con    ? pc[i][p]
                                                   : pr[i][p];
      pred.bits()[p] = fg > 0.5;
    }
    rows.push_back({records[i]->id, evaluate_masks(pred, gt)});
  }
  return rows;
}

inline double mean_dsc(std::span<const ReportRow> rows) { return aggregate(rows).first.dsc; }

/// Copies of `records` with every annotation rotated by `degrees`, the
/// direction alternating +,-,+,... by position.
inline std::vector<SampleRecord> perturb_records(std::span<const SampleRecord* const> records, double degrees) {
  std::vector<SampleRecord> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    SampleRecord r = *records[i];
    r.ann = perturb_annotation(r.ann, degrees, i % 2 == 0 ? 1 : -1);
    out.push_back(std::move(r));
  }
  return out;
}

struct NoisePoint {
  double degrees = 0;
  double mean_dsc = 0;
  std::vector<ReportRow> rows;
};

/// Trains one model per perturbation level on perturbed training annotations
/// and evaluates on the untouched test set.
inline std::vector<NoisePoint> noise_sweep(const TrainConfig& cfg, std::span<const SampleRecord* const> train_set,
                                           std::span<const SampleRecord* const> test_set,
                                           std::span<const double> degrees, EvalMode mode = EvalMode::Ensemble) {
  std::vector<NoisePoint> out;
  for (double d : degrees) {
    const auto perturbed = perturb_records(train_set, d);
    std::vector<const SampleRecord*> ptrs;
    for (const auto& r : perturbed) ptrs.push_back(&r);
    TrainConfig c = cfg;
    c.out_dir.clear();
    const TrainResult res = train(c, ptrs);
    const EvalMode m = c.single ? (*c.single == NetRole::Con ? EvalMode::Con : EvalMode::Rad) : mode;
    auto rows = evaluate(res.con ? &*res.con : nullptr, res.rad ? &*res.rad : nullptr, test_set, m);
    out.push_back({d, mean_dsc(rows), std::move(rows)});
  }
  return out;
}

}  // namespace asymseg
