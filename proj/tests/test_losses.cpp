#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "asymseg/geometry.hpp"
#include "asymseg/losses.hpp"
#include "support.hpp"

using namespace asymseg;

namespace {

const AspectAnnotation kCross{{{16, 32}, {48, 32}}, {{32, 24}, {32, 40}}};

// [2,H,W] map from a foreground-probability function.
Tensor<double> prob_map(int h, int w, const std::function<double(int, int)>& fg) {
  Tensor<double> t({2, h, w});
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      t[std::size_t(h * w) + r * w + c] = fg(r, c);
      t[std::size_t(r) * w + c] = 1.0 - fg(r, c);
    }
  }
  return t;
}

Tensor<double> random_probs(std::mt19937_64& rng, int n, int h, int w) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor<double> t({n, 2, h, w});
  const std::size_t hw = std::size_t(h) * w;
  for (int i = 0; i < n; ++i) {
    for (std::size_t z = 0; z < hw; ++z) {
      const double p = u(rng);
      t[(std::size_t(i) * 2 + 1) * hw + z] = p;
      t[(std::size_t(i) * 2) * hw + z] = 1.0 - p;
    }
  }
  return t;
}

BinaryMask mask_of(std::initializer_list<std::initializer_list<int>> rows) {
  BinaryMask m(int(rows.size()), int(rows.begin()->size()));
  int r = 0;
  for (auto row : rows) {
    int c = 0;
    for (int v : row) m(r, c++) = std::uint8_t(v);
    ++r;
  }
  return m;
}

// Central differences treating every probability entry as an independent input.
double max_rel_error(Tensor<double>& probs, const Tensor<double>& analytic,
                     const std::function<double(const Tensor<double>&)>& f, double eps = 1e-6) {
  double worst = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double keep = probs[i];
    probs[i] = keep + eps;
    const double up = f(probs);
    probs[i] = keep - eps;
    const double down = f(probs);
    probs[i] = keep;
    const double fd = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(WeightedCe, SinglePixelExamples) {
  auto p = prob_map(1, 1, [](int, int) { return 0.5; });
  BinaryMask fg(1, 1), bg(1, 1);
  fg(0, 0) = 1;
  EXPECT_NEAR(weighted_ce(prob_view(p), fg, {3, 1}), std::log(2.0), 1e-12);
  EXPECT_NEAR(weighted_ce(prob_view(p), bg, {3, 1}), 3 * std::log(2.0), 1e-12);
}

TEST(WeightedCe, PerfectPredictionIsNearZeroAndFinite) {
  BinaryMask t(4, 4);
  t(1, 1) = t(2, 2) = 1;
  auto p = prob_map(4, 4, [&](int r, int c) { return t(r, c) ? 1.0 : 0.0; });
  const double v = weighted_ce(prob_view(p), t, {3, 1});
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_LE(v, 1e-6);
}

TEST(WeightedCe, RejectsShapeMismatchAndBadWeights) {
  auto p = prob_map(2, 2, [](int, int) { return 0.5; });
  EXPECT_THROW(weighted_ce(prob_view(p), BinaryMask(2, 3), {1, 1}), Error);
  EXPECT_THROW(weighted_ce(prob_view(p), BinaryMask(2, 2), {0, 1}), Error);
}

TEST(WeightedCe, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto probs = random_probs(rng, 1, 6, 7);
  auto t = test_support::random_mask(rng, 6, 7, 0.4);
  Tensor<double> g(probs.shape());
  weighted_ce(prob_view(probs), t, {3, 1}, grad_view(g), 1.0);
  EXPECT_LT(max_rel_error(probs, g, [&](const Tensor<double>& p) { return weighted_ce(prob_view(p), t, {3, 1}); }),
            1e-7);
}

TEST(WeightedCe, ClampedEntriesHaveZeroGradient) {
  auto p = prob_map(1, 2, [](int, int c) { return c == 0 ? 1.0 : 0.5; });
  BinaryMask t(1, 2);
  t(0, 0) = t(0, 1) = 1;
  Tensor<double> g(p.shape());
  weighted_ce(prob_view(p), t, {1, 1}, grad_view(g));
  EXPECT_EQ(g[2], 0.0);
  EXPECT_NEAR(g[3], -1.0 / (2 * 0.5), 1e-12);
}

TEST(CrbsSup, AlphaRatioAndDegeneracy) {
  // A false positive under the conservative network's radical-label weights
  // costs alpha times the matching false negative.
  auto p = prob_map(1, 1, [](int, int) { return 0.3; });
  BinaryMask fg(1, 1), bg(1, 1);
  fg(0, 0) = 1;
  auto q = prob_map(1, 1, [](int, int) { return 0.7; });
  const double fp = weighted_ce(prob_view(q), bg, radical_label_weights(3));
  const double fn = weighted_ce(prob_view(p), fg, radical_label_weights(3));
  EXPECT_NEAR(fp / fn, 3.0, 1e-12);

  std::mt19937_64 rng(2);
  auto pc = random_probs(rng, 1, 5, 5), pr = random_probs(rng, 1, 5, 5);
  auto yr = test_support::random_mask(rng, 5, 5, 0.6), yc = test_support::random_mask(rng, 5, 5, 0.3);
  ItemTargets it{&yr, &yc, &yr, BinaryMask(5, 5), BinaryMask(5, 5)};
  DualLossSettings s;
  s.alpha = 1;
  s.idmps = s.cap = false;
  const auto terms = dual_loss(pc, pr, std::span(&it, 1), s);
  EXPECT_NEAR(terms.sup, weighted_ce(prob_view(pc), yr, {1, 1}) + weighted_ce(prob_view(pr), yc, {1, 1}), 1e-12);
}

TEST(CrbsSup, PerfectPredictionsOnEqualLabels) {
  BinaryMask y(4, 4);
  y(0, 0) = y(1, 1) = 1;
  Tensor<double> p({1, 2, 4, 4});
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      p.at(0, 1, r, c) = y(r, c);
      p.at(0, 0, r, c) = 1 - y(r, c);
    }
  }
  ItemTargets it{&y, &y, &y, BinaryMask(4, 4), BinaryMask(4, 4)};
  DualLossSettings s;
  s.idmps = s.cap = false;
  EXPECT_LE(dual_loss(p, p, std::span(&it, 1), s).sup, 1e-6);
}

TEST(InconsistencyMask, Examples) {
  auto a = mask_of({{1, 1}, {1, 0}});
  auto b = mask_of({{1, 0}, {0, 0}});
  EXPECT_EQ(inconsistency_mask(a, b), mask_of({{0, 1}, {1, 0}}));
  EXPECT_EQ(inconsistency_mask(a, a).count(), 0u);
  EXPECT_EQ(inconsistency_mask(a, BinaryMask(2, 2)), a);
  EXPECT_THROW(inconsistency_mask(a, BinaryMask(3, 2)), Error);
}

TEST(InconsistencyMask, DefaultPairIsEllipseMinusQuadrilateral) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto ann = test_support::random_annotation(rng, 64);
    const auto rad = generate_pseudo_label(ann, ShapeKind::IrregularEllipse, {64, 64});
    const auto con = generate_pseudo_label(ann, ShapeKind::Quadrilateral, {64, 64});
    const auto m = inconsistency_mask(rad, con);
    for (std::size_t z = 0; z < m.bits().size(); ++z) {
      ASSERT_EQ(m.bits()[z] != 0, rad.bits()[z] && !con.bits()[z]);
    }
  }
}

TEST(MixPseudoLabel, EndpointsAndArithmetic) {
  std::mt19937_64 rng(4);
  auto pc = random_probs(rng, 1, 6, 6), pr = random_probs(rng, 1, 6, 6);
  auto argmax = [](const Tensor<double>& t) {
    BinaryMask m(6, 6);
    for (std::size_t z = 0; z < 36; ++z) m.bits()[z] = t[36 + z] > t[z];
    return m;
  };
  EXPECT_EQ(mix_pseudo_label(prob_view(pc), prob_view(pr), 1.0), argmax(pc));
  EXPECT_EQ(mix_pseudo_label(prob_view(pc), prob_view(pr), 0.0), argmax(pr));
  auto a = prob_map(1, 1, [](int, int) { return 0.9; });
  auto b = prob_map(1, 1, [](int, int) { return 0.2; });
  EXPECT_EQ(mix_pseudo_label(prob_view(a), prob_view(b), 0.5)(0, 0), 1);
  auto half = prob_map(1, 1, [](int, int) { return 0.5; });
  EXPECT_EQ(mix_pseudo_label(prob_view(half), prob_view(half), 0.3)(0, 0), 0);
  EXPECT_THROW(mix_pseudo_label(prob_view(a), prob_view(b), 1.5), Error);
}

TEST(MixPseudoLabel, InvariantToCommonPositiveScaling) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1), scale(0.1, 10);
  for (int trial = 0; trial < 100; ++trial) {
    auto pc = random_probs(rng, 1, 8, 8), pr = random_probs(rng, 1, 8, 8);
    const double beta = u(rng), k = scale(rng);
    auto sc = pc, sr = pr;
    for (auto& v : sc.values()) v *= k;
    for (auto& v : sr.values()) v *= k;
    ASSERT_EQ(mix_pseudo_label(prob_view(pc), prob_view(pr), beta),
              mix_pseudo_label(prob_view(sc), prob_view(sr), beta));
  }
}

TEST(MaskedCe, Examples) {
  std::mt19937_64 rng(6);
  auto p = random_probs(rng, 1, 5, 5);
  auto t = test_support::random_mask(rng, 5, 5, 0.5);
  EXPECT_EQ(masked_ce(prob_view(p), t, BinaryMask(5, 5)), 0.0);
  BinaryMask all(5, 5);
  for (auto& b : all.bits()) b = 1;
  EXPECT_NEAR(masked_ce(prob_view(p), t, all), weighted_ce(prob_view(p), t, {1, 1}), 1e-12);
  auto half = prob_map(1, 1, [](int, int) { return 0.5; });
  BinaryMask one(1, 1);
  one(0, 0) = 1;
  EXPECT_NEAR(masked_ce(prob_view(half), one, one), std::log(2.0), 1e-12);
}

TEST(Idmps, ExamplesAndSymmetry) {
  std::mt19937_64 rng(7);
  auto pc = random_probs(rng, 1, 6, 6), pr = random_probs(rng, 1, 6, 6);
  auto ypl = test_support::random_mask(rng, 6, 6, 0.5);
  auto m = test_support::random_mask(rng, 6, 6, 0.5);
  EXPECT_EQ(idmps_loss(prob_view(pc), prob_view(pr), ypl, BinaryMask(6, 6)), 0.0);
  EXPECT_NEAR(idmps_loss(prob_view(pc), prob_view(pr), ypl, m), idmps_loss(prob_view(pr), prob_view(pc), ypl, m),
              1e-12);
  auto exact = prob_map(6, 6, [&](int r, int c) { return double(ypl(r, c)); });
  EXPECT_LE(idmps_loss(prob_view(exact), prob_view(exact), ypl, m), 1e-6);
}

TEST(Idmps, GradientVanishesOutsideMaskAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto pc = random_probs(rng, 1, 6, 6), pr = random_probs(rng, 1, 6, 6);
  auto ypl = test_support::random_mask(rng, 6, 6, 0.5);
  auto m = test_support::random_mask(rng, 6, 6, 0.4);
  Tensor<double> gc(pc.shape()), gr(pr.shape());
  idmps_loss(prob_view(pc), prob_view(pr), ypl, m, grad_view(gc), grad_view(gr));
  for (std::size_t z = 0; z < 36; ++z) {
    if (!m.bits()[z]) {
      ASSERT_EQ(gc[z], 0.0);
      ASSERT_EQ(gc[36 + z], 0.0);
      ASSERT_EQ(gr[z], 0.0);
      ASSERT_EQ(gr[36 + z], 0.0);
    }
  }
  EXPECT_LT(max_rel_error(pc, gc,
                          [&](const Tensor<double>& p) { return idmps_loss(prob_view(p), prob_view(pr), ypl, m); }),
            1e-7);
  EXPECT_LT(max_rel_error(pr, gr,
                          [&](const Tensor<double>& p) { return idmps_loss(prob_view(pc), prob_view(p), ypl, m); }),
            1e-7);
}

TEST(AxisProjection, PredExamples) {
  auto flat = prob_map(5, 7, [](int, int) { return 0.2; });
  auto pr = axis_projection_pred(prob_view(flat));
  for (double v : pr.values.x) EXPECT_DOUBLE_EQ(v, 0.2);
  for (double v : pr.values.y) EXPECT_DOUBLE_EQ(v, 0.2);
  auto spot = prob_map(5, 7, [](int r, int c) { return r == 3 && c == 4 ? 0.9 : 0.1; });
  pr = axis_projection_pred(prob_view(spot));
  for (int c = 0; c < 7; ++c) EXPECT_DOUBLE_EQ(pr.values.x[c], c == 4 ? 0.9 : 0.1);
  for (int r = 0; r < 5; ++r) EXPECT_DOUBLE_EQ(pr.values.y[r], r == 3 ? 0.9 : 0.1);
}

TEST(AxisProjection, TransposeSwapsAxes) {
  std::mt19937_64 rng(9);
  auto p = random_probs(rng, 1, 5, 8);
  Tensor<double> t({2, 8, 5});
  for (int k = 0; k < 2; ++k) {
    for (int r = 0; r < 5; ++r) {
      for (int c = 0; c < 8; ++c) t[std::size_t(k) * 40 + c * 5 + r] = p[std::size_t(k) * 40 + r * 8 + c];
    }
  }
  auto a = axis_projection_pred(prob_view(p));
  auto b = axis_projection_pred(prob_view(t));
  EXPECT_EQ(a.values.x, b.values.y);
  EXPECT_EQ(a.values.y, b.values.x);
}

TEST(AxisProjection, AnnotationExamples) {
  const auto cross = rasterize_cross(kCross, {64, 64});
  const auto pr = axis_projection_annotation(cross);
  for (int c = 0; c < 64; ++c) EXPECT_EQ(pr.x[c], (c >= 16 && c <= 48) ? 1.0 : 0.0) << c;
  for (int r = 0; r < 64; ++r) EXPECT_EQ(pr.y[r], (r >= 24 && r <= 40) ? 1.0 : 0.0) << r;
  const auto empty = axis_projection_annotation(BinaryMask(4, 6));
  EXPECT_EQ(empty.x, std::vector<double>(6, 0.0));
  BinaryMask full(4, 6);
  for (auto& b : full.bits()) b = 1;
  EXPECT_EQ(axis_projection_annotation(full).y, std::vector<double>(4, 1.0));
}

TEST(SoftDice, Examples) {
  std::vector<double> t{1, 0, 1, 1, 0};
  EXPECT_NEAR(soft_dice_loss(t, t), 0.0, 1e-6);
  EXPECT_NEAR(soft_dice_loss(std::vector<double>(6, 1.0), std::vector<double>(6, 0.0)), 1.0, 1e-6);
  EXPECT_NEAR(soft_dice_loss(std::vector<double>(4, 0.5), std::vector<double>{1, 1, 0, 0}), 0.5, 1e-6);
  EXPECT_THROW(soft_dice_loss(std::vector<double>(3), std::vector<double>(4)), Error);
}

TEST(SoftDice, BoundedAndGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(9), q(9), g(9, 0.0);
    for (auto& v : p) v = u(rng);
    for (auto& v : q) v = u(rng) < 0.5;
    const double l = soft_dice_loss(p, q, g);
    ASSERT_GE(l, 0.0);
    ASSERT_LE(l, 1.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto up = p, dn = p;
      up[i] += 1e-6;
      dn[i] -= 1e-6;
      const double fd = (soft_dice_loss(up, q) - soft_dice_loss(dn, q)) / 2e-6;
      ASSERT_NEAR(g[i], fd, 1e-7 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(CapLoss, ExactProjectionMatchIsZero) {
  const auto cross = rasterize_cross(kCross, {64, 64});
  // Foreground exactly on the cross: projections reproduce (cx, cy).
  auto p = prob_map(64, 64, [&](int r, int c) { return double(cross(r, c)); });
  EXPECT_NEAR(cap_loss(prob_view(p), cross), 0.0, 1e-5);
}

TEST(CapLoss, ZeroForegroundMatchesScalarFormula) {
  const auto cross = rasterize_cross(kCross, {64, 64});
  auto p = prob_map(64, 64, [](int, int) { return 0.0; });
  // Independent evaluation: per axis with n entries of which k are on,
  // fg dice = s / (k + s), bg dice = (2(n-k) + s) / (n + (n-k) + s).
  const double s = 1e-6;
  auto axis = [&](double n, double k) {
    return 0.5 * ((1 - s / (k + s)) + (1 - (2 * (n - k) + s) / (n + (n - k) + s)));
  };
  const double expected = axis(64, 33) + axis(64, 17);
  EXPECT_NEAR(cap_loss(prob_view(p), cross), expected, 1e-12);
}

TEST(CapLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto p = random_probs(rng, 1, 8, 9);
  BinaryMask cross(8, 9);
  for (int c = 2; c < 7; ++c) cross(4, c) = 1;
  for (int r = 1; r < 6; ++r) cross(r, 4) = 1;
  Tensor<double> g(p.shape());
  cap_loss(prob_view(p), cross, grad_view(g));
  EXPECT_LT(max_rel_error(p, g, [&](const Tensor<double>& q) { return cap_loss(prob_view(q), cross); }), 1e-6);
}

TEST(CapLoss, TotalOverIdenticalInputsDoubles) {
  std::mt19937_64 rng(12);
  auto p = random_probs(rng, 1, 8, 8);
  auto cross = test_support::random_mask(rng, 8, 8, 0.2);
  BinaryMask dummy(8, 8);
  ItemTargets it{&dummy, &dummy, &cross, dummy, dummy};
  DualLossSettings s;
  s.idmps = false;
  EXPECT_NEAR(dual_loss(p, p, std::span(&it, 1), s).cap, 2 * cap_loss(prob_view(p), cross), 1e-12);
}

TEST(Rampup, Examples) {
  LossWeights w;
  w.lambda1_max = 2.0;
  w.rampup_len = 1000;
  EXPECT_NEAR(lambda1_rampup(0, w), 2.0 * std::exp(-5.0), 1e-15);
  EXPECT_NEAR(lambda1_rampup(1000, w), 2.0, 1e-15);
  EXPECT_NEAR(lambda1_rampup(500, w), 2.0 * std::exp(-1.25), 1e-15);
  EXPECT_NEAR(lambda1_rampup(5000, w), 2.0, 1e-15);
  EXPECT_THROW(lambda1_rampup(-1, w), Error);
}

TEST(TotalLoss, Examples) {
  LossTerms t{0.7, 0.4, 0.9, 0};
  EXPECT_EQ(total_loss(t, 0, 0), 0.7);
  EXPECT_EQ(total_loss(LossTerms{}, 0.5, 0.5), 0.0);
  EXPECT_NEAR((total_loss(t, 0.3, 0.6) - total_loss(t, 0.3, 0.2)) / 0.4, t.cap, 1e-12);
}

TEST(DualLoss, GradientOfObjectiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const int n = 3, h = 6, w = 7;
  auto pc = random_probs(rng, n, h, w), pr = random_probs(rng, n, h, w);
  std::vector<BinaryMask> yr, yc, cr;
  for (int i = 0; i < n; ++i) {
    yr.push_back(test_support::random_mask(rng, h, w, 0.6));
    yc.push_back(test_support::random_mask(rng, h, w, 0.3));
    cr.push_back(test_support::random_mask(rng, h, w, 0.2));
  }
  std::vector<ItemTargets> items;
  for (int i = 0; i < n; ++i) {
    items.push_back({&yr[i], &yc[i], &cr[i], test_support::random_mask(rng, h, w, 0.5), inconsistency_mask(yr[i], yc[i])});
  }
  for (Pairing pairing : {Pairing::Cross, Pairing::Direct}) {
    DualLossSettings s;
    s.lambda1 = 0.7;
    s.pairing = pairing;
    Tensor<double> gc(pc.shape()), gr(pr.shape());
    const auto terms = dual_loss(pc, pr, items, s, &gc, &gr);
    EXPECT_NEAR(terms.total, terms.sup + 0.7 * terms.idmps + 0.3 * terms.cap, 1e-12);
    EXPECT_LT(max_rel_error(pc, gc, [&](const Tensor<double>& p) { return dual_loss(p, pr, items, s).total; }), 1e-6);
    EXPECT_LT(max_rel_error(pr, gr, [&](const Tensor<double>& p) { return dual_loss(pc, p, items, s).total; }), 1e-6);
  }
}

TEST(DualLoss, LossesAreFiniteAndNonNegative) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto pc = random_probs(rng, 2, 8, 8), pr = random_probs(rng, 2, 8, 8);
    std::vector<BinaryMask> masks;
    for (int i = 0; i < 6; ++i) masks.push_back(test_support::random_mask(rng, 8, 8, 0.4));
    std::vector<ItemTargets> items{{&masks[0], &masks[1], &masks[2], masks[3], masks[4]},
                                   {&masks[1], &masks[2], &masks[3], masks[4], masks[5]}};
    DualLossSettings s;
    s.lambda1 = 1.0;
    const auto t = dual_loss(pc, pr, items, s);
    for (double v : {t.sup, t.idmps, t.cap, t.total}) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, 0.0);
    }
    ASSERT_LE(t.cap, 4.0);
  }
}
