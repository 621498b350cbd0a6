#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "asymseg/trainer.hpp"

using namespace asymseg;
namespace fs = std::filesystem;

namespace {

// Small but non-trivial: 32x32 phantoms, one-level network.
struct Fixture {
  Dataset ds;
  std::vector<const SampleRecord*> train, test;

  Fixture() {
    SynthConfig sc;
    sc.size = 32;
    sc.n = 12;
    sc.seed = 3;
    ds = make_dataset(sc, 0.25);
    train = ds.train();
    test = ds.test();
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

TrainConfig small_config() {
  TrainConfig c;
  c.iters = 6;
  c.batch = 2;
  c.crop = 32;
  c.net = {1, 4, 1, 2};
  c.seed = 5;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("asymseg_trainer_" + name);
  fs::remove_all(p);
  return p;
}

// Direction of the major axis in degrees.
double major_angle(const AspectAnnotation& a) {
  const Point2 d = a.major.b - a.major.a;
  return std::atan2(d.y, d.x) * 180.0 / std::numbers::pi;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(TrainConfig, Validation) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.shape_con = ShapeKind::Circle;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.shape_rad = ShapeKind::Concavity;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.crop = 31;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.alpha = 0.5;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.single = NetRole::Con;
  c.single_label = ShapeKind::Box;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  EXPECT_THROW(train(c, std::span<const SampleRecord* const>{}), Error);
}

TEST(Augmentation, RotationsAndFlipsArePermutationsThatKeepNesting) {
  const auto& f = fixture();
  for (const auto* r : f.train) {
    const auto it = make_train_item(*r, ShapeKind::Quadrilateral, ShapeKind::IrregularEllipse);
    for (int q = 0; q < 4; ++q) {
      for (int fl = 0; fl < 4; ++fl) {
        const GridTransform t{q, bool(fl & 1), bool(fl & 2)};
        const auto con = transform(it.y_con, t), rad = transform(it.y_rad, t);
        ASSERT_EQ(con.count(), it.y_con.count());
        ASSERT_EQ(rad.count(), it.y_rad.count());
        for (std::size_t z = 0; z < con.bits().size(); ++z) ASSERT_LE(con.bits()[z], rad.bits()[z]);
      }
    }
  }
}

TEST(Augmentation, ImageAndLabelsMoveTogether) {
  // Items whose image equals their conservative label: after augmentation
  // the batch image must still equal the label pixel for pixel.
  const auto& f = fixture();
  std::vector<TrainItem> items;
  for (const auto* r : f.train) {
    auto it = make_train_item(*r, ShapeKind::Quadrilateral, ShapeKind::IrregularEllipse);
    for (std::size_t z = 0; z < it.image.pixels.size(); ++z) it.image.pixels[z] = it.y_con.bits()[z];
    items.push_back(std::move(it));
  }
  auto cfg = small_config();
  cfg.batch = 16;
  Rng br(1, 1), ar(1, 2);
  const auto b = detail::sample_batch(items, cfg, br, ar);
  const std::size_t plane = 32 * 32;
  for (int n = 0; n < cfg.batch; ++n) {
    for (std::size_t z = 0; z < plane; ++z) ASSERT_EQ(b.x[n * plane + z], float(b.y_con[n].bits()[z]));
    for (std::size_t z = 0; z < plane; ++z) ASSERT_LE(b.y_con[n].bits()[z], b.y_rad[n].bits()[z]);
  }
}

TEST(Train, LogHasOneFiniteRowPerIteration) {
  const auto& f = fixture();
  const auto r = train(small_config(), f.train);
  ASSERT_EQ(r.log.size(), 6u);
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    EXPECT_EQ(r.log[i].iter, long(i));
    EXPECT_TRUE(std::isfinite(r.log[i].terms.total));
    EXPECT_GT(r.log[i].terms.sup, 0.0);
  }
  EXPECT_DOUBLE_EQ(r.log[0].lr, 0.01);
  EXPECT_LT(r.log[5].lr, r.log[4].lr);
  EXPECT_TRUE(r.con && r.rad);
}

TEST(Train, AblatedTermsAreLoggedAsZero) {
  const auto& f = fixture();
  auto c = small_config();
  c.idmps = c.crbs = c.cap = false;
  for (const auto& row : train(c, f.train).log) {
    EXPECT_EQ(row.terms.idmps, 0.0);
    EXPECT_EQ(row.terms.cap, 0.0);
    EXPECT_EQ(row.terms.total, row.terms.sup);
  }
}

TEST(Train, ZeroAuxiliaryWeightsEqualTwoPlainCrossEntropyRuns) {
  const auto& f = fixture();
  auto c = small_config();
  c.lambda1_max = 0;
  c.lambda2 = 0;
  c.crbs = false;
  const auto dual = train(c, f.train);
  // Cross pairing: the conservative network learns from the radical label.
  auto a = c, b = c;
  a.single = NetRole::Con;
  a.single_label = c.shape_rad;
  b.single = NetRole::Rad;
  b.single_label = c.shape_con;
  a.cap = b.cap = false;
  const auto sa = train(a, f.train), sb = train(b, f.train);
  ASSERT_TRUE(sa.con && sb.rad);
  EXPECT_TRUE(dual.con->same_weights(*sa.con));
  EXPECT_TRUE(dual.rad->same_weights(*sb.rad));
  for (std::size_t i = 0; i < dual.log.size(); ++i) {
    EXPECT_NEAR(dual.log[i].terms.sup, sa.log[i].terms.sup + sb.log[i].terms.sup, 1e-12);
  }
}

TEST(Train, DeterministicCheckpointsLogsAndReports) {
  const auto& f = fixture();
  std::string files[2][4];
  for (int run = 0; run < 2; ++run) {
    auto c = small_config();
    c.out_dir = scratch("det" + std::to_string(run));
    c.ckpt_every = 3;
    const auto r = train(c, f.train);
    ASSERT_TRUE(fs::exists(c.out_dir / "checkpoints" / "0000003_con.ckpt"));
    const auto rows = evaluate(&*r.con, &*r.rad, f.test, EvalMode::Ensemble);
    write_report(c.out_dir / "eval.csv", rows);
    files[run][0] = slurp(c.out_dir / "con.ckpt");
    files[run][1] = slurp(c.out_dir / "rad.ckpt");
    files[run][2] = slurp(c.out_dir / "train_log.csv");
    files[run][3] = slurp(c.out_dir / "eval.csv");
  }
  for (int k = 0; k < 4; ++k) {
    EXPECT_FALSE(files[0][k].empty());
    EXPECT_EQ(files[0][k], files[1][k]) << k;
  }
  std::istringstream log(files[0][2]);
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "iter,lr,l_sup,l_idmps,l_cap,l_total");
  for (int run = 0; run < 2; ++run) fs::remove_all(scratch("det" + std::to_string(run)));
}

TEST(Train, CheckpointRoundTripKeepsEvaluation) {
  const auto& f = fixture();
  auto c = small_config();
  c.out_dir = scratch("roundtrip");
  const auto r = train(c, f.train);
  const auto con = load_checkpoint(c.out_dir / "con.ckpt"), rad = load_checkpoint(c.out_dir / "rad.ckpt");
  EXPECT_EQ(con.iter, c.iters);
  const auto a = evaluate(&*r.con, &*r.rad, f.test, EvalMode::Ensemble);
  const auto b = evaluate(&con.params, &rad.params, f.test, EvalMode::Ensemble);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(report_line(a[i].id, a[i].m), report_line(b[i].id, b[i].m));
  fs::remove_all(c.out_dir);
}

TEST(Train, NonFiniteLossAbortsAndDumpsState) {
  const auto& f = fixture();
  auto c = small_config();
  c.lr0 = 1e30;
  c.out_dir = scratch("nonfinite");
  try {
    train(c, f.train);
    FAIL() << "expected NonFiniteLoss";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteLoss);
  }
  EXPECT_TRUE(fs::exists(c.out_dir / "nonfinite_con.ckpt"));
  EXPECT_TRUE(fs::exists(c.out_dir / "train_log.csv"));
  fs::remove_all(c.out_dir);
}

TEST(DualLoss, WithoutIdmpsEachNetworkIgnoresTheOther) {
  const auto& f = fixture();
  const auto it = make_train_item(*f.train[0], ShapeKind::Quadrilateral, ShapeKind::IrregularEllipse);
  Tensor<float> x({1, 1, 32, 32});
  for (std::size_t z = 0; z < x.size(); ++z) x[z] = float(it.image.pixels[z]);
  const NetConfig nc{1, 4, 1, 2};
  const auto a = init_params<float>(nc, 1), b1 = init_params<float>(nc, 2), b2 = init_params<float>(nc, 3);
  auto grads_of_a = [&](const ParamStore<float>& b) {
    Tape<float> ta, tb;
    const auto pa = forward(a, x, &ta), pb = forward(b, x, &tb);
    std::vector<ItemTargets> items{{&it.y_rad, &it.y_con, &it.cross, mix_pseudo_label(prob_view(pa), prob_view(pb), 0.5),
                                    inconsistency_mask(it.y_rad, it.y_con)}};
    DualLossSettings s;
    s.idmps = false;
    Tensor<float> ga(pa.shape()), gb(pb.shape());
    dual_loss(pa, pb, std::span<const ItemTargets>(items), s, &ga, &gb);
    return backward(a, ta, ga);
  };
  const auto g1 = grads_of_a(b1), g2 = grads_of_a(b2);
  ASSERT_EQ(g1.size(), g2.size());
  for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_EQ(g1[k], g2[k]);
}

TEST(Evaluate, EnsembleOfIdenticalNetworksEqualsSingleModel) {
  const auto& f = fixture();
  const auto p = init_params<float>({1, 4, 1, 2}, 9);
  const auto e = evaluate(&p, &p, f.test, EvalMode::Ensemble);
  const auto s = evaluate(&p, nullptr, f.test, EvalMode::Con);
  ASSERT_EQ(e.size(), s.size());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(report_line(e[i].id, e[i].m), report_line(s[i].id, s[i].m));
  EXPECT_THROW(evaluate(&p, nullptr, f.test, EvalMode::Rad), Error);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  const auto& f = fixture();
  const auto p = init_params<float>({1, 4, 1, 2}, 9);
  const auto one = evaluate(&p, &p, f.ds.train(), EvalMode::Ensemble, 1);
  const auto three = evaluate(&p, &p, f.ds.train(), EvalMode::Ensemble, 3);
  ASSERT_EQ(one.size(), three.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(report_line(one[i].id, one[i].m), report_line(three[i].id, three[i].m));
  }
}

TEST(Evaluate, GroundTruthAsPredictionScoresOne) {
  for (const auto& r : fixture().ds.records) {
    const auto m = evaluate_masks(r.gt, r.gt);
    EXPECT_EQ(m.dsc, 1.0);
    EXPECT_EQ(m.hd95, 0.0);
  }
}

TEST(NoiseSweep, ZeroDegreesEqualsTheUnperturbedRun) {
  const auto& f = fixture();
  const auto c = small_config();
  const std::vector<double> deg{0.0};
  const auto sweep = noise_sweep(c, f.train, f.test, deg);
  const auto r = train(c, f.train);
  const auto rows = evaluate(&*r.con, &*r.rad, f.test, EvalMode::Ensemble);
  ASSERT_EQ(sweep.size(), 1u);
  EXPECT_EQ(sweep[0].mean_dsc, mean_dsc(rows));
}

TEST(NoiseSweep, PerturbedAnnotationsStayValidAndAlternate) {
  const auto& f = fixture();
  const auto all = f.ds.train();
  for (double d : {3.0, 5.0, 7.0, 10.0}) {
    const auto p = perturb_records(all, d);
    ASSERT_EQ(p.size(), all.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_NO_THROW(validate_annotation(p[i].ann));
      const double expected = (i % 2 == 0 ? 1 : -1) * d;
      EXPECT_NEAR(std::remainder(major_angle(p[i].ann) - major_angle(all[i]->ann) - expected, 180.0), 0, 1e-6);
    }
  }
}
