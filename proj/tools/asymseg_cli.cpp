// asymseg command-line tool: dataset generation, pseudo-labels, training,
// evaluation and reporting.
//
// Exit codes: 0 success, 1 invalid flags or configuration, 2 runtime failure.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asymseg/checkpoint.hpp"
#include "asymseg/gradcheck.hpp"
#include "asymseg/pgm.hpp"
#include "asymseg/summary.hpp"
#include "asymseg/synth.hpp"
#include "asymseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace asymseg;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::ConfigError, msg); }

ShapeKind shape_flag(const std::string& flag, const std::string& value) {
  if (auto k = parse_shape_kind(value)) return *k;
  config_error(flag + ": unknown shape kind '" + value +
               "' (expected quadrilateral|concavity|box|rotrect|circle|ellipse)");
}

const std::map<std::string, ShapeKind>& kind_map() {
  static const std::map<std::string, ShapeKind> m = [] {
    std::map<std::string, ShapeKind> out;
    for (ShapeKind k : kAllShapeKinds) out.emplace(std::string(name(k)), k);
    return out;
  }();
  return m;
}

Dataset load(const fs::path& dir) {
  Dataset ds = read_dataset(dir);
  if (ds.records.empty()) throw Error(ErrorCode::EmptyDataset, "no images in " + dir.string());
  return ds;
}

std::vector<const SampleRecord*> all_records(const Dataset& ds) {
  std::vector<const SampleRecord*> out;
  for (const auto& r : ds.records) out.push_back(&r);
  return out;
}

// Subset named by --split; a dataset without a stored split only has "all".
std::vector<const SampleRecord*> split_records(const Dataset& ds, const std::string& split, const fs::path& dir) {
  if (split == "all") return all_records(ds);
  const auto& ids = split == "train" ? ds.train_ids : ds.test_ids;
  if (ids.empty()) {
    if (ds.train_ids.empty() && ds.test_ids.empty()) return all_records(ds);
    throw Error(ErrorCode::EmptyDataset, "split '" + split + "' of " + dir.string() + " is empty");
  }
  return ds.select(ids);
}

struct SynthOpts {
  fs::path out;
  SynthConfig cfg;
  double test_fraction = 0.2;
};

void add_synth(CLI::App& app, SynthOpts& o) {
  auto* c = app.add_subcommand("synth", "Generate a phantom dataset");
  c->add_option("--out", o.out, "Output dataset directory")->required();
  c->add_option("--n", o.cfg.n, "Number of images")->check(CLI::PositiveNumber)->capture_default_str();
  c->add_option("--size", o.cfg.size, "Image side in pixels")->capture_default_str();
  c->add_option("--seed", o.cfg.seed, "Generator seed")->capture_default_str();
  c->add_flag("--convex-only", o.cfg.convex_only, "Convex nodules only (no boundary harmonics)");
  c->add_option("--max-rotation", o.cfg.max_rotation_deg, "Largest nodule tilt in degrees")->capture_default_str();
  c->add_option("--test-fraction", o.test_fraction, "Share of images in the test split")->capture_default_str();
}

int run_synth(const SynthOpts& o) {
  o.cfg.validate();
  if (!(o.test_fraction >= 0 && o.test_fraction <= 1)) config_error("--test-fraction must lie in [0, 1]");
  const Dataset ds = make_dataset(o.cfg, o.test_fraction);
  write_dataset(o.out, ds);
  std::printf("wrote %zu images to %s (train %zu, test %zu)\n", ds.records.size(), o.out.c_str(),
              ds.train_ids.size(), ds.test_ids.size());
  return 0;
}

struct GenlabelsOpts {
  fs::path data, out;
  std::string kind;
};

void add_genlabels(CLI::App& app, GenlabelsOpts& o) {
  auto* c = app.add_subcommand("genlabels", "Rasterize one pseudo-label kind for every image");
  c->add_option("--data", o.data, "Dataset directory")->required();
  c->add_option("--kind", o.kind, "quadrilateral|concavity|box|rotrect|circle|ellipse")
      ->required()
      ->check(CLI::IsMember(kind_map()));
  c->add_option("--out", o.out, "Output directory for <id>.pgm masks")->required();
}

int run_genlabels(const GenlabelsOpts& o) {
  const ShapeKind kind = kind_map().at(o.kind);
  const Dataset ds = load(o.data);
  fs::create_directories(o.out);
  int clipped = 0;
  for (const auto& r : ds.records) {
    const PseudoLabel pl = generate_pseudo_label_checked(r.ann, kind, r.gt.grid());
    if (pl.out_of_bounds) {
      ++clipped;
      std::fprintf(stderr, "warning: %s: %s label leaves the image and was clipped\n", r.id.c_str(),
                   std::string(name(kind)).c_str());
    }
    pgm::write_mask(o.out / (r.id + ".pgm"), pl.mask);
  }
  std::printf("wrote %zu %s labels to %s (%d clipped)\n", ds.records.size(), std::string(name(kind)).c_str(),
              o.out.c_str(), clipped);
  return 0;
}

struct TrainOpts {
  fs::path data, out;
  TrainConfig cfg;
  bool no_idmps = false, no_crbs = false, no_cap = false, no_augment = false;
  std::string shape_con = "quadrilateral", shape_rad = "ellipse";
  std::string single, single_label, pairing = "cross", split = "train";
  std::optional<double> beta;
  long log_every = 100;
};

void add_train(CLI::App& app, TrainOpts& o) {
  auto* c = app.add_subcommand("train", "Train the two networks (or one with --single)");
  c->add_option("--data", o.data, "Dataset directory")->required();
  c->add_option("--out", o.out, "Run directory")->required();
  c->add_option("--iters", o.cfg.iters)->capture_default_str();
  c->add_option("--batch", o.cfg.batch)->capture_default_str();
  c->add_option("--crop", o.cfg.crop, "Square crop side")->capture_default_str();
  c->add_option("--alpha", o.cfg.alpha, "Class weight of the unreliable class")->capture_default_str();
  c->add_option("--lambda1", o.cfg.lambda1_max, "Peak weight of the mixed pseudo-label term")->capture_default_str();
  c->add_option("--lambda2", o.cfg.lambda2, "Weight of the axis-projection prior")->capture_default_str();
  c->add_option("--rampup", o.cfg.rampup_len, "Ramp-up length in iterations (0: whole run)")->capture_default_str();
  c->add_option("--lr", o.cfg.lr0, "Initial learning rate")->capture_default_str();
  c->add_option("--seed", o.cfg.seed)->capture_default_str();
  c->add_flag("--no-idmps", o.no_idmps, "Drop the mixed pseudo-label term");
  c->add_flag("--no-crbs", o.no_crbs, "Unweighted cross-entropy (alpha = 1)");
  c->add_flag("--no-cap", o.no_cap, "Drop the axis-projection prior");
  c->add_flag("--no-augment", o.no_augment, "Disable rotation/flip augmentation");
  c->add_option("--shape-con", o.shape_con, "Conservative label kind")->capture_default_str();
  c->add_option("--shape-rad", o.shape_rad, "Radical label kind")->capture_default_str();
  c->add_option("--single", o.single, "Train only one network")->check(CLI::IsMember({"con", "rad"}));
  c->add_option("--single-label", o.single_label, "Label kind for --single (default: that role's kind)");
  c->add_option("--beta", o.beta, "Fixed mixing weight in [0, 1] (default: random per image)");
  c->add_option("--pairing", o.pairing, "Label/network pairing of the weighted loss")
      ->check(CLI::IsMember({"cross", "direct"}))
      ->capture_default_str();
  c->add_option("--depth", o.cfg.net.depth, "Network depth")->capture_default_str();
  c->add_option("--channels", o.cfg.net.base_channels, "Base channel count")->capture_default_str();
  c->add_option("--ckpt-every", o.cfg.ckpt_every, "Checkpoint interval (0: only at exit)")->capture_default_str();
  c->add_option("--split", o.split, "Training subset")->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
  c->add_option("--log-every", o.log_every, "Progress line interval (0: silent)")->capture_default_str();
}

int run_train(TrainOpts& o) {
  TrainConfig& cfg = o.cfg;
  cfg.idmps = !o.no_idmps;
  cfg.crbs = !o.no_crbs;
  cfg.cap = !o.no_cap;
  cfg.augment = !o.no_augment;
  cfg.shape_con = shape_flag("--shape-con", o.shape_con);
  cfg.shape_rad = shape_flag("--shape-rad", o.shape_rad);
  cfg.pairing = o.pairing == "direct" ? Pairing::Direct : Pairing::Cross;
  cfg.fixed_beta = o.beta;
  if (!o.single.empty()) cfg.single = o.single == "con" ? NetRole::Con : NetRole::Rad;
  if (!o.single_label.empty()) {
    if (!cfg.single) config_error("--single-label requires --single");
    cfg.single_label = shape_flag("--single-label", o.single_label);
  }
  if (o.log_every < 0) config_error("--log-every must be >= 0");
  cfg.out_dir = o.out;
  cfg.validate();

  const Dataset ds = load(o.data);
  const auto records = split_records(ds, o.split, o.data);
  TrainObserver observer;
  if (o.log_every > 0) {
    observer = [&](const LogRow& r) {
      if ((r.iter + 1) % o.log_every == 0 || r.iter + 1 == cfg.iters) {
        std::fprintf(stderr, "iter %ld/%ld lr %.5f sup %.4f idmps %.4f cap %.4f total %.4f\n", r.iter + 1, cfg.iters,
                     r.lr, r.terms.sup, r.terms.idmps, r.terms.cap, r.terms.total);
      }
    };
  }
  train(cfg, records, observer);
  std::printf("trained on %zu images; outputs in %s\n", records.size(), o.out.c_str());
  return 0;
}

struct EvalOpts {
  fs::path data, report;
  std::optional<fs::path> ckpt_con, ckpt_rad;
  std::string mode = "ensemble";
  std::string split = "test";
};

void add_eval(CLI::App& app, EvalOpts& o) {
  auto* c = app.add_subcommand("eval", "Evaluate checkpoints against ground truth");
  c->add_option("--ckpt-con", o.ckpt_con, "Checkpoint of the network trained on conservative labels");
  c->add_option("--ckpt-rad", o.ckpt_rad, "Checkpoint of the network trained on radical labels");
  c->add_option("--data", o.data, "Dataset directory")->required();
  c->add_option("--mode", o.mode, "Prediction source")
      ->check(CLI::IsMember({"ensemble", "con", "rad"}))
      ->capture_default_str();
  c->add_option("--report", o.report, "Per-image CSV report")->required();
  c->add_option("--split", o.split, "Evaluated subset")->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
}

int run_eval(const EvalOpts& o, int threads) {
  const EvalMode mode = *parse_eval_mode(o.mode);
  if (mode != EvalMode::Rad && !o.ckpt_con) config_error("--mode " + std::string(name(mode)) + " needs --ckpt-con");
  if (mode != EvalMode::Con && !o.ckpt_rad) config_error("--mode " + std::string(name(mode)) + " needs --ckpt-rad");
  std::optional<Checkpoint> con, rad;
  if (mode != EvalMode::Rad) con = load_checkpoint(*o.ckpt_con);
  if (mode != EvalMode::Con) rad = load_checkpoint(*o.ckpt_rad);
  const Dataset ds = load(o.data);
  const auto records = split_records(ds, o.split, o.data);
  const auto rows = evaluate(con ? &con->params : nullptr, rad ? &rad->params : nullptr, records, mode, threads);
  if (o.report.has_parent_path()) fs::create_directories(o.report.parent_path());
  write_report(o.report, rows);
  const auto [mean, sd] = aggregate(rows);
  std::printf("%zu images, mode %s\n", rows.size(), std::string(name(mode)).c_str());
  std::printf("dsc %.4f +- %.4f  jaccard %.4f +- %.4f  asd %.3f +- %.3f  hd95 %.3f +- %.3f\n", mean.dsc, sd.dsc,
              mean.jaccard, sd.jaccard, mean.asd, sd.asd, mean.hd95, sd.hd95);
  return 0;
}

struct PerturbOpts {
  fs::path data, out;
  double degrees = 5;
};

void add_perturb(CLI::App& app, PerturbOpts& o) {
  auto* c = app.add_subcommand("perturb", "Rotate every annotation, alternating direction per image");
  c->add_option("--data", o.data, "Dataset directory")->required();
  c->add_option("--degrees", o.degrees, "Rotation magnitude")->capture_default_str();
  c->add_option("--out", o.out, "Output dataset directory")->required();
}

int run_perturb(const PerturbOpts& o) {
  if (!std::isfinite(o.degrees) || std::abs(o.degrees) > 90) config_error("--degrees must lie in [-90, 90]");
  if (fs::exists(o.out) && fs::exists(o.data) && fs::equivalent(o.out, o.data)) config_error("--out must differ from --data");
  Dataset ds = load(o.data);
  const auto perturbed = perturb_records(all_records(ds), o.degrees);
  ds.records = perturbed;
  ds.config["perturbation_degrees"] = o.degrees;
  write_dataset(o.out, ds);
  std::printf("wrote %zu images with annotations rotated by +-%g degrees to %s\n", ds.records.size(), o.degrees,
              o.out.c_str());
  return 0;
}

struct FidelityOpts {
  fs::path data, report;
};

void add_fidelity(CLI::App& app, FidelityOpts& o) {
  auto* c = app.add_subcommand("fidelity", "Precision and recall of each pseudo-label kind against ground truth");
  c->add_option("--data", o.data, "Dataset directory")->required();
  c->add_option("--report", o.report, "Output CSV")->required();
}

int run_fidelity(const FidelityOpts& o) {
  const Dataset ds = load(o.data);
  const auto table = shape_fidelity_table(ds.records, kAllShapeKinds);
  if (o.report.has_parent_path()) fs::create_directories(o.report.parent_path());
  std::ofstream out(o.report, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + o.report.string());
  out << "kind,group,precision,recall\n";
  std::printf("%-14s %-12s %9s %9s\n", "kind", "group", "precision", "recall");
  for (const auto& f : table) {
    const char* group = is_conservative(f.kind) ? "conservative" : "radical";
    out << name(f.kind) << ',' << group << ',' << format_real(f.precision) << ',' << format_real(f.recall) << '\n';
    std::printf("%-14s %-12s %9.4f %9.4f\n", std::string(name(f.kind)).c_str(), group, f.precision, f.recall);
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + o.report.string());
  return 0;
}

struct GradcheckOpts {
  GradcheckConfig cfg;
};

void add_gradcheck(CLI::App& app, GradcheckOpts& o) {
  auto* c = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences (double precision)");
  c->add_option("--eps", o.cfg.eps, "Finite-difference step")->capture_default_str();
  c->add_option("--tolerance", o.cfg.tolerance, "Largest accepted relative error")->capture_default_str();
  c->add_option("--seed", o.cfg.seed, "First seed of the check-point search")->capture_default_str();
  c->add_option("--size", o.cfg.size, "Input side")->capture_default_str();
}

int run_gradcheck(const GradcheckOpts& o) {
  if (!(o.cfg.eps > 0)) config_error("--eps must be positive");
  if (!(o.cfg.tolerance > 0)) config_error("--tolerance must be positive");
  if (o.cfg.size < 4 || o.cfg.size % (1 << o.cfg.net.depth) != 0) {
    config_error("--size must be a multiple of " + std::to_string(1 << o.cfg.net.depth) + " and at least 4");
  }
  const GradcheckResult r = run_gradcheck(o.cfg);
  std::printf("parameters per network: %zu (seed %llu, %d attempt%s)\n", r.parameters,
              static_cast<unsigned long long>(r.seed), r.attempts, r.attempts == 1 ? "" : "s");
  for (const auto& t : r.terms) {
    std::printf("%-8s max rel error %.3e over %zu gradients (worst %s: analytic %.9g numeric %.9g)\n", t.name.c_str(),
                t.max_rel_error, t.checked, t.worst_parameter.c_str(), t.worst_analytic, t.worst_numeric);
  }
  if (!r.smooth) std::printf("no kink-free check point found\n");
  std::printf("max relative error %.3e (tolerance %.1e): %s\n", r.max_rel_error(), o.cfg.tolerance,
              r.passed(o.cfg.tolerance) ? "ok" : "FAILED");
  return r.passed(o.cfg.tolerance) ? 0 : kExitRuntime;
}

struct ReportOpts {
  std::vector<fs::path> runs;
  std::optional<fs::path> out;
};

void add_report(CLI::App& app, ReportOpts& o) {
  auto* c = app.add_subcommand("report", "Summarize evaluation CSVs across runs");
  c->add_option("--runs", o.runs, "Run directories or CSV files; each becomes one summary row")->required();
  c->add_option("--out", o.out, "Directory for summary.csv and summary.tsv");
}

int run_report(const ReportOpts& o) {
  std::vector<RunSummary> rows;
  for (const auto& run : o.runs) rows.push_back(summarize_run(run.string(), find_reports(run)));
  std::fputs(summary_table(rows).c_str(), stdout);
  if (o.out) {
    fs::create_directories(*o.out);
    write_summary_csv(*o.out / "summary.csv", rows);
    write_summary_tsv(*o.out / "summary.tsv", rows);
  }
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Asymmetric weakly supervised segmentation from aspect-ratio annotations", "asymseg"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for evaluation (default 1)")->envname("ASYMSEG_THREADS");

  SynthOpts synth;
  GenlabelsOpts genlabels;
  TrainOpts trainer;
  EvalOpts eval;
  PerturbOpts perturb;
  FidelityOpts fidelity;
  GradcheckOpts gradcheck;
  ReportOpts report;
  add_synth(app, synth);
  add_genlabels(app, genlabels);
  add_train(app, trainer);
  add_eval(app, eval);
  add_perturb(app, perturb);
  add_fidelity(app, fidelity);
  add_gradcheck(app, gradcheck);
  add_report(app, report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  // Checked here rather than by a validator so that ASYMSEG_THREADS is covered too.
  if (threads < 1 || threads > 256) {
    std::fprintf(stderr, "--threads / ASYMSEG_THREADS: %d is not in [1, 256]\n", threads);
    return kExitValidation;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "synth") return run_synth(synth);
    if (cmd == "genlabels") return run_genlabels(genlabels);
    if (cmd == "train") return run_train(trainer);
    if (cmd == "eval") return run_eval(eval, threads);
    if (cmd == "perturb") return run_perturb(perturb);
    if (cmd == "fidelity") return run_fidelity(fidelity);
    if (cmd == "gradcheck") return run_gradcheck(gradcheck);
    if (cmd == "report") return run_report(report);
  } catch (const Error& e) {
    std::fprintf(stderr, "asymseg %s: %s\n", cmd.c_str(), e.what());
    return e.code() == ErrorCode::ConfigError ? kExitValidation : kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "asymseg %s: %s\n", cmd.c_str(), e.what());
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
