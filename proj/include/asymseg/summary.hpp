#pragma once

// Aggregation of evaluation CSVs across runs: one summary row per run
// (pooled per-image mean and sample std, plus the spread of per-file means)
// and a long-format TSV for plotting.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "asymseg/error.hpp"
#include "asymseg/metrics.hpp"

namespace asymseg {

inline constexpr std::array<const char*, 6> kMetricNames = {"dsc", "jaccard", "asd", "hd95", "precision", "recall"};

inline std::array<double, 6> metric_fields(const MetricReport& m) {
  return {m.dsc, m.jaccard, m.asd, m.hd95, m.precision, m.recall};
}

/// Per-image rows of a report CSV; the trailing mean/std rows are skipped.
inline std::vector<ReportRow> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) {
    throw Error(ErrorCode::FormatError, path.string() + ": not an evaluation report (bad header)");
  }
  std::vector<ReportRow> rows;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, cell;
    std::getline(ss, id, ',');
    if (id == "mean" || id == "std") continue;
    std::array<double, 6> v{};
    for (double& x : v) {
      if (!std::getline(ss, cell, ',')) {
        throw Error(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) + ": too few columns");
      }
      try {
        std::size_t used = 0;
        x = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    rows.push_back({id, {v[0], v[1], v[2], v[3], v[4], v[5]}});
  }
  return rows;
}

inline bool is_report_file(const std::filesystem::path& p) {
  if (p.extension() != ".csv") return false;
  std::ifstream in(p);
  std::string line;
  return std::getline(in, line) && line == kReportHeader;
}

/// Report CSVs under `path` (itself if it is a file), sorted by path.
inline std::vector<std::filesystem::path> find_reports(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(path)) return {path};
  if (!fs::is_directory(path)) throw Error(ErrorCode::IoError, "no such run: " + path.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file() && is_report_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct RunSummary {
  std::string label;
  std::size_t files = 0;
  std::size_t images = 0;
  MetricReport mean;
  MetricReport std;
  double dsc_file_mean = 0;  // mean over files of each file's mean DSC
  double dsc_file_std = 0;   // sample std of those means (0 for one file)
};

inline RunSummary summarize_run(const std::string& label, const std::vector<std::filesystem::path>& files) {
  if (files.empty()) throw Error(ErrorCode::EmptyDataset, "run " + label + " has no evaluation reports");
  RunSummary s;
  s.label = label;
  s.files = files.size();
  std::vector<ReportRow> pooled;
  std::vector<double> file_means;
  for (const auto& f : files) {
    const auto rows = read_report(f);
    if (rows.empty()) throw Error(ErrorCode::EmptyDataset, f.string() + " has no rows");
    file_means.push_back(aggregate(rows).first.dsc);
    pooled.insert(pooled.end(), rows.begin(), rows.end());
  }
  s.images = pooled.size();
  std::tie(s.mean, s.std) = aggregate(pooled);
  for (double m : file_means) s.dsc_file_mean += m / double(file_means.size());
  if (file_means.size() > 1) {
    double v = 0;
    for (double m : file_means) v += (m - s.dsc_file_mean) * (m - s.dsc_file_mean);
    s.dsc_file_std = std::sqrt(v / double(file_means.size() - 1));
  }
  return s;
}

inline void write_summary_csv(const std::filesystem::path& path, const std::vector<RunSummary>& runs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "run,files,images";
  for (const char* m : kMetricNames) out << ',' << m << "_mean," << m << "_std";
  out << ",dsc_file_mean,dsc_file_std\n";
  for (const auto& r : runs) {
    out << r.label << ',' << r.files << ',' << r.images;
    const auto mu = metric_fields(r.mean), sd = metric_fields(r.std);
    for (std::size_t k = 0; k < mu.size(); ++k) out << ',' << format_real(mu[k]) << ',' << format_real(sd[k]);
    out << ',' << format_real(r.dsc_file_mean) << ',' << format_real(r.dsc_file_std) << '\n';
  }
}

/// Long format: one line per (run, metric).
inline void write_summary_tsv(const std::filesystem::path& path, const std::vector<RunSummary>& runs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "run\tmetric\tmean\tstd\tn\n";
  for (const auto& r : runs) {
    const auto mu = metric_fields(r.mean), sd = metric_fields(r.std);
    for (std::size_t k = 0; k < mu.size(); ++k) {
      out << r.label << '\t' << kMetricNames[k] << '\t' << format_real(mu[k]) << '\t' << format_real(sd[k]) << '\t'
          << r.images << '\n';
    }
  }
}

/// Human-readable "mean +- std" table.
inline std::string summary_table(const std::vector<RunSummary>& runs) {
  std::size_t wide = 3;
  for (const auto& r : runs) wide = std::max(wide, r.label.size());
  std::string out = "run" + std::string(wide - 3, ' ');
  for (const char* m : kMetricNames) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "  %19s", m);
    out += buf;
  }
  out += '\n';
  for (const auto& r : runs) {
    out += r.label + std::string(wide - r.label.size(), ' ');
    const auto mu = metric_fields(r.mean), sd = metric_fields(r.std);
    for (std::size_t k = 0; k < mu.size(); ++k) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "  %9.4f +- %6.4f", mu[k], sd[k]);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace asymseg
