#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "recttt/common.hpp"

namespace recttt {

// Per-run records plus mean/std aggregates over seeds, emitted as a
// fixed-schema CSV and a JSON report. Two runs of the same config differ
// only in the wall-time fields, which strip_timing() removes for
// reproducibility comparisons.

struct RunRecord {
  std::string method;
  std::string corruption;  // "clean" for the uncorrupted split
  int severity = 0;
  std::uint64_t seed = 0;
  int samples = 0;
  double accuracy = 0.0;      // percent
  double aux_loss_pre = 0.0;  // mean over batches, before adaptation
  double aux_loss_post = 0.0;
  double wall_ms = 0.0;
};

struct Aggregate {
  std::string method;
  std::string corruption;
  int severity = 0;
  int n_seeds = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
};

inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
  return std::string(buf, p);
}

class MetricsReport {
 public:
  static constexpr const char* kCsvHeader =
      "schema_version,method,corruption,severity,seed,samples,accuracy,acc_std,"
      "aux_loss_pre,aux_loss_post,wall_ms";
  static constexpr int kSchemaVersion = 1;

  std::vector<RunRecord> runs;

  void add(RunRecord r) { runs.push_back(std::move(r)); }

  // Mean +- std over seeds per (method, corruption, severity), plus one
  // "average" row per method built from each seed's mean over corruptions.
  std::vector<Aggregate> aggregates() const {
    std::vector<Aggregate> out;
    std::map<std::tuple<std::string, std::string, int>, std::vector<double>> groups;
    std::map<std::pair<std::string, std::uint64_t>, std::vector<double>> per_seed_avg;
    for (const RunRecord& r : runs) {
      groups[{r.method, r.corruption, r.severity}].push_back(r.accuracy);
      if (r.corruption != "clean") per_seed_avg[{r.method, r.seed}].push_back(r.accuracy);
    }
    auto mean_std = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double s2 = 0.0;
      for (double x : v) s2 += (x - m) * (x - m);
      const double sd = v.size() > 1 ? std::sqrt(s2 / static_cast<double>(v.size() - 1)) : 0.0;
      return std::pair<double, double>{m, sd};
    };
    for (const auto& [key, accs] : groups) {
      Aggregate a;
      a.method = std::get<0>(key);
      a.corruption = std::get<1>(key);
      a.severity = std::get<2>(key);
      a.n_seeds = static_cast<int>(accs.size());
      std::tie(a.acc_mean, a.acc_std) = mean_std(accs);
      out.push_back(std::move(a));
    }
    std::map<std::string, std::vector<double>> avg_by_method;
    int severity = runs.empty() ? 0 : runs.front().severity;
    for (const auto& [key, accs] : per_seed_avg) {
      double m = 0.0;
      for (double v : accs) m += v;
      avg_by_method[key.first].push_back(m / static_cast<double>(accs.size()));
    }
    for (const auto& [method, means] : avg_by_method) {
      Aggregate a;
      a.method = method;
      a.corruption = "average";
      a.severity = severity;
      a.n_seeds = static_cast<int>(means.size());
      std::tie(a.acc_mean, a.acc_std) = mean_std(means);
      out.push_back(std::move(a));
    }
    return out;
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write report csv '" + path + "'");
    f << kCsvHeader << "\n";
    for (const RunRecord& r : runs) {
      f << kSchemaVersion << ',' << r.method << ',' << r.corruption << ',' << r.severity << ','
        << r.seed << ',' << r.samples << ',' << format_double(r.accuracy) << ",,"
        << format_double(r.aux_loss_pre) << ',' << format_double(r.aux_loss_post) << ','
        << format_double(r.wall_ms) << "\n";
    }
    for (const Aggregate& a : aggregates()) {
      f << kSchemaVersion << ',' << a.method << ',' << a.corruption << ',' << a.severity
        << ",agg," << a.n_seeds << ',' << format_double(a.acc_mean) << ','
        << format_double(a.acc_std) << ",,,\n";
    }
  }

  nlohmann::json to_json(const nlohmann::json& config_echo, double total_wall_ms) const {
    nlohmann::json jruns = nlohmann::json::array();
    for (const RunRecord& r : runs)
      jruns.push_back({{"method", r.method},
                       {"corruption", r.corruption},
                       {"severity", r.severity},
                       {"seed", r.seed},
                       {"samples", r.samples},
                       {"accuracy", r.accuracy},
                       {"aux_loss_pre", r.aux_loss_pre},
                       {"aux_loss_post", r.aux_loss_post},
                       {"wall_ms", r.wall_ms}});
    nlohmann::json jagg = nlohmann::json::array();
    for (const Aggregate& a : aggregates())
      jagg.push_back({{"method", a.method},
                      {"corruption", a.corruption},
                      {"severity", a.severity},
                      {"n_seeds", a.n_seeds},
                      {"acc_mean", a.acc_mean},
                      {"acc_std", a.acc_std}});
    return {{"schema_version", kSchemaVersion},
            {"config", config_echo},
            {"runs", jruns},
            {"aggregates", jagg},
            {"timing", {{"total_wall_ms", total_wall_ms}}}};
  }

  void write_json(const std::string& path, const nlohmann::json& config_echo,
                  double total_wall_ms) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write report json '" + path + "'");
    f << to_json(config_echo, total_wall_ms).dump(2) << "\n";
  }
};

// Removes every wall-time field so reports from identical (config, seed)
// runs compare equal.
inline nlohmann::json strip_timing(nlohmann::json j) {
  j.erase("timing");
  if (j.contains("runs"))
    for (auto& r : j["runs"]) r.erase("wall_ms");
  return j;
}

}  // namespace recttt
