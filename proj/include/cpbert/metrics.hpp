#pragma once

#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"

namespace cpbert {

struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::size_t support = 0;
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // class -> (correct, total)
  std::vector<std::string> warnings;
};

namespace metrics_detail {
inline void check_lengths(std::size_t a, std::size_t b, const char* name) {
  if (a != b) throw ValidationError(std::string(name) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  if (a == 0) throw ValidationError(std::string(name) + ": empty input");
}
}  // namespace metrics_detail

inline MetricReport accuracy_report(const std::vector<int>& pred, const std::vector<int>& gt) {
  metrics_detail::check_lengths(pred.size(), gt.size(), "accuracy");
  MetricReport r;
  r.metric = "accuracy";
  r.support = gt.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    auto& pc = r.per_class[gt[i]];
    ++pc.second;
    if (pred[i] == gt[i]) {
      ++correct;
      ++pc.first;
    }
  }
  r.value = static_cast<double>(correct) / static_cast<double>(gt.size());
  return r;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& gt) { return accuracy_report(pred, gt).value; }

/// F1 of the positive class 1; defined as 0 (with a warning) when precision + recall = 0.
inline MetricReport f1_report(const std::vector<int>& pred, const std::vector<int>& gt) {
  metrics_detail::check_lengths(pred.size(), gt.size(), "f1");
  MetricReport r;
  r.metric = "f1";
  r.support = gt.size();
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] == 1, g = gt[i] == 1;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  if (precision + recall == 0.0) {
    r.value = 0.0;
    r.warnings.push_back("f1: precision + recall = 0; reporting 0");
  } else {
    r.value = 2.0 * precision * recall / (precision + recall);
  }
  r.per_class[1] = {tp, tp + fn};
  return r;
}

inline double f1_binary(const std::vector<int>& pred, const std::vector<int>& gt) { return f1_report(pred, gt).value; }

/// Chord symbol recall on a uniform tatum grid: the fraction of tatums whose label matches.
inline MetricReport csr_report(const std::vector<int>& pred_tatums, const std::vector<int>& gt_tatums) {
  metrics_detail::check_lengths(pred_tatums.size(), gt_tatums.size(), "csr");
  MetricReport r = accuracy_report(pred_tatums, gt_tatums);
  r.metric = "csr";
  return r;
}

inline double csr(const std::vector<int>& pred_tatums, const std::vector<int>& gt_tatums) {
  return csr_report(pred_tatums, gt_tatums).value;
}

inline nlohmann::json to_json_record(const MetricReport& r, const std::string& split = {}) {
  nlohmann::json j{{"metric", r.metric}, {"value", r.value}, {"support", r.support}};
  if (!split.empty()) j["split"] = split;
  if (!r.warnings.empty()) j["warnings"] = r.warnings;
  return j;
}

/// Human-readable table: one row per (label, report).
inline void write_summary_table(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& rows) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-20s %-10s %10s %10s\n", "run", "metric", "value", "support");
  os << buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-20s %-10s %10.4f %10zu\n", label.c_str(), r.metric.c_str(), r.value, r.support);
    os << buf;
  }
}

}  // namespace cpbert
