#include "dime/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>

#include "json.hpp"

namespace dime {

namespace {

void check_labels(std::span<const int> gold, std::span<const int> pred) {
  if (gold.size() != pred.size())
    throw ValueError("macro_f1: gold has " + std::to_string(gold.size()) + " labels but pred has " +
                     std::to_string(pred.size()));
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (gold[i] < 0 || gold[i] > 2 || pred[i] < 0 || pred[i] > 2)
      throw ValueError("macro_f1: label out of range {0,1,2} at index " + std::to_string(i));
}

std::string real_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

MacroF1Result macro_f1_detailed(std::span<const int> gold, std::span<const int> pred) {
  check_labels(gold, pred);
  MacroF1Result out;
  for (std::size_t i = 0; i < gold.size(); ++i) out.confusion.counts[gold[i]][pred[i]] += 1;
  double sum = 0;
  for (int c = 0; c < 3; ++c) {
    std::int64_t tp = out.confusion.counts[c][c];
    std::int64_t fp = 0, fn = 0;
    for (int other = 0; other < 3; ++other) {
      if (other == c) continue;
      fp += out.confusion.counts[other][c];
      fn += out.confusion.counts[c][other];
    }
    ClassScore& s = out.per_class[c];
    s.absent = (tp + fp + fn) == 0;
    s.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    s.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall)
                                        : 0.0;
    out.any_absent = out.any_absent || s.absent;
    sum += s.f1;
  }
  out.macro_f1 = sum / 3.0;
  return out;
}

double macro_f1(std::span<const int> gold, std::span<const int> pred) {
  return macro_f1_detailed(gold, pred).macro_f1;
}

EvalReport per_target_report(std::span<const std::string> targets, std::span<const int> gold,
                             std::span<const int> pred,
                             std::span<const std::array<double, 3>> pis) {
  if (targets.size() != gold.size() || gold.size() != pred.size())
    throw ValueError("per_target_report: targets, gold, and pred must have equal lengths");
  if (!pis.empty() && pis.size() != gold.size())
    throw ValueError("per_target_report: one gate vector per record required");

  EvalReport report;
  report.n_records = static_cast<int>(gold.size());

  std::map<std::string, std::vector<std::size_t>> by_target;
  for (std::size_t i = 0; i < targets.size(); ++i) by_target[targets[i]].push_back(i);

  double f1_sum = 0;
  for (const auto& [name, idx] : by_target) {
    std::vector<int> g, p;
    g.reserve(idx.size());
    p.reserve(idx.size());
    TargetReport tr;
    tr.target = name;
    tr.n = static_cast<int>(idx.size());
    for (std::size_t i : idx) {
      g.push_back(gold[i]);
      p.push_back(pred[i]);
      if (!pis.empty())
        for (int k = 0; k < 3; ++k) tr.mean_pi[k] += pis[i][k];
    }
    if (!pis.empty() && !idx.empty())
      for (int k = 0; k < 3; ++k) tr.mean_pi[k] /= static_cast<double>(idx.size());
    MacroF1Result m = macro_f1_detailed(g, p);
    tr.macro_f1 = m.macro_f1;
    tr.confusion = m.confusion;
    tr.any_absent = m.any_absent;
    f1_sum += m.macro_f1;
    report.per_target.push_back(std::move(tr));
  }
  report.avg_macro_f1 = by_target.empty() ? 0.0 : f1_sum / static_cast<double>(by_target.size());

  MacroF1Result pooled = macro_f1_detailed(gold, pred);
  report.pooled_macro_f1 = pooled.macro_f1;
  report.pooled_confusion = pooled.confusion;
  if (!pis.empty() && !gold.empty()) {
    for (const auto& pi : pis)
      for (int k = 0; k < 3; ++k) report.mean_pi[k] += pi[k];
    for (int k = 0; k < 3; ++k) report.mean_pi[k] /= static_cast<double>(gold.size());
  }
  return report;
}

std::string report_to_text(const EvalReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %6s  %8s  %6s %6s %6s\n", "Target", "N", "Macro-F1",
                "pi_t", "pi_v", "pi_tv");
  out += line;
  for (const auto& tr : report.per_target) {
    std::snprintf(line, sizeof line, "%-20s %6d  %8.4f  %6.3f %6.3f %6.3f%s\n", tr.target.c_str(),
                  tr.n, tr.macro_f1, tr.mean_pi[0], tr.mean_pi[1], tr.mean_pi[2],
                  tr.any_absent ? "  [absent class scored 0]" : "");
    out += line;
  }
  std::snprintf(line, sizeof line, "%-20s %6s  %8.4f\n", "Avg.", "-", report.avg_macro_f1);
  out += line;
  std::snprintf(line, sizeof line, "%-20s %6d  %8.4f  %6.3f %6.3f %6.3f\n", "Pooled",
                report.n_records, report.pooled_macro_f1, report.mean_pi[0], report.mean_pi[1],
                report.mean_pi[2]);
  out += line;
  return out;
}

namespace {

nlohmann::ordered_json confusion_json(const ConfusionMatrix& cm) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : cm.counts) rows.push_back({row[0], row[1], row[2]});
  return rows;
}

nlohmann::ordered_json pi_json(const std::array<double, 3>& pi) {
  return {real_str(pi[0]), real_str(pi[1]), real_str(pi[2])};
}

}  // namespace

std::string report_to_jsonl(const EvalReport& report) {
  std::string out;
  for (const auto& tr : report.per_target) {
    nlohmann::ordered_json j;
    j["target"] = tr.target;
    j["n"] = tr.n;
    j["macro_f1"] = real_str(tr.macro_f1);
    j["confusion"] = confusion_json(tr.confusion);
    j["mean_pi"] = pi_json(tr.mean_pi);
    if (tr.any_absent) j["absent_class"] = true;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json s;
  s["summary"] = true;
  s["n"] = report.n_records;
  s["avg_macro_f1"] = real_str(report.avg_macro_f1);
  s["pooled_macro_f1"] = real_str(report.pooled_macro_f1);
  s["pooled_confusion"] = confusion_json(report.pooled_confusion);
  s["mean_pi"] = pi_json(report.mean_pi);
  out += s.dump() + "\n";
  return out;
}

}  // namespace dime
