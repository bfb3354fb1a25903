#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dime/common.hpp"

namespace dime {

struct ConfusionMatrix {
  // counts[gold][pred]
  std::array<std::array<std::int64_t, 3>, 3> counts{};

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& row : counts)
      for (std::int64_t c : row) n += c;
    return n;
  }
};

struct ClassScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  bool absent = false;  // class missing from both gold and pred
};

struct MacroF1Result {
  double macro_f1 = 0;
  std::array<ClassScore, 3> per_class;
  bool any_absent = false;  // warning flag: some class scored 0 by absence
  ConfusionMatrix confusion;
};

// Unweighted mean of per-class F1 over the 3 stance classes. Zero-denominator
// convention: precision, recall, and F1 are all 0 when their denominator is
// 0; a class absent from both gold and pred contributes F1 = 0 and raises the
// any_absent warning flag.
MacroF1Result macro_f1_detailed(std::span<const int> gold, std::span<const int> pred);
double macro_f1(std::span<const int> gold, std::span<const int> pred);

struct TargetReport {
  std::string target;
  int n = 0;
  double macro_f1 = 0;
  ConfusionMatrix confusion;
  std::array<double, 3> mean_pi{};  // mean gate weights within the target
  bool any_absent = false;
};

struct EvalReport {
  std::vector<TargetReport> per_target;  // sorted by target name
  double avg_macro_f1 = 0;     // unweighted mean of per-target macro-F1 ("Avg.")
  double pooled_macro_f1 = 0;  // macro-F1 over all records pooled
  ConfusionMatrix pooled_confusion;
  std::array<double, 3> mean_pi{};  // mean gate weights over all records
  int n_records = 0;
};

// One prediction (and optionally one gate vector) per record; pis may be
// empty, in which case mean gate weights are reported as zeros.
EvalReport per_target_report(std::span<const std::string> targets, std::span<const int> gold,
                             std::span<const int> pred,
                             std::span<const std::array<double, 3>> pis = {});

std::string report_to_text(const EvalReport& report);
std::string report_to_jsonl(const EvalReport& report);

}  // namespace dime
