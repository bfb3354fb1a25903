#include "dime/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "dime/rng.hpp"

namespace dime {

namespace {

double rel_err(double a, double n) {
  double denom = std::max({std::fabs(a), std::fabs(n), 1e-8});
  return std::fabs(a - n) / denom;
}

}  // namespace

GradCheckReport check_gradients(std::span<Parameter<double>* const> params,
                                const std::function<double()>& loss_fn,
                                const std::function<void()>& grad_fn,
                                const GradCheckOptions& opt) {
  if (!(opt.h > 0)) throw ValueError("check_gradients: step h must be positive");

  for (Parameter<double>* p : params) p->zero_grad();
  grad_fn();

  GradCheckReport report;
  Rng rng(opt.sample_seed);
  for (Parameter<double>* p : params) {
    GradCheckGroup entry;
    entry.name = p->name;
    std::size_t n = p->value.data.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_per_param > 0 && static_cast<std::size_t>(opt.max_per_param) < n) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(opt.max_per_param));
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      double saved = p->value.data[i];
      p->value.data[i] = saved + opt.h;
      double f_plus = loss_fn();
      p->value.data[i] = saved - opt.h;
      double f_minus = loss_fn();
      p->value.data[i] = saved;
      double numeric = (f_plus - f_minus) / (2 * opt.h);
      double analytic = p->grad[i];
      double err = rel_err(analytic, numeric);
      if (err >= opt.tolerance) {
        // Distinguish a genuine gradient bug from a kink: at a
        // non-differentiable point the two one-sided slopes disagree.
        double f0 = loss_fn();
        double slope_r = (f_plus - f0) / opt.h;
        double slope_l = (f0 - f_minus) / opt.h;
        double denom = std::max({std::fabs(slope_r), std::fabs(slope_l), 1e-8});
        if (std::fabs(slope_r - slope_l) / denom > opt.kink_tol) {
          ++entry.skipped;
          continue;
        }
      }
      ++entry.checked;
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    entry.flagged = entry.max_rel_err >= opt.tolerance;
    report.checked += entry.checked;
    report.skipped += entry.skipped;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.params.push_back(std::move(entry));
  }

  // Aggregate by the prefix before the first '.' (e.g. all fusion_t.* params).
  std::map<std::string, GradCheckGroup> by_prefix;
  for (const auto& p : report.params) {
    std::string prefix = p.name.substr(0, p.name.find('.'));
    GradCheckGroup& g = by_prefix[prefix];
    g.name = prefix;
    g.checked += p.checked;
    g.skipped += p.skipped;
    g.max_rel_err = std::max(g.max_rel_err, p.max_rel_err);
    g.flagged = g.flagged || p.flagged;
  }
  for (auto& [_, g] : by_prefix) report.groups.push_back(g);
  report.pass = report.max_rel_err < opt.tolerance;
  return report;
}

std::string to_text(const GradCheckReport& report, double tolerance) {
  std::string out;
  char line[256];
  for (const auto& g : report.groups) {
    std::snprintf(line, sizeof line, "%-12s max rel err %.3e  (%d coords, %d skipped)%s\n",
                  g.name.c_str(), g.max_rel_err, g.checked, g.skipped,
                  g.skipped > 0 ? "  [non-differentiable point, skipped]" : "");
    out += line;
  }
  std::snprintf(line, sizeof line, "GRADCHECK %s  max rel err %.3e %s %.1e\n",
                report.pass ? "PASS" : "FAIL", report.max_rel_err, report.pass ? "<" : ">=",
                tolerance);
  out += line;
  return out;
}

}  // namespace dime
