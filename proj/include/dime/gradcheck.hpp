#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dime/tape.hpp"

namespace dime {

// Central finite-difference gradient verification, always at 64-bit: the
// tolerances below are not achievable in float. The loss closure must be a
// pure function of the current parameter values (run the model in eval mode
// so dropout and prompt resampling cannot perturb the probes).
struct GradCheckOptions {
  double h = 1e-5;          // central-difference step
  double tolerance = 1e-4;  // max allowed relative error
  int max_per_param = 0;    // coordinates probed per parameter; 0 = all
  std::uint64_t sample_seed = 17;
  // A coordinate whose left/right one-sided slopes disagree by more than this
  // relative amount sits on a kink (hinge boundary, relu corner) and is
  // reported as skipped rather than failed.
  double kink_tol = 1e-2;
};

struct GradCheckGroup {
  std::string name;  // parameter (or group) name
  int checked = 0;
  int skipped = 0;            // non-differentiable points
  double max_rel_err = 0.0;   // over checked, non-skipped coordinates
  bool flagged = false;       // max_rel_err >= tolerance
};

struct GradCheckReport {
  std::vector<GradCheckGroup> params;  // one entry per parameter
  std::vector<GradCheckGroup> groups;  // aggregated by name prefix before '.'
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;
  bool pass = false;
};

// loss_fn: forward pass returning the scalar loss at the current parameter
// values.  grad_fn: zero all grads, run forward + backward once, leaving
// analytic gradients in each parameter's grad buffer.
GradCheckReport check_gradients(std::span<Parameter<double>* const> params,
                                const std::function<double()>& loss_fn,
                                const std::function<void()>& grad_fn,
                                const GradCheckOptions& opt = {});

std::string to_text(const GradCheckReport& report, double tolerance);

}  // namespace dime
