#pragma once

#include <string>
#include <vector>

namespace panp {

struct CheckResult {
  std::string name;
  double err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

/// Finite-difference verification of every differentiable operation plus the
/// full patch-model ELBO on a toy configuration. Deterministic; safe to run
/// in CI.
std::vector<CheckResult> run_grad_checks();

}  // namespace panp
