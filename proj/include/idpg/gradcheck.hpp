#pragma once

#include <functional>
#include <string>
#include <vector>

#include "idpg/accountant.hpp"
#include "idpg/tensor.hpp"

namespace idpg {

// Worst relative error between analytic gradients and central finite
// differences over every element of params. loss_fn must rebuild the
// forward pass from the current parameter values on each call; gradients
// land on a fresh 64-bit tape per evaluation.
double finite_diff_rel_err(const std::function<Tensor(Tape&)>& loss_fn,
                           std::vector<NamedParam> params, double h = 1e-5);

struct GradCheck {
  std::string name;
  double rel_err = 0.0;
};

struct GradReport {
  std::vector<GradCheck> checks;
  double worst = 0.0;
  bool ok(double tol = 1e-4) const { return worst <= tol; }
};

// Finite-difference sweep over the differentiable surface: the
// factorized linear layer, both generator flavors under every arch
// variant (single and multi depth), attention plus layer norm through a
// trainable encoder, and both head losses. One pass per seed.
GradReport run_gradcheck(std::size_t seeds = 20);

struct OracleReport {
  std::size_t configs = 0;
  double worst_abs_diff = 0.0;
  bool ok(double tol = 1e-10) const { return worst_abs_diff <= tol; }
};

// Block-reshaped factorized forward vs the explicitly materialized
// weight, elementwise, over random layer shapes with n in {1,2,4,8,16}
// and dims up to 64.
OracleReport run_phm_oracle(std::size_t configs = 100, std::uint64_t seed = 0);

}  // namespace idpg
