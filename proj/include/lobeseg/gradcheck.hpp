#ifndef LOBESEG_GRADCHECK_HPP
#define LOBESEG_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "lobeseg/tensor.hpp"

namespace lobeseg {

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0;
};

// Compares reverse-mode gradients of the scalar f() against central finite
// differences for every element of every leaf. f rebuilds its graph from the
// leaves on each call. Relative error uses denominator max(1e-8, |analytic|).
double finite_diff_max_rel_err(const std::function<Tensor<double>()>& f,
                               const std::vector<Tensor<double>>& leaves, double h = 1e-5);

// Runs the per-op finite-difference suite (64-bit) over `seeds` random draws
// per op and reports the worst relative error per op.
std::vector<GradCheckReport> run_gradcheck_suite(int seeds = 5);

}  // namespace lobeseg

#endif  // LOBESEG_GRADCHECK_HPP
