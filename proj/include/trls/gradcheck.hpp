#pragma once

#include <functional>
#include <string>
#include <vector>

#include "trls/tensor.hpp"

namespace trls::numeric {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst;  // "input#i[k]" of the worst element
    bool passed = false;
};

// Compares the analytic gradient of a scalar-valued function against central
// finite differences (64-bit). fn rebuilds its graph from the current values
// of `inputs` on every call; all inputs must require grad.
GradCheckReport finite_diff_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                                  double rel_tol = 1e-4, double h = 1e-5,
                                  double abs_floor = 1e-8);

}  // namespace trls::numeric
