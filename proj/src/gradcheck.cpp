#include "trls/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace trls::numeric {

GradCheckReport finite_diff_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                                  double rel_tol, double h, double abs_floor) {
    for (auto& in : inputs)
        if (!in.requires_grad())
            throw std::invalid_argument("finite_diff_check: all inputs must require grad");

    for (auto& in : inputs) in.zero_grad();
    Tensor loss = fn();
    if (loss.size() != 1)
        throw std::invalid_argument("finite_diff_check: fn must be scalar-valued");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in.grad());

    GradCheckReport report;
    report.passed = true;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& vals = inputs[i].values();
        for (size_t k = 0; k < vals.size(); ++k) {
            const double orig = vals[k];
            vals[k] = orig + h;
            const double fp = fn().item();
            vals[k] = orig - h;
            const double fm = fn().item();
            vals[k] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i][k];
            const double abs_err = std::fabs(a - numeric);
            const double denom = std::max(std::fabs(a), std::fabs(numeric));
            const double rel_err = denom > 0.0 ? abs_err / denom : 0.0;
            const bool elem_ok = abs_err <= abs_floor || rel_err <= rel_tol;
            if (rel_err > report.max_rel_err || (!elem_ok && report.passed)) {
                report.max_rel_err = std::max(report.max_rel_err, rel_err);
                report.worst = "input#" + std::to_string(i) + "[" + std::to_string(k) + "]";
            }
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            if (!elem_ok) report.passed = false;
        }
    }
    return report;
}

}  // namespace trls::numeric
