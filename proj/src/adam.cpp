#include "trls/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace trls::numeric {

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        const size_t n = params_[i]->tensor.values().size();
        m_[i].assign(n, 0.0);
        v_[i].assign(n, 0.0);
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter* p = params_[i];
        auto& val = p->tensor.values();
        const auto& g = p->tensor.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t k = 0; k < val.size(); ++k) {
            if (std::isnan(g[k]))
                throw std::runtime_error("adam_step: NaN gradient in parameter '" + p->name + "'");
            if (cfg_.weight_decay != 0.0) val[k] -= cfg_.lr * cfg_.weight_decay * val[k];
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            val[k] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
        }
    }
}

}  // namespace trls::numeric
