#pragma once

#include <vector>

#include "trls/nn.hpp"

namespace trls::numeric {

struct AdamConfig {
    double lr = 3e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

// Adam with decoupled weight decay: p -= lr*wd*p before the Adam delta.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig cfg);

    void step();
    void zero_grad();
    long long step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<Parameter*> params_;
    AdamConfig cfg_;
    long long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace trls::numeric
