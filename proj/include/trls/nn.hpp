#pragma once

#include <string>
#include <utility>
#include <vector>

#include "trls/tensor.hpp"

namespace trls::numeric {

enum class Mode { train, eval };

// Trainable tensor with a unique path-style name used for checkpointing and
// online/target EMA pairing.
struct Parameter {
    std::string name;
    Tensor tensor;

    Parameter() = default;
    Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
        tensor.set_requires_grad(true);
    }
};

// Named non-trainable state (running statistics); checkpointed alongside
// parameters but never touched by the optimizer or EMA.
struct Buffer {
    std::string name;
    std::vector<double>* data = nullptr;
};

// y = x W + b applied along the last axis. Also serves as the 1x1 convolution
// over the frequency axis (see conv1x1 below).
class Dense {
public:
    Dense() = default;
    Dense(int in, int out, Rng& rng, const std::string& name);

    Tensor forward(const Tensor& x) const;  // [..., in] -> [..., out]

    void collect(std::vector<Parameter*>& ps);

    Parameter w, b;
    int in = 0, out = 0;
};

// Normalizes over all leading axes per trailing-axis channel. Train mode uses
// batch statistics and updates running ones; eval mode uses running stats.
class BatchNorm {
public:
    BatchNorm() = default;
    BatchNorm(int channels, const std::string& name, double momentum = 0.1, double eps = 1e-5);

    Tensor forward(const Tensor& x, Mode mode);

    void collect(std::vector<Parameter*>& ps);
    void collect_buffers(std::vector<Buffer>& bs);

    Parameter gamma, beta;
    std::vector<double> running_mean, running_var;
    std::string name;
    double momentum = 0.1, eps = 1e-5;
    int channels = 0;
};

enum class CellKind { lstm, gru, rnn, tcn };

CellKind cell_kind_from_string(const std::string& s);
std::string to_string(CellKind k);

// One recurrent cell (LSTM gate order i,f,g,o; GRU r,z,n). State tensors are
// [batch, hidden]; c is ignored by gru/rnn.
class RecurrentCell {
public:
    RecurrentCell() = default;
    RecurrentCell(CellKind kind, int input, int hidden, Rng& rng, const std::string& name);

    std::pair<Tensor, Tensor> step(const Tensor& x, const Tensor& h, const Tensor& c) const;

    // [b, steps, in] -> [b, steps, hidden], h0 = c0 = 0
    Tensor run(const Tensor& seq) const;

    void collect(std::vector<Parameter*>& ps);

    CellKind kind = CellKind::lstm;
    int input = 0, hidden = 0;
    Parameter w_ih, w_hh, b_ih, b_hh;  // b_hh only for gru
};

// Unbatched convenience form: [steps, in] -> [steps, hidden].
Tensor run_rnn(const Tensor& seq, const RecurrentCell& cell);

// Per-time-step affine map along the frequency axis.
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b);

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
Tensor init_linear_weight(int fan_in, int fan_out, Rng& rng);

}  // namespace trls::numeric
