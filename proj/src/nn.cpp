#include "trls/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace trls::numeric {

Tensor init_linear_weight(int fan_in, int fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng);
}

// ---------------------------------------------------------------------------
// Dense

Dense::Dense(int in_, int out_, Rng& rng, const std::string& name) : in(in_), out(out_) {
    w = Parameter(name + ".w", init_linear_weight(in_, out_, rng));
    b = Parameter(name + ".b", Tensor({out_}, 0.0));
}

Tensor Dense::forward(const Tensor& x) const {
    if (x.shape().back() != in)
        throw std::invalid_argument("Dense " + w.name + ": input width " +
                                    std::to_string(x.shape().back()) + ", expected " +
                                    std::to_string(in));
    Shape out_shape = x.shape();
    out_shape.back() = out;
    const long long rows = x.size() / in;
    Tensor flat = reshape(x, {static_cast<int>(rows), in});
    Tensor y = add_rowvec(matmul(flat, w.tensor), b.tensor);
    return reshape(y, std::move(out_shape));
}

void Dense::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(int channels_, const std::string& name_, double momentum_, double eps_)
    : name(name_), momentum(momentum_), eps(eps_), channels(channels_) {
    gamma = Parameter(name_ + ".gamma", Tensor({channels_}, 1.0));
    beta = Parameter(name_ + ".beta", Tensor({channels_}, 0.0));
    running_mean.assign(static_cast<size_t>(channels_), 0.0);
    running_var.assign(static_cast<size_t>(channels_), 1.0);
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
    if (mode == Mode::eval)
        return batch_norm_eval(x, gamma.tensor, beta.tensor, running_mean, running_var, eps);
    std::vector<double> mean, var;
    Tensor y = batch_norm_train(x, gamma.tensor, beta.tensor, eps, &mean, &var);
    for (size_t j = 0; j < mean.size(); ++j) {
        running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mean[j];
        running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j];
    }
    return y;
}

void BatchNorm::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
}

void BatchNorm::collect_buffers(std::vector<Buffer>& bs) {
    bs.push_back({name + ".running_mean", &running_mean});
    bs.push_back({name + ".running_var", &running_var});
}

// ---------------------------------------------------------------------------
// Recurrent cells

CellKind cell_kind_from_string(const std::string& s) {
    if (s == "lstm") return CellKind::lstm;
    if (s == "gru") return CellKind::gru;
    if (s == "rnn") return CellKind::rnn;
    if (s == "tcn") return CellKind::tcn;
    throw std::invalid_argument("unknown cell kind '" + s + "' (expected lstm|gru|rnn|tcn)");
}

std::string to_string(CellKind k) {
    switch (k) {
        case CellKind::lstm: return "lstm";
        case CellKind::gru: return "gru";
        case CellKind::rnn: return "rnn";
        case CellKind::tcn: return "tcn";
    }
    return "?";
}

RecurrentCell::RecurrentCell(CellKind kind_, int input_, int hidden_, Rng& rng,
                             const std::string& name)
    : kind(kind_), input(input_), hidden(hidden_) {
    int gates = 0;
    switch (kind_) {
        case CellKind::lstm: gates = 4; break;
        case CellKind::gru: gates = 3; break;
        case CellKind::rnn: gates = 1; break;
        case CellKind::tcn:
            throw std::invalid_argument("RecurrentCell: tcn is not a recurrent cell");
    }
    w_ih = Parameter(name + ".w_ih", init_linear_weight(input_, gates * hidden_, rng));
    w_hh = Parameter(name + ".w_hh", init_linear_weight(hidden_, gates * hidden_, rng));
    b_ih = Parameter(name + ".b_ih", Tensor({gates * hidden_}, 0.0));
    if (kind_ == CellKind::gru)
        b_hh = Parameter(name + ".b_hh", Tensor({gates * hidden_}, 0.0));
}

std::pair<Tensor, Tensor> RecurrentCell::step(const Tensor& x, const Tensor& h,
                                              const Tensor& c) const {
    if (x.ndim() != 2 || x.dim(1) != input)
        throw std::invalid_argument("RecurrentCell " + w_ih.name + ": input shape " +
                                    shape_str(x.shape()) + ", expected [b," +
                                    std::to_string(input) + "]");
    if (h.dim(1) != hidden)
        throw std::invalid_argument("RecurrentCell " + w_ih.name + ": hidden shape " +
                                    shape_str(h.shape()));
    const int hd = hidden;
    switch (kind) {
        case CellKind::lstm: {
            Tensor g = add_rowvec(add(matmul(x, w_ih.tensor), matmul(h, w_hh.tensor)), b_ih.tensor);
            Tensor i = sigmoid(slice_cols(g, 0, hd));
            Tensor f = sigmoid(slice_cols(g, hd, 2 * hd));
            Tensor cand = tanh_op(slice_cols(g, 2 * hd, 3 * hd));
            Tensor o = sigmoid(slice_cols(g, 3 * hd, 4 * hd));
            Tensor c_new = add(mul(f, c), mul(i, cand));
            Tensor h_new = mul(o, tanh_op(c_new));
            return {h_new, c_new};
        }
        case CellKind::gru: {
            Tensor gi = add_rowvec(matmul(x, w_ih.tensor), b_ih.tensor);
            Tensor gh = add_rowvec(matmul(h, w_hh.tensor), b_hh.tensor);
            Tensor r = sigmoid(add(slice_cols(gi, 0, hd), slice_cols(gh, 0, hd)));
            Tensor z = sigmoid(add(slice_cols(gi, hd, 2 * hd), slice_cols(gh, hd, 2 * hd)));
            Tensor n = tanh_op(add(slice_cols(gi, 2 * hd, 3 * hd),
                                   mul(r, slice_cols(gh, 2 * hd, 3 * hd))));
            // h' = (1-z)*n + z*h
            Tensor h_new = add(mul(sub(Tensor(z.shape(), 1.0), z), n), mul(z, h));
            return {h_new, c};
        }
        case CellKind::rnn: {
            Tensor g = add_rowvec(add(matmul(x, w_ih.tensor), matmul(h, w_hh.tensor)), b_ih.tensor);
            Tensor h_new = tanh_op(g);
            return {h_new, c};
        }
        case CellKind::tcn: break;
    }
    throw std::logic_error("RecurrentCell::step: bad kind");
}

Tensor RecurrentCell::run(const Tensor& seq) const {
    if (seq.ndim() != 3)
        throw std::invalid_argument("RecurrentCell::run: expected [b,steps,in], got " +
                                    shape_str(seq.shape()));
    const int steps = seq.dim(1);
    if (steps < 1) throw std::invalid_argument("RecurrentCell::run: empty sequence");
    const int b = seq.dim(0);
    Tensor h({b, hidden}, 0.0);
    Tensor c({b, hidden}, 0.0);
    std::vector<Tensor> outputs;
    outputs.reserve(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        auto [h_new, c_new] = step(slice_time(seq, i), h, c);
        h = h_new;
        c = c_new;
        outputs.push_back(h);
    }
    return stack_time(outputs);
}

void RecurrentCell::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&w_ih);
    ps.push_back(&w_hh);
    ps.push_back(&b_ih);
    if (kind == CellKind::gru) ps.push_back(&b_hh);
}

Tensor run_rnn(const Tensor& seq, const RecurrentCell& cell) {
    if (seq.ndim() != 2)
        throw std::invalid_argument("run_rnn: expected [steps,in], got " + shape_str(seq.shape()));
    Tensor batched = reshape(seq, {1, seq.dim(0), seq.dim(1)});
    Tensor out = cell.run(batched);
    return reshape(out, {out.dim(1), out.dim(2)});
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 3)
        throw std::invalid_argument("conv1x1: expected [b,t,f], got " + shape_str(x.shape()));
    if (w.ndim() != 2 || w.dim(0) != x.dim(2))
        throw std::invalid_argument("conv1x1: weight " + shape_str(w.shape()) + " for input " +
                                    shape_str(x.shape()));
    if (b.ndim() != 1 || b.dim(0) != w.dim(1))
        throw std::invalid_argument("conv1x1: bias " + shape_str(b.shape()));
    const int bs = x.dim(0), t = x.dim(1), f = x.dim(2), fo = w.dim(1);
    Tensor flat = reshape(x, {bs * t, f});
    Tensor y = add_rowvec(matmul(flat, w), b);
    return reshape(y, {bs, t, fo});
}

}  // namespace trls::numeric
