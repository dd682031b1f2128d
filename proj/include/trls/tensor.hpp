#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "trls/rng.hpp"

namespace trls::numeric {

using Shape = std::vector<int>;

long long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily, only for requires_grad nodes
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantics handle onto a node of the computation graph. Forward ops
// never mutate their inputs; gradients accumulate into leaf nodes on
// backward(). One thread per graph.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, double fill, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor scalar(double v);
    static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
    long long size() const { return shape_numel(shape()); }

    std::vector<double>& values();
    const std::vector<double>& values() const;
    double item() const;  // scalar tensors only
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);
    const std::vector<double>& grad() const;
    void zero_grad();

    // Reverse-mode pass from a scalar tensor.
    void backward();

    // Copy of the values with no graph history.
    Tensor detach() const;

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// elementwise / scalar
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);

// linear algebra / shape
Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                    // 2-D
Tensor transpose_bt(const Tensor& a);                 // [b,t,f] -> [b,f,t]
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // [..., c] + [c]
Tensor slice_cols(const Tensor& a, int c0, int c1);   // 2-D column range
Tensor concat_cols(const std::vector<Tensor>& parts); // 2-D, same row count

// reductions
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_rows(const Tensor& a);                  // [r,c] -> [r]
Tensor row_dot(const Tensor& a, const Tensor& b);  // [r,c],[r,c] -> [r]

// time-axis ops on [b,t,f] maps
Tensor slice_time(const Tensor& a, int i);              // -> [b,f]
Tensor stack_time(const std::vector<Tensor>& frames);   // k x [b,f] -> [b,k,f]
Tensor max_pool_time(const Tensor& a);                  // kernel 2, stride 2
Tensor global_avg_pool_time(const Tensor& a);           // -> [b,f]
Tensor time_shift(const Tensor& a, int offset);         // zero-filled shift
Tensor frame_time(const Tensor& a, int kernel, int stride);  // [b,len,c] -> [b,t,k*c]

// normalization & regularization
Tensor l2_normalize(const Tensor& v);        // 1-D, errors on zero vector
Tensor l2_normalize_rows(const Tensor& a);   // [r,c], errors on zero rows
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training);
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps, std::vector<double>* batch_mean,
                        std::vector<double>* batch_var);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const std::vector<double>& mean, const std::vector<double>& var,
                       double eps);

// losses
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace trls::numeric
