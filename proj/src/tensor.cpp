#include "trls/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace trls::numeric {

long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

void require_ndim(const Tensor& t, int nd, const char* op) {
    if (t.ndim() != nd)
        shape_error(op, "expected " + std::to_string(nd) + "-d tensor, got " +
                            shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

// Wires up a result node: marks requires_grad if any parent needs it and
// installs the backward closure only in that case.
Tensor finish(std::shared_ptr<TensorNode> out, std::vector<Tensor> parents,
              std::function<void(TensorNode&)> backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    if (rg) {
        out->requires_grad = true;
        for (auto& p : parents) out->parents.push_back(p.node());
        out->backward = std::move(backward);
    }
    return Tensor(std::move(out));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    long long n = shape_numel(shape);
    if (n < 0) throw std::invalid_argument("Tensor: negative dimension in " + shape_str(shape));
    node_ = make_node(std::move(shape), std::vector<double>(static_cast<size_t>(n), fill));
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    long long n = shape_numel(shape);
    if (n != static_cast<long long>(values.size()))
        throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(shape));
    node_ = make_node(std::move(shape), std::move(values));
    node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng, bool requires_grad) {
    long long n = shape_numel(shape);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(shape, std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->shape;
}

std::vector<double>& Tensor::values() {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->value;
}

const std::vector<double>& Tensor::values() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->value;
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
    return values()[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw std::invalid_argument("at: rank mismatch");
    long long flat = 0;
    size_t k = 0;
    for (int i : idx) {
        flat = flat * s[k] + i;
        ++k;
    }
    return values()[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (!node_) throw std::logic_error("Tensor: undefined");
    node_->requires_grad = rg;
}

const std::vector<double>& Tensor::grad() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    if (node_->grad.size() != node_->value.size())
        throw std::logic_error("grad: no gradient has been computed");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_) throw std::logic_error("Tensor: undefined");
    node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
    if (!node_) return Tensor();
    return Tensor(node_->shape, node_->value, false);
}

void Tensor::backward() {
    TensorNode* root = node_.get();
    if (!root) throw std::logic_error("backward: undefined tensor");
    if (shape_numel(root->shape) != 1)
        throw std::invalid_argument("backward: tensor must be scalar, got " + shape_str(root->shape));
    if (!root->requires_grad)
        throw std::invalid_argument("backward: tensor does not require grad");

    // iterative post-order DFS over grad-requiring ancestry
    std::vector<TensorNode*> order;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    std::unordered_set<TensorNode*> visited;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& top = stack.back();
        TensorNode* n = top.first;
        if (top.second < n->parents.size()) {
            TensorNode* p = n->parents[top.second++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node();
    auto bn = b.node();
    return finish(make_node(a.shape(), std::move(out)), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node();
    auto bn = b.node();
    return finish(make_node(a.shape(), std::move(out)), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node();
    auto bn = b.node();
    return finish(make_node(a.shape(), std::move(out)), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    auto an = a.node();
    auto bn = b.node();
    return finish(make_node(a.shape(), std::move(out)), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an, s](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor sigmoid(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double y = self.value[i];
            an->grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor tanh_op(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double y = self.value[i];
            an->grad[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

Tensor relu(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
    });
}

Tensor exp_op(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.value[i];
    });
}

Tensor log_op(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i]);
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / an->value[i];
    });
}

// ---------------------------------------------------------------------------
// linear algebra / shape

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_ndim(a, 2, "matmul");
    require_ndim(b, 2, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        shape_error("matmul", "inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double aip = av[static_cast<size_t>(i) * k + p];
            const double* brow = &bv[static_cast<size_t>(p) * n];
            double* orow = &out[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return finish(make_node({m, n}, std::move(out)), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();  // dA += G * B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = self.grad[static_cast<size_t>(i) * n + j];
                    if (g == 0.0) continue;
                    const double* brow = &bn->value[0];
                    for (int p = 0; p < k; ++p)
                        an->grad[static_cast<size_t>(i) * k + p] +=
                            g * brow[static_cast<size_t>(p) * n + j];
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();  // dB += A^T * G
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double aip = an->value[static_cast<size_t>(i) * k + p];
                    if (aip == 0.0) continue;
                    const double* grow = &self.grad[static_cast<size_t>(i) * n];
                    double* brow = &bn->grad[static_cast<size_t>(p) * n];
                    for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
                }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_ndim(a, 2, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    auto an = a.node();
    return finish(make_node({n, m}, std::move(out)), {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                an->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    });
}

Tensor transpose_bt(const Tensor& a) {
    require_ndim(a, 3, "transpose_bt");
    const int b = a.dim(0), t = a.dim(1), f = a.dim(2);
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (int s = 0; s < b; ++s)
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < f; ++j)
                out[(static_cast<size_t>(s) * f + j) * t + i] =
                    av[(static_cast<size_t>(s) * t + i) * f + j];
    auto an = a.node();
    return finish(make_node({b, f, t}, std::move(out)), {a}, [an, b, t, f](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int s = 0; s < b; ++s)
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < f; ++j)
                    an->grad[(static_cast<size_t>(s) * t + i) * f + j] +=
                        self.grad[(static_cast<size_t>(s) * f + j) * t + i];
    });
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.size())
        shape_error("reshape", shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                                   " changes element count");
    auto an = a.node();
    return finish(make_node(std::move(new_shape), a.values()), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_ndim(v, 1, "add_rowvec");
    const int c = v.dim(0);
    if (a.ndim() < 1 || a.shape().back() != c)
        shape_error("add_rowvec", shape_str(a.shape()) + " + " + shape_str(v.shape()));
    const auto& av = a.values();
    const auto& vv = v.values();
    std::vector<double> out(av.size());
    const size_t rows = av.size() / static_cast<size_t>(c);
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) out[r * c + j] = av[r * c + j] + vv[static_cast<size_t>(j)];
    auto an = a.node();
    auto vn = v.node();
    return finish(make_node(a.shape(), std::move(out)), {a, v}, [an, vn, c](TensorNode& self) {
        const size_t rows = self.grad.size() / static_cast<size_t>(c);
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < c; ++j) vn->grad[static_cast<size_t>(j)] += self.grad[r * c + j];
        }
    });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    require_ndim(a, 2, "slice_cols");
    const int r = a.dim(0), c = a.dim(1);
    if (c0 < 0 || c1 > c || c0 >= c1)
        shape_error("slice_cols", "range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                      ") of " + shape_str(a.shape()));
    const int w = c1 - c0;
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(r) * w);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = av[static_cast<size_t>(i) * c + c0 + j];
    auto an = a.node();
    return finish(make_node({r, w}, std::move(out)), {a}, [an, r, c, c0, w](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
                an->grad[static_cast<size_t>(i) * c + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int r = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        require_ndim(p, 2, "concat_cols");
        if (p.dim(0) != r) shape_error("concat_cols", "row counts differ");
        total += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(r) * total);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        const auto& pv = p.values();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * total + off + j] = pv[static_cast<size_t>(i) * w + j];
        off += w;
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    return finish(make_node({r, total}, std::move(out)), parts,
                  [nodes, widths, r, total](TensorNode& self) {
                      int off = 0;
                      for (size_t k = 0; k < nodes.size(); ++k) {
                          const int w = widths[k];
                          if (nodes[k]->requires_grad) {
                              nodes[k]->ensure_grad();
                              for (int i = 0; i < r; ++i)
                                  for (int j = 0; j < w; ++j)
                                      nodes[k]->grad[static_cast<size_t>(i) * w + j] +=
                                          self.grad[static_cast<size_t>(i) * total + off + j];
                          }
                          off += w;
                      }
                  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto an = a.node();
    return finish(make_node({1}, {s}), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (auto& gv : an->grad) gv += g;
    });
}

Tensor mean_all(const Tensor& a) {
    const double n = static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto an = a.node();
    return finish(make_node({1}, {s / n}), {a}, [an, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0] / n;
        for (auto& gv : an->grad) gv += g;
    });
}

Tensor sum_rows(const Tensor& a) {
    require_ndim(a, 2, "sum_rows");
    const int r = a.dim(0), c = a.dim(1);
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i)] += av[static_cast<size_t>(i) * c + j];
    auto an = a.node();
    return finish(make_node({r}, std::move(out)), {a}, [an, r, c](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const double g = self.grad[static_cast<size_t>(i)];
            for (int j = 0; j < c; ++j) an->grad[static_cast<size_t>(i) * c + j] += g;
        }
    });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "row_dot");
    require_ndim(a, 2, "row_dot");
    const int r = a.dim(0), c = a.dim(1);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i)] += av[static_cast<size_t>(i) * c + j] * bv[static_cast<size_t>(i) * c + j];
    auto an = a.node();
    auto bn = b.node();
    return finish(make_node({r}, std::move(out)), {a, b}, [an, bn, r, c](TensorNode& self) {
        for (int i = 0; i < r; ++i) {
            const double g = self.grad[static_cast<size_t>(i)];
            if (g == 0.0) continue;
            for (int j = 0; j < c; ++j) {
                const size_t k = static_cast<size_t>(i) * c + j;
                if (an->requires_grad) {
                    an->ensure_grad();
                    an->grad[k] += g * bn->value[k];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    bn->grad[k] += g * an->value[k];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// time-axis ops

Tensor slice_time(const Tensor& a, int i) {
    require_ndim(a, 3, "slice_time");
    const int b = a.dim(0), t = a.dim(1), f = a.dim(2);
    if (i < 0 || i >= t) shape_error("slice_time", "frame " + std::to_string(i) + " of " + std::to_string(t));
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(b) * f);
    for (int s = 0; s < b; ++s)
        for (int j = 0; j < f; ++j)
            out[static_cast<size_t>(s) * f + j] = av[(static_cast<size_t>(s) * t + i) * f + j];
    auto an = a.node();
    return finish(make_node({b, f}, std::move(out)), {a}, [an, b, t, f, i](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int s = 0; s < b; ++s)
            for (int j = 0; j < f; ++j)
                an->grad[(static_cast<size_t>(s) * t + i) * f + j] += self.grad[static_cast<size_t>(s) * f + j];
    });
}

Tensor stack_time(const std::vector<Tensor>& frames) {
    if (frames.empty()) throw std::invalid_argument("stack_time: no frames");
    const int b = frames[0].dim(0), f = frames[0].dim(1);
    const int t = static_cast<int>(frames.size());
    for (const auto& fr : frames) {
        require_ndim(fr, 2, "stack_time");
        if (fr.dim(0) != b || fr.dim(1) != f) shape_error("stack_time", "frame shapes differ");
    }
    std::vector<double> out(static_cast<size_t>(b) * t * f);
    for (int i = 0; i < t; ++i) {
        const auto& fv = frames[static_cast<size_t>(i)].values();
        for (int s = 0; s < b; ++s)
            for (int j = 0; j < f; ++j)
                out[(static_cast<size_t>(s) * t + i) * f + j] = fv[static_cast<size_t>(s) * f + j];
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& fr : frames) nodes.push_back(fr.node());
    return finish(make_node({b, t, f}, std::move(out)), frames, [nodes, b, t, f](TensorNode& self) {
        for (int i = 0; i < t; ++i) {
            auto& n = nodes[static_cast<size_t>(i)];
            if (!n->requires_grad) continue;
            n->ensure_grad();
            for (int s = 0; s < b; ++s)
                for (int j = 0; j < f; ++j)
                    n->grad[static_cast<size_t>(s) * f + j] += self.grad[(static_cast<size_t>(s) * t + i) * f + j];
        }
    });
}

Tensor max_pool_time(const Tensor& a) {
    require_ndim(a, 3, "max_pool_time");
    const int b = a.dim(0), t = a.dim(1), f = a.dim(2);
    if (t < 2) shape_error("max_pool_time", "needs t >= 2, got t=" + std::to_string(t));
    const int to = t / 2;
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(b) * to * f);
    auto arg = std::make_shared<std::vector<uint8_t>>(out.size());
    for (int s = 0; s < b; ++s)
        for (int i = 0; i < to; ++i)
            for (int j = 0; j < f; ++j) {
                const double x0 = av[(static_cast<size_t>(s) * t + 2 * i) * f + j];
                const double x1 = av[(static_cast<size_t>(s) * t + 2 * i + 1) * f + j];
                const size_t o = (static_cast<size_t>(s) * to + i) * f + j;
                // ties route to the first frame
                if (x1 > x0) {
                    out[o] = x1;
                    (*arg)[o] = 1;
                } else {
                    out[o] = x0;
                    (*arg)[o] = 0;
                }
            }
    auto an = a.node();
    return finish(make_node({b, to, f}, std::move(out)), {a}, [an, arg, b, t, to, f](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int s = 0; s < b; ++s)
            for (int i = 0; i < to; ++i)
                for (int j = 0; j < f; ++j) {
                    const size_t o = (static_cast<size_t>(s) * to + i) * f + j;
                    const int src = 2 * i + (*arg)[o];
                    an->grad[(static_cast<size_t>(s) * t + src) * f + j] += self.grad[o];
                }
    });
}

Tensor global_avg_pool_time(const Tensor& a) {
    require_ndim(a, 3, "global_avg_pool_time");
    const int b = a.dim(0), t = a.dim(1), f = a.dim(2);
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(b) * f, 0.0);
    for (int s = 0; s < b; ++s)
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < f; ++j)
                out[static_cast<size_t>(s) * f + j] += av[(static_cast<size_t>(s) * t + i) * f + j];
    for (auto& v : out) v /= t;
    auto an = a.node();
    return finish(make_node({b, f}, std::move(out)), {a}, [an, b, t, f](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int s = 0; s < b; ++s)
            for (int j = 0; j < f; ++j) {
                const double g = self.grad[static_cast<size_t>(s) * f + j] / t;
                for (int i = 0; i < t; ++i)
                    an->grad[(static_cast<size_t>(s) * t + i) * f + j] += g;
            }
    });
}

Tensor time_shift(const Tensor& a, int offset) {
    require_ndim(a, 3, "time_shift");
    const int b = a.dim(0), t = a.dim(1), f = a.dim(2);
    const auto& av = a.values();
    std::vector<double> out(av.size(), 0.0);
    for (int s = 0; s < b; ++s)
        for (int i = 0; i < t; ++i) {
            const int src = i - offset;
            if (src < 0 || src >= t) continue;
            for (int j = 0; j < f; ++j)
                out[(static_cast<size_t>(s) * t + i) * f + j] = av[(static_cast<size_t>(s) * t + src) * f + j];
        }
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an, b, t, f, offset](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int s = 0; s < b; ++s)
            for (int i = 0; i < t; ++i) {
                const int src = i - offset;
                if (src < 0 || src >= t) continue;
                for (int j = 0; j < f; ++j)
                    an->grad[(static_cast<size_t>(s) * t + src) * f + j] +=
                        self.grad[(static_cast<size_t>(s) * t + i) * f + j];
            }
    });
}

Tensor frame_time(const Tensor& a, int kernel, int stride) {
    require_ndim(a, 3, "frame_time");
    const int b = a.dim(0), len = a.dim(1), c = a.dim(2);
    if (kernel < 1 || stride < 1 || len < kernel)
        shape_error("frame_time", "kernel " + std::to_string(kernel) + " stride " +
                                      std::to_string(stride) + " on length " + std::to_string(len));
    const int t = (len - kernel) / stride + 1;
    const int w = kernel * c;
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(b) * t * w);
    for (int s = 0; s < b; ++s)
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < kernel; ++j)
                for (int ch = 0; ch < c; ++ch)
                    out[(static_cast<size_t>(s) * t + i) * w + j * c + ch] =
                        av[(static_cast<size_t>(s) * len + i * stride + j) * c + ch];
    auto an = a.node();
    return finish(make_node({b, t, w}, std::move(out)), {a},
                  [an, b, len, c, kernel, stride, t, w](TensorNode& self) {
                      if (!an->requires_grad) return;
                      an->ensure_grad();
                      for (int s = 0; s < b; ++s)
                          for (int i = 0; i < t; ++i)
                              for (int j = 0; j < kernel; ++j)
                                  for (int ch = 0; ch < c; ++ch)
                                      an->grad[(static_cast<size_t>(s) * len + i * stride + j) * c + ch] +=
                                          self.grad[(static_cast<size_t>(s) * t + i) * w + j * c + ch];
                  });
}

// ---------------------------------------------------------------------------
// normalization & regularization

namespace {

// shared core for the row-wise normalize; 1-D input treated as a single row
Tensor l2_normalize_impl(const Tensor& a, int rows, int cols, const char* op) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        double ss = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double x = av[static_cast<size_t>(i) * cols + j];
            ss += x * x;
        }
        if (ss == 0.0)
            throw std::runtime_error(std::string(op) + ": zero vector at row " + std::to_string(i) +
                                     " (representation collapse?)");
        const double nrm = std::sqrt(ss);
        (*norms)[static_cast<size_t>(i)] = nrm;
        for (int j = 0; j < cols; ++j)
            out[static_cast<size_t>(i) * cols + j] = av[static_cast<size_t>(i) * cols + j] / nrm;
    }
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an, norms, rows, cols](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        // dx = (g - y * <g, y>) / ||x||  per row
        for (int i = 0; i < rows; ++i) {
            double gy = 0.0;
            for (int j = 0; j < cols; ++j) {
                const size_t k = static_cast<size_t>(i) * cols + j;
                gy += self.grad[k] * self.value[k];
            }
            const double nrm = (*norms)[static_cast<size_t>(i)];
            for (int j = 0; j < cols; ++j) {
                const size_t k = static_cast<size_t>(i) * cols + j;
                an->grad[k] += (self.grad[k] - self.value[k] * gy) / nrm;
            }
        }
    });
}

}  // namespace

Tensor l2_normalize(const Tensor& v) {
    require_ndim(v, 1, "l2_normalize");
    return l2_normalize_impl(v, 1, v.dim(0), "l2_normalize");
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_ndim(a, 2, "l2_normalize_rows");
    return l2_normalize_impl(a, a.dim(0), a.dim(1), "l2_normalize_rows");
}

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return a;  // identity, keeps graph
    const auto& av = a.values();
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(av.size());
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) {
        const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;  // inverted scaling
        (*mask)[i] = m;
        out[i] = av[i] * m;
    }
    auto an = a.node();
    return finish(make_node(a.shape(), std::move(out)), {a}, [an, mask](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * (*mask)[i];
    });
}

namespace {

void bn_check_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
    if (x.ndim() < 2) shape_error(op, "input must have at least 2 dims, got " + shape_str(x.shape()));
    const int c = x.shape().back();
    if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c)
        shape_error(op, "gamma/beta must be [" + std::to_string(c) + "]");
}

}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean, std::vector<double>* batch_var) {
    bn_check_shapes(x, gamma, beta, "batch_norm_train");
    const int c = x.shape().back();
    const long long rows = x.size() / c;
    if (rows == 0) throw std::invalid_argument("batch_norm_train: zero batch");
    const auto& xv = x.values();
    std::vector<double> mean(static_cast<size_t>(c), 0.0), var(static_cast<size_t>(c), 0.0);
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) mean[static_cast<size_t>(j)] += xv[static_cast<size_t>(r) * c + j];
    for (auto& m : mean) m /= static_cast<double>(rows);
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) {
            const double d = xv[static_cast<size_t>(r) * c + j] - mean[static_cast<size_t>(j)];
            var[static_cast<size_t>(j)] += d * d;
        }
    for (auto& v : var) v /= static_cast<double>(rows);  // population variance

    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    for (int j = 0; j < c; ++j)
        (*inv_sigma)[static_cast<size_t>(j)] = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + eps);
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    std::vector<double> out(xv.size());
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) {
            const size_t k = static_cast<size_t>(r) * c + j;
            const double xh = (xv[k] - mean[static_cast<size_t>(j)]) * (*inv_sigma)[static_cast<size_t>(j)];
            (*xhat)[k] = xh;
            out[k] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
        }
    if (batch_mean) *batch_mean = mean;
    if (batch_var) *batch_var = var;

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return finish(make_node(x.shape(), std::move(out)), {x, gamma, beta},
                  [xn, gn, bn, xhat, inv_sigma, rows, c](TensorNode& self) {
                      const double n = static_cast<double>(rows);
                      if (bn->requires_grad) {
                          bn->ensure_grad();
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j)
                                  bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r) * c + j];
                      }
                      if (gn->requires_grad) {
                          gn->ensure_grad();
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j) {
                                  const size_t k = static_cast<size_t>(r) * c + j;
                                  gn->grad[static_cast<size_t>(j)] += self.grad[k] * (*xhat)[k];
                              }
                      }
                      if (xn->requires_grad) {
                          xn->ensure_grad();
                          // dx = inv_sigma * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                          std::vector<double> sum_g(static_cast<size_t>(c), 0.0), sum_gx(static_cast<size_t>(c), 0.0);
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j) {
                                  const size_t k = static_cast<size_t>(r) * c + j;
                                  const double dxh = self.grad[k] * gn->value[static_cast<size_t>(j)];
                                  sum_g[static_cast<size_t>(j)] += dxh;
                                  sum_gx[static_cast<size_t>(j)] += dxh * (*xhat)[k];
                              }
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j) {
                                  const size_t k = static_cast<size_t>(r) * c + j;
                                  const double dxh = self.grad[k] * gn->value[static_cast<size_t>(j)];
                                  xn->grad[k] += (*inv_sigma)[static_cast<size_t>(j)] *
                                                 (dxh - sum_g[static_cast<size_t>(j)] / n -
                                                  (*xhat)[k] * sum_gx[static_cast<size_t>(j)] / n);
                              }
                      }
                  });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const std::vector<double>& mean, const std::vector<double>& var, double eps) {
    bn_check_shapes(x, gamma, beta, "batch_norm_eval");
    const int c = x.shape().back();
    if (mean.size() != static_cast<size_t>(c) || var.size() != static_cast<size_t>(c))
        throw std::invalid_argument("batch_norm_eval: running stats have wrong width");
    const long long rows = x.size() / c;
    if (rows == 0) throw std::invalid_argument("batch_norm_eval: zero batch");
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    for (int j = 0; j < c; ++j)
        (*inv_sigma)[static_cast<size_t>(j)] = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + eps);
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    std::vector<double> out(xv.size());
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) {
            const size_t k = static_cast<size_t>(r) * c + j;
            const double xh = (xv[k] - mean[static_cast<size_t>(j)]) * (*inv_sigma)[static_cast<size_t>(j)];
            (*xhat)[k] = xh;
            out[k] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
        }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return finish(make_node(x.shape(), std::move(out)), {x, gamma, beta},
                  [xn, gn, bn, xhat, inv_sigma, rows, c](TensorNode& self) {
                      if (bn->requires_grad) {
                          bn->ensure_grad();
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j)
                                  bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r) * c + j];
                      }
                      if (gn->requires_grad) {
                          gn->ensure_grad();
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j) {
                                  const size_t k = static_cast<size_t>(r) * c + j;
                                  gn->grad[static_cast<size_t>(j)] += self.grad[k] * (*xhat)[k];
                              }
                      }
                      if (xn->requires_grad) {
                          xn->ensure_grad();
                          for (long long r = 0; r < rows; ++r)
                              for (int j = 0; j < c; ++j) {
                                  const size_t k = static_cast<size_t>(r) * c + j;
                                  xn->grad[k] += self.grad[k] * gn->value[static_cast<size_t>(j)] *
                                                 (*inv_sigma)[static_cast<size_t>(j)];
                              }
                      }
                  });
}

// ---------------------------------------------------------------------------
// losses

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require_ndim(logits, 2, "softmax_cross_entropy");
    const int r = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != r)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(r) + " rows");
    for (int y : labels)
        if (y < 0 || y >= c)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(c) + ")");
    const auto& lv = logits.values();
    auto probs = std::make_shared<std::vector<double>>(lv.size());
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        const double* row = &lv[static_cast<size_t>(i) * c];
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        loss += lse - row[labels[static_cast<size_t>(i)]];
        for (int j = 0; j < c; ++j)
            (*probs)[static_cast<size_t>(i) * c + j] = std::exp(row[j] - lse);
    }
    loss /= r;
    auto ln = logits.node();
    auto labs = std::make_shared<std::vector<int>>(labels);
    return finish(make_node({1}, {loss}), {logits}, [ln, probs, labs, r, c](TensorNode& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const double g = self.grad[0] / r;
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                const size_t k = static_cast<size_t>(i) * c + j;
                const double onehot = (j == (*labs)[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                ln->grad[k] += g * ((*probs)[k] - onehot);
            }
    });
}

}  // namespace trls::numeric
