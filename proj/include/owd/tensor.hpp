#pragma once

// Reverse-mode automatic differentiation on dense double tensors.
//
// Every op builds a node that remembers its parents and a closure scattering
// the node's gradient back into them. backward(loss) runs the closures in
// reverse topological order. Nodes whose inputs all have requires_grad ==
// false record nothing, so frozen-model forwards pay no tape cost.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "owd/common.hpp"
#include "owd/rng.hpp"

namespace owd {

struct TensorData {
    std::vector<int> shape;
    std::vector<double> val;
    std::vector<double> grad;  // lazily sized to match val
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorData>> parents;
    std::function<void()> backward_fn;

    std::size_t numel() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
    void zero_grad() { grad.assign(val.size(), 0.0); }
};

using TensorPtr = std::shared_ptr<TensorData>;

namespace detail {

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 1) throw shape_error("tensor dimensions must be >= 1");
        n *= static_cast<std::size_t>(d);
    }
    if (shape.empty()) throw shape_error("tensor rank must be >= 1");
    return n;
}

inline TensorPtr new_node(std::vector<int> shape) {
    auto n = std::make_shared<TensorData>();
    const std::size_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->val.assign(count, 0.0);
    return n;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(TensorPtr p) : p_(std::move(p)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t(detail::new_node(std::move(shape)));
        t.p_->requires_grad = requires_grad;
        return t;
    }
    static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.p_->val.begin(), t.p_->val.end(), fill);
        return t;
    }
    static Tensor from(std::vector<int> shape, std::vector<double> vals, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        if (vals.size() != n)
            throw shape_error("tensor init: " + std::to_string(vals.size()) + " values for shape " +
                              detail::shape_str(shape));
        Tensor t(detail::new_node(std::move(shape)));
        t.p_->val = std::move(vals);
        t.p_->requires_grad = requires_grad;
        return t;
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad = true) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.p_->val) v = rng.gaussian() * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    TensorData& node() const { return *p_; }
    const TensorPtr& ptr() const { return p_; }

    const std::vector<int>& shape() const { return p_->shape; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
    int rows() const { return require_rank(2), p_->shape[0]; }
    int cols() const { return require_rank(2), p_->shape[1]; }
    std::size_t size() const { return p_->val.size(); }
    bool requires_grad() const { return p_->requires_grad; }

    double& v(std::size_t i) { return p_->val[i]; }
    double v(std::size_t i) const { return p_->val[i]; }
    double& at(int r, int c) {
        require_rank(2);
        return p_->val[static_cast<std::size_t>(r) * p_->shape[1] + c];
    }
    double at(int r, int c) const {
        require_rank(2);
        return p_->val[static_cast<std::size_t>(r) * p_->shape[1] + c];
    }
    double value() const {
        if (size() != 1) throw shape_error("value(): tensor is not scalar");
        return p_->val[0];
    }
    double g(std::size_t i) const {
        return p_->grad.size() == p_->val.size() ? p_->grad[i] : 0.0;
    }
    double grad_at(int r, int c) const {
        require_rank(2);
        return g(static_cast<std::size_t>(r) * p_->shape[1] + c);
    }
    std::vector<double>& values() { return p_->val; }
    const std::vector<double>& values() const { return p_->val; }

  private:
    int require_rank(int r) const {
        if (rank() != r)
            throw shape_error("expected rank " + std::to_string(r) + " tensor, got " +
                              detail::shape_str(p_->shape));
        return r;
    }
    TensorPtr p_;
};

namespace detail {

inline bool any_requires(const std::vector<Tensor>& xs) {
    for (const auto& x : xs)
        if (x.requires_grad()) return true;
    return false;
}

// Wires parents and the pullback into the freshly built output node. `pull`
// receives the output node and must scatter out.grad into the parents' grads.
inline void record(Tensor& out, std::vector<Tensor> parents,
                   std::function<void(TensorData&)> pull) {
    if (!any_requires(parents)) return;
    TensorData& n = out.node();
    n.requires_grad = true;
    n.parents.reserve(parents.size());
    for (auto& p : parents) n.parents.push_back(p.ptr());
    TensorData* raw = &n;  // stored inside the node itself, so no ownership cycle
    n.backward_fn = [raw, pull = std::move(pull)]() { pull(*raw); };
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

}  // namespace detail

// Runs the recorded closures from `root` (a scalar) down to the leaves.
inline void backward(const Tensor& root) {
    if (root.size() != 1) throw shape_error("backward: root must be scalar");
    TensorData* r = root.ptr().get();
    r->ensure_grad();
    r->grad[0] = 1.0;
    // Iterative post-order DFS, then replay reversed.
    std::vector<TensorData*> order;
    std::unordered_set<TensorData*> visited;
    std::vector<std::pair<TensorData*, std::size_t>> stack{{r, 0}};
    visited.insert(r);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorData* p = node->parents[next++].get();
            if (p->backward_fn && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            for (auto& p : (*it)->parents) p->ensure_grad();
            (*it)->backward_fn();
        }
    }
}

// Value-only copy that severs the tape: gradients never flow past it.
inline Tensor detach(const Tensor& x) {
    Tensor t = Tensor::zeros(x.shape(), false);
    t.values() = x.values();
    return t;
}

inline std::uint64_t value_hash(const Tensor& x) {
    return fnv1a(x.values().data(), x.values().size() * sizeof(double));
}

// ---- elementwise arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) + b.v(i);
    detail::record(out, {a, b}, [a, b](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            if (a.requires_grad()) a.node().grad[i] += o.grad[i];
            if (b.requires_grad()) b.node().grad[i] += o.grad[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) - b.v(i);
    detail::record(out, {a, b}, [a, b](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            if (a.requires_grad()) a.node().grad[i] += o.grad[i];
            if (b.requires_grad()) b.node().grad[i] -= o.grad[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) * b.v(i);
    detail::record(out, {a, b}, [a, b](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            if (a.requires_grad()) a.node().grad[i] += o.grad[i] * b.v(i);
            if (b.requires_grad()) b.node().grad[i] += o.grad[i] * a.v(i);
        }
    });
    return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::same_shape(a, b, "div");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) / b.v(i);
    detail::record(out, {a, b}, [a, b](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const double inv = 1.0 / b.v(i);
            if (a.requires_grad()) a.node().grad[i] += o.grad[i] * inv;
            if (b.requires_grad()) b.node().grad[i] -= o.grad[i] * a.v(i) * inv * inv;
        }
    });
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) + s;
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) a.node().grad[i] += o.grad[i];
    });
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) * s;
    detail::record(out, {a}, [a, s](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) a.node().grad[i] += o.grad[i] * s;
    });
    return out;
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// Elementwise extrema with gradient routed to the winning input (first input
// wins ties).
inline Tensor maximum(const Tensor& a, const Tensor& b) {
    detail::same_shape(a, b, "maximum");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::max(a.v(i), b.v(i));
    detail::record(out, {a, b}, [a, b](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            if (a.v(i) >= b.v(i)) {
                if (a.requires_grad()) a.node().grad[i] += o.grad[i];
            } else if (b.requires_grad()) {
                b.node().grad[i] += o.grad[i];
            }
        }
    });
    return out;
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
    detail::same_shape(a, b, "minimum");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::min(a.v(i), b.v(i));
    detail::record(out, {a, b}, [a, b](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            if (a.v(i) <= b.v(i)) {
                if (a.requires_grad()) a.node().grad[i] += o.grad[i];
            } else if (b.requires_grad()) {
                b.node().grad[i] += o.grad[i];
            }
        }
    });
    return out;
}

inline Tensor maximum_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::max(a.v(i), s);
    detail::record(out, {a}, [a, s](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i)
            if (a.v(i) >= s) a.node().grad[i] += o.grad[i];
    });
    return out;
}

// ---- elementwise nonlinearities ----

inline Tensor relu(const Tensor& a) { return maximum_scalar(a, 0.0); }

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.v(i);
        out.v(i) = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const double s = o.val[i];
            a.node().grad[i] += o.grad[i] * s * (1.0 - s);
        }
    });
    return out;
}

inline Tensor tanh(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::tanh(a.v(i));
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i)
            a.node().grad[i] += o.grad[i] * (1.0 - o.val[i] * o.val[i]);
    });
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::exp(a.v(i));
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) a.node().grad[i] += o.grad[i] * o.val[i];
    });
    return out;
}

inline Tensor log(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::log(a.v(i));
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) a.node().grad[i] += o.grad[i] / a.v(i);
    });
    return out;
}

inline Tensor sqrt(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::sqrt(a.v(i));
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i)
            a.node().grad[i] += o.grad[i] * 0.5 / o.val[i];
    });
    return out;
}

inline Tensor square(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) * a.v(i);
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i)
            a.node().grad[i] += o.grad[i] * 2.0 * a.v(i);
    });
    return out;
}

inline Tensor abs(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = std::fabs(a.v(i));
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i)
            a.node().grad[i] += o.grad[i] * (a.v(i) >= 0 ? 1.0 : -1.0);
    });
    return out;
}

// ---- matrix ops ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw shape_error("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " x " +
                          detail::shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* pc = out.values().data();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            double* crow = pc + i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    detail::record(out, {a, b}, [a, b, m, k, n](TensorData& o) {
        const double* go = o.grad.data();
        if (a.requires_grad()) {
            double* ga = a.node().grad.data();
            const double* pb2 = b.values().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = go[i * n + j];
                    if (g == 0.0) continue;
                    for (int kk = 0; kk < k; ++kk) ga[i * k + kk] += g * pb2[kk * n + j];
                }
        }
        if (b.requires_grad()) {
            double* gb = b.node().grad.data();
            const double* pa2 = a.values().data();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    const double av = pa2[i * k + kk];
                    if (av == 0.0) continue;
                    for (int j = 0; j < n; ++j) gb[kk * n + j] += av * go[i * n + j];
                }
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    Tensor out = Tensor::zeros({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    detail::record(out, {a}, [a, r, c](TensorData& o) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                a.node().grad[static_cast<std::size_t>(i) * c + j] +=
                    o.grad[static_cast<std::size_t>(j) * r + i];
    });
    return out;
}

// ---- row-vector broadcasts over a [n,d] matrix ----

namespace detail {
inline void check_rowvec(const Tensor& a, const Tensor& v, const char* op) {
    if (a.rank() != 2 || v.rank() != 2 || v.rows() != 1 || v.cols() != a.cols())
        throw shape_error(std::string(op) + ": need [n,d] and [1,d], got " +
                          shape_str(a.shape()) + " and " + shape_str(v.shape()));
}
}  // namespace detail

inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    detail::check_rowvec(a, v, "add_rowvec");
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) = a.at(i, j) + v.at(0, j);
    detail::record(out, {a, v}, [a, v, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                const double g = o.grad[static_cast<std::size_t>(i) * d + j];
                if (a.requires_grad()) a.node().grad[static_cast<std::size_t>(i) * d + j] += g;
                if (v.requires_grad()) v.node().grad[static_cast<std::size_t>(j)] += g;
            }
    });
    return out;
}

inline Tensor sub_rowvec(const Tensor& a, const Tensor& v) {
    detail::check_rowvec(a, v, "sub_rowvec");
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) = a.at(i, j) - v.at(0, j);
    detail::record(out, {a, v}, [a, v, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                const double g = o.grad[static_cast<std::size_t>(i) * d + j];
                if (a.requires_grad()) a.node().grad[static_cast<std::size_t>(i) * d + j] += g;
                if (v.requires_grad()) v.node().grad[static_cast<std::size_t>(j)] -= g;
            }
    });
    return out;
}

inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    detail::check_rowvec(a, v, "mul_rowvec");
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) = a.at(i, j) * v.at(0, j);
    detail::record(out, {a, v}, [a, v, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                const double g = o.grad[static_cast<std::size_t>(i) * d + j];
                if (a.requires_grad())
                    a.node().grad[static_cast<std::size_t>(i) * d + j] += g * v.at(0, j);
                if (v.requires_grad()) v.node().grad[static_cast<std::size_t>(j)] += g * a.at(i, j);
            }
    });
    return out;
}

inline Tensor div_rowvec(const Tensor& a, const Tensor& v) {
    detail::check_rowvec(a, v, "div_rowvec");
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) = a.at(i, j) / v.at(0, j);
    detail::record(out, {a, v}, [a, v, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                const double g = o.grad[static_cast<std::size_t>(i) * d + j];
                const double inv = 1.0 / v.at(0, j);
                if (a.requires_grad())
                    a.node().grad[static_cast<std::size_t>(i) * d + j] += g * inv;
                if (v.requires_grad())
                    v.node().grad[static_cast<std::size_t>(j)] -= g * a.at(i, j) * inv * inv;
            }
    });
    return out;
}

// ---- reductions ----

inline Tensor sum(const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.v(i);
    out.v(0) = s;
    detail::record(out, {a}, [a](TensorData& o) {
        const double g = o.grad[0];
        for (std::size_t i = 0; i < a.size(); ++i) a.node().grad[i] += g;
    });
    return out;
}

inline Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

// Mean over the row index: [n,d] -> [1,d].
inline Tensor mean_over_rows(const Tensor& a) {
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({1, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(0, j) += a.at(i, j);
    for (int j = 0; j < d; ++j) out.at(0, j) /= n;
    detail::record(out, {a}, [a, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                a.node().grad[static_cast<std::size_t>(i) * d + j] += o.grad[static_cast<std::size_t>(j)] / n;
    });
    return out;
}

// ---- row-wise normalizations ----

inline Tensor softmax_rows(const Tensor& a) {
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        double mx = a.at(i, 0);
        for (int j = 1; j < d; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (int j = 0; j < d; ++j) z += std::exp(a.at(i, j) - mx);
        for (int j = 0; j < d; ++j) out.at(i, j) = std::exp(a.at(i, j) - mx) / z;
    }
    detail::record(out, {a}, [a, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j)
                dot += o.grad[static_cast<std::size_t>(i) * d + j] * o.val[static_cast<std::size_t>(i) * d + j];
            for (int j = 0; j < d; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * d + j;
                a.node().grad[k] += o.val[k] * (o.grad[k] - dot);
            }
        }
    });
    return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        double mx = a.at(i, 0);
        for (int j = 1; j < d; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (int j = 0; j < d; ++j) z += std::exp(a.at(i, j) - mx);
        const double lz = mx + std::log(z);
        for (int j = 0; j < d; ++j) out.at(i, j) = a.at(i, j) - lz;
    }
    detail::record(out, {a}, [a, n, d](TensorData& o) {
        for (int i = 0; i < n; ++i) {
            double gsum = 0.0;
            for (int j = 0; j < d; ++j) gsum += o.grad[static_cast<std::size_t>(i) * d + j];
            for (int j = 0; j < d; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * d + j;
                a.node().grad[k] += o.grad[k] - std::exp(o.val[k]) * gsum;
            }
        }
    });
    return out;
}

// Row-wise standardization (x - mu) / sqrt(var + eps) without affine terms;
// scale and shift compose from mul_rowvec / add_rowvec when needed.
inline Tensor layernorm_rows(const Tensor& a, double eps = 1e-5) {
    const int n = a.rows(), d = a.cols();
    Tensor out = Tensor::zeros({n, d});
    std::vector<double> inv_sigma(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += a.at(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = a.at(i, j) - mu;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < d; ++j) out.at(i, j) = (a.at(i, j) - mu) * is;
    }
    detail::record(out, {a}, [a, n, d, inv_sigma = std::move(inv_sigma)](TensorData& o) {
        for (int i = 0; i < n; ++i) {
            double gmean = 0.0, gymean = 0.0;
            for (int j = 0; j < d; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * d + j;
                gmean += o.grad[k];
                gymean += o.grad[k] * o.val[k];
            }
            gmean /= d;
            gymean /= d;
            const double is = inv_sigma[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * d + j;
                a.node().grad[k] += is * (o.grad[k] - gmean - o.val[k] * gymean);
            }
        }
    });
    return out;
}

// ---- structure ops ----

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    const int r = a.rows(), c = a.cols();
    if (r0 < 0 || r1 > r || r0 >= r1) throw shape_error("slice_rows: bad range");
    Tensor out = Tensor::zeros({r1 - r0, c});
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < c; ++j) out.at(i - r0, j) = a.at(i, j);
    detail::record(out, {a}, [a, r0, c](TensorData& o) {
        const int nr = o.shape[0];
        for (int i = 0; i < nr; ++i)
            for (int j = 0; j < c; ++j)
                a.node().grad[static_cast<std::size_t>(i + r0) * c + j] +=
                    o.grad[static_cast<std::size_t>(i) * c + j];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    const int r = a.rows(), c = a.cols();
    if (c0 < 0 || c1 > c || c0 >= c1) throw shape_error("slice_cols: bad range");
    Tensor out = Tensor::zeros({r, c1 - c0});
    for (int i = 0; i < r; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a.at(i, j);
    detail::record(out, {a}, [a, c0, c](TensorData& o) {
        const int nr = o.shape[0], nc = o.shape[1];
        for (int i = 0; i < nr; ++i)
            for (int j = 0; j < nc; ++j)
                a.node().grad[static_cast<std::size_t>(i) * c + (j + c0)] +=
                    o.grad[static_cast<std::size_t>(i) * nc + j];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw shape_error("concat_rows: empty input");
    const int c = parts[0].cols();
    int total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) throw shape_error("concat_rows: column mismatch");
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, c});
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < c; ++j) out.at(off + i, j) = p.at(i, j);
        off += p.rows();
    }
    detail::record(out, parts, [parts, c](TensorData& o) {
        int off2 = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                for (int i = 0; i < p.rows(); ++i)
                    for (int j = 0; j < c; ++j)
                        p.node().grad[static_cast<std::size_t>(i) * c + j] +=
                            o.grad[static_cast<std::size_t>(off2 + i) * c + j];
            }
            off2 += p.rows();
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw shape_error("concat_cols: empty input");
    const int r = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) throw shape_error("concat_cols: row mismatch");
        total += p.cols();
    }
    Tensor out = Tensor::zeros({r, total});
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    detail::record(out, parts, [parts, r, total](TensorData& o) {
        int off2 = 0;
        for (const auto& p : parts) {
            const int pc = p.cols();
            if (p.requires_grad()) {
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < pc; ++j)
                        p.node().grad[static_cast<std::size_t>(i) * pc + j] +=
                            o.grad[static_cast<std::size_t>(i) * total + off2 + j];
            }
            off2 += pc;
        }
    });
    return out;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    const int r = a.rows(), c = a.cols();
    if (idx.empty()) throw shape_error("gather_rows: empty index list");
    for (int i : idx)
        if (i < 0 || i >= r) throw shape_error("gather_rows: index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), c});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < c; ++j) out.at(static_cast<int>(i), j) = a.at(idx[i], j);
    detail::record(out, {a}, [a, idx, c](TensorData& o) {
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < c; ++j)
                a.node().grad[static_cast<std::size_t>(idx[i]) * c + j] +=
                    o.grad[i * static_cast<std::size_t>(c) + j];
    });
    return out;
}

// Rank-3 feature map [C,H,W] to a token matrix [H*W, C], row-major in (y,x).
inline Tensor chw_to_tokens(const Tensor& a) {
    if (a.rank() != 3) throw shape_error("chw_to_tokens: need rank-3 input");
    const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    Tensor out = Tensor::zeros({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out.at(y * W + x, c) = a.v((static_cast<std::size_t>(c) * H + y) * W + x);
    detail::record(out, {a}, [a, C, H, W](TensorData& o) {
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    a.node().grad[(static_cast<std::size_t>(c) * H + y) * W + x] +=
                        o.grad[static_cast<std::size_t>(y * W + x) * C + c];
    });
    return out;
}

// ---- convolution ----

// input [Cin,H,W], weight [Cout,Cin,kh,kw], bias [1,Cout]; zero padding.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                     int pad) {
    if (input.rank() != 3 || weight.rank() != 4)
        throw shape_error("conv2d: need [Cin,H,W] input and [Cout,Cin,kh,kw] weight");
    const int Cin = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != Cin) throw shape_error("conv2d: channel mismatch");
    if (bias.rank() != 2 || bias.rows() != 1 || bias.cols() != Cout)
        throw shape_error("conv2d: bias must be [1,Cout]");
    if (stride < 1 || pad < 0) throw shape_error("conv2d: bad stride or padding");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw shape_error("conv2d: empty output");
    Tensor out = Tensor::zeros({Cout, Ho, Wo});
    const double* pin = input.values().data();
    const double* pw = weight.values().data();
    double* po = out.values().data();
    for (int o = 0; o < Cout; ++o) {
        const double b = bias.at(0, o);
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                double acc = b;
                for (int c = 0; c < Cin; ++c)
                    for (int dy = 0; dy < kh; ++dy) {
                        const int iy = oy * stride + dy - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int dx = 0; dx < kw; ++dx) {
                            const int ix = ox * stride + dx - pad;
                            if (ix < 0 || ix >= W) continue;
                            acc += pin[(static_cast<std::size_t>(c) * H + iy) * W + ix] *
                                   pw[((static_cast<std::size_t>(o) * Cin + c) * kh + dy) * kw + dx];
                        }
                    }
                po[(static_cast<std::size_t>(o) * Ho + oy) * Wo + ox] = acc;
            }
    }
    detail::record(out, {input, weight, bias},
                   [input, weight, bias, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad](TensorData& o) {
        const double* go = o.grad.data();
        const double* pin = input.values().data();
        const double* pw = weight.values().data();
        double* gin = input.requires_grad() ? input.node().grad.data() : nullptr;
        double* gw = weight.requires_grad() ? weight.node().grad.data() : nullptr;
        double* gb = bias.requires_grad() ? bias.node().grad.data() : nullptr;
        for (int oc = 0; oc < Cout; ++oc)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const double g = go[(static_cast<std::size_t>(oc) * Ho + oy) * Wo + ox];
                    if (g == 0.0) continue;
                    if (gb) gb[oc] += g;
                    for (int c = 0; c < Cin; ++c)
                        for (int dy = 0; dy < kh; ++dy) {
                            const int iy = oy * stride + dy - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                                const int ix = ox * stride + dx - pad;
                                if (ix < 0 || ix >= W) continue;
                                const std::size_t ii = (static_cast<std::size_t>(c) * H + iy) * W + ix;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(oc) * Cin + c) * kh + dy) * kw + dx;
                                if (gin) gin[ii] += g * pw[wi];
                                if (gw) gw[wi] += g * pin[ii];
                            }
                        }
                }
    });
    return out;
}

// ---- composite losses ----

// x [n,in] times W [in,out] plus row-broadcast b [1,out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

// Numerically stable elementwise binary cross-entropy from logits:
// max(z,0) - z*t + log(1 + exp(-|z|)), gradient sigmoid(z) - t.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    detail::same_shape(logits, targets, "bce_with_logits");
    Tensor out = Tensor::zeros(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits.v(i), t = targets.v(i);
        out.v(i) = std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
    }
    detail::record(out, {logits, targets}, [logits, targets](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const double z = logits.v(i);
            const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            if (logits.requires_grad()) logits.node().grad[i] += o.grad[i] * (s - targets.v(i));
            if (targets.requires_grad()) targets.node().grad[i] += o.grad[i] * (-z);
        }
    });
    return out;
}

// Elementwise Huber penalty on a residual tensor.
inline Tensor smooth_l1(const Tensor& a, double beta = 1.0) {
    if (beta <= 0) throw parameter_error("smooth_l1: beta must be positive");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = std::fabs(a.v(i));
        out.v(i) = x < beta ? 0.5 * x * x / beta : x - 0.5 * beta;
    }
    detail::record(out, {a}, [a, beta](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const double x = a.v(i);
            const double d = x / beta;
            a.node().grad[i] += o.grad[i] * std::clamp(d, -1.0, 1.0);
        }
    });
    return out;
}

// Shifts each entry by a multiple of pi into (-pi/2, pi/2]; the shift is
// locally constant, so the derivative is the identity almost everywhere.
inline Tensor wrap_angle(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.v(i) = a.v(i) - kPi * std::round(a.v(i) / kPi);
    detail::record(out, {a}, [a](TensorData& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) a.node().grad[i] += o.grad[i];
    });
    return out;
}

inline void check_finite(const Tensor& t, const std::string& name) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.v(i)))
            throw numeric_error(name + ": non-finite value at flat index " + std::to_string(i));
}

}  // namespace owd
