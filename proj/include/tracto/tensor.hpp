#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/rng.hpp"

namespace tracto {

// Row-major so a token sequence is [n x d] with contiguous rows.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One node of the reverse-mode tape. Values may be shared between nodes
// (parameter clones used by per-example graphs); gradients are per-node.
struct TensorData {
    std::shared_ptr<Mat> values;
    Mat grad;                                  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorData>> parents;
    std::function<void(TensorData&)> backward_fn;  // reads this->grad, accumulates parents'

    int rows() const { return static_cast<int>(values->rows()); }
    int cols() const { return static_cast<int>(values->cols()); }

    Mat& ensure_grad() {
        if (grad.size() == 0) grad = Mat::Zero(values->rows(), values->cols());
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

    static Tensor from_matrix(Mat m, bool requires_grad = false) {
        auto d = std::make_shared<TensorData>();
        d->values = std::make_shared<Mat>(std::move(m));
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }
    static Tensor zeros(int r, int c, bool requires_grad = false) {
        return from_matrix(Mat::Zero(r, c), requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    int rows() const { return d_->rows(); }
    int cols() const { return d_->cols(); }
    const Mat& value() const { return *d_->values; }
    Mat& value() { return *d_->values; }
    bool requires_grad() const { return d_->requires_grad; }
    const Mat& grad() const {
        if (d_->grad.size() == 0)
            throw std::logic_error("Tensor: gradient not populated (run backward first)");
        return d_->grad;
    }
    void zero_grad() { d_->grad = Mat::Zero(d_->values->rows(), d_->values->cols()); }
    void clear_grad() { d_->grad.resize(0, 0); }

    // Leaf node aliasing the same value storage but carrying its own
    // gradient buffer; lets several graphs read one parameter set while
    // keeping their gradient accumulation independent.
    Tensor shared_leaf() const {
        auto d = std::make_shared<TensorData>();
        d->values = d_->values;
        d->requires_grad = d_->requires_grad;
        return Tensor(std::move(d));
    }

    std::shared_ptr<TensorData> node() const { return d_; }

    // Reverse-mode sweep seeded with d(root)/d(root) = 1. Gradients
    // accumulate, so parameter nodes must be zeroed between uses.
    void backward() const {
        if (!d_) throw std::logic_error("Tensor: backward on undefined tensor");
        if (d_->values->size() != 1)
            throw std::logic_error("Tensor: backward requires a scalar root");
        if (!d_->requires_grad)
            throw std::logic_error("Tensor: backward on a graph with no tracked nodes");

        std::vector<TensorData*> order;
        std::unordered_set<TensorData*> seen;
        std::vector<std::pair<TensorData*, std::size_t>> stack{{d_.get(), 0}};
        seen.insert(d_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                TensorData* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second)
                    stack.emplace_back(parent, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        d_->ensure_grad()(0, 0) += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

private:
    std::shared_ptr<TensorData> d_;
};

namespace detail {

inline Tensor make_op(Mat value, std::vector<Tensor> parents,
                      std::function<void(TensorData&)> backward_fn) {
    auto d = std::make_shared<TensorData>();
    d->values = std::make_shared<Mat>(std::move(value));
    for (const auto& p : parents) {
        d->requires_grad = d->requires_grad || p.requires_grad();
        d->parents.push_back(p.node());
    }
    if (d->requires_grad) d->backward_fn = std::move(backward_fn);
    return Tensor(std::move(d));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    return detail::make_op(a.value() + b.value(), {a, b}, [](TensorData& out) {
        for (int p = 0; p < 2; ++p)
            if (out.parents[static_cast<std::size_t>(p)]->requires_grad)
                out.parents[static_cast<std::size_t>(p)]->ensure_grad() += out.grad;
    });
}

// Broadcast a [1 x c] row vector over every row of a.
inline Tensor add_rowvec(const Tensor& a, const Tensor& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw std::invalid_argument("add_rowvec: expected [1 x cols] bias");
    return detail::make_op(a.value().rowwise() + row.value().row(0), {a, row},
                           [](TensorData& out) {
                               if (out.parents[0]->requires_grad)
                                   out.parents[0]->ensure_grad() += out.grad;
                               if (out.parents[1]->requires_grad)
                                   out.parents[1]->ensure_grad().row(0) += out.grad.colwise().sum();
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    return detail::make_op(a.value().cwiseProduct(b.value()), {a, b}, [](TensorData& out) {
        const Mat& av = *out.parents[0]->values;
        const Mat& bv = *out.parents[1]->values;
        if (out.parents[0]->requires_grad)
            out.parents[0]->ensure_grad() += out.grad.cwiseProduct(bv);
        if (out.parents[1]->requires_grad)
            out.parents[1]->ensure_grad() += out.grad.cwiseProduct(av);
    });
}

inline Tensor scale(const Tensor& a, double s) {
    return detail::make_op(a.value() * s, {a}, [s](TensorData& out) {
        if (out.parents[0]->requires_grad) out.parents[0]->ensure_grad() += out.grad * s;
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    return detail::make_op(a.value() * b.value(), {a, b}, [](TensorData& out) {
        const Mat& av = *out.parents[0]->values;
        const Mat& bv = *out.parents[1]->values;
        if (out.parents[0]->requires_grad)
            out.parents[0]->ensure_grad() += out.grad * bv.transpose();
        if (out.parents[1]->requires_grad)
            out.parents[1]->ensure_grad() += av.transpose() * out.grad;
    });
}

// a * b^T without materializing a transpose node.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    return detail::make_op(a.value() * b.value().transpose(), {a, b}, [](TensorData& out) {
        const Mat& av = *out.parents[0]->values;
        const Mat& bv = *out.parents[1]->values;
        if (out.parents[0]->requires_grad) out.parents[0]->ensure_grad() += out.grad * bv;
        if (out.parents[1]->requires_grad)
            out.parents[1]->ensure_grad() += out.grad.transpose() * av;
    });
}

inline Tensor relu(const Tensor& a) {
    return detail::make_op(a.value().cwiseMax(0.0), {a}, [](TensorData& out) {
        if (!out.parents[0]->requires_grad) return;
        const Mat& av = *out.parents[0]->values;
        out.parents[0]->ensure_grad() +=
            out.grad.cwiseProduct((av.array() > 0.0).cast<double>().matrix());
    });
}

// Per-row layer normalization with scale gamma and shift beta (both [1 x c]).
inline Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             double eps = 1e-5) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
        beta.cols() != x.cols())
        throw std::invalid_argument("layernorm_rows: gamma/beta must be [1 x cols]");
    const int r = x.rows(), c = x.cols();
    Mat xhat(r, c);
    Mat out(r, c);
    Eigen::VectorXd inv_std(r);
    for (int i = 0; i < r; ++i) {
        double mean = x.value().row(i).mean();
        double var = (x.value().row(i).array() - mean).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        xhat.row(i) = (x.value().row(i).array() - mean) * is;
        out.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
    }
    return detail::make_op(std::move(out), {x, gamma, beta},
                           [xhat, inv_std](TensorData& o) {
                               const int rr = static_cast<int>(xhat.rows());
                               const int cc = static_cast<int>(xhat.cols());
                               const Mat& g = *o.parents[1]->values;
                               if (o.parents[1]->requires_grad)
                                   o.parents[1]->ensure_grad().row(0) +=
                                       o.grad.cwiseProduct(xhat).colwise().sum();
                               if (o.parents[2]->requires_grad)
                                   o.parents[2]->ensure_grad().row(0) += o.grad.colwise().sum();
                               if (!o.parents[0]->requires_grad) return;
                               Mat& dx = o.parents[0]->ensure_grad();
                               for (int i = 0; i < rr; ++i) {
                                   Eigen::RowVectorXd dxhat =
                                       o.grad.row(i).cwiseProduct(g.row(0));
                                   double m1 = dxhat.mean();
                                   double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
                                   for (int j = 0; j < cc; ++j)
                                       dx(i, j) += inv_std[i] *
                                                   (dxhat[j] - m1 - xhat(i, j) * m2);
                               }
                           });
}

// Numerically stable per-row softmax of (x + additive_mask). Mask entries
// of -1e30 underflow to exactly zero probability, which is what makes the
// causal mask bit-exact.
inline Tensor softmax_rows_masked(const Tensor& x, const Mat& additive_mask) {
    if (additive_mask.rows() != x.rows() || additive_mask.cols() != x.cols())
        throw std::invalid_argument("softmax_rows_masked: mask shape mismatch");
    const int r = x.rows(), c = x.cols();
    Mat p(r, c);
    for (int i = 0; i < r; ++i) {
        Eigen::RowVectorXd z = x.value().row(i) + additive_mask.row(i);
        double m = z.maxCoeff();
        Eigen::RowVectorXd e(c);
        // scalar std::exp underflows to exactly 0 for the -1e30 mask
        // (vectorized exp clamps and returns a denormal instead)
        for (int j = 0; j < c; ++j) e[j] = std::exp(z[j] - m);
        p.row(i) = e / e.sum();
    }
    Mat p_copy = p;
    return detail::make_op(std::move(p), {x}, [p_copy](TensorData& out) {
        if (!out.parents[0]->requires_grad) return;
        Mat& dx = out.parents[0]->ensure_grad();
        for (int i = 0; i < p_copy.rows(); ++i) {
            double dot = out.grad.row(i).cwiseProduct(p_copy.row(i)).sum();
            dx.row(i) += p_copy.row(i).cwiseProduct(
                (out.grad.row(i).array() - dot).matrix());
        }
    });
}

inline Tensor softmax_rows(const Tensor& x) {
    return softmax_rows_masked(x, Mat::Zero(x.rows(), x.cols()));
}

// Inverted-dropout: keep with probability 1-p and rescale. The keep mask
// is drawn from `rng` in row-major order, so identical seeds give
// identical masks. p = 0 is the identity.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    Mat mask(x.rows(), x.cols());
    double scale = 1.0 / (1.0 - p);
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) mask(i, j) = rng.uniform() >= p ? scale : 0.0;
    return detail::make_op(x.value().cwiseProduct(mask), {x}, [mask](TensorData& out) {
        if (out.parents[0]->requires_grad)
            out.parents[0]->ensure_grad() += out.grad.cwiseProduct(mask);
    });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (c0 < 0 || c1 > x.cols() || c0 >= c1)
        throw std::invalid_argument("slice_cols: invalid column range");
    return detail::make_op(x.value().middleCols(c0, c1 - c0), {x}, [c0, c1](TensorData& out) {
        if (out.parents[0]->requires_grad)
            out.parents[0]->ensure_grad().middleCols(c0, c1 - c0) += out.grad;
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int r = parts[0].rows(), c = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += p.cols();
    }
    Mat v(r, c);
    std::vector<int> offsets;
    int at = 0;
    for (const auto& p : parts) {
        offsets.push_back(at);
        v.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return detail::make_op(std::move(v), parts, [offsets](TensorData& out) {
        for (std::size_t i = 0; i < out.parents.size(); ++i) {
            auto& parent = out.parents[i];
            if (!parent->requires_grad) continue;
            parent->ensure_grad() +=
                out.grad.middleCols(offsets[i], parent->values->cols());
        }
    });
}

inline Tensor sum_all(const Tensor& x) {
    Mat v(1, 1);
    v(0, 0) = x.value().sum();
    return detail::make_op(std::move(v), {x}, [](TensorData& out) {
        if (out.parents[0]->requires_grad)
            out.parents[0]->ensure_grad().array() += out.grad(0, 0);
    });
}

} // namespace tracto
