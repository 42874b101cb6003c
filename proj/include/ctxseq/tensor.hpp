#pragma once

// Dense rank<=3 f64 tensors with reverse-mode automatic differentiation.
// Tensors are cheap handles onto heap nodes; operations never mutate their
// inputs. Graph recording is controlled by a thread-local flag (NoGradGuard),
// and a graph is single-use: backward() consumes it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctxseq/common.hpp"

namespace ctxseq {

using Shape = std::vector<int>;

namespace detail {

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily during backward
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    std::string name;  // set on parameters, for diagnostics
    bool requires_grad = false;
    bool consumed = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

inline thread_local bool grad_recording = true;

// C[n x m] += A[n x k] * B[k x m]
inline void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[n x m] += A[n x k] * B[m x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k x m] += A[n x k]^T * B[n x m]
inline void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

// RAII switch that disables graph recording on the current thread.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_recording) { detail::grad_recording = false; }
    ~NoGradGuard() { detail::grad_recording = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording_enabled() { return detail::grad_recording; }

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return Tensor(std::move(shape), 0.0);
    }

    static Tensor full(Shape shape, double v) {
        return Tensor(std::move(shape), v);
    }

    static Tensor scalar(double v) {
        return Tensor(Shape{1}, v);
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        Tensor t(std::move(shape), 0.0);
        if (static_cast<int64_t>(values.size()) != t.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values for shape " + shape_to_string(t.shape()));
        t.node_->values = std::move(values);
        return t;
    }

    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> values, std::string name = "") {
        Tensor t = from(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        t.node_->name = std::move(name);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t size() const { return node_ ? static_cast<int64_t>(node_->values.size()) : 0; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.at(1); }

    const std::vector<double>& values() const { return node_->values; }

    // Mutable access to a leaf's storage. Only init code and the finite
    // difference checker use this; mutating a non-leaf invalidates the graph.
    std::vector<double>& values_mut() { return node_->values; }

    double at(int i) const { return node_->values[static_cast<size_t>(i)]; }
    double at(int i, int j) const {
        return node_->values[static_cast<size_t>(i) * cols() + j];
    }
    double item() const {
        if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
        return node_->values[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& name() const { return node_->name; }
    void set_name(std::string n) { node_->name = std::move(n); }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad())
            throw ConfigError("grad: no gradient accumulated for '" + node_->name + "'");
        return node_->grad;
    }
    void zero_grad() { if (node_) node_->grad.clear(); }

    std::shared_ptr<detail::Node> node() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    Tensor(Shape shape, double fill) {
        if (shape.empty() || shape.size() > 3)
            throw ShapeError("tensor rank must be 1..3, got " + shape_to_string(shape));
        for (int d : shape)
            if (d < 0) throw ShapeError("negative dimension in " + shape_to_string(shape));
        node_ = std::make_shared<detail::Node>();
        node_->values.assign(static_cast<size_t>(detail::shape_numel(shape)), fill);
        node_->shape = std::move(shape);
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_out(Shape shape, std::vector<double> values) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    return n;
}

// Records the op into the graph when recording is on and an input needs grad.
inline void record(const std::shared_ptr<Node>& out,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> fn) {
    bool needed = false;
    for (const auto& p : parents)
        if (p->requires_grad) { needed = true; break; }
    if (!grad_recording || !needed) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (!t.defined() || t.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor");
}

inline void require_finite(const Tensor& t, const char* op) {
    for (double v : t.values())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite input value");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto n = detail::make_out(a.shape(), std::move(out));
    detail::record(n, {a.node(), b.node()}, [](detail::Node& self) {
        for (int s = 0; s < 2; ++s) {
            auto& p = self.parents[static_cast<size_t>(s)];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
    return Tensor::wrap(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto n = detail::make_out(a.shape(), std::move(out));
    detail::record(n, {a.node(), b.node()}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
    return Tensor::wrap(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    auto n = detail::make_out(a.shape(), std::move(out));
    detail::record(n, {a.node(), b.node()}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * pb->values[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] += self.grad[i] * pa->values[i];
        }
    });
    return Tensor::wrap(n);
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& v : out) v *= c;
    auto n = detail::make_out(a.shape(), std::move(out));
    detail::record(n, {a.node()}, [c](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += c * self.grad[i];
    });
    return Tensor::wrap(n);
}

// a[N x M] + row-broadcast bias[M]
inline Tensor add_rows(const Tensor& a, const Tensor& bias) {
    detail::require_rank2(a, "add_rows");
    if (bias.rank() != 1 || bias.dim(0) != a.cols())
        throw ShapeError("add_rows: bias " + shape_to_string(bias.shape()) +
                         " does not match " + shape_to_string(a.shape()));
    int nr = a.rows(), nc = a.cols();
    std::vector<double> out(a.values());
    const auto& bv = bias.values();
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nc; ++j) out[static_cast<size_t>(i) * nc + j] += bv[static_cast<size_t>(j)];
    auto n = detail::make_out(a.shape(), std::move(out));
    detail::record(n, {a.node(), bias.node()}, [nr, nc](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < nr; ++i)
                for (int j = 0; j < nc; ++j)
                    pb->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * nc + j];
        }
    });
    return Tensor::wrap(n);
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto n = detail::make_out(a.shape(), std::move(out));
    detail::record(n, {a.node()}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (p->values[i] > 0.0) p->grad[i] += self.grad[i];
    });
    return Tensor::wrap(n);
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto n = detail::make_out(Shape{1}, {s});
    detail::record(n, {a.node()}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        double g = self.grad[0];
        for (double& pg : p->grad) pg += g;
    });
    return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    int n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), n, k, m);
    auto node = detail::make_out(Shape{n, m}, std::move(out));
    detail::record(node, {a.node(), b.node()}, [n, k, m](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {  // dA = G * B^T
            pa->ensure_grad();
            detail::gemm_nt(self.grad.data(), pb->values.data(), pa->grad.data(), n, m, k);
        }
        if (pb->requires_grad) {  // dB = A^T * G
            pb->ensure_grad();
            detail::gemm_tn(pa->values.data(), self.grad.data(), pb->grad.data(), n, k, m);
        }
    });
    return Tensor::wrap(node);
}

// a[N x D] * b[M x D]^T -> [N x M]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    int n = a.rows(), d = a.cols(), m = b.rows();
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    detail::gemm_nt(a.values().data(), b.values().data(), out.data(), n, d, m);
    auto node = detail::make_out(Shape{n, m}, std::move(out));
    detail::record(node, {a.node(), b.node()}, [n, d, m](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {  // dA = G * B
            pa->ensure_grad();
            detail::gemm_nn(self.grad.data(), pb->values.data(), pa->grad.data(), n, m, d);
        }
        if (pb->requires_grad) {  // dB = G^T * A
            pb->ensure_grad();
            detail::gemm_tn(self.grad.data(), pa->values.data(), pb->grad.data(), n, m, d);
        }
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Row-wise softmax family
// ---------------------------------------------------------------------------

namespace detail {

inline void softmax_backward(Node& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    int nc = self.shape[1];
    int nr = self.shape[0];
    for (int i = 0; i < nr; ++i) {
        const double* y = self.values.data() + static_cast<size_t>(i) * nc;
        const double* g = self.grad.data() + static_cast<size_t>(i) * nc;
        double dot = 0.0;
        for (int j = 0; j < nc; ++j) dot += g[j] * y[j];
        double* pg = p->grad.data() + static_cast<size_t>(i) * nc;
        for (int j = 0; j < nc; ++j) pg[j] += y[j] * (g[j] - dot);
    }
}

}  // namespace detail

// Numerically stabilized row softmax. Rejects non-finite inputs; the masked
// variant below is the one that accepts -inf slots.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank2(x, "softmax_rows");
    detail::require_finite(x, "softmax_rows");
    int nr = x.rows(), nc = x.cols();
    std::vector<double> out(static_cast<size_t>(nr) * nc);
    for (int i = 0; i < nr; ++i) {
        const double* row = x.values().data() + static_cast<size_t>(i) * nc;
        double* o = out.data() + static_cast<size_t>(i) * nc;
        double mx = row[0];
        for (int j = 1; j < nc; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < nc; ++j) {
            o[j] = std::exp(row[j] - mx);
            sum += o[j];
        }
        for (int j = 0; j < nc; ++j) o[j] /= sum;
    }
    auto node = detail::make_out(x.shape(), std::move(out));
    detail::record(node, {x.node()}, detail::softmax_backward);
    return Tensor::wrap(node);
}

// Row softmax where visible(i, j) == false entries are treated as -inf scores.
// Every row must keep at least one visible entry.
inline Tensor softmax_rows_masked(const Tensor& x, const std::vector<uint8_t>& visible) {
    detail::require_rank2(x, "softmax_rows_masked");
    int nr = x.rows(), nc = x.cols();
    if (visible.size() != static_cast<size_t>(nr) * nc)
        throw ShapeError("softmax_rows_masked: mask size mismatch");
    std::vector<double> out(static_cast<size_t>(nr) * nc, 0.0);
    for (int i = 0; i < nr; ++i) {
        const double* row = x.values().data() + static_cast<size_t>(i) * nc;
        const uint8_t* vis = visible.data() + static_cast<size_t>(i) * nc;
        double* o = out.data() + static_cast<size_t>(i) * nc;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < nc; ++j)
            if (vis[j] && row[j] > mx) mx = row[j];
        if (!std::isfinite(mx))
            throw NumericError("softmax_rows_masked: fully masked row " + std::to_string(i));
        double sum = 0.0;
        for (int j = 0; j < nc; ++j) {
            if (vis[j]) {
                o[j] = std::exp(row[j] - mx);
                sum += o[j];
            }
        }
        for (int j = 0; j < nc; ++j) o[j] /= sum;
    }
    auto node = detail::make_out(x.shape(), std::move(out));
    detail::record(node, {x.node()}, detail::softmax_backward);
    return Tensor::wrap(node);
}

// Divide each row by its sum (renormalization after a windowing multiplier).
inline Tensor div_rowsum(const Tensor& a) {
    detail::require_rank2(a, "div_rowsum");
    int nr = a.rows(), nc = a.cols();
    std::vector<double> out(a.values());
    std::vector<double> sums(static_cast<size_t>(nr));
    for (int i = 0; i < nr; ++i) {
        double s = 0.0;
        for (int j = 0; j < nc; ++j) s += out[static_cast<size_t>(i) * nc + j];
        if (s == 0.0) throw NumericError("div_rowsum: zero row sum at row " + std::to_string(i));
        sums[static_cast<size_t>(i)] = s;
        for (int j = 0; j < nc; ++j) out[static_cast<size_t>(i) * nc + j] /= s;
    }
    auto node = detail::make_out(a.shape(), std::move(out));
    detail::record(node, {a.node()}, [nr, nc, sums](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (int i = 0; i < nr; ++i) {
            const double* g = self.grad.data() + static_cast<size_t>(i) * nc;
            const double* y = self.values.data() + static_cast<size_t>(i) * nc;
            double dot = 0.0;
            for (int j = 0; j < nc; ++j) dot += g[j] * y[j];
            double inv = 1.0 / sums[static_cast<size_t>(i)];
            double* pg = p->grad.data() + static_cast<size_t>(i) * nc;
            for (int j = 0; j < nc; ++j) pg[j] += inv * (g[j] - dot);
        }
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Layer normalization (per row, with learned gain/bias)
// ---------------------------------------------------------------------------

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
    detail::require_rank2(x, "layer_norm_rows");
    int nr = x.rows(), nc = x.cols();
    if (gain.rank() != 1 || gain.dim(0) != nc || bias.rank() != 1 || bias.dim(0) != nc)
        throw ShapeError("layer_norm_rows: gain/bias must be rank-1 of width " + std::to_string(nc));
    std::vector<double> out(static_cast<size_t>(nr) * nc);
    std::vector<double> xhat(static_cast<size_t>(nr) * nc);
    std::vector<double> inv_std(static_cast<size_t>(nr));
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (int i = 0; i < nr; ++i) {
        const double* row = xv.data() + static_cast<size_t>(i) * nc;
        double mean = 0.0;
        for (int j = 0; j < nc; ++j) mean += row[j];
        mean /= nc;
        double var = 0.0;
        for (int j = 0; j < nc; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= nc;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int j = 0; j < nc; ++j) {
            double h = (row[j] - mean) * is;
            xhat[static_cast<size_t>(i) * nc + j] = h;
            out[static_cast<size_t>(i) * nc + j] = h * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
        }
    }
    auto node = detail::make_out(x.shape(), std::move(out));
    detail::record(node, {x.node(), gain.node(), bias.node()},
                   [nr, nc, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        for (int i = 0; i < nr; ++i) {
            const double* g = self.grad.data() + static_cast<size_t>(i) * nc;
            const double* h = xhat.data() + static_cast<size_t>(i) * nc;
            if (pg->requires_grad || pb->requires_grad) {
                for (int j = 0; j < nc; ++j) {
                    if (pg->requires_grad) pg->grad[static_cast<size_t>(j)] += g[j] * h[j];
                    if (pb->requires_grad) pb->grad[static_cast<size_t>(j)] += g[j];
                }
            }
            if (px->requires_grad) {
                // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < nc; ++j) {
                    double dh = g[j] * pg->values[static_cast<size_t>(j)];
                    m1 += dh;
                    m2 += dh * h[j];
                }
                m1 /= nc;
                m2 /= nc;
                double is = inv_std[static_cast<size_t>(i)];
                double* out_g = px->grad.data() + static_cast<size_t>(i) * nc;
                for (int j = 0; j < nc; ++j) {
                    double dh = g[j] * pg->values[static_cast<size_t>(j)];
                    out_g[j] += (dh - m1 - h[j] * m2) * is;
                }
            }
        }
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Concatenation / slicing
// ---------------------------------------------------------------------------

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "concat_rows");
    detail::require_rank2(b, "concat_rows");
    if (a.cols() != b.cols())
        throw ShapeError("concat_rows: width mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    int na = a.rows(), nb = b.rows(), nc = a.cols();
    std::vector<double> out;
    out.reserve(static_cast<size_t>(na + nb) * nc);
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    auto node = detail::make_out(Shape{na + nb, nc}, std::move(out));
    detail::record(node, {a.node(), b.node()}, [na, nb, nc](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        size_t split = static_cast<size_t>(na) * nc;
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < split; ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < static_cast<size_t>(nb) * nc; ++i)
                pb->grad[i] += self.grad[split + i];
        }
    });
    return Tensor::wrap(node);
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    detail::require_rank2(a, "slice_rows");
    if (r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_to_string(a.shape()));
    int nc = a.cols();
    std::vector<double> out(a.values().begin() + static_cast<size_t>(r0) * nc,
                            a.values().begin() + static_cast<size_t>(r1) * nc);
    auto node = detail::make_out(Shape{r1 - r0, nc}, std::move(out));
    detail::record(node, {a.node()}, [r0, nc](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        size_t off = static_cast<size_t>(r0) * nc;
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[off + i] += self.grad[i];
    });
    return Tensor::wrap(node);
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    detail::require_rank2(a, "slice_cols");
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_to_string(a.shape()));
    int nr = a.rows(), nc = a.cols(), w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(nr) * w);
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = a.values()[static_cast<size_t>(i) * nc + c0 + j];
    auto node = detail::make_out(Shape{nr, w}, std::move(out));
    detail::record(node, {a.node()}, [nr, nc, c0, w](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (int i = 0; i < nr; ++i)
            for (int j = 0; j < w; ++j)
                p->grad[static_cast<size_t>(i) * nc + c0 + j] +=
                    self.grad[static_cast<size_t>(i) * w + j];
    });
    return Tensor::wrap(node);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    int nr = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != nr) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(nr) * total);
    std::vector<int> widths;
    int off = 0;
    for (const auto& p : parts) {
        int w = p.cols();
        for (int i = 0; i < nr; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * total + off + j] =
                    p.values()[static_cast<size_t>(i) * w + j];
        widths.push_back(w);
        off += w;
    }
    auto node = detail::make_out(Shape{nr, total}, std::move(out));
    std::vector<std::shared_ptr<detail::Node>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    detail::record(node, std::move(parents), [nr, total, widths](detail::Node& self) {
        int off2 = 0;
        for (size_t k = 0; k < widths.size(); ++k) {
            auto& p = self.parents[k];
            int w = widths[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < nr; ++i)
                    for (int j = 0; j < w; ++j)
                        p->grad[static_cast<size_t>(i) * w + j] +=
                            self.grad[static_cast<size_t>(i) * total + off2 + j];
            }
            off2 += w;
        }
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Embedding lookup and token cross-entropy
// ---------------------------------------------------------------------------

inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    detail::require_rank2(table, "embedding_rows");
    int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw DataError("embedding_rows: token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(v));
    int n = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        std::copy_n(table.values().data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d,
                    d, out.data() + static_cast<size_t>(i) * d);
    auto node = detail::make_out(Shape{n, d}, std::move(out));
    detail::record(node, {table.node()}, [ids, d](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = p->grad.data() + static_cast<size_t>(ids[i]) * d;
            const double* src = self.grad.data() + i * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return Tensor::wrap(node);
}

// Sum of per-token cross-entropy over positions whose gold id != pad_id.
// Fused log-softmax keeps this numerically stable; `counted` reports how
// many positions entered the sum.
inline Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& gold,
                                int pad_id, int* counted = nullptr) {
    detail::require_rank2(logits, "cross_entropy_sum");
    int nr = logits.rows(), nc = logits.cols();
    if (static_cast<int>(gold.size()) != nr)
        throw ShapeError("cross_entropy_sum: " + std::to_string(gold.size()) +
                         " targets for " + std::to_string(nr) + " rows");
    double total = 0.0;
    int count = 0;
    std::vector<double> lse(static_cast<size_t>(nr));
    for (int i = 0; i < nr; ++i) {
        int t = gold[static_cast<size_t>(i)];
        if (t == pad_id) continue;
        if (t < 0 || t >= nc)
            throw DataError("cross_entropy_sum: gold id " + std::to_string(t) + " out of range");
        const double* row = logits.values().data() + static_cast<size_t>(i) * nc;
        double mx = row[0];
        for (int j = 1; j < nc; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < nc; ++j) s += std::exp(row[j] - mx);
        double l = mx + std::log(s);
        lse[static_cast<size_t>(i)] = l;
        total += l - row[t];
        ++count;
    }
    if (counted) *counted = count;
    auto node = detail::make_out(Shape{1}, {total});
    detail::record(node, {logits.node()}, [gold, pad_id, nr, nc, lse = std::move(lse)](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        double g = self.grad[0];
        for (int i = 0; i < nr; ++i) {
            int t = gold[static_cast<size_t>(i)];
            if (t == pad_id) continue;
            const double* row = p->values.data() + static_cast<size_t>(i) * nc;
            double* pg = p->grad.data() + static_cast<size_t>(i) * nc;
            double l = lse[static_cast<size_t>(i)];
            for (int j = 0; j < nc; ++j) pg[j] += g * std::exp(row[j] - l);
            pg[t] -= g;
        }
    });
    return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Visits every node exactly once in
// reverse topological order, accumulating into .grad. The traversed graph is
// consumed: calling backward on the same loss again throws.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ShapeError("backward: loss must be a scalar tensor");
    detail::Node* root = loss.node().get();
    if (root->consumed)
        throw ConfigError("backward: graph already consumed by a previous backward pass");

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            detail::Node* next = top.first->parents[top.second].get();
            ++top.second;
            if (visited.insert(next).second) stack.emplace_back(next, 0);
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }

    root->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Consume: drop closures and parent links so intermediate storage frees
    // as soon as handles go away.
    for (detail::Node* n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
        n->consumed = true;
    }
}

// Runs backward and extracts the gradient of every named parameter as a plain
// tensor of identical shape.
inline std::unordered_map<std::string, Tensor> backward_collect(
    const Tensor& loss, const std::vector<std::pair<std::string, Tensor>>& params) {
    backward(loss);
    std::unordered_map<std::string, Tensor> grads;
    for (const auto& [name, p] : params) {
        if (p.has_grad())
            grads.emplace(name, Tensor::from(p.shape(), p.grad()));
        else
            grads.emplace(name, Tensor::zeros(p.shape()));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

// Central differences against the analytic gradient of f() w.r.t. theta.
// f must be deterministic and read theta's current storage. Returns the max
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
inline double finite_diff_check(const std::function<Tensor()>& f, Tensor& theta, double eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw ConfigError("finite_diff_check: eps must lie in [1e-7, 1e-3]");
    if (!theta.requires_grad())
        throw ConfigError("finite_diff_check: theta is not trainable");

    theta.zero_grad();
    Tensor loss = f();
    if (loss.size() != 1) throw ShapeError("finite_diff_check: f() must return a scalar");
    backward(loss);
    std::vector<double> analytic = theta.has_grad()
        ? theta.grad()
        : std::vector<double>(static_cast<size_t>(theta.size()), 0.0);

    double max_rel = 0.0;
    NoGradGuard ng;
    auto& vals = theta.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
        double orig = vals[i];
        vals[i] = orig + eps;
        double fp = f().item();
        vals[i] = orig - eps;
        double fm = f().item();
        vals[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

}  // namespace ctxseq
