#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "bua/common.hpp"
#include "bua/rng.hpp"

namespace bua {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

// One node of the reverse-mode graph. `parents` are the op's inputs; the
// backward closure scatters this node's grad into them.
template <class S>
struct TensorData {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;
    bool requires_grad = false;  // leaf parameter
    bool needs_grad = false;     // reachable from some parameter
    std::vector<std::shared_ptr<TensorData<S>>> parents;
    std::function<void(TensorData<S>&)> backfn;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), S(0));
    }
};

template <class S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData<S>> d) : d_(std::move(d)) {}

    static Tensor zeros(Shape shape) {
        auto d = std::make_shared<TensorData<S>>();
        d->val.assign(numel(shape), S(0));
        d->shape = std::move(shape);
        return Tensor(d);
    }

    static Tensor full(Shape shape, S value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values) {
        require(values.size() == numel(shape), "tensor: data length ", values.size(),
                " does not match shape ", shape_str(shape));
        auto d = std::make_shared<TensorData<S>>();
        d->shape = std::move(shape);
        d->val = std::move(values);
        return Tensor(d);
    }

    static Tensor scalar(S value) { return from({}, {value}); }

    // Leaf parameter participating in optimization.
    static Tensor param(Shape shape, std::vector<S> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.d_->requires_grad = true;
        t.d_->needs_grad = true;
        return t;
    }

    static Tensor randn(Shape shape, RandomStream rng, double stddev) {
        std::vector<S> v(numel(shape));
        for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
        return param(std::move(shape), std::move(v));
    }

    const Shape& shape() const { return d_->shape; }
    std::size_t size() const { return d_->val.size(); }
    std::vector<S>& data() { return d_->val; }
    const std::vector<S>& data() const { return d_->val; }
    std::vector<S>& grad() {
        d_->ensure_grad();
        return d_->grad;
    }
    bool defined() const { return d_ != nullptr; }
    bool requires_grad() const { return d_->requires_grad; }
    std::shared_ptr<TensorData<S>> node() const { return d_; }

    S item() const {
        require(size() == 1, "item: tensor is not scalar, shape ", shape_str(d_->shape));
        return d_->val[0];
    }

    // Copy of values as a fresh leaf, cut off from the graph.
    Tensor detach() const {
        auto d = std::make_shared<TensorData<S>>();
        d->shape = d_->shape;
        d->val = d_->val;
        return Tensor(d);
    }

    void zero_grad() { d_->grad.assign(d_->val.size(), S(0)); }

private:
    std::shared_ptr<TensorData<S>> d_;
};

namespace detail {

template <class S>
Tensor<S> make_op(const char* op, Shape shape, std::vector<S> val,
                  std::vector<std::shared_ptr<TensorData<S>>> parents,
                  std::function<void(TensorData<S>&)> backfn) {
    auto d = std::make_shared<TensorData<S>>();
    d->shape = std::move(shape);
    d->val = std::move(val);
    d->op = op;
    for (auto& p : parents)
        if (p->needs_grad) d->needs_grad = true;
    if (d->needs_grad) {
        d->parents = std::move(parents);
        d->backfn = std::move(backfn);
    }
    return Tensor<S>(d);
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// [m, n] with a [n] row vector broadcast over rows; also exact match.
inline bool row_broadcast(const Shape& a, const Shape& b) {
    return a.size() == 2 && b.size() == 1 && a[1] == b[0];
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    auto pa = a.node();
    auto pb = b.node();
    if (detail::same_shape(pa->shape, pb->shape)) {
        std::vector<S> out(pa->val.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->val[i] + pb->val[i];
        return detail::make_op<S>("add", pa->shape, std::move(out), {pa, pb}, [](TensorData<S>& self) {
            auto& ga = self.parents[0];
            auto& gb = self.parents[1];
            if (ga->needs_grad) {
                ga->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) ga->grad[i] += self.grad[i];
            }
            if (gb->needs_grad) {
                gb->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) gb->grad[i] += self.grad[i];
            }
        });
    }
    if (detail::row_broadcast(pa->shape, pb->shape)) {
        int rows = pa->shape[0], cols = pa->shape[1];
        std::vector<S> out(pa->val.size());
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                out[static_cast<std::size_t>(r) * cols + c] =
                    pa->val[static_cast<std::size_t>(r) * cols + c] + pb->val[c];
        return detail::make_op<S>("add", pa->shape, std::move(out), {pa, pb},
                                  [rows, cols](TensorData<S>& self) {
                                      auto& ga = self.parents[0];
                                      auto& gb = self.parents[1];
                                      if (ga->needs_grad) {
                                          ga->ensure_grad();
                                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                                              ga->grad[i] += self.grad[i];
                                      }
                                      if (gb->needs_grad) {
                                          gb->ensure_grad();
                                          for (int r = 0; r < rows; ++r)
                                              for (int c = 0; c < cols; ++c)
                                                  gb->grad[c] += self.grad[static_cast<std::size_t>(r) * cols + c];
                                      }
                                  });
    }
    fail("add: shape mismatch ", shape_str(pa->shape), " vs ", shape_str(pb->shape));
}

template <class S>
Tensor<S> multiply(const Tensor<S>& a, const Tensor<S>& b) {
    auto pa = a.node();
    auto pb = b.node();
    require(detail::same_shape(pa->shape, pb->shape), "multiply: shape mismatch ",
            shape_str(pa->shape), " vs ", shape_str(pb->shape));
    std::vector<S> out(pa->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->val[i] * pb->val[i];
    return detail::make_op<S>("multiply", pa->shape, std::move(out), {pa, pb}, [](TensorData<S>& self) {
        auto& ga = self.parents[0];
        auto& gb = self.parents[1];
        if (ga->needs_grad) {
            ga->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                ga->grad[i] += self.grad[i] * gb->val[i];
        }
        if (gb->needs_grad) {
            gb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                gb->grad[i] += self.grad[i] * ga->val[i];
        }
    });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double c) {
    auto pa = a.node();
    std::vector<S> out(pa->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(pa->val[i] * c);
    return detail::make_op<S>("scale", pa->shape, std::move(out), {pa}, [c](TensorData<S>& self) {
        auto& ga = self.parents[0];
        ga->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            ga->grad[i] += static_cast<S>(self.grad[i] * c);
    });
}

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; ikj order so the inner loop vectorizes.
template <class S>
void matmul_acc(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<std::size_t>(i) * k;
        S* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
template <class S>
void matmul_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<std::size_t>(j) * k;
            S acc = 0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[static_cast<std::size_t>(i) * n + j] += acc;
        }
    }
}

// C[m,n] += A^T * B where A is [k,m], B is [k,n]
template <class S>
void matmul_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const S* arow = a + static_cast<std::size_t>(p) * m;
        const S* brow = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const S av = arow[i];
            S* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    auto pa = a.node();
    auto pb = b.node();
    require(pa->shape.size() == 2 && pb->shape.size() == 2 && pa->shape[1] == pb->shape[0],
            "matmul: shape mismatch ", shape_str(pa->shape), " vs ", shape_str(pb->shape));
    const int m = pa->shape[0], k = pa->shape[1], n = pb->shape[1];
    std::vector<S> out(static_cast<std::size_t>(m) * n, S(0));
    detail::matmul_acc(pa->val.data(), pb->val.data(), out.data(), m, k, n);
    return detail::make_op<S>("matmul", {m, n}, std::move(out), {pa, pb},
                              [m, k, n](TensorData<S>& self) {
                                  auto& ga = self.parents[0];
                                  auto& gb = self.parents[1];
                                  if (ga->needs_grad) {
                                      ga->ensure_grad();
                                      detail::matmul_nt_acc(self.grad.data(), gb->val.data(),
                                                            ga->grad.data(), m, n, k);
                                  }
                                  if (gb->needs_grad) {
                                      gb->ensure_grad();
                                      detail::matmul_tn_acc(ga->val.data(), self.grad.data(),
                                                            gb->grad.data(), k, m, n);
                                  }
                              });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
    auto pa = a.node();
    require(pa->shape.size() == 2, "transpose: rank-2 tensor required, got ", shape_str(pa->shape));
    const int m = pa->shape[0], n = pa->shape[1];
    std::vector<S> out(pa->val.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = pa->val[static_cast<std::size_t>(i) * n + j];
    return detail::make_op<S>("transpose", {n, m}, std::move(out), {pa}, [m, n](TensorData<S>& self) {
        auto& ga = self.parents[0];
        ga->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                ga->grad[static_cast<std::size_t>(i) * n + j] +=
                    self.grad[static_cast<std::size_t>(j) * m + i];
    });
}

// ids index rows of table [V, d] -> [ids.size(), d]
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& ids) {
    auto pt = table.node();
    require(pt->shape.size() == 2, "embedding_lookup: table must be rank 2, got ",
            shape_str(pt->shape));
    const int v = pt->shape[0], dim = pt->shape[1];
    for (int id : ids)
        require(id >= 0 && id < v, "embedding_lookup: id ", id, " out of range [0,", v, ")");
    std::vector<S> out(ids.size() * static_cast<std::size_t>(dim));
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(pt->val.data() + static_cast<std::size_t>(ids[i]) * dim, dim,
                    out.data() + i * dim);
    return detail::make_op<S>("embedding_lookup", {static_cast<int>(ids.size()), dim},
                              std::move(out), {pt}, [ids, dim](TensorData<S>& self) {
                                  auto& gt = self.parents[0];
                                  gt->ensure_grad();
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                      S* dst = gt->grad.data() + static_cast<std::size_t>(ids[i]) * dim;
                                      const S* src = self.grad.data() + i * dim;
                                      for (int j = 0; j < dim; ++j) dst[j] += src[j];
                                  }
                              });
}

// Row-wise normalization with affine; variance floor 1e-5 inside the sqrt.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
    auto px = x.node();
    auto pg = gain.node();
    auto pb = bias.node();
    require(px->shape.size() == 2, "layer_norm: input must be rank 2, got ", shape_str(px->shape));
    const int rows = px->shape[0], n = px->shape[1];
    require(pg->shape == Shape{n} && pb->shape == Shape{n}, "layer_norm: affine shape mismatch ",
            shape_str(pg->shape), " vs row width ", n);
    constexpr double kVarFloor = 1e-5;
    std::vector<S> out(px->val.size());
    std::vector<S> inv_std(rows), mean(rows);
    for (int r = 0; r < rows; ++r) {
        const S* row = px->val.data() + static_cast<std::size_t>(r) * n;
        double mu = 0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= n;
        double var = 0;
        for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kVarFloor);
        mean[r] = static_cast<S>(mu);
        inv_std[r] = static_cast<S>(inv);
        S* orow = out.data() + static_cast<std::size_t>(r) * n;
        for (int j = 0; j < n; ++j)
            orow[j] = static_cast<S>((row[j] - mu) * inv) * pg->val[j] + pb->val[j];
    }
    return detail::make_op<S>(
        "layer_norm", px->shape, std::move(out), {px, pg, pb},
        [rows, n, mean, inv_std](TensorData<S>& self) {
            auto& gx = self.parents[0];
            auto& gg = self.parents[1];
            auto& gb2 = self.parents[2];
            for (int r = 0; r < rows; ++r) {
                const S* xrow = gx->val.data() + static_cast<std::size_t>(r) * n;
                const S* grow = self.grad.data() + static_cast<std::size_t>(r) * n;
                const double mu = mean[r], inv = inv_std[r];
                if (gg->needs_grad) {
                    gg->ensure_grad();
                    for (int j = 0; j < n; ++j)
                        gg->grad[j] += grow[j] * static_cast<S>((xrow[j] - mu) * inv);
                }
                if (gb2->needs_grad) {
                    gb2->ensure_grad();
                    for (int j = 0; j < n; ++j) gb2->grad[j] += grow[j];
                }
                if (gx->needs_grad) {
                    gx->ensure_grad();
                    // dxhat_j = g_j * gain_j; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double sum_dxh = 0, sum_dxh_xh = 0;
                    for (int j = 0; j < n; ++j) {
                        const double xh = (xrow[j] - mu) * inv;
                        const double dxh = static_cast<double>(grow[j]) * self.parents[1]->val[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    S* dxrow = gx->grad.data() + static_cast<std::size_t>(r) * n;
                    for (int j = 0; j < n; ++j) {
                        const double xh = (xrow[j] - mu) * inv;
                        const double dxh = static_cast<double>(grow[j]) * self.parents[1]->val[j];
                        dxrow[j] += static_cast<S>(inv * (dxh - sum_dxh / n - xh * sum_dxh_xh / n));
                    }
                }
            }
        });
}

// Softmax along `axis` of a rank-1 or rank-2 tensor.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
    auto px = x.node();
    const int rank = static_cast<int>(px->shape.size());
    require(rank >= 1 && rank <= 2, "softmax: rank-1 or rank-2 tensor required, got ",
            shape_str(px->shape));
    if (axis < 0) axis += rank;
    require(axis >= 0 && axis < rank, "softmax: axis ", axis, " out of range for ",
            shape_str(px->shape));
    // View as [groups, len, stride]: softmax runs over `len` with step `stride`.
    int groups, len, stride;
    if (rank == 1) {
        groups = 1;
        len = px->shape[0];
        stride = 1;
    } else if (axis == 1) {
        groups = px->shape[0];
        len = px->shape[1];
        stride = 1;
    } else {
        groups = px->shape[1];
        len = px->shape[0];
        stride = px->shape[1];
    }
    std::vector<S> out(px->val.size());
    for (int g = 0; g < groups; ++g) {
        const std::size_t base = (rank == 2 && axis == 0) ? static_cast<std::size_t>(g)
                                                          : static_cast<std::size_t>(g) * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < len; ++i)
            mx = std::max(mx, static_cast<double>(px->val[base + static_cast<std::size_t>(i) * stride]));
        double z = 0;
        for (int i = 0; i < len; ++i) {
            const double e = std::exp(static_cast<double>(px->val[base + static_cast<std::size_t>(i) * stride]) - mx);
            out[base + static_cast<std::size_t>(i) * stride] = static_cast<S>(e);
            z += e;
        }
        for (int i = 0; i < len; ++i)
            out[base + static_cast<std::size_t>(i) * stride] = static_cast<S>(out[base + static_cast<std::size_t>(i) * stride] / z);
    }
    return detail::make_op<S>(
        "softmax", px->shape, std::move(out), {px},
        [groups, len, stride, rank, axis](TensorData<S>& self) {
            auto& gx = self.parents[0];
            gx->ensure_grad();
            for (int g = 0; g < groups; ++g) {
                const std::size_t base = (rank == 2 && axis == 0)
                                             ? static_cast<std::size_t>(g)
                                             : static_cast<std::size_t>(g) * len;
                double dot = 0;
                for (int i = 0; i < len; ++i) {
                    const std::size_t ix = base + static_cast<std::size_t>(i) * stride;
                    dot += static_cast<double>(self.grad[ix]) * self.val[ix];
                }
                for (int i = 0; i < len; ++i) {
                    const std::size_t ix = base + static_cast<std::size_t>(i) * stride;
                    gx->grad[ix] += static_cast<S>(self.val[ix] * (self.grad[ix] - dot));
                }
            }
        });
}

// tanh approximation of gelu
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
    auto px = x.node();
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<S> out(px->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = px->val[i];
        out[i] = static_cast<S>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
    }
    return detail::make_op<S>("gelu", px->shape, std::move(out), {px}, [](TensorData<S>& self) {
        auto& gx = self.parents[0];
        gx->ensure_grad();
        constexpr double c = 0.7978845608028654;
        constexpr double a = 0.044715;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = gx->val[i];
            const double t = std::tanh(c * (v + a * v * v * v));
            const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
            gx->grad[i] += static_cast<S>(self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt));
        }
    });
}

// Mean NLL over positions with mask 1. logits [T, V]; targets/mask length T.
template <class S>
Tensor<S> cross_entropy_with_logits(const Tensor<S>& logits, const std::vector<int>& targets,
                                    const std::vector<int>& mask) {
    auto pl = logits.node();
    require(pl->shape.size() == 2, "cross_entropy_with_logits: logits must be rank 2, got ",
            shape_str(pl->shape));
    const int t_len = pl->shape[0], v = pl->shape[1];
    require(static_cast<int>(targets.size()) == t_len && static_cast<int>(mask.size()) == t_len,
            "cross_entropy_with_logits: targets/mask length mismatch ", targets.size(), "/",
            mask.size(), " vs ", t_len);
    int active = 0;
    for (int m : mask) {
        require(m == 0 || m == 1, "cross_entropy_with_logits: mask values must be 0/1");
        active += m;
    }
    require(active > 0, "cross_entropy_with_logits: empty mask");
    double total = 0;
    for (int t = 0; t < t_len; ++t) {
        if (!mask[t]) continue;
        require(targets[t] >= 0 && targets[t] < v, "cross_entropy_with_logits: target ",
                targets[t], " out of range [0,", v, ")");
        const S* row = pl->val.data() + static_cast<std::size_t>(t) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0;
        for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        total += std::log(z) - (static_cast<double>(row[targets[t]]) - mx);
    }
    std::vector<S> out{static_cast<S>(total / active)};
    return detail::make_op<S>(
        "cross_entropy_with_logits", {}, std::move(out), {pl},
        [targets, mask, t_len, v, active](TensorData<S>& self) {
            auto& gl = self.parents[0];
            gl->ensure_grad();
            const double g = static_cast<double>(self.grad[0]) / active;
            for (int t = 0; t < t_len; ++t) {
                if (!mask[t]) continue;
                const S* row = gl->val.data() + static_cast<std::size_t>(t) * v;
                S* drow = gl->grad.data() + static_cast<std::size_t>(t) * v;
                double mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
                double z = 0;
                for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
                for (int j = 0; j < v; ++j) {
                    const double p = std::exp(static_cast<double>(row[j]) - mx) / z;
                    drow[j] += static_cast<S>(g * (p - (j == targets[t] ? 1.0 : 0.0)));
                }
            }
        });
}

template <class S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
    auto pa = a.node();
    auto pb = b.node();
    require(pa->shape.size() == 2 && pb->shape.size() == 2, "concat: rank-2 tensors required, got ",
            shape_str(pa->shape), " and ", shape_str(pb->shape));
    require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
    const int other = 1 - axis;
    require(pa->shape[other] == pb->shape[other], "concat: shape mismatch ", shape_str(pa->shape),
            " vs ", shape_str(pb->shape), " on axis ", axis);
    Shape oshape = pa->shape;
    oshape[axis] += pb->shape[axis];
    std::vector<S> out(numel(oshape));
    const int rows_a = pa->shape[0], cols_a = pa->shape[1];
    const int cols_b = pb->shape[1];
    const int ocols = oshape[1];
    if (axis == 0) {
        std::copy(pa->val.begin(), pa->val.end(), out.begin());
        std::copy(pb->val.begin(), pb->val.end(), out.begin() + static_cast<std::ptrdiff_t>(pa->val.size()));
    } else {
        for (int r = 0; r < rows_a; ++r) {
            std::copy_n(pa->val.data() + static_cast<std::size_t>(r) * cols_a, cols_a,
                        out.data() + static_cast<std::size_t>(r) * ocols);
            std::copy_n(pb->val.data() + static_cast<std::size_t>(r) * cols_b, cols_b,
                        out.data() + static_cast<std::size_t>(r) * ocols + cols_a);
        }
    }
    return detail::make_op<S>(
        "concat", oshape, std::move(out), {pa, pb},
        [axis, rows_a, cols_a, cols_b, ocols](TensorData<S>& self) {
            auto& ga = self.parents[0];
            auto& gb = self.parents[1];
            if (axis == 0) {
                const std::size_t na = ga->val.size();
                if (ga->needs_grad) {
                    ga->ensure_grad();
                    for (std::size_t i = 0; i < na; ++i) ga->grad[i] += self.grad[i];
                }
                if (gb->needs_grad) {
                    gb->ensure_grad();
                    for (std::size_t i = 0; i < gb->val.size(); ++i) gb->grad[i] += self.grad[na + i];
                }
            } else {
                for (int r = 0; r < rows_a; ++r) {
                    const S* grow = self.grad.data() + static_cast<std::size_t>(r) * ocols;
                    if (ga->needs_grad) {
                        ga->ensure_grad();
                        S* arow = ga->grad.data() + static_cast<std::size_t>(r) * cols_a;
                        for (int c = 0; c < cols_a; ++c) arow[c] += grow[c];
                    }
                    if (gb->needs_grad) {
                        gb->ensure_grad();
                        S* brow = gb->grad.data() + static_cast<std::size_t>(r) * cols_b;
                        for (int c = 0; c < cols_b; ++c) brow[c] += grow[cols_a + c];
                    }
                }
            }
        });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    auto px = x.node();
    require(numel(new_shape) == px->val.size(), "reshape: cannot view ", shape_str(px->shape),
            " as ", shape_str(new_shape));
    std::vector<S> out = px->val;
    return detail::make_op<S>("reshape", std::move(new_shape), std::move(out), {px},
                              [](TensorData<S>& self) {
                                  auto& gx = self.parents[0];
                                  gx->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      gx->grad[i] += self.grad[i];
                              });
}

// Half-open [begin, end) along `axis` of a rank-2 tensor.
template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, int begin, int end) {
    auto px = x.node();
    require(px->shape.size() == 2, "slice: rank-2 tensor required, got ", shape_str(px->shape));
    require(axis == 0 || axis == 1, "slice: axis must be 0 or 1");
    require(0 <= begin && begin < end && end <= px->shape[axis], "slice: range [", begin, ",", end,
            ") invalid for axis ", axis, " of ", shape_str(px->shape));
    const int rows = px->shape[0], cols = px->shape[1];
    Shape oshape = px->shape;
    oshape[axis] = end - begin;
    std::vector<S> out(numel(oshape));
    if (axis == 0) {
        std::copy_n(px->val.data() + static_cast<std::size_t>(begin) * cols, out.size(), out.data());
    } else {
        for (int r = 0; r < rows; ++r)
            std::copy_n(px->val.data() + static_cast<std::size_t>(r) * cols + begin, end - begin,
                        out.data() + static_cast<std::size_t>(r) * (end - begin));
    }
    return detail::make_op<S>("slice", oshape, std::move(out), {px},
                              [axis, begin, end, rows, cols](TensorData<S>& self) {
                                  auto& gx = self.parents[0];
                                  gx->ensure_grad();
                                  if (axis == 0) {
                                      S* dst = gx->grad.data() + static_cast<std::size_t>(begin) * cols;
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
                                  } else {
                                      const int w = end - begin;
                                      for (int r = 0; r < rows; ++r) {
                                          S* dst = gx->grad.data() + static_cast<std::size_t>(r) * cols + begin;
                                          const S* src = self.grad.data() + static_cast<std::size_t>(r) * w;
                                          for (int c = 0; c < w; ++c) dst[c] += src[c];
                                      }
                                  }
                              });
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
    auto px = x.node();
    double total = 0;
    for (S v : px->val) total += v;
    return detail::make_op<S>("sum", {}, {static_cast<S>(total)}, {px}, [](TensorData<S>& self) {
        auto& gx = self.parents[0];
        gx->ensure_grad();
        for (std::size_t i = 0; i < gx->grad.size(); ++i) gx->grad[i] += self.grad[0];
    });
}

// Causal multi-head attention over rank-2 q,k,v [T, d]; composed from the
// primitive ops so its backward falls out of theirs. Future positions are
// excluded with a -1e9 additive mask, which underflows to exactly zero weight
// after the max-shifted softmax.
template <class S>
Tensor<S> causal_self_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                int n_heads) {
    const Shape& qs = q.shape();
    require(qs.size() == 2 && k.shape() == qs && v.shape() == qs,
            "causal_self_attention: q/k/v must share a rank-2 shape, got ", shape_str(qs), " ",
            shape_str(k.shape()), " ", shape_str(v.shape()));
    const int t_len = qs[0], dim = qs[1];
    require(n_heads >= 1 && dim % n_heads == 0, "causal_self_attention: width ", dim,
            " not divisible by heads ", n_heads);
    const int dh = dim / n_heads;
    Tensor<S> mask = Tensor<S>::zeros({t_len, t_len});
    for (int i = 0; i < t_len; ++i)
        for (int j = i + 1; j < t_len; ++j)
            mask.data()[static_cast<std::size_t>(i) * t_len + j] = static_cast<S>(-1e9);
    Tensor<S> out;
    for (int h = 0; h < n_heads; ++h) {
        Tensor<S> qh = (n_heads == 1) ? q : slice(q, 1, h * dh, (h + 1) * dh);
        Tensor<S> kh = (n_heads == 1) ? k : slice(k, 1, h * dh, (h + 1) * dh);
        Tensor<S> vh = (n_heads == 1) ? v : slice(v, 1, h * dh, (h + 1) * dh);
        Tensor<S> scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor<S> probs = softmax(add(scores, mask), 1);
        Tensor<S> oh = matmul(probs, vh);
        out = out.defined() ? concat(out, oh, 1) : oh;
    }
    return out;
}

// Reverse topological sweep from a scalar root. Gradients accumulate into
// leaf grad buffers; repeated backward without zero_grad keeps accumulating.
template <class S>
void backward(const Tensor<S>& root) {
    require(root.size() == 1, "backward: root must be scalar, shape ", shape_str(root.shape()));
    auto* r = root.node().get();
    if (!r->needs_grad) return;
    std::vector<TensorData<S>*> order;
    std::unordered_set<TensorData<S>*> seen;
    std::vector<std::pair<TensorData<S>*, std::size_t>> stack;
    stack.emplace_back(r, 0);
    seen.insert(r);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorData<S>* p = node->parents[idx++].get();
            if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    r->ensure_grad();
    r->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backfn) (*it)->backfn(**it);
}

// Central-difference check of reverse-mode gradients. Returns the max
// relative error over every coordinate of every input.
template <class S, class Fn>
double grad_check(Fn&& f, std::vector<Tensor<S>>& inputs, double eps = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    Tensor<S> out = f(inputs);
    backward(out);
    double worst = 0;
    for (auto& t : inputs) {
        auto& vals = t.data();
        auto& grads = t.grad();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const S keep = vals[i];
            vals[i] = keep + static_cast<S>(eps);
            const double up = static_cast<double>(f(inputs).item());
            vals[i] = keep - static_cast<S>(eps);
            const double down = static_cast<double>(f(inputs).item());
            vals[i] = keep;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = grads[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace bua
