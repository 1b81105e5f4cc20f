#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "carformer/errors.hpp"

namespace cf {

// Dense 64-bit float tensor participating in reverse-mode differentiation.
// A forward pass builds a tape of Node records; backward() walks it in
// reverse topological order. Single-threaded, fixed iteration order, so a
// given (seed, input) pair reproduces bit-identical results.
struct Node {
    std::vector<int> shape;
    std::vector<double> v;   // row-major values
    std::vector<double> g;   // same-shape adjoint, lazily allocated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // scatters this->g into parents

    std::size_t size() const { return v.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0);
    }
    void zero_grad() { g.assign(v.size(), 0.0); }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        std::size_t sz = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("non-positive dim in tensor shape");
            sz *= static_cast<std::size_t>(d);
        }
        n->shape = std::move(shape);
        n->v.assign(sz, 0.0);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from(std::vector<int> shape, std::vector<double> data,
                       bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (data.size() != t->v.size())
            throw ShapeError("data length does not match shape product");
        t->v = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    Node* operator->() const { return n_.get(); }
    Node& node() const { return *n_; }
    std::shared_ptr<Node> ptr() const { return n_; }

    double item() const {
        if (n_->size() != 1) throw ShapeError("item() on non-scalar tensor");
        return n_->v[0];
    }

    double at(int i, int j) const { return n_->v[static_cast<std::size_t>(i) * n_->cols() + j]; }
    double& at(int i, int j) { return n_->v[static_cast<std::size_t>(i) * n_->cols() + j]; }

private:
    std::shared_ptr<Node> n_;
};

inline std::string shape_str(const Node& n) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < n.shape.size(); ++i)
        os << (i ? "x" : "") << n.shape[i];
    os << "]";
    return os.str();
}

namespace detail {

inline Tensor make_op(std::vector<int> shape,
                      std::vector<std::shared_ptr<Node>> parents) {
    Tensor out = Tensor::zeros(std::move(shape));
    bool rg = false;
    for (auto& p : parents) rg = rg || p->requires_grad;
    out->requires_grad = rg;
    out->parents = std::move(parents);
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a->shape != b->shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(*a.operator->()) +
                         " vs " + shape_str(*b.operator->()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = detail::make_op(a->shape, {a.ptr(), b.ptr()});
    for (std::size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] + b->v[i];
    out->backward_fn = [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *n.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) p.g[i] += n.g[i];
        }
    };
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = detail::make_op(a->shape, {a.ptr(), b.ptr()});
    for (std::size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] - b->v[i];
    out->backward_fn = [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) pa.g[i] += n.g[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) pb.g[i] -= n.g[i];
        }
    };
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = detail::make_op(a->shape, {a.ptr(), b.ptr()});
    for (std::size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] * b->v[i];
    out->backward_fn = [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) pa.g[i] += n.g[i] * pb.v[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) pb.g[i] += n.g[i] * pa.v[i];
        }
    };
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = detail::make_op(a->shape, {a.ptr()});
    for (std::size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] * c;
    out->backward_fn = [c](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) p.g[i] += n.g[i] * c;
    };
    return out;
}

inline Tensor gelu(const Tensor& a) {
    Tensor out = detail::make_op(a->shape, {a.ptr()});
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < out->size(); ++i) {
        double x = a->v[i];
        out->v[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    out->backward_fn = [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < n.size(); ++i) {
            double x = p.v[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            p.g[i] += n.g[i] * (cdf + x * pdf);
        }
    };
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = detail::make_op(a->shape, {a.ptr()});
    for (std::size_t i = 0; i < out->size(); ++i) {
        double x = a->v[i];
        out->v[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                           : std::exp(x) / (1.0 + std::exp(x));
    }
    out->backward_fn = [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) {
            double s = n.v[i];
            p.g[i] += n.g[i] * s * (1.0 - s);
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const int m = a->rows(), k = a->cols(), k2 = b->rows(), n = b->cols();
    if (k != k2)
        throw ShapeError("matmul: inner dims differ, " + shape_str(*a.operator->()) +
                         " vs " + shape_str(*b.operator->()));
    Tensor out = detail::make_op({m, n}, {a.ptr(), b.ptr()});
    // ikj order for locality
    for (int i = 0; i < m; ++i) {
        double* orow = &out->v[static_cast<std::size_t>(i) * n];
        for (int kk = 0; kk < k; ++kk) {
            double av = a->v[static_cast<std::size_t>(i) * k + kk];
            const double* brow = &b->v[static_cast<std::size_t>(kk) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    out->backward_fn = [m, k, n](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();  // dA = dC * B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double gv = nd.g[static_cast<std::size_t>(i) * n + j];
                    if (gv == 0.0) continue;
                    const double* brow = &pb.v[0];
                    for (int kk = 0; kk < k; ++kk)
                        pa.g[static_cast<std::size_t>(i) * k + kk] +=
                            gv * brow[static_cast<std::size_t>(kk) * n + j];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();  // dB = A^T * dC
            for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < m; ++i) {
                    double av = pa.v[static_cast<std::size_t>(i) * k + kk];
                    if (av == 0.0) continue;
                    for (int j = 0; j < n; ++j)
                        pb.g[static_cast<std::size_t>(kk) * n + j] +=
                            av * nd.g[static_cast<std::size_t>(i) * n + j];
                }
        }
    };
    return out;
}

// a [m x k] times b^T where b is [n x k]; avoids materializing transposes in
// attention score computations.
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    const int m = a->rows(), k = a->cols(), n = b->rows();
    if (k != b->cols())
        throw ShapeError("matmul_bt: inner dims differ, " + shape_str(*a.operator->()) +
                         " vs " + shape_str(*b.operator->()));
    Tensor out = detail::make_op({m, n}, {a.ptr(), b.ptr()});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            const double* ar = &a->v[static_cast<std::size_t>(i) * k];
            const double* br = &b->v[static_cast<std::size_t>(j) * k];
            for (int kk = 0; kk < k; ++kk) s += ar[kk] * br[kk];
            out->v[static_cast<std::size_t>(i) * n + j] = s;
        }
    out->backward_fn = [m, k, n](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();  // dA = dC * B
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double gv = nd.g[static_cast<std::size_t>(i) * n + j];
                    if (gv == 0.0) continue;
                    const double* br = &pb.v[static_cast<std::size_t>(j) * k];
                    double* gar = &pa.g[static_cast<std::size_t>(i) * k];
                    for (int kk = 0; kk < k; ++kk) gar[kk] += gv * br[kk];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();  // dB = dC^T * A
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double gv = nd.g[static_cast<std::size_t>(i) * n + j];
                    if (gv == 0.0) continue;
                    const double* ar = &pa.v[static_cast<std::size_t>(i) * k];
                    double* gbr = &pb.g[static_cast<std::size_t>(j) * k];
                    for (int kk = 0; kk < k; ++kk) gbr[kk] += gv * ar[kk];
                }
        }
    };
    return out;
}

// y = x W + b, with W [in x out] and b [out] broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int m = x->rows(), in = x->cols(), out_dim = w->cols();
    if (in != w->rows())
        throw ShapeError("linear: input width " + std::to_string(in) +
                         " vs weight rows " + std::to_string(w->rows()));
    if (static_cast<int>(b->size()) != out_dim)
        throw ShapeError("linear: bias length mismatch");
    Tensor out = detail::make_op({m, out_dim}, {x.ptr(), w.ptr(), b.ptr()});
    for (int i = 0; i < m; ++i) {
        double* orow = &out->v[static_cast<std::size_t>(i) * out_dim];
        for (int j = 0; j < out_dim; ++j) orow[j] = b->v[j];
        for (int kk = 0; kk < in; ++kk) {
            double xv = x->v[static_cast<std::size_t>(i) * in + kk];
            const double* wrow = &w->v[static_cast<std::size_t>(kk) * out_dim];
            for (int j = 0; j < out_dim; ++j) orow[j] += xv * wrow[j];
        }
    }
    out->backward_fn = [m, in, out_dim](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pw = *nd.parents[1];
        Node& pb = *nd.parents[2];
        if (px.requires_grad) {
            px.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < out_dim; ++j) {
                    double gv = nd.g[static_cast<std::size_t>(i) * out_dim + j];
                    if (gv == 0.0) continue;
                    for (int kk = 0; kk < in; ++kk)
                        px.g[static_cast<std::size_t>(i) * in + kk] +=
                            gv * pw.v[static_cast<std::size_t>(kk) * out_dim + j];
                }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < in; ++kk) {
                    double xv = px.v[static_cast<std::size_t>(i) * in + kk];
                    if (xv == 0.0) continue;
                    for (int j = 0; j < out_dim; ++j)
                        pw.g[static_cast<std::size_t>(kk) * out_dim + j] +=
                            xv * nd.g[static_cast<std::size_t>(i) * out_dim + j];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < out_dim; ++j)
                    pb.g[j] += nd.g[static_cast<std::size_t>(i) * out_dim + j];
        }
    };
    return out;
}

// x [m x d] + row [d] broadcast over rows.
inline Tensor broadcast_add_row(const Tensor& x, const Tensor& row) {
    const int m = x->rows(), d = x->cols();
    if (static_cast<int>(row->size()) != d)
        throw ShapeError("broadcast_add_row: width mismatch");
    Tensor out = detail::make_op(x->shape, {x.ptr(), row.ptr()});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j)
            out->v[static_cast<std::size_t>(i) * d + j] =
                x->v[static_cast<std::size_t>(i) * d + j] + row->v[j];
    out->backward_fn = [m, d](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pr = *nd.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < nd.size(); ++i) px.g[i] += nd.g[i];
        }
        if (pr.requires_grad) {
            pr.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j)
                    pr.g[j] += nd.g[static_cast<std::size_t>(i) * d + j];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

// Row softmax with optional keep-mask (1 = attend). Masked entries get exact
// zeros and are excluded from normalization; a fully masked row is all zeros.
inline Tensor softmax_rows(const Tensor& x, const std::vector<std::uint8_t>* mask = nullptr) {
    const int m = x->rows(), n = x->cols();
    if (mask && static_cast<int>(mask->size()) != m * n)
        throw ShapeError("softmax_rows: mask size mismatch");
    Tensor out = detail::make_op(x->shape, {x.ptr()});
    std::vector<std::uint8_t> keep;
    if (mask) keep = *mask;
    for (int i = 0; i < m; ++i) {
        const double* xr = &x->v[static_cast<std::size_t>(i) * n];
        double* orow = &out->v[static_cast<std::size_t>(i) * n];
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j)
            if (!mask || keep[static_cast<std::size_t>(i) * n + j])
                mx = std::max(mx, xr[j]);
        if (!std::isfinite(mx)) continue;  // fully masked row -> zeros
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            if (mask && !keep[static_cast<std::size_t>(i) * n + j]) {
                orow[j] = 0.0;
                continue;
            }
            orow[j] = std::exp(xr[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
    }
    out->backward_fn = [m, n, keep = std::move(keep), has_mask = mask != nullptr](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = &nd.v[static_cast<std::size_t>(i) * n];
            const double* gy = &nd.g[static_cast<std::size_t>(i) * n];
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
            for (int j = 0; j < n; ++j) {
                if (has_mask && !keep[static_cast<std::size_t>(i) * n + j]) continue;
                p.g[static_cast<std::size_t>(i) * n + j] += y[j] * (gy[j] - dot);
            }
        }
    };
    return out;
}

// out = x / sqrt(mean(x^2) + eps) * gain, per row.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
    const int m = x->rows(), d = x->cols();
    if (static_cast<int>(gain->size()) != d)
        throw ShapeError("rms_norm: gain length mismatch");
    Tensor out = detail::make_op(x->shape, {x.ptr(), gain.ptr()});
    for (int i = 0; i < m; ++i) {
        const double* xr = &x->v[static_cast<std::size_t>(i) * d];
        double* orow = &out->v[static_cast<std::size_t>(i) * d];
        double ms = 0.0;
        for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
        double r = std::sqrt(ms / d + eps);
        for (int j = 0; j < d; ++j) orow[j] = xr[j] / r * gain->v[j];
    }
    out->backward_fn = [m, d, eps](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pg = *nd.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* xr = &px.v[static_cast<std::size_t>(i) * d];
            const double* gy = &nd.g[static_cast<std::size_t>(i) * d];
            double ms = 0.0;
            for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
            double r = std::sqrt(ms / d + eps);
            if (px.requires_grad) {
                double dot = 0.0;  // sum_j gy_j * gain_j * x_j
                for (int j = 0; j < d; ++j) dot += gy[j] * pg.v[j] * xr[j];
                for (int j = 0; j < d; ++j)
                    px.g[static_cast<std::size_t>(i) * d + j] +=
                        gy[j] * pg.v[j] / r - xr[j] * dot / (d * r * r * r);
            }
            if (pg.requires_grad)
                for (int j = 0; j < d; ++j) pg.g[j] += gy[j] * xr[j] / r;
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// gather / slice / concat
// ---------------------------------------------------------------------------

inline Tensor rows_embed(const Tensor& table, const std::vector<int>& ids) {
    const int v = table->rows(), d = table->cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw DataError("embedding id " + std::to_string(id) + " out of range [0," +
                            std::to_string(v) + ")");
    Tensor out = detail::make_op({static_cast<int>(ids.size()), d}, {table.ptr()});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(&table->v[static_cast<std::size_t>(ids[i]) * d], d, &out->v[i * d]);
    out->backward_fn = [ids, d](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j)
                p.g[static_cast<std::size_t>(ids[i]) * d + j] += nd.g[i * d + j];
    };
    return out;
}

inline Tensor col_slice(const Tensor& x, int start, int len) {
    const int m = x->rows(), d = x->cols();
    if (start < 0 || start + len > d) throw ShapeError("col_slice out of range");
    Tensor out = detail::make_op({m, len}, {x.ptr()});
    for (int i = 0; i < m; ++i)
        std::copy_n(&x->v[static_cast<std::size_t>(i) * d + start], len,
                    &out->v[static_cast<std::size_t>(i) * len]);
    out->backward_fn = [m, d, start, len](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j)
                p.g[static_cast<std::size_t>(i) * d + start + j] +=
                    nd.g[static_cast<std::size_t>(i) * len + j];
    };
    return out;
}

inline Tensor row_block(const Tensor& x, int start, int count) {
    const int m = x->rows(), d = x->cols();
    if (start < 0 || start + count > m) throw ShapeError("row_block out of range");
    Tensor out = detail::make_op({count, d}, {x.ptr()});
    std::copy_n(&x->v[static_cast<std::size_t>(start) * d],
                static_cast<std::size_t>(count) * d, out->v.begin());
    out->backward_fn = [start, count, d](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * d; ++i)
            p.g[static_cast<std::size_t>(start) * d + i] += nd.g[i];
    };
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int m = parts[0]->rows();
    int total = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (p->rows() != m) throw ShapeError("concat_cols: row mismatch");
        widths.push_back(p->cols());
        total += p->cols();
        parents.push_back(p.ptr());
    }
    Tensor out = detail::make_op({m, total}, std::move(parents));
    int off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        int w = widths[k];
        for (int i = 0; i < m; ++i)
            std::copy_n(&parts[k]->v[static_cast<std::size_t>(i) * w], w,
                        &out->v[static_cast<std::size_t>(i) * total + off]);
        off += w;
    }
    out->backward_fn = [m, total, widths](Node& nd) {
        int off2 = 0;
        for (std::size_t k = 0; k < nd.parents.size(); ++k) {
            Node& p = *nd.parents[k];
            int w = widths[k];
            if (p.requires_grad) {
                p.ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        p.g[static_cast<std::size_t>(i) * w + j] +=
                            nd.g[static_cast<std::size_t>(i) * total + off2 + j];
            }
            off2 += w;
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

// Per-position block-diagonal 2D rotations; pair i (1-based) rotates by
// pos * theta0^(-2(i-1)/d). Orthogonal per position.
inline Tensor rope_rotate(const Tensor& x, const std::vector<int>& positions,
                          double theta0 = 1e4) {
    const int m = x->rows(), d = x->cols();
    if (d % 2 != 0) throw ShapeError("rope_rotate: feature dim must be even");
    if (static_cast<int>(positions.size()) != m)
        throw ShapeError("rope_rotate: positions length mismatch");
    std::vector<double> thetas(d / 2);
    for (int i = 0; i < d / 2; ++i)
        thetas[i] = std::pow(theta0, -2.0 * i / d);
    Tensor out = detail::make_op(x->shape, {x.ptr()});
    for (int r = 0; r < m; ++r) {
        const double* xr = &x->v[static_cast<std::size_t>(r) * d];
        double* orow = &out->v[static_cast<std::size_t>(r) * d];
        for (int i = 0; i < d / 2; ++i) {
            double a = positions[r] * thetas[i];
            double c = std::cos(a), s = std::sin(a);
            orow[2 * i] = xr[2 * i] * c - xr[2 * i + 1] * s;
            orow[2 * i + 1] = xr[2 * i] * s + xr[2 * i + 1] * c;
        }
    }
    out->backward_fn = [m, d, positions, thetas](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int r = 0; r < m; ++r) {
            const double* gy = &nd.g[static_cast<std::size_t>(r) * d];
            double* gx = &p.g[static_cast<std::size_t>(r) * d];
            for (int i = 0; i < d / 2; ++i) {
                double a = positions[r] * thetas[i];
                double c = std::cos(a), s = std::sin(a);
                gx[2 * i] += gy[2 * i] * c + gy[2 * i + 1] * s;
                gx[2 * i + 1] += -gy[2 * i] * s + gy[2 * i + 1] * c;
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// depthwise 1-D convolution over sequence positions
// ---------------------------------------------------------------------------

// x [L x d], kernel [d x k], bias [d]. Causal: output position l reads only
// positions l-k+1 .. l (left zero padding), preserving autoregression.
inline Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    const int L = x->rows(), d = x->cols(), k = kernel->cols();
    if (kernel->rows() != d) throw ShapeError("conv1d_depthwise: kernel channels mismatch");
    if (static_cast<int>(bias->size()) != d) throw ShapeError("conv1d_depthwise: bias mismatch");
    Tensor out = detail::make_op(x->shape, {x.ptr(), kernel.ptr(), bias.ptr()});
    for (int l = 0; l < L; ++l)
        for (int c = 0; c < d; ++c) {
            double s = bias->v[c];
            for (int j = 1 - k; j <= 0; ++j) {
                int ll = l + j;
                if (ll < 0) continue;
                s += x->v[static_cast<std::size_t>(ll) * d + c] *
                     kernel->v[static_cast<std::size_t>(c) * k + j + k - 1];
            }
            out->v[static_cast<std::size_t>(l) * d + c] = s;
        }
    out->backward_fn = [L, d, k](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pk = *nd.parents[1];
        Node& pb = *nd.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < d; ++c) {
                double gv = nd.g[static_cast<std::size_t>(l) * d + c];
                if (gv == 0.0) continue;
                if (pb.requires_grad) pb.g[c] += gv;
                for (int j = 1 - k; j <= 0; ++j) {
                    int ll = l + j;
                    if (ll < 0) continue;
                    if (px.requires_grad)
                        px.g[static_cast<std::size_t>(ll) * d + c] +=
                            gv * pk.v[static_cast<std::size_t>(c) * k + j + k - 1];
                    if (pk.requires_grad)
                        pk.g[static_cast<std::size_t>(c) * k + j + k - 1] +=
                            gv * px.v[static_cast<std::size_t>(ll) * d + c];
                }
            }
    };
    return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    Tensor out = detail::make_op({1}, {x.ptr()});
    double s = 0.0;
    for (double v : x->v) s += v;
    out->v[0] = s;
    out->backward_fn = [](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.g.size(); ++i) p.g[i] += nd.g[0];
    };
    return out;
}

// Summed cross-entropy of row-softmax(logits[i]) against target id, over rows
// with include[i] != 0. Stable log-sum-exp; gradient is (p - onehot).
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<std::uint8_t>& include) {
    const int m = logits->rows(), n = logits->cols();
    if (static_cast<int>(targets.size()) != m || static_cast<int>(include.size()) != m)
        throw ShapeError("cross_entropy_rows: length mismatch");
    Tensor out = detail::make_op({1}, {logits.ptr()});
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        if (!include[i]) continue;
        if (targets[i] < 0 || targets[i] >= n)
            throw DataError("cross_entropy target out of range");
        const double* xr = &logits->v[static_cast<std::size_t>(i) * n];
        double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
        loss += std::log(z) + mx - xr[targets[i]];
    }
    out->v[0] = loss;
    out->backward_fn = [m, n, targets, include](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        double g0 = nd.g[0];
        for (int i = 0; i < m; ++i) {
            if (!include[i]) continue;
            const double* xr = &p.v[static_cast<std::size_t>(i) * n];
            double mx = *std::max_element(xr, xr + n);
            double z = 0.0;
            for (int j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
            for (int j = 0; j < n; ++j) {
                double prob = std::exp(xr[j] - mx) / z;
                p.g[static_cast<std::size_t>(i) * n + j] +=
                    g0 * (prob - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    };
    return out;
}

// Summed binary cross-entropy on logits vs 0/1 labels over included entries.
inline Tensor bce_logits(const Tensor& logits, const std::vector<double>& labels,
                         const std::vector<std::uint8_t>& include) {
    const std::size_t n = logits->size();
    if (labels.size() != n || include.size() != n)
        throw ShapeError("bce_logits: length mismatch");
    Tensor out = detail::make_op({1}, {logits.ptr()});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!include[i]) continue;
        double x = logits->v[i], y = labels[i];
        // log(1+exp(-|x|)) formulation
        loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    out->v[0] = loss;
    out->backward_fn = [labels, include](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        double g0 = nd.g[0];
        for (std::size_t i = 0; i < p.v.size(); ++i) {
            if (!include[i]) continue;
            double x = p.v[i];
            double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            p.g[i] += g0 * (s - labels[i]);
        }
    };
    return out;
}

// Summed binary cross-entropy on probabilities clamped to [clamp, 1-clamp].
inline Tensor bce_probs(const Tensor& probs, const std::vector<double>& labels,
                        double clamp = 1e-7) {
    const std::size_t n = probs->size();
    if (labels.size() != n) throw ShapeError("bce_probs: length mismatch");
    Tensor out = detail::make_op({1}, {probs.ptr()});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double q = std::clamp(probs->v[i], clamp, 1.0 - clamp);
        loss += -(labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q));
    }
    out->v[0] = loss;
    out->backward_fn = [labels, clamp](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        double g0 = nd.g[0];
        for (std::size_t i = 0; i < p.v.size(); ++i) {
            double q = p.v[i];
            if (q <= clamp || q >= 1.0 - clamp) continue;  // clamped: flat
            p.g[i] += g0 * (-(labels[i] / q) + (1.0 - labels[i]) / (1.0 - q));
        }
    };
    return out;
}

// Summed Huber on (pred - target) over included entries; quadratic branch
// strictly when |eps| < beta.
inline Tensor huber_sum(const Tensor& pred, const std::vector<double>& target,
                        const std::vector<std::uint8_t>& include, double beta = 1.0) {
    const std::size_t n = pred->size();
    if (target.size() != n || include.size() != n)
        throw ShapeError("huber_sum: length mismatch");
    Tensor out = detail::make_op({1}, {pred.ptr()});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!include[i]) continue;
        double e = pred->v[i] - target[i];
        loss += std::abs(e) < beta ? 0.5 * e * e : beta * (std::abs(e) - 0.5 * beta);
    }
    out->v[0] = loss;
    out->backward_fn = [target, include, beta](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        double g0 = nd.g[0];
        for (std::size_t i = 0; i < p.v.size(); ++i) {
            if (!include[i]) continue;
            double e = p.v[i] - target[i];
            p.g[i] += g0 * (std::abs(e) < beta ? e : (e > 0 ? beta : -beta));
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void topo_order(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (!seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
}

// Seeds d(root)/d(root) = 1 and accumulates adjoints in exact reverse
// topological order.
inline void backward(const Tensor& root) {
    if (root->size() != 1) throw ShapeError("backward: root must be scalar");
    if (!std::isfinite(root->v[0]))
        throw NumericError("backward: non-finite loss value");
    std::vector<Node*> order;
    topo_order(root.ptr().get(), order);
    root->ensure_grad();
    root->g[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->requires_grad && n->g.size() == n->v.size())
            n->backward_fn(*n);
    }
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Compares analytic gradients of a scalar-valued graph builder against
// central finite differences. `params` are leaf tensors with requires_grad.
// Returns the max relative error over all checked entries.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double h = 1e-5) {
    for (auto& p : params) p->zero_grad();
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    backward(loss);
    double max_rel = 0.0;
    for (auto& p : params) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->v.size(); ++i) {
            double orig = p->v[i];
            p->v[i] = orig + h;
            double up = f().item();
            p->v[i] = orig - h;
            double dn = f().item();
            p->v[i] = orig;
            double num = (up - dn) / (2.0 * h);
            double ana = p->g[i];
            // the floor keeps round-off noise on near-zero gradients from
            // dominating the relative measure
            double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
            max_rel = std::max(max_rel, std::abs(num - ana) / denom);
        }
    }
    return max_rel;
}

}  // namespace cf
