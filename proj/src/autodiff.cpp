// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "fedpeft/errors.hpp"

namespace fedpeft::ad {

namespace {

// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.values().data() + i * a.cols();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.values().data() + j * b.cols();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    }
    return out;
}

// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.values().data() + k * a.cols();
        const double* br = b.values().data() + k * b.cols();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            double* orow = out.values().data() + i * out.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * br[j];
        }
    }
    return out;
}

Matrix plain_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = out.values().data() + i * out.cols();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.values().data() + k * b.cols();
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

}  // namespace

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) noexcept {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Var Tape::push(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::leaf(Matrix value, bool requires_grad) { return push(std::move(value), requires_grad, {}); }

Matrix Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Matrix(n.value.rows(), n.value.cols());
}

Matrix& Tape::grad_slot(Var target) {
    Node& n = nodes_[target.id];
    if (!n.has_grad) {
        n.grad = Matrix(n.value.rows(), n.value.cols());
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::accumulate(Var target, const Matrix& g) {
    if (!nodes_[target.id].requires_grad) return;
    grad_slot(target) += g;
}

void Tape::backward(Var out, const Matrix& seed) {
    if (!seed.same_shape(value(out))) {
        throw ShapeError("backward: seed " + seed.shape_str() + " vs output " + value(out).shape_str());
    }
    if (!requires_grad(out)) return;
    grad_slot(out) += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.backward) continue;
        // Interior gradients are consumed here; only leaves keep theirs.
        const Matrix g = std::move(n.grad);
        n.has_grad = false;
        n.backward(*this, g);
    }
}

Var Tape::matmul(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: cannot multiply " + av.shape_str() + " by " + bv.shape_str());
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(plain_matmul(av, bv), rg, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, matmul_nt(g, t.value(b)));
        if (t.requires_grad(b)) t.accumulate(b, matmul_tn(t.value(a), g));
    });
}

Var Tape::add(Var a, Var b) {
    Matrix out = value(a);
    out += value(b);
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var Tape::add_col(Var a, Var column) {
    const Matrix& col = value(column);
    Matrix out = value(a);
    if (col.cols() != 1 || col.rows() != out.rows()) {
        throw ShapeError("add_col: column " + col.shape_str() + " for " + out.shape_str());
    }
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += col(r, 0);
    const bool rg = requires_grad(a) || requires_grad(column);
    return push(std::move(out), rg, [a, column](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(column)) {
            Matrix gc(g.rows(), 1);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gc(r, 0) += g(r, c);
            t.accumulate(column, gc);
        }
    });
}

Var Tape::scale(Var a, double s) {
    Matrix out = value(a);
    out *= s;
    return push(std::move(out), requires_grad(a), [a, s](Tape& t, const Matrix& g) {
        t.accumulate(a, s * Matrix(g));
    });
}

Var Tape::transpose(Var a) {
    return push(fedpeft::transpose(value(a)), requires_grad(a),
                [a](Tape& t, const Matrix& g) { t.accumulate(a, fedpeft::transpose(g)); });
}

Var Tape::gelu(Var a) {
    Matrix out = value(a);
    for (double& x : out.values()) x = ad::gelu(x);
    return push(std::move(out), requires_grad(a), [a](Tape& t, const Matrix& g) {
        const Matrix& x = t.value(a);
        Matrix gx(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * gelu_derivative(x[i]);
        t.accumulate(a, gx);
    });
}

Var Tape::layer_norm_cols(Var x, Var gamma, Var beta, double eps) {
    const Matrix& xv = value(x);
    const Matrix& gv = value(gamma);
    const Matrix& bv = value(beta);
    const std::size_t d = xv.rows();
    const std::size_t n = xv.cols();
    if (gv.rows() != d || gv.cols() != 1 || !gv.same_shape(bv)) {
        throw ShapeError("layer_norm: gamma " + gv.shape_str() + " for input " + xv.shape_str());
    }
    Matrix normed(d, n);
    std::vector<double> inv_std(n);
    for (std::size_t c = 0; c < n; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < d; ++r) mean += xv(r, c);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t r = 0; r < d; ++r) var += (xv(r, c) - mean) * (xv(r, c) - mean);
        var /= static_cast<double>(d);
        inv_std[c] = 1.0 / std::sqrt(var + eps);
        for (std::size_t r = 0; r < d; ++r) normed(r, c) = (xv(r, c) - mean) * inv_std[c];
    }
    Matrix out(d, n);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < n; ++c) out(r, c) = gv(r, 0) * normed(r, c) + bv(r, 0);

    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    return push(std::move(out), rg,
                [x, gamma, beta, normed = std::move(normed), inv_std = std::move(inv_std)](
                    Tape& t, const Matrix& g) {
                    const std::size_t d = g.rows();
                    const std::size_t n = g.cols();
                    if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                        Matrix gg(d, 1), gb(d, 1);
                        for (std::size_t r = 0; r < d; ++r)
                            for (std::size_t c = 0; c < n; ++c) {
                                gg(r, 0) += g(r, c) * normed(r, c);
                                gb(r, 0) += g(r, c);
                            }
                        t.accumulate(gamma, gg);
                        t.accumulate(beta, gb);
                    }
                    if (t.requires_grad(x)) {
                        const Matrix& gv = t.value(gamma);
                        Matrix gx(d, n);
                        for (std::size_t c = 0; c < n; ++c) {
                            double mean_g = 0.0, mean_gx = 0.0;
                            for (std::size_t r = 0; r < d; ++r) {
                                const double gh = g(r, c) * gv(r, 0);
                                mean_g += gh;
                                mean_gx += gh * normed(r, c);
                            }
                            mean_g /= static_cast<double>(d);
                            mean_gx /= static_cast<double>(d);
                            for (std::size_t r = 0; r < d; ++r) {
                                const double gh = g(r, c) * gv(r, 0);
                                gx(r, c) = inv_std[c] * (gh - mean_g - normed(r, c) * mean_gx);
                            }
                        }
                        t.accumulate(x, gx);
                    }
                });
}

Var Tape::softmax_rows(Var a) {
    Matrix out = value(a);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double mx = out(r, 0);
        for (std::size_t c = 1; c < out.cols(); ++c) mx = std::max(mx, out(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < out.cols(); ++c) {
            out(r, c) = std::exp(out(r, c) - mx);
            sum += out(r, c);
        }
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) /= sum;
    }
    const Var self{nodes_.size()};
    return push(std::move(out), requires_grad(a), [a, self](Tape& t, const Matrix& g) {
        const Matrix& y = t.value(self);
        Matrix gx(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
            for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) = y(r, c) * (g(r, c) - dot);
        }
        t.accumulate(a, gx);
    });
}

Var Tape::slice_rows(Var a, std::size_t first, std::size_t count) {
    const Matrix& av = value(a);
    if (count == 0 || first + count > av.rows()) throw ShapeError("slice_rows: out of range for " + av.shape_str());
    Matrix out(count, av.cols());
    for (std::size_t r = 0; r < count; ++r)
        for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(first + r, c);
    return push(std::move(out), requires_grad(a), [a, first](Tape& t, const Matrix& g) {
        Matrix& slot = t.grad_slot(a);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) slot(first + r, c) += g(r, c);
    });
}

Var Tape::slice_cols(Var a, std::size_t first, std::size_t count) {
    const Matrix& av = value(a);
    if (count == 0 || first + count > av.cols()) throw ShapeError("slice_cols: out of range for " + av.shape_str());
    Matrix out(av.rows(), count);
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, first + c);
    return push(std::move(out), requires_grad(a), [a, first](Tape& t, const Matrix& g) {
        Matrix& slot = t.grad_slot(a);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) slot(r, first + c) += g(r, c);
    });
}

Var Tape::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    bool rg = false;
    for (Var p : parts) {
        if (value(p).cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += value(p).rows();
        rg = rg || requires_grad(p);
    }
    Matrix out(rows, cols);
    std::size_t at = 0;
    for (Var p : parts) {
        const Matrix& pv = value(p);
        for (std::size_t r = 0; r < pv.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) out(at + r, c) = pv(r, c);
        at += pv.rows();
    }
    std::vector<Var> ids(parts.begin(), parts.end());
    return push(std::move(out), rg, [ids = std::move(ids)](Tape& t, const Matrix& g) {
        std::size_t at = 0;
        for (Var p : ids) {
            const std::size_t pr = t.value(p).rows();
            if (t.requires_grad(p)) {
                Matrix& slot = t.grad_slot(p);
                for (std::size_t r = 0; r < pr; ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) slot(r, c) += g(at + r, c);
            }
            at += pr;
        }
    });
}

Var Tape::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    bool rg = false;
    for (Var p : parts) {
        if (value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += value(p).cols();
        rg = rg || requires_grad(p);
    }
    Matrix out(rows, cols);
    std::size_t at = 0;
    for (Var p : parts) {
        const Matrix& pv = value(p);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pv.cols(); ++c) out(r, at + c) = pv(r, c);
        at += pv.cols();
    }
    std::vector<Var> ids(parts.begin(), parts.end());
    return push(std::move(out), rg, [ids = std::move(ids)](Tape& t, const Matrix& g) {
        std::size_t at = 0;
        for (Var p : ids) {
            const std::size_t pc = t.value(p).cols();
            if (t.requires_grad(p)) {
                Matrix& slot = t.grad_slot(p);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < pc; ++c) slot(r, c) += g(r, at + c);
            }
            at += pc;
        }
    });
}

Var Tape::gather(Var a, GatherMap map, std::size_t rows, std::size_t cols) {
    const Matrix& av = value(a);
    if (!map || map->size() != rows * cols) throw ShapeError("gather: map size mismatch");
    Matrix out(rows, cols);
    const auto& idx = *map;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0) continue;
        if (static_cast<std::size_t>(idx[i]) >= av.size()) throw ShapeError("gather: index out of range");
        out[i] = av[static_cast<std::size_t>(idx[i])];
    }
    return push(std::move(out), requires_grad(a), [a, map](Tape& t, const Matrix& g) {
        Matrix& slot = t.grad_slot(a);
        const auto& idx = *map;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= 0) slot[static_cast<std::size_t>(idx[i])] += g[i];
        }
    });
}

Var Tape::rel_pos_bias(Var q, Var rel_h, Var rel_w, std::size_t grid) {
    const Matrix& qv = value(q);
    const Matrix& hv = value(rel_h);
    const Matrix& wv = value(rel_w);
    const std::size_t tokens = grid * grid;
    const std::size_t span = 2 * grid - 1;
    if (qv.cols() != tokens || hv.rows() != span || wv.rows() != span || hv.cols() != qv.rows() ||
        !hv.same_shape(wv)) {
        throw ShapeError("rel_pos_bias: q " + qv.shape_str() + ", rel " + hv.shape_str() + ", grid " +
                         std::to_string(grid));
    }
    const std::size_t dh = qv.rows();
    Matrix out(tokens, tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
        const std::size_t hi = i / grid, wi = i % grid;
        for (std::size_t j = 0; j < tokens; ++j) {
            const std::size_t hj = j / grid, wj = j % grid;
            const std::size_t kh = hi + grid - 1 - hj;
            const std::size_t kw = wi + grid - 1 - wj;
            double acc = 0.0;
            for (std::size_t e = 0; e < dh; ++e) acc += qv(e, i) * (hv(kh, e) + wv(kw, e));
            out(i, j) = acc;
        }
    }
    const bool rg = requires_grad(q) || requires_grad(rel_h) || requires_grad(rel_w);
    return push(std::move(out), rg, [q, rel_h, rel_w, grid](Tape& t, const Matrix& g) {
        const Matrix& qv = t.value(q);
        const Matrix& hv = t.value(rel_h);
        const Matrix& wv = t.value(rel_w);
        const std::size_t tokens = grid * grid;
        const std::size_t dh = qv.rows();
        Matrix gq(qv.rows(), qv.cols());
        Matrix gh(hv.rows(), hv.cols());
        Matrix gw(wv.rows(), wv.cols());
        for (std::size_t i = 0; i < tokens; ++i) {
            const std::size_t hi = i / grid, wi = i % grid;
            for (std::size_t j = 0; j < tokens; ++j) {
                const double gij = g(i, j);
                if (gij == 0.0) continue;
                const std::size_t hj = j / grid, wj = j % grid;
                const std::size_t kh = hi + grid - 1 - hj;
                const std::size_t kw = wi + grid - 1 - wj;
                for (std::size_t e = 0; e < dh; ++e) {
                    gq(e, i) += gij * (hv(kh, e) + wv(kw, e));
                    gh(kh, e) += gij * qv(e, i);
                    gw(kw, e) += gij * qv(e, i);
                }
            }
        }
        t.accumulate(q, gq);
        t.accumulate(rel_h, gh);
        t.accumulate(rel_w, gw);
    });
}

}  // namespace fedpeft::ad
