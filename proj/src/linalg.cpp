// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fedpeft/errors.hpp"

namespace fedpeft {

namespace {

constexpr double kJacobiTolerance = 1e-12;
constexpr int kMaxSweeps = 60;

void require_nonempty(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
        throw ShapeError("matrix dimensions must be >= 1, got " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
}

double dot_columns(const Matrix& m, std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) acc += m(r, i) * m(r, j);
    return acc;
}

// Square, tall-or-equal SVD core. `work` has rows >= cols.
SVDResult jacobi_tall(const Matrix& input) {
    const std::size_t m = input.rows();
    const std::size_t n = input.cols();
    Matrix work = input;
    Matrix v = Matrix::identity(n);

    const double fro = frobenius_norm(input);
    // Columns below this norm are numerically zero.
    const double negligible = kJacobiTolerance * fro;
    const double negligible_sq = negligible * negligible;

    bool converged = (fro == 0.0);
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double alpha = dot_columns(work, i, i);
                const double beta = dot_columns(work, j, j);
                if (alpha <= negligible_sq || beta <= negligible_sq) continue;
                const double gamma = dot_columns(work, i, j);
                if (std::abs(gamma) <= kJacobiTolerance * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double wi = work(r, i);
                    const double wj = work(r, j);
                    work(r, i) = c * wi - s * wj;
                    work(r, j) = s * wi + c * wj;
                }
                for (std::size_t r = 0; r < n; ++r) {
                    const double vi = v(r, i);
                    const double vj = v(r, j);
                    v(r, i) = c * vi - s * vj;
                    v(r, j) = s * vi + c * vj;
                }
            }
        }
        converged = !rotated;
    }
    if (!converged) throw NumericError("svd: Jacobi iteration did not converge within 60 sweeps");

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot_columns(work, j, j));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    SVDResult out{Matrix(m, n), std::vector<double>(n, 0.0), Matrix(n, n)};
    std::vector<bool> needs_completion(n, false);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t src = order[k];
        const double sigma = norms[src];
        if (sigma <= negligible || sigma == 0.0) {
            out.sigma[k] = 0.0;
            needs_completion[k] = true;
        } else {
            out.sigma[k] = sigma;
            for (std::size_t r = 0; r < m; ++r) out.u(r, k) = work(r, src) / sigma;
        }
        for (std::size_t r = 0; r < n; ++r) out.vt(k, r) = v(r, src);
    }

    // Null-space columns of U: Gram-Schmidt over the standard basis.
    for (std::size_t k = 0; k < n; ++k) {
        if (!needs_completion[k]) continue;
        for (std::size_t e = 0; e < m; ++e) {
            std::vector<double> cand(m, 0.0);
            cand[e] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t q = 0; q < n; ++q) {
                    if (q == k || (needs_completion[q] && q > k)) continue;
                    double proj = 0.0;
                    for (std::size_t r = 0; r < m; ++r) proj += out.u(r, q) * cand[r];
                    for (std::size_t r = 0; r < m; ++r) cand[r] -= proj * out.u(r, q);
                }
            }
            double nrm = 0.0;
            for (double x : cand) nrm += x * x;
            nrm = std::sqrt(nrm);
            if (nrm > 0.5) {
                for (std::size_t r = 0; r < m; ++r) out.u(r, k) = cand[r] / nrm;
                break;
            }
        }
    }

    // Sign convention: largest-magnitude entry of each U column is positive.
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t r = 0; r < m; ++r) {
            if (std::abs(out.u(r, k)) > best + 1e-14) {
                best = std::abs(out.u(r, k));
                arg = r;
            }
        }
        if (out.u(arg, k) < 0.0) {
            for (std::size_t r = 0; r < m; ++r) out.u(r, k) = -out.u(r, k);
            for (std::size_t c = 0; c < n; ++c) out.vt(k, c) = -out.vt(k, c);
        }
    }
    return out;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_() {
    require_nonempty(rows, cols);
    data_.assign(rows * cols, fill);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_nonempty(rows, cols);
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0), data_() {
    require_nonempty(rows_, cols_);
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
        if (row.size() != cols_) throw ShapeError("ragged matrix literal");
        data_.insert(data_.end(), row.begin(), row.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
}

Matrix Matrix::column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape_str() const {
    std::ostringstream os;
    os << rows_ << "x" << cols_;
    return os.str();
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("add: " + shape_str() + " vs " + other.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("sub: " + shape_str() + " vs " + other.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
    for (double& x : data_) x *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite()) throw NumericError(std::string(what) + ": non-finite entries");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = &out(i, 0);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.values().data() + k * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    require_finite(out, "matmul");
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
    return out;
}

Matrix weighted_sum(std::span<const Matrix> mats, std::span<const double> weights) {
    if (mats.empty()) throw ShapeError("weighted_sum: empty matrix list");
    if (mats.size() != weights.size()) {
        throw ShapeError("weighted_sum: " + std::to_string(mats.size()) + " matrices but " +
                         std::to_string(weights.size()) + " weights");
    }
    for (double w : weights) {
        if (!std::isfinite(w)) throw NumericError("weighted_sum: non-finite weight");
    }
    Matrix out(mats[0].rows(), mats[0].cols());
    for (std::size_t k = 0; k < mats.size(); ++k) {
        if (!mats[k].same_shape(out)) {
            throw ShapeError("weighted_sum: shape " + mats[k].shape_str() + " vs " + out.shape_str());
        }
        const double w = weights[k];
        if (w == 0.0) continue;
        auto src = mats[k].values();
        auto dst = out.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    }
    require_finite(out, "weighted_sum");
    return out;
}

double frobenius_norm(const Matrix& m) noexcept {
    double acc = 0.0;
    for (double x : m.values()) acc += x * x;
    return std::sqrt(acc);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

SVDResult svd(const Matrix& m) {
    require_finite(m, "svd");
    if (m.rows() >= m.cols()) return jacobi_tall(m);
    // Wide input: factor the transpose and swap roles. The sign convention is
    // re-applied afterwards so it refers to the final U.
    SVDResult t = jacobi_tall(transpose(m));
    SVDResult out{transpose(t.vt), std::move(t.sigma), transpose(t.u)};
    const std::size_t k = out.sigma.size();
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t r = 0; r < out.u.rows(); ++r) {
            if (std::abs(out.u(r, c)) > best + 1e-14) {
                best = std::abs(out.u(r, c));
                arg = r;
            }
        }
        if (out.u(arg, c) < 0.0) {
            for (std::size_t r = 0; r < out.u.rows(); ++r) out.u(r, c) = -out.u(r, c);
            for (std::size_t j = 0; j < out.vt.cols(); ++j) out.vt(c, j) = -out.vt(c, j);
        }
    }
    return out;
}

Matrix reconstruct(const SVDResult& s) {
    Matrix scaled = s.u;
    for (std::size_t r = 0; r < scaled.rows(); ++r)
        for (std::size_t c = 0; c < scaled.cols(); ++c) scaled(r, c) *= s.sigma[c];
    return matmul(scaled, s.vt);
}

std::pair<Matrix, Matrix> truncate_svd(const SVDResult& s, std::size_t r) {
    if (r == 0) throw ConfigError("truncate_svd: rank must be >= 1");
    const std::size_t k = s.sigma.size();
    const std::size_t keep = std::min(r, k);
    Matrix b(s.u.rows(), r);
    Matrix a(r, s.vt.cols());
    for (std::size_t c = 0; c < keep; ++c) {
        const double root = std::sqrt(std::max(0.0, s.sigma[c]));
        for (std::size_t i = 0; i < b.rows(); ++i) b(i, c) = s.u(i, c) * root;
        for (std::size_t j = 0; j < a.cols(); ++j) a(c, j) = root * s.vt(c, j);
    }
    return {std::move(b), std::move(a)};
}

double tail_energy(const SVDResult& s, std::size_t r) {
    double acc = 0.0;
    for (std::size_t i = r; i < s.sigma.size(); ++i) acc += s.sigma[i] * s.sigma[i];
    return std::sqrt(acc);
}

}  // namespace fedpeft
