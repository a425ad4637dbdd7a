// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fedpeft {

// Dense row-major matrix of doubles. Always at least 1x1.
class Matrix {
public:
    Matrix() : Matrix(1, 1) {}
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix column(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    std::string shape_str() const;
    bool all_finite() const noexcept;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s) noexcept;

    friend bool operator==(const Matrix& a, const Matrix& b) noexcept {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

/// Throws NumericError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix weighted_sum(std::span<const Matrix> mats, std::span<const double> weights);

double frobenius_norm(const Matrix& m) noexcept;
double max_abs_diff(const Matrix& a, const Matrix& b);

// Thin SVD: m = u * diag(sigma) * vt with k = min(rows, cols).
struct SVDResult {
    Matrix u;                   // rows x k, orthonormal columns
    std::vector<double> sigma;  // k values, non-increasing, >= 0
    Matrix vt;                  // k x cols, orthonormal rows
};

/// One-sided Jacobi SVD. Each U column's largest-magnitude entry is positive.
/// Throws NumericError on non-finite input or if 60 sweeps do not converge.
SVDResult svd(const Matrix& m);

/// U * diag(sigma) * Vt.
Matrix reconstruct(const SVDResult& s);

/// Rank-r factors with the singular values split evenly:
/// B = U_r * diag(sqrt(sigma_r)), A = diag(sqrt(sigma_r)) * Vt_r.
/// Keeps min(r, k) triplets; when r > k the factors are zero-padded to r.
std::pair<Matrix, Matrix> truncate_svd(const SVDResult& s, std::size_t r);

/// sqrt(sum of squared singular values beyond the first r): the optimal
/// rank-r Frobenius residual.
double tail_energy(const SVDResult& s, std::size_t r);

}  // namespace fedpeft
