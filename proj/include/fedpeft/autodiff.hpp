// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fedpeft/linalg.hpp"

namespace fedpeft::ad {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

/// Index map for Tape::gather. Entry i names the flat source index of output
/// element i, or -1 for a structural zero.
using GatherMap = std::shared_ptr<const std::vector<std::ptrdiff_t>>;

// Reverse-mode tape over matrices. Gradients are only propagated into
// values that require them, so frozen weights cost nothing on the way back.
class Tape {
public:
    Var constant(Matrix value);
    Var leaf(Matrix value, bool requires_grad);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    /// Accumulated gradient; a zero matrix if nothing flowed into `v`.
    Matrix grad(Var v) const;

    /// Seeds d(out) = seed and runs every recorded backward rule.
    void backward(Var out, const Matrix& seed);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var add_col(Var a, Var column);  // broadcast a rows x 1 column over a's columns
    Var scale(Var a, double s);
    Var transpose(Var a);
    Var gelu(Var a);
    Var layer_norm_cols(Var x, Var gamma, Var beta, double eps);
    Var softmax_rows(Var a);
    Var slice_rows(Var a, std::size_t first, std::size_t count);
    Var slice_cols(Var a, std::size_t first, std::size_t count);
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(std::span<const Var> parts);
    Var gather(Var a, GatherMap map, std::size_t rows, std::size_t cols);

    /// Decomposed relative-position attention bias on a grid x grid token
    /// layout: out(i, j) = q_i . rel_h[hi - hj + grid - 1] + q_i . rel_w[wi - wj + grid - 1].
    /// q is head_dim x T, rel_h / rel_w are (2 grid - 1) x head_dim.
    Var rel_pos_bias(Var q, Var rel_h, Var rel_w, std::size_t grid);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::function<void(Tape&, const Matrix&)> backward;
    };

    Var push(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> backward);
    void accumulate(Var target, const Matrix& g);
    Matrix& grad_slot(Var target);

    std::vector<Node> nodes_;
};

double gelu(double x) noexcept;
double gelu_derivative(double x) noexcept;

}  // namespace fedpeft::ad
