// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "dimple/tensor.hpp"

namespace dimple {

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise binary ops. Operands must have equal shapes, or one of them must
// hold a single value (scalar broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// Elementwise unary ops.
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor tanh(const Tensor& x);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Stable softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);
// log(softmax(x)) along the last axis, via log-sum-exp.
Tensor log_softmax(const Tensor& x);

// Normalizes each vector along the last axis to zero mean and unit variance,
// then applies gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x[m×n] + bias[n] added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Scales every row of a matrix to unit L2 norm. Zero rows raise
// DegenerateProjectionError.
Tensor normalize_rows(const Tensor& x);

// Structural ops on matrices.
Tensor pick(const Tensor& x, std::span<const int> columns);        // y[i] = x[i, columns[i]]
Tensor gather_rows(const Tensor& x, std::span<const int> indices);  // y[i, :] = x[indices[i], :]
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, Shape shape);

// Sequence helpers for a batch of equal-length sequences stacked row-wise
// into one [num_seq * seq_len × d] matrix.
Tensor tile_rows(const Tensor& x, std::size_t times);  // [times * m × n]
// Overwrites rows offset .. offset + rows.rows() of every sequence with `rows`.
Tensor inject_rows(const Tensor& x, const Tensor& rows, std::size_t seq_len, std::size_t offset);
// Scaled dot-product attention computed independently per sequence and head.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                            std::size_t num_heads);

// Kernel-statistics helpers.
Tensor pairwise_sq_dists(const Tensor& x);  // D[i][j] = ||x_i - x_j||^2
Tensor center_gram(const Tensor& k);        // H K H with H = I - 11^T / n

}  // namespace dimple
