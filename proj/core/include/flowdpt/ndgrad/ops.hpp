#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flowdpt/ndgrad/graph.hpp"

// Differentiable operators over rank-2 arrays. Every op records its forward
// value on the operands' graph together with an adjoint, and throws
// ShapeError when operands do not conform.
namespace flowdpt::nd {

Var matmul(Var a, Var b);
// Elementwise; b may also be a [1, n] row broadcast over the rows of a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
// out[i] = table[indices[i]]; the adjoint scatter-adds.
Var gather_rows(Var table, std::span<const std::size_t> indices);
// [1, n] -> [rows, n]
Var broadcast_rows(Var a, std::size_t rows);

Var softmax_rows(Var a);
// Row-wise normalization with variance + eps in the denominator, then
// gain/bias ([1, n] each). Rows with zero variance normalize to exact zeros.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

Var gelu(Var a);  // tanh approximation
Var silu(Var a);
Var exp(Var a);
Var sin(Var a);
Var cos(Var a);
Var square(Var a);
// Gradient passes only where lo <= a <= hi.
Var clamp(Var a, double lo, double hi);

Var sum(Var a);
Var mean(Var a);

// Multi-head causal self-attention. q, k, v are [rows, d] with d divisible
// by n_heads. Rows form consecutive independent sequences of seq_len rows
// (0 means a single sequence); row i of a sequence attends to rows 0..i of
// the same sequence only.
Var causal_self_attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len = 0);

}  // namespace flowdpt::nd
