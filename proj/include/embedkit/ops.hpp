#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

// Differentiable ops. Every op computes its forward eagerly and, when a tape
// is active, records a backward rule that accumulates into input gradients.

Tensor matmul(const Tensor& a, const Tensor& b);
// Batched product over the leading axis: [n,m,k] x [n,k,p] (or [n,p,k] with
// transpose_b) -> [n,m,p].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// `b` must match the trailing dims of `a` (bias add, positional add).
Tensor add_broadcast(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<Index>& axes);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, Index axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
// Inverted dropout; identity when !train or rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool train);

// Unit-normalizes a rank-2 tensor along `axis` (1: rows, 0: columns).
Tensor l2_normalize(const Tensor& x, Index axis);

// ArcFace margin on a [B,C] cosine matrix: non-target logits s*cos, target
// logits s*cos(theta + m_target), saturating at -s once theta + m >= pi.
Tensor angular_margin(const Tensor& cosines, std::span<const int> targets,
                      std::span<const double> class_margins, double scale);

// Mean negative log-likelihood of `targets` under softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// [B,N,D] -> [B,N+1,D] with `token` (shape [D]) in slot 0.
Tensor prepend_token(const Tensor& x, const Tensor& token);
// [B,T,D] -> [B,D] for a fixed token position.
Tensor select_token(const Tensor& x, Index position);

// y = x W + b on the last axis of x, for any leading shape.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace embedkit
