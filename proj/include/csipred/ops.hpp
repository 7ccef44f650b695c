#pragma once

#include <vector>

#include "csipred/tensor.hpp"

namespace csipred {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, real_t c);
Tensor mul_scalar(const Tensor& a, real_t c);
inline Tensor neg(const Tensor& a) { return mul_scalar(a, real_t(-1)); }

// Elementwise nonlinearities.
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sqrt(const Tensor& x);

// Reductions.
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_last(const Tensor& x);   // [..,k] -> [..]   (rank-1 input -> [1])
Tensor mean_last(const Tensor& x);  // [..,k] -> [..]
Tensor dot(const Tensor& a, const Tensor& b);  // rank-1 x rank-1 -> [1]

// Matrix products. matmul dispatches on rank:
//   [m,k] x [k,n]    -> [m,n]
//   [B,m,k] x [k,n]  -> [B,m,n]   (shared right operand)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,n,k] x [B,k,m] -> [B,n,m]
Tensor bmm_nt(const Tensor& a, const Tensor& b);  // [B,n,k] x [B,m,k] -> [B,n,m]
Tensor transpose(const Tensor& x);                // rank-2

// Softmax along the last axis (rank 1..3); rows are non-negative and sum
// to 1, computed with max-subtraction. NaN input raises NumericError.
Tensor softmax_last(const Tensor& x);
// Rank-2 softmax along the given axis (0 or 1).
Tensor softmax(const Tensor& x, int axis);

// Layer normalization along the last axis, eps = 1e-5 inside the sqrt.
Tensor layer_norm_last(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Rank-2 with explicit axis (0 or 1); the normalized axis extent must be >= 2.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis);

// Shape surgery. Axis conventions: rank-2 supports axis 0/1; rank-3 supports
// axis 1/2 (batch axis 0 is never cut).
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& x, int n_parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor stack_rows(const std::vector<Tensor>& mats);  // B x [n,c] -> [B,n,c]
Tensor reshape(const Tensor& x, Shape shape);

// Broadcast helpers.
Tensor add_bias(const Tensor& x, const Tensor& b);          // [..,k] + [k]
Tensor add_broadcast(const Tensor& x, const Tensor& m);     // [B,n,k] + [n,k]
Tensor scale_rows(const Tensor& x, const Tensor& s);        // [r,c] * s[r] per row

// Row gather with scatter-add gradient into the source matrix.
Tensor gather_rows(const Tensor& w, const std::vector<int>& ids);

// Mean next-token cross-entropy from logits [n,V] against integer targets.
Tensor ce_with_logits(const Tensor& logits, const std::vector<int>& targets);

// KL divergence between row-stochastic matrices (rank 2 or 3), averaged over
// rows. Inputs must be row-stochastic within 1e-6 (ContractError otherwise).
Tensor kl_div(const Tensor& p, const Tensor& q);

// Closed-form Xavier-uniform init for a [fan_in, fan_out] linear map.
Tensor xavier_uniform(int fan_in, int fan_out, Rng& rng);

}  // namespace csipred
