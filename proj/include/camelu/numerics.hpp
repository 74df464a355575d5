#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "camelu/tensor.hpp"

// Value-level tensor kernels. The autodiff layer (autodiff.hpp) records
// these on a tape; they are also usable directly on plain tensors.
namespace camelu {

// [M x K] . [K x N] -> [M x N]
Tensor matmul(const Tensor& a, const Tensor& b);
// a^T . b and a . b^T without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Numerically stable softmax along `axis` (max subtraction).
Tensor softmax(const Tensor& x, std::size_t axis);

struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> rstd;  // 1 / sqrt(var + eps)
};

// Normalizes over the last axis, then applies gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  LayerNormStats* stats = nullptr);

// x * Phi(x) with the exact Gaussian CDF.
double gelu(double x) noexcept;
double gelu_grad(double x) noexcept;
Tensor gelu(const Tensor& x);

// -log softmax(logits)[label] for a single row of logits.
double cross_entropy(std::span<const double> logits, std::size_t label);
double cross_entropy(const Tensor& logits, std::size_t label);

// Multi-head self-attention over `n_seq` independent sequences of `seq_len`
// tokens stacked row-wise. qkv is [n_seq*seq_len x 3d] laid out as
// [Q | K | V]; every token attends to every token of its own sequence (no
// mask, no positions). Returns [n_seq*seq_len x d]. When `probs` is given it
// receives the attention weights, n_seq*heads blocks of seq_len x seq_len.
Tensor block_attention(const Tensor& qkv, std::size_t n_seq, std::size_t seq_len, std::size_t heads,
                       std::vector<double>* probs = nullptr);

}  // namespace camelu
