#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "flashsvd/errors.hpp"

namespace flashsvd {

// Dense row-major tensor of 32-bit floats. Extents are fixed at construction;
// every extent is at least 1. This is the storage type for activations and
// weights; kernels index raw spans of it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t extent(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float& at(std::size_t i) { return data_[i]; }
  float at(std::size_t i) const { return data_[i]; }
  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

// C = A * B (+ C_init). 2-D operands; k accumulates in ascending order per
// output element, so the result is bit-identical to the naive triple loop.
Tensor gemm(const Tensor& a, const Tensor& b, const Tensor* c_init = nullptr);

// Same contract on raw row-major spans; accumulates into c (caller clears or
// preloads it). Used by the kernels on tile buffers.
void gemm_accumulate(const float* a, const float* b, float* c,
                     std::size_t m, std::size_t k, std::size_t n);

// Thin SVD, A (m x n) = U diag(S) Vt with p = min(m, n) columns kept.
// Deterministic: one-sided cyclic Jacobi in 64-bit arithmetic, results stored
// in 32 bits; the largest-magnitude entry of each U column is positive, and
// equal singular values keep their ascending pre-sort column order.
struct SvdResult {
  Tensor u;               // m x p
  std::vector<float> s;   // p, descending
  Tensor vt;              // p x n
};
SvdResult svd(const Tensor& a);

// 64-bit variant of the same routine; reference path for accuracy checks.
struct SvdResult64 {
  std::vector<double> u;   // m x p row-major
  std::vector<double> s;   // p, descending
  std::vector<double> vt;  // p x n row-major
  std::size_t m = 0, n = 0, p = 0;
};
SvdResult64 svd64(const std::vector<double>& a, std::size_t m, std::size_t n);

// Even singular-value split at rank r: U_r = U[:, :r] * sqrt(S_r),
// V_r = sqrt(S_r) * Vt[:r, :]. Product U_r * V_r is the Frobenius-optimal
// rank-r approximation; the split balances the factor norms.
struct LowRankPair {
  Tensor u;  // m x r
  Tensor v;  // r x n
};
LowRankPair truncate_even_split(const SvdResult& f, std::size_t r);

// Leading-r factors of A computed without materializing the full basis. Same
// Jacobi engine; tall inputs go through a Householder QR precondition first.
LowRankPair factor_rank_r(const Tensor& a, std::size_t r);

// Elementwise / rowwise ops shared by the kernels.
float gelu_erf(float x);        // exact-erf GELU
float gelu_tanh(float x);       // tanh approximation
float relu(float x);

// In-place max-subtracted softmax over one row of length n. Sums to 1.
void softmax_row(float* row, std::size_t n);

// y = gamma * (x - mean) / sqrt(var + eps) + beta over the last axis.
void layer_norm_row(const float* x, float* y, std::size_t n,
                    const float* gamma, const float* beta, float eps);

}  // namespace flashsvd
