#include "flashsvd/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <string>

namespace flashsvd {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw ShapeError("tensor needs at least one extent");
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extent must be at least 1");
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_numel(shape_) != data_.size())
    throw ShapeError("tensor data size does not match extents");
}

void gemm_accumulate(const float* a, const float* b, float* c,
                     std::size_t m, std::size_t k, std::size_t n) {
  // i-k-j order: each c[i][j] still receives its k terms in ascending order,
  // so per-element rounding matches the naive k-innermost loop bit for bit,
  // while the inner j loop runs over contiguous rows of b and c.
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float aik = arow[kk];
      const float* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

Tensor gemm(const Tensor& a, const Tensor& b, const Tensor* c_init) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("gemm operands must be 2-D");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw ShapeError("gemm inner extents disagree: " + std::to_string(k) +
                     " vs " + std::to_string(b.extent(0)));
  Tensor c({m, n});
  if (c_init) {
    if (!c_init->same_shape(c)) throw ShapeError("gemm c_init shape mismatch");
    for (std::size_t i = 0; i < c.numel(); ++i) c.at(i) = c_init->at(i);
  }
  gemm_accumulate(a.data(), b.data(), c.data(), m, k, n);
  return c;
}

float gelu_erf(float x) {
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
}

float gelu_tanh(float x) {
  const float c = 0.79788456080286535588f;  // sqrt(2/pi)
  float inner = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(inner));
}

float relu(float x) { return x > 0.0f ? x : 0.0f; }

void softmax_row(float* row, std::size_t n) {
  float m = row[0];
  for (std::size_t j = 1; j < n; ++j)
    if (row[j] > m) m = row[j];
  float sum = 0.0f;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - m);
    sum += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
}

void layer_norm_row(const float* x, float* y, std::size_t n,
                    const float* gamma, const float* beta, float eps) {
  float mean = 0.0f;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (std::size_t j = 0; j < n; ++j) {
    float d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<float>(n);
  float inv = 1.0f / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j)
    y[j] = gamma[j] * ((x[j] - mean) * inv) + beta[j];
}

}  // namespace flashsvd
