#pragma once

#include <cstddef>
#include <string>

#include "flashsvd/factorize.hpp"
#include "flashsvd/memtier.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

// Streaming low-rank attention.  Projects the input once into per-group rank
// space (the only metered transients, 3*groups*B*M*r floats), then walks
// query/key tiles per head with an online softmax so no M x M score matrix
// ever exists.  The factor V halves are pinned persistent under pin_prefix;
// out (B, M, d_model) must be pre-shaped by the caller and is not metered
// here.  heads must be a multiple of set.groups.
void flash_svd_attention(const Tensor& x, const AttentionFactorSet& set,
                         std::size_t heads, const TilePlan& plan,
                         MemoryMeter& meter, const std::string& pin_prefix,
                         Tensor& out);

// Baseline that materializes dense Q/K/V from the factors (through a
// rank-width row scratch, never reconstructing the weight matrices) and then
// streams the same online-softmax attention.  Metered peak is exactly the
// three materialized activations, 3*B*M*d_model floats; nothing is pinned.
void naive_lowrank_attention(const Tensor& x, const AttentionFactorSet& set,
                             std::size_t heads, const TilePlan& plan,
                             MemoryMeter& meter, Tensor& out);

// Streaming attention from dense projection weights: materializes Q/K/V
// (3*B*M*d_model transient floats), no score matrix, nothing pinned.
void flash_attention_dense_qkv(const Tensor& x, const Tensor& wq,
                               const Tensor& bq, const Tensor& wk,
                               const Tensor& bk, const Tensor& wv,
                               const Tensor& bv, std::size_t heads,
                               const TilePlan& plan, MemoryMeter& meter,
                               Tensor& out);

// Fully materializing baseline: dense Q/K/V plus the full B x H x M x M score
// tensor, softmax in place.  Metered peak is 3*B*M*d_model + B*H*M^2 floats.
void dense_attention(const Tensor& x, const Tensor& wq, const Tensor& bq,
                     const Tensor& wk, const Tensor& bk, const Tensor& wv,
                     const Tensor& bv, std::size_t heads, MemoryMeter& meter,
                     Tensor& out);

// Low-rank output projection ctx * (U_o V_o) + b via the rank-space
// intermediate (B*M*r transient floats); both factor halves are pinned.
void lowrank_output_projection(const Tensor& ctx, const FactorizedLinear& proj,
                               MemoryMeter& meter, const std::string& pin_prefix,
                               Tensor& out);

void dense_output_projection(const Tensor& ctx, const Tensor& w, const Tensor& b,
                             Tensor& out);

}  // namespace flashsvd
