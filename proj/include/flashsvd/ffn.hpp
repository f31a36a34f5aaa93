#pragma once

#include <cstddef>
#include <string>

#include "flashsvd/factorize.hpp"
#include "flashsvd/memtier.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

enum class Activation { GeluErf, GeluTanh, Relu, Identity };

// Factor pairs for both FFN projections, sharing one rank:
// up: W_in (d_model x d_ff) ~ U (d_model x r) V (r x d_ff), bias d_ff;
// down: W_out (d_ff x d_model) ~ U (d_ff x r) V (r x d_model), bias d_model.
struct FfnFactors {
  FactorizedLinear up;
  FactorizedLinear down;
  Activation activation = Activation::GeluErf;
};

FfnFactors factorize_ffn(const Tensor& w_in, const Tensor& b_in,
                         const Tensor& w_out, const Tensor& b_out,
                         std::size_t rank,
                         Activation act = Activation::GeluErf);

// Streaming FFN, variant 1: projects into rank space (P = X*U_up), loops
// feature blocks keeping the d_ff-wide activation on-chip only, accumulates
// the down-projected rank activation Z, then expands Z once at the end.  The
// metered transients are exactly P and Z: 2*B*M*r floats.  All four factor
// halves are pinned under pin_prefix.
void ffn_v1(const Tensor& x, const FfnFactors& f, const TilePlan& plan,
            MemoryMeter& meter, const std::string& pin_prefix, Tensor& out);

// Streaming FFN, variant 2: fully fused.  Each sequence tile recomputes its
// rank projection on-chip, streams the feature blocks, and writes finished
// output rows directly; no off-chip intermediate exists at all, so the
// metered transient peak is zero.
void ffn_v2(const Tensor& x, const FfnFactors& f, const TilePlan& plan,
            MemoryMeter& meter, const std::string& pin_prefix, Tensor& out);

// Dense baseline: materializes the full B*M*d_ff hidden activation.
void ffn_dense(const Tensor& x, const Tensor& w_in, const Tensor& b_in,
               const Tensor& w_out, const Tensor& b_out, Activation act,
               MemoryMeter& meter, Tensor& out);

// Low-rank weights but a materialized B*M*d_ff hidden activation (through a
// rank-width row scratch, never reconstructing the weights): the
// demonstration that factorizing alone saves no activation memory.
void ffn_naive_lowrank(const Tensor& x, const FfnFactors& f, MemoryMeter& meter,
                       Tensor& out);

}  // namespace flashsvd
