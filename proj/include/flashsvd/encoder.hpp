#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "flashsvd/attention.hpp"
#include "flashsvd/factorize.hpp"
#include "flashsvd/ffn.hpp"
#include "flashsvd/geometry.hpp"
#include "flashsvd/memtier.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

// Kernel selection for a whole layer: Dense runs the materializing reference
// path on dense weights; NaiveLowRank keeps factorized weights but
// materializes every activation; FlashV1/FlashV2 run the streaming kernels
// (they differ only in the FFN variant).
enum class RunMode { Dense, NaiveLowRank, FlashV1, FlashV2 };

const char* mode_name(RunMode mode);
RunMode parse_run_mode(const std::string& name);

struct LayerNormParams {
  Tensor gamma;  // (d,)
  Tensor beta;   // (d,)
  float eps = 1e-5f;
};

struct DenseAttentionWeights {
  Tensor wq, bq;  // d x d, d
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wo, bo;  // output projection
};

struct DenseFfnWeights {
  Tensor w_in, b_in;    // d x d_ff, d_ff
  Tensor w_out, b_out;  // d_ff x d, d
  Activation activation = Activation::GeluErf;
};

// One encoder layer.  A layer may carry the dense representation, the
// factorized one, or both; run_layer picks by mode and rejects a mode whose
// representation is absent.  LayerNorm is always dense: there is no useful
// low-rank structure in a diagonal scale/shift.
struct EncoderLayer {
  std::optional<DenseAttentionWeights> attn_dense;
  std::optional<DenseFfnWeights> ffn_dense;

  std::optional<AttentionFactorSet> attn_factors;
  std::optional<FactorizedLinear> out_proj;  // paired with attn_factors
  std::optional<FfnFactors> ffn_factors;

  LayerNormParams ln1;
  LayerNormParams ln2;
  std::size_t heads = 1;

  std::size_t d_model() const { return ln1.gamma.numel(); }
  std::size_t d_ff() const;

  // Throws ShapeError/ConfigError unless every representation present is
  // dimensionally consistent and at least one exists per sublayer.
  void validate() const;
};

struct LayerRunOptions {
  // Default is post-LN (original BERT): X' = LN2(Y + FFN(Y)) with
  // Y = LN1(X + Attn(X)).  Pre-LN normalizes sublayer inputs instead and
  // drops the trailing norm: X' = Y + FFN(LN2(Y)) with Y = X + Attn(LN1(X)).
  bool pre_layer_norm = false;
  // Prefix for meter regions and persistent pin tags ("layer" gives regions
  // layer.attn / layer.ffn); run_model appends ".<index>" per layer.
  std::string meter_prefix = "layer";
};

// Applies one encoder layer to x (B, M, d_model), writing x' into out (same
// shape, distinct tensor).  Sublayer inputs/outputs are metered Excluded;
// each sublayer runs inside its own meter region, so the mode-dependent
// transient peak is exactly the kernels' own working buffers.
void run_layer(const Tensor& x, const EncoderLayer& layer, RunMode mode,
               const TilePlan& plan, MemoryMeter& meter, Tensor& out,
               const LayerRunOptions& opts = {});

// Sequential layer application.  Transients free between layers, so the meter
// peak is the max over layers; persistent pins accumulate (every layer's
// factors stay resident, tagged by layer index).
void run_model(const Tensor& x, const std::vector<EncoderLayer>& layers,
               RunMode mode, const TilePlan& plan, MemoryMeter& meter,
               Tensor& out, const LayerRunOptions& opts = {});

// Dense twin of a fully factorized layer: every dense weight is the exact
// product of the stored factors, so a Dense run on the twin reproduces what
// the streaming paths target at the factors' accuracy (any gap is kernel
// error, not compression error).  Requires attention, output-projection and
// FFN factors; throws ConfigError otherwise.
EncoderLayer dense_equivalent(const EncoderLayer& layer);

/*
 * Metered footprint of one FlashV1 layer with a uniform rank r across the
 * q/k/v groups, the output projection, and both FFN factors:
 *
 *   peak transient = 4 * 3G*B*M*r          (the q/k/v rank projections; the
 *                                           output projection's B*M*r and the
 *                                           FFN's 2*B*M*r both stay below it)
 *   persistent     = 4 * r*(7*D_A + 2*D_F) (3*r*D_A pinned V halves for q/k/v
 *                                           + 2*r*D_A output projection
 *                                           + 2*r*D_A + 2*r*D_F FFN halves)
 *
 * Their sum is bounded by 4*c*r*(B*M + D_A + D_F) with c = max(3G, 7): 3G
 * covers the transient term and 7 covers every D_A-proportional pin.  The
 * same bound dominates FlashV2, which only shrinks the FFN transients.
 */
std::size_t flash_layer_peak_transient_bytes(const Geometry& geom);
std::size_t flash_layer_persistent_bytes(const Geometry& geom);
std::size_t flash_layer_bound_bytes(const Geometry& geom);

}  // namespace flashsvd
