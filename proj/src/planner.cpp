#include "flashsvd/planner.hpp"

#include <algorithm>

#include "flashsvd/errors.hpp"

namespace flashsvd {

/*
  Counting rules, shared with the meter.

  Activation-memory threshold.  Streamed grouped attention holds
  3*G*B*M*r transient floats (rank projections) plus 3*r*D_A pinned floats
  (V halves); the dense-QKV streaming baseline holds 3*B*M*D_A and pins
  nothing.  Low rank wins iff
      3*r*(G*B*M + D_A) < 3*B*M*D_A   <=>   r < B*M*D_A / (G*B*M + D_A),
  with G = 1 (whole matrix) and G = H (per head) as named special cases.

  FLOPs.  Every GEMM is 2mkn.  Dense layer: four D_A x D_A projections on
  B*M rows, per-head scores and values (2*B*M^2*D_A each), and the two FFN
  GEMMs.  Factored layer: per-group rank projections X*U (3G of them), tile
  reconstruction P*V back to head width (same total as 3 GEMMs of width
  group_dim), unchanged score/value work, the two-GEMM factored output
  projection, and the four-GEMM factored FFN.  The naive and streaming
  variants execute identical multiplies in different orders.

  Per-rank byte slopes are the derivatives of the meter's closed forms:
  grouped attention totals 4*3*r*(G*B*M + D_A) bytes, FFN V1 totals
  4*(2*B*M*r + 2*r*(D_A + D_F)), FFN V2 pins 4*2*r*(D_A + D_F) only.

  Decoder.  Keys and values live in rank space, cached for every layer:
  2*L*B*M*r floats after prefill.  Prefill additionally streams the
  encoder-style transients at full length (3*B*M*r attention, 2*B*M*r FFN).
  A decode step at position t holds the cache grown to t, one row of
  rank-space scores against the t-1 previous positions, and the per-token
  transients 5*B*r -- the same per-row constants the encoder meter charges.
*/

namespace {

void require_layers(const Geometry& geom) {
  if (geom.layers == 0) throw ConfigError("decoder needs at least one layer");
}

}  // namespace

Rational memory_threshold(const Geometry& geom, ThresholdMode mode) {
  geom.validate();
  const std::int64_t bm = std::int64_t(geom.batch) * std::int64_t(geom.seq_len);
  const std::int64_t da = std::int64_t(geom.d_model);
  std::int64_t blocks = 1;
  switch (mode) {
    case ThresholdMode::SingleHead: blocks = 1; break;
    case ThresholdMode::MultiHead: blocks = std::int64_t(geom.heads); break;
    case ThresholdMode::Grouped: blocks = std::int64_t(geom.groups); break;
  }
  return Rational(bm * da, blocks * bm + da);
}

std::uint64_t flops_exact(const Geometry& geom, RunMode mode) {
  geom.validate();
  const std::uint64_t b = geom.batch, m = geom.seq_len, da = geom.d_model,
                      df = geom.d_ff, h = geom.heads, g = geom.groups,
                      r = geom.rank;
  const std::uint64_t bm = b * m;
  const std::uint64_t dh = da / h;
  const std::uint64_t score_value =
      b * h * (gemm_flops(m, dh, m) + gemm_flops(m, m, dh));
  if (mode == RunMode::Dense) {
    return 4 * gemm_flops(bm, da, da) + score_value +
           gemm_flops(bm, da, df) + gemm_flops(bm, df, da);
  }
  const std::uint64_t rank_proj = 3 * g * gemm_flops(bm, da, r);
  const std::uint64_t reconstruct = 3 * g * gemm_flops(bm, r, da / g);
  const std::uint64_t out_proj = gemm_flops(bm, da, r) + gemm_flops(bm, r, da);
  const std::uint64_t ffn = gemm_flops(bm, da, r) + gemm_flops(bm, r, df) +
                            gemm_flops(bm, df, r) + gemm_flops(bm, r, da);
  return rank_proj + reconstruct + score_value + out_proj + ffn;
}

Rational speedup_closed_form(const Geometry& geom) {
  geom.validate();
  const std::int64_t da = std::int64_t(geom.d_model);
  const std::int64_t df = std::int64_t(geom.d_ff);
  const std::int64_t r = std::int64_t(geom.rank);
  return Rational(da * da + da * df, r * da + r * r + r * df);
}

IoBytes io_bytes(const Geometry& geom, RunMode mode) {
  geom.validate();
  const std::uint64_t bm = std::uint64_t(geom.batch) * geom.seq_len;
  const std::uint64_t da = geom.d_model, df = geom.d_ff, r = geom.rank;
  IoBytes io;
  io.out = 4 * 2 * bm * da;
  io.in = mode == RunMode::Dense ? 4 * (3 * bm * da + 2 * bm * df)
                                 : 4 * (4 * bm * r + 3 * r * da + 2 * r * df);
  return io;
}

double roofline_latency(double flops, double bytes_total,
                        const HardwareModel& hw) {
  if (!(hw.peak_flops > 0.0) || !(hw.beta > 0.0))
    throw ConfigError("hardware rates must be positive");
  if (!(flops >= 0.0) || !(bytes_total >= 0.0))
    throw ConfigError("roofline work terms must be nonnegative");
  return std::max(flops / hw.peak_flops, bytes_total / hw.beta);
}

std::size_t delta_memory_per_rank(const Geometry& geom, FormulaId id) {
  geom.validate();
  const std::size_t bm = geom.batch * geom.seq_len;
  const std::size_t da = geom.d_model, df = geom.d_ff;
  switch (id) {
    case FormulaId::FlashSvdAttn: return 4 * 3 * (geom.heads * bm + da);
    case FormulaId::GroupedAttn: return 4 * 3 * (geom.groups * bm + da);
    case FormulaId::FfnV1: return 4 * (2 * bm + 2 * da + 2 * df);
    case FormulaId::FfnV2: return 4 * (2 * da + 2 * df);
    default: break;
  }
  throw ConfigError("formula has no per-rank memory slope");
}

std::size_t decoder_kv_cache_bytes(const Geometry& geom) {
  geom.validate();
  require_layers(geom);
  return 4 * 2 * geom.layers * geom.batch * geom.seq_len * geom.rank;
}

std::size_t decoder_prefill_bytes(const Geometry& geom) {
  const std::size_t bmr = geom.batch * geom.seq_len * geom.rank;
  return decoder_kv_cache_bytes(geom) + 4 * (3 * bmr + 2 * bmr);
}

std::size_t decoder_decode_step_bytes(const Geometry& geom, std::size_t t) {
  geom.validate();
  require_layers(geom);
  if (t < 1 || t > geom.seq_len)
    throw ConfigError("decode step must lie in [1, seq_len]");
  const std::size_t br = geom.batch * geom.rank;
  return 4 * (2 * geom.layers * br * t + br * (t - 1) + 5 * br);
}

FfnDominance ffn_dominance_check(const Geometry& geom) {
  geom.validate();
  const std::int64_t bm = std::int64_t(geom.batch) * std::int64_t(geom.seq_len);
  const std::int64_t da = std::int64_t(geom.d_model);
  const std::int64_t df = std::int64_t(geom.d_ff);
  const std::int64_t r = std::int64_t(geom.rank);
  FfnDominance result;
  result.ffn_dominates =
      bm * df > 3 * r * (std::int64_t(geom.heads) * bm + da);
  result.ratio = Rational(bm * df, r * (bm + da));
  return result;
}

}  // namespace flashsvd
