#pragma once

#include <cstddef>
#include <cstdint>

#include "flashsvd/encoder.hpp"
#include "flashsvd/geometry.hpp"
#include "flashsvd/memtier.hpp"
#include "flashsvd/rational.hpp"

namespace flashsvd {

// Closed-form analytics over a Geometry: compression thresholds, exact FLOP
// counts, I/O volumes, roofline latency bounds, per-rank memory deltas, and
// decoder-side memory estimates.  Every byte formula here uses the same
// counting rules as the metered kernels; the tests run both routes and
// require them to agree exactly.

// Which denominator the activation-memory threshold uses: whole-matrix
// factorization, per-head (groups == heads), or the geometry's group count.
enum class ThresholdMode { SingleHead, MultiHead, Grouped };

// Exact rank bound below which streamed low-rank attention activations
// (transient rank projections plus pinned V halves) undercut the dense-QKV
// streaming baseline's 3*B*M*D_A floats:
//   single:  B*M*D_A / (B*M + D_A)
//   multi:   B*M*D_A / (H*B*M + D_A)
//   grouped: B*M*D_A / (G*B*M + D_A)
// Compression saves memory iff r < bound, compared exactly (rank_below).
Rational memory_threshold(const Geometry& geom, ThresholdMode mode);

// Multiply-add count of one m x k by k x n product.
constexpr std::uint64_t gemm_flops(std::uint64_t m, std::uint64_t k,
                                   std::uint64_t n) {
  return 2 * m * k * n;
}

// Exact FLOP total (2mkn per GEMM) of one encoder layer under the given run
// mode's actual schedule.  Dense: q/k/v/out projections, scores, values, two
// FFN GEMMs.  All factored modes execute the same multiplies -- rank
// projections, head-width tile reconstruction, the identical score/value work
// (tiles are reconstructed to head width before scoring), factored output
// projection, and the four-GEMM factored FFN -- so NaiveLowRank, FlashV1 and
// FlashV2 report one number; the streaming variants only reorder it.
std::uint64_t flops_exact(const Geometry& geom, RunMode mode);

// The closed-form asymptotic projection speedup
//   (D_A^2 + D_A*D_F) / (r*D_A + r^2 + r*D_F)
// as an exact rational.  Its r^2 term charges score work in rank space; the
// streaming kernels instead reconstruct head-width tiles before scoring, so
// this ratio is not flops_exact(dense)/flops_exact(low-rank).  Both views are
// exposed and never conflated: use flops_exact for kernel truth.
Rational speedup_closed_form(const Geometry& geom);

// Off-chip traffic model for one layer: bytes read (activations streamed in
// plus weights or factors) and bytes written back.
//   dense:    in = 4*(3*B*M*D_A + 2*B*M*D_F)
//   low-rank: in = 4*(4*B*M*r + 3*r*D_A + 2*r*D_F)
//   out      = 4*2*B*M*D_A in every mode (same output tensors).
// NaiveLowRank moves the same factor and activation bytes as the streaming
// variants; its extra cost is the materialized intermediate the memory model
// charges, not in/out volume.
struct IoBytes {
  std::uint64_t in = 0;
  std::uint64_t out = 0;
};
IoBytes io_bytes(const Geometry& geom, RunMode mode);

struct HardwareModel {
  double peak_flops = 0.0;           // FLOP/s
  double beta = 0.0;                 // memory bandwidth, bytes/s
  std::size_t bytes_per_element = 4;
};

// Lower bound on wall time: max(flops / peak_flops, bytes_total / beta).
// Rates must be positive and work nonnegative (ConfigError otherwise).
double roofline_latency(double flops, double bytes_total,
                        const HardwareModel& hw);

// Exact bytes saved per unit drop in rank, matching the meter's counting:
//   FlashSvdAttn: 4*3*(H*B*M + D_A)   transient slope 3*H*B*M, pinned 3*D_A
//   GroupedAttn:  4*3*(G*B*M + D_A)
//   FfnV1:        4*(2*B*M + 2*D_A + 2*D_F)
//   FfnV2:        4*(2*D_A + 2*D_F)   pins only; independent of B and M
// Any other FormulaId has no rank slope -> ConfigError.
std::size_t delta_memory_per_rank(const Geometry& geom, FormulaId id);

// Decoder-side estimates, built from the same counting constants the meter
// charges the encoder kernels.  The cache holds rank-space keys and values
// for every layer: 2*L*B*M*r floats.
std::size_t decoder_kv_cache_bytes(const Geometry& geom);

// Prefill: the full cache plus the full-length streaming transients (3*B*M*r
// attention rank projections, 2*B*M*r FFN rank buffers).
std::size_t decoder_prefill_bytes(const Geometry& geom);

// One decode step at position t (1-based, t <= seq_len): cache grown to t,
// streamed rank-space scores against the t-1 previous positions, and the
// per-token transients (3*B*r attention + 2*B*r FFN).  Never exceeds
// prefill for the same geometry.
std::size_t decoder_decode_step_bytes(const Geometry& geom, std::size_t t);

// Does the dense FFN activation (4*B*M*D_F bytes) outweigh the whole
// streamed per-head low-rank attention footprint, 4*(3*H*B*M*r + 3*r*D_A)
// bytes?  If so, compressing attention alone leaves the FFN as the memory
// bottleneck.  ratio is the leading-order form B*M*D_F / (r*(B*M + D_A)).
struct FfnDominance {
  bool ffn_dominates = false;
  Rational ratio;
};
FfnDominance ffn_dominance_check(const Geometry& geom);

}  // namespace flashsvd
