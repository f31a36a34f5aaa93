#include <doctest.h>

#include <cstddef>
#include <cstdint>

#include "flashsvd/attention.hpp"
#include "flashsvd/errors.hpp"
#include "flashsvd/ffn.hpp"
#include "flashsvd/planner.hpp"
#include "support/oracles.hpp"

using namespace flashsvd;

namespace {

// The meter only looks at shapes, so the cross-check kernels can run on
// factor matrices drawn directly instead of factorizing a dense layer.
AttentionFactorSet rank_factors(std::size_t d, std::size_t groups,
                                std::size_t rank, unsigned seed) {
  AttentionFactorSet set;
  set.d_model = d;
  set.groups = groups;
  set.rank = rank;
  const std::size_t gd = d / groups;
  unsigned s = seed;
  for (auto* m : {&set.q, &set.k, &set.v}) {
    for (std::size_t g = 0; g < groups; ++g) {
      FactorizedLinear f;
      f.u = oracle::random_tensor({d, rank}, s++, 0.3);
      f.v = oracle::random_tensor({rank, gd}, s++, 0.3);
      f.bias = oracle::random_tensor({gd}, s++, 0.1);
      m->push_back(std::move(f));
    }
  }
  return set;
}

FfnFactors rank_ffn(std::size_t d, std::size_t df, std::size_t rank,
                    unsigned seed) {
  FfnFactors f;
  f.up.u = oracle::random_tensor({d, rank}, seed, 0.3);
  f.up.v = oracle::random_tensor({rank, df}, seed + 1, 0.3);
  f.up.bias = oracle::random_tensor({df}, seed + 2, 0.1);
  f.down.u = oracle::random_tensor({df, rank}, seed + 3, 0.3);
  f.down.v = oracle::random_tensor({rank, d}, seed + 4, 0.3);
  f.down.bias = oracle::random_tensor({d}, seed + 5, 0.1);
  return f;
}

// Peak transient + persistent bytes of one streamed low-rank attention run.
std::size_t flash_attention_total(const Tensor& x, std::size_t groups,
                                  std::size_t heads, std::size_t rank,
                                  unsigned seed) {
  const std::size_t d = x.shape()[2];
  AttentionFactorSet set = rank_factors(d, groups, rank, seed);
  Tensor out({x.shape()[0], x.shape()[1], d});
  MemoryMeter meter;
  flash_svd_attention(x, set, heads, TilePlan{}, meter, "attn", out);
  meter.assert_clean();
  return meter.peak_transient_bytes() + meter.persistent_bytes();
}

std::size_t dense_qkv_baseline_total(const Tensor& x, unsigned seed) {
  const std::size_t d = x.shape()[2];
  Tensor wq = oracle::random_tensor({d, d}, seed, 0.3);
  Tensor bq = oracle::random_tensor({d}, seed + 1, 0.1);
  Tensor wk = oracle::random_tensor({d, d}, seed + 2, 0.3);
  Tensor bk = oracle::random_tensor({d}, seed + 3, 0.1);
  Tensor wv = oracle::random_tensor({d, d}, seed + 4, 0.3);
  Tensor bv = oracle::random_tensor({d}, seed + 5, 0.1);
  Tensor out({x.shape()[0], x.shape()[1], d});
  MemoryMeter meter;
  flash_attention_dense_qkv(x, wq, bq, wk, bk, wv, bv, 2, TilePlan{}, meter,
                            out);
  meter.assert_clean();
  return meter.peak_transient_bytes() + meter.persistent_bytes();
}

std::size_t ffn_streamed_total(const Tensor& x, std::size_t df,
                               std::size_t rank, bool v2, unsigned seed) {
  const std::size_t d = x.shape()[2];
  FfnFactors f = rank_ffn(d, df, rank, seed);
  Tensor out({x.shape()[0], x.shape()[1], d});
  MemoryMeter meter;
  if (v2)
    ffn_v2(x, f, TilePlan{}, meter, "ffn", out);
  else
    ffn_v1(x, f, TilePlan{}, meter, "ffn", out);
  meter.assert_clean();
  return meter.peak_transient_bytes() + meter.persistent_bytes();
}

std::size_t ffn_dense_total(const Tensor& x, std::size_t df, unsigned seed) {
  const std::size_t d = x.shape()[2];
  Tensor w_in = oracle::random_tensor({d, df}, seed, 0.3);
  Tensor b_in = oracle::random_tensor({df}, seed + 1, 0.1);
  Tensor w_out = oracle::random_tensor({df, d}, seed + 2, 0.3);
  Tensor b_out = oracle::random_tensor({d}, seed + 3, 0.1);
  Tensor out({x.shape()[0], x.shape()[1], d});
  MemoryMeter meter;
  ffn_dense(x, w_in, b_in, w_out, b_out, Activation::GeluErf, meter, out);
  meter.assert_clean();
  return meter.peak_transient_bytes() + meter.persistent_bytes();
}

// a < b, compared exactly.
bool rational_less(const Rational& a, const Rational& b) {
  return a.num * b.den < b.num * a.den;
}

}  // namespace

TEST_SUITE("planner") {

TEST_CASE("memory thresholds evaluate to the published rationals") {
  Geometry bert{1, 128, 768, 3072, 12, 12, 64, 1};
  Rational single = memory_threshold(bert, ThresholdMode::SingleHead);
  CHECK(single == Rational(98304, 896));
  CHECK(single.value() == doctest::Approx(109.714).epsilon(1e-4));

  Rational multi = memory_threshold(bert, ThresholdMode::MultiHead);
  CHECK(multi == Rational(98304, 2304));
  CHECK(multi.value() == doctest::Approx(42.667).epsilon(1e-3));
  CHECK(memory_threshold(bert, ThresholdMode::Grouped) == multi);  // G == H

  Geometry four = bert;
  four.groups = 4;  // rank 64 <= 192
  CHECK(memory_threshold(four, ThresholdMode::Grouped) ==
        Rational(98304, 4 * 128 + 768));

  Geometry single_head = bert;
  single_head.heads = 1;
  single_head.groups = 1;
  CHECK(memory_threshold(single_head, ThresholdMode::MultiHead) == single);
  CHECK(memory_threshold(single_head, ThresholdMode::Grouped) == single);
}

TEST_CASE("multi-head threshold is the exact crossover on the meter") {
  Geometry g{1, 8, 12, 24, 2, 2, 3, 1};
  Rational bound = memory_threshold(g, ThresholdMode::MultiHead);
  CHECK(bound == Rational(24, 7));  // 96 / (16 + 12)
  CHECK(bound.floor() == 3);
  CHECK(bound.ceil() == 4);
  CHECK(rank_below(3, bound));
  CHECK_FALSE(rank_below(4, bound));

  Tensor x = oracle::random_tensor({1, 8, 12}, 901);
  const std::size_t baseline = dense_qkv_baseline_total(x, 902);
  CHECK(baseline == 4 * 3 * 8 * 12);  // 3*B*M*D_A floats, nothing pinned

  const std::size_t below = flash_attention_total(x, 2, 2, 3, 910);
  const std::size_t above = flash_attention_total(x, 2, 2, 4, 920);
  CHECK(below == 4 * 3 * 3 * (2 * 8 + 12));  // 3r(HBM + D_A) at r = 3
  CHECK(above == 4 * 3 * 4 * (2 * 8 + 12));
  CHECK(below < baseline);
  CHECK(above > baseline);
}

TEST_CASE("closed-form speedup matches hand evaluations") {
  Geometry bert96{1, 128, 768, 3072, 8, 8, 96, 1};
  Rational s = speedup_closed_form(bert96);
  CHECK(s == Rational(2949120, 377856));
  CHECK(s.value() == doctest::Approx(7.805).epsilon(1e-3));

  // r = D_A = D_F collapses the formula to 2/3.
  Geometry square{1, 4, 16, 16, 1, 1, 16, 1};
  CHECK(speedup_closed_form(square) == Rational(2, 3));
}

TEST_CASE("closed-form speedup decreases monotonically in rank") {
  Geometry g{1, 8, 64, 256, 1, 1, 1, 1};
  Rational prev = speedup_closed_form(g);
  for (std::size_t r = 2; r <= 64; ++r) {
    g.rank = r;
    Rational cur = speedup_closed_form(g);
    CAPTURE(r);
    CHECK(rational_less(cur, prev));
    prev = cur;
  }
}

TEST_CASE("flop counter follows the kernel schedule") {
  CHECK(gemm_flops(2, 3, 4) == 48);

  // B=1, M=2, D_A=4, D_F=8, H=2, G=1, r=2; every term written out as 2mkn.
  Geometry tiny{1, 2, 4, 8, 2, 1, 2, 1};
  const std::uint64_t dense_want = 4 * (2 * 2 * 4 * 4)   // q/k/v/out proj
                                   + 2 * (2 * 2 * 2 * 2)  // scores, 2 heads
                                   + 2 * (2 * 2 * 2 * 2)  // values
                                   + (2 * 2 * 4 * 8)      // FFN up
                                   + (2 * 2 * 8 * 4);     // FFN down
  CHECK(dense_want == 576);
  CHECK(flops_exact(tiny, RunMode::Dense) == dense_want);

  const std::uint64_t lowrank_want = 3 * (2 * 2 * 4 * 2)   // rank projections
                                     + 3 * (2 * 2 * 2 * 4)  // reconstruction
                                     + 2 * (2 * 2 * 2 * 2)  // scores
                                     + 2 * (2 * 2 * 2 * 2)  // values
                                     + (2 * 2 * 4 * 2)      // out proj U
                                     + (2 * 2 * 2 * 4)      // out proj V
                                     + (2 * 2 * 4 * 2)      // FFN up U
                                     + (2 * 2 * 2 * 8)      // FFN up V
                                     + (2 * 2 * 8 * 2)      // FFN down U
                                     + (2 * 2 * 2 * 4);     // FFN down V
  CHECK(lowrank_want == 512);
  CHECK(flops_exact(tiny, RunMode::FlashV1) == lowrank_want);
  CHECK(flops_exact(tiny, RunMode::FlashV2) == lowrank_want);
  CHECK(flops_exact(tiny, RunMode::NaiveLowRank) == lowrank_want);

  // Streaming variants and the naive baseline multiply the same numbers at
  // realistic dims too, and compression genuinely cuts arithmetic.
  Geometry bert{1, 128, 768, 3072, 12, 12, 64, 1};
  CHECK(flops_exact(bert, RunMode::FlashV1) ==
        flops_exact(bert, RunMode::FlashV2));
  CHECK(flops_exact(bert, RunMode::FlashV1) ==
        flops_exact(bert, RunMode::NaiveLowRank));
  CHECK(flops_exact(bert, RunMode::FlashV1) <
        flops_exact(bert, RunMode::Dense));
}

TEST_CASE("io volumes evaluate to the closed forms") {
  Geometry bert{1, 128, 768, 3072, 12, 12, 64, 1};
  IoBytes dense = io_bytes(bert, RunMode::Dense);
  CHECK(dense.in == 4325376);  // 4 * (294912 + 786432)
  CHECK(dense.out == 786432);  // 4 * 2 * 128 * 768

  IoBytes lowrank = io_bytes(bert, RunMode::FlashV1);
  CHECK(lowrank.in == 2293760);  // 4 * (32768 + 147456 + 393216)
  CHECK(lowrank.out == dense.out);

  IoBytes v2 = io_bytes(bert, RunMode::FlashV2);
  IoBytes naive = io_bytes(bert, RunMode::NaiveLowRank);
  CHECK(v2.in == lowrank.in);
  CHECK(naive.in == lowrank.in);
}

TEST_CASE("io advantage holds exactly when the closed-form inequality does") {
  for (std::uint64_t b : {1, 2}) {
    for (std::uint64_t m : {8, 64}) {
      for (std::uint64_t df : {64, 128}) {
        for (std::uint64_t r : {1, 8, 16}) {
          Geometry g{b, m, 32, df, 1, 1, r, 1};
          IoBytes dense = io_bytes(g, RunMode::Dense);
          IoBytes lowrank = io_bytes(g, RunMode::FlashV1);
          CAPTURE(b); CAPTURE(m); CAPTURE(df); CAPTURE(r);
          CHECK(dense.out == lowrank.out);
          const bool closed_form = 4 * b * m * r + 3 * r * 32 + 2 * r * df <
                                   3 * b * m * 32 + 2 * b * m * df;
          CHECK((lowrank.in < dense.in) == closed_form);
        }
      }
    }
  }
}

TEST_CASE("roofline latency takes the binding term") {
  HardwareModel hw{1e12, 1e12};
  CHECK(roofline_latency(1e9, 1e6, hw) == doctest::Approx(1e-3));  // compute
  CHECK(roofline_latency(1e6, 1e9, HardwareModel{1e12, 1e9}) ==
        doctest::Approx(1.0));  // bandwidth

  // Continuous through the crossover where both terms bind.
  CHECK(roofline_latency(1e9, 1e9, hw) == doctest::Approx(1e-3));
  const double lo = roofline_latency(1e9, 1e9 * (1 - 1e-6), hw);
  const double hi = roofline_latency(1e9, 1e9 * (1 + 1e-6), hw);
  CHECK(lo == doctest::Approx(1e-3));
  CHECK(hi == doctest::Approx(1e-3));
  CHECK(lo <= hi);

  CHECK_THROWS_AS(roofline_latency(1e9, 1e6, HardwareModel{0.0, 1e9}),
                  ConfigError);
  CHECK_THROWS_AS(roofline_latency(1e9, 1e6, HardwareModel{1e12, -1.0}),
                  ConfigError);
  CHECK_THROWS_AS(roofline_latency(-1.0, 1e6, hw), ConfigError);
}

TEST_CASE("per-rank deltas match meter differences") {
  Geometry wide{2, 64, 64, 128, 4, 4, 8, 1};
  CHECK(delta_memory_per_rank(wide, FormulaId::FlashSvdAttn) == 6912);

  Geometry g{1, 8, 16, 32, 2, 2, 2, 1};
  Tensor x = oracle::random_tensor({1, 8, 16}, 930);

  // Per-head attention: slope 4*3*(H*B*M + D_A).
  const std::size_t attn2 = flash_attention_total(x, 2, 2, 2, 931);
  const std::size_t attn3 = flash_attention_total(x, 2, 2, 3, 932);
  CHECK(attn3 - attn2 == delta_memory_per_rank(g, FormulaId::FlashSvdAttn));
  CHECK(delta_memory_per_rank(g, FormulaId::FlashSvdAttn) ==
        4 * 3 * (2 * 8 + 16));

  // Whole-matrix grouping under the same two heads: slope uses G, and with
  // G = 1 it is the single-head form 4*3*(B*M + D_A).
  Geometry whole = g;
  whole.groups = 1;
  const std::size_t whole2 = flash_attention_total(x, 1, 2, 2, 933);
  const std::size_t whole3 = flash_attention_total(x, 1, 2, 3, 934);
  CHECK(whole3 - whole2 == delta_memory_per_rank(whole, FormulaId::GroupedAttn));
  CHECK(delta_memory_per_rank(whole, FormulaId::GroupedAttn) ==
        4 * 3 * (8 + 16));

  // FFN V1: transients 2*B*M plus all four pinned halves.
  const std::size_t v1_2 = ffn_streamed_total(x, 32, 2, false, 935);
  const std::size_t v1_3 = ffn_streamed_total(x, 32, 3, false, 936);
  CHECK(v1_3 - v1_2 == delta_memory_per_rank(g, FormulaId::FfnV1));
  CHECK(delta_memory_per_rank(g, FormulaId::FfnV1) ==
        4 * (2 * 8 + 2 * 16 + 2 * 32));

  // FFN V2: pins only, so the slope ignores B and M entirely.
  const std::size_t v2_2 = ffn_streamed_total(x, 32, 2, true, 937);
  const std::size_t v2_3 = ffn_streamed_total(x, 32, 3, true, 938);
  CHECK(v2_3 - v2_2 == delta_memory_per_rank(g, FormulaId::FfnV2));
  Tensor x_big = oracle::random_tensor({2, 16, 16}, 939);
  const std::size_t big2 = ffn_streamed_total(x_big, 32, 2, true, 940);
  const std::size_t big3 = ffn_streamed_total(x_big, 32, 3, true, 941);
  CHECK(big3 - big2 == v2_3 - v2_2);
  Geometry other = g;
  other.batch = 4;
  other.seq_len = 128;
  CHECK(delta_memory_per_rank(other, FormulaId::FfnV2) ==
        delta_memory_per_rank(g, FormulaId::FfnV2));

  // Baselines have no rank to vary.
  CHECK_THROWS_AS(delta_memory_per_rank(g, FormulaId::DenseAttn), ConfigError);
  CHECK_THROWS_AS(delta_memory_per_rank(g, FormulaId::FlashAttnDenseQkv),
                  ConfigError);
  CHECK_THROWS_AS(delta_memory_per_rank(g, FormulaId::FfnDense), ConfigError);
  CHECK_THROWS_AS(delta_memory_per_rank(g, FormulaId::FfnNaiveLowRank),
                  ConfigError);
}

TEST_CASE("decoder memory estimates") {
  Geometry unit{1, 1, 4, 8, 1, 1, 1, 1};
  CHECK(decoder_kv_cache_bytes(unit) == 8);  // 4 * 2LBMr
  CHECK(decoder_prefill_bytes(unit) == 28);  // cache + 4 * 5BMr
  CHECK(decoder_decode_step_bytes(unit, 1) == 28);

  // Cache grows linearly in layer count and sequence length.
  Geometry g{2, 16, 16, 32, 2, 2, 4, 1};
  const std::size_t slope = 4 * 2 * 2 * 16 * 4;  // 4 * 2BMr per layer
  for (std::size_t layers = 1; layers < 4; ++layers) {
    Geometry a = g;
    a.layers = layers;
    Geometry b = g;
    b.layers = layers + 1;
    CHECK(decoder_kv_cache_bytes(b) - decoder_kv_cache_bytes(a) == slope);
    CHECK(decoder_prefill_bytes(b) - decoder_prefill_bytes(a) == slope);
  }
  Geometry doubled = g;
  doubled.seq_len = 32;
  CHECK(decoder_kv_cache_bytes(doubled) == 2 * decoder_kv_cache_bytes(g));

  // Steps grow monotonically and never exceed the prefill footprint.
  for (std::size_t layers : {1, 2, 4}) {
    for (std::size_t m : {1, 4, 16}) {
      for (std::size_t batch : {1, 2}) {
        for (std::size_t rank : {1, 4}) {
          Geometry d{batch, m, 16, 32, 2, 2, rank, layers};
          CAPTURE(layers); CAPTURE(m); CAPTURE(batch); CAPTURE(rank);
          std::size_t prev = 0;
          for (std::size_t t = 1; t <= m; ++t) {
            const std::size_t step = decoder_decode_step_bytes(d, t);
            CHECK(step <= decoder_prefill_bytes(d));
            if (t > 1) CHECK(step > prev);
            prev = step;
          }
        }
      }
    }
  }

  CHECK_THROWS_AS(decoder_decode_step_bytes(g, 0), ConfigError);
  CHECK_THROWS_AS(decoder_decode_step_bytes(g, 17), ConfigError);
  Geometry zero = g;
  zero.layers = 0;
  CHECK_THROWS_AS(decoder_kv_cache_bytes(zero), ConfigError);
  CHECK_THROWS_AS(decoder_prefill_bytes(zero), ConfigError);
  CHECK_THROWS_AS(decoder_decode_step_bytes(zero, 1), ConfigError);
}

TEST_CASE("ffn dominance flips with rank and matches the meter") {
  // r = D_F and B*M = D_A: ratio is exactly 1/2 and the dense FFN loses.
  Geometry even{1, 16, 16, 8, 1, 1, 8, 1};
  FfnDominance at_even = ffn_dominance_check(even);
  CHECK(at_even.ratio == Rational(1, 2));
  CHECK_FALSE(at_even.ffn_dominates);
  Tensor x_even = oracle::random_tensor({1, 16, 16}, 950);
  const std::size_t even_ffn = ffn_dense_total(x_even, 8, 951);
  const std::size_t even_attn = flash_attention_total(x_even, 1, 1, 8, 952);
  CHECK((even_ffn > even_attn) == at_even.ffn_dominates);

  // D_F = 4*D_A, r = D_A/16, B*M >> D_A: the FFN activation dominates.
  Geometry heavy{4, 64, 32, 128, 4, 4, 2, 1};
  FfnDominance at_heavy = ffn_dominance_check(heavy);
  CHECK(at_heavy.ratio == Rational(512, 9));
  CHECK(at_heavy.ratio.value() > 1.0);
  CHECK(at_heavy.ffn_dominates);
  Tensor x_heavy = oracle::random_tensor({4, 64, 32}, 953);
  const std::size_t heavy_ffn = ffn_dense_total(x_heavy, 128, 954);
  const std::size_t heavy_attn = flash_attention_total(x_heavy, 4, 4, 2, 955);
  CHECK((heavy_ffn > heavy_attn) == at_heavy.ffn_dominates);

  // Shrinking rank only strengthens the imbalance.
  Geometry tighter = heavy;
  tighter.rank = 1;
  FfnDominance at_tighter = ffn_dominance_check(tighter);
  CHECK(at_tighter.ffn_dominates);
  CHECK(rational_less(at_heavy.ratio, at_tighter.ratio));
}

}  // TEST_SUITE
