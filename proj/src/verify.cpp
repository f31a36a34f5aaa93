#include "flashsvd/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "flashsvd/attention.hpp"
#include "flashsvd/errors.hpp"
#include "flashsvd/factorize.hpp"
#include "flashsvd/ffn.hpp"
#include "flashsvd/planner.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

namespace {

constexpr float kKernelTol = 1e-4f;

// Uniform values in [-scale, scale) from explicit integer arithmetic, so
// every platform draws identical bits for a given seed.
Tensor uniform_tensor(const std::vector<std::size_t>& shape, std::uint64_t seed,
                      float scale) {
  Tensor t(shape);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double u = double(rng() >> 11) * 0x1p-53;  // [0, 1)
    t.data()[i] = float((2.0 * u - 1.0) * scale);
  }
  return t;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
  return worst;
}

void add_check(SuiteReport& report, const std::string& name, bool ok,
               const std::string& detail) {
  report.checks.push_back({name, ok, ok ? std::string() : detail});
}

struct AttnConfig {
  std::size_t b, m, d, heads, groups, rank;
};

std::string describe(const AttnConfig& c) {
  return "B=" + std::to_string(c.b) + " M=" + std::to_string(c.m) +
         " d=" + std::to_string(c.d) + " H=" + std::to_string(c.heads) +
         " G=" + std::to_string(c.groups) + " r=" + std::to_string(c.rank);
}

AttentionFactorSet make_attn_factors(const AttnConfig& c, std::uint64_t seed) {
  AttentionFactorSet set;
  set.d_model = c.d;
  set.groups = c.groups;
  set.rank = c.rank;
  const std::size_t gd = c.d / c.groups;
  std::uint64_t s = seed;
  for (auto* m : {&set.q, &set.k, &set.v}) {
    for (std::size_t g = 0; g < c.groups; ++g) {
      FactorizedLinear f;
      f.u = uniform_tensor({c.d, c.rank}, s++, 0.3f);
      f.v = uniform_tensor({c.rank, gd}, s++, 0.3f);
      f.bias = uniform_tensor({gd}, s++, 0.1f);
      m->push_back(std::move(f));
    }
  }
  return set;
}

Tensor group_bias(const std::vector<FactorizedLinear>& fl, std::size_t d) {
  Tensor b({d});
  std::size_t off = 0;
  for (const FactorizedLinear& f : fl) {
    std::memcpy(b.data() + off, f.bias.data(), sizeof(float) * f.bias.numel());
    off += f.bias.numel();
  }
  return b;
}

// Runs the dense kernel on the exact products of the factors, so the two
// paths target identical values and any gap is kernel error.
Tensor dense_reference(const Tensor& x, const AttentionFactorSet& set,
                       std::size_t heads) {
  Tensor wq = reconstruct_attention(set, Qkv::Q);
  Tensor wk = reconstruct_attention(set, Qkv::K);
  Tensor wv = reconstruct_attention(set, Qkv::V);
  Tensor bq = group_bias(set.q, set.d_model);
  Tensor bk = group_bias(set.k, set.d_model);
  Tensor bv = group_bias(set.v, set.d_model);
  Tensor out(x.shape());
  MemoryMeter meter;
  dense_attention(x, wq, bq, wk, bk, wv, bv, heads, meter, out);
  return out;
}

Tensor flash_run(const Tensor& x, const AttentionFactorSet& set,
                 std::size_t heads, const TilePlan& plan) {
  Tensor out(x.shape());
  MemoryMeter meter;
  flash_svd_attention(x, set, heads, plan, meter, "attn", out);
  return out;
}

SuiteReport attn_suite(std::uint64_t seed) {
  SuiteReport report{"attn", {}};
  const AttnConfig configs[] = {
      {1, 16, 24, 2, 2, 6}, {2, 24, 32, 4, 1, 8}, {2, 32, 48, 6, 3, 8}};
  for (const AttnConfig& c : configs) {
    Tensor x = uniform_tensor({c.b, c.m, c.d}, seed++, 1.0f);
    AttentionFactorSet set = make_attn_factors(c, seed += 64);
    Tensor want = dense_reference(x, set, c.heads);
    Tensor got = flash_run(x, set, c.heads, TilePlan{});
    const float err = max_abs_diff(got, want);
    add_check(report, "flash matches dense on reconstructed factors (" +
                          describe(c) + ")",
              err <= kKernelTol, "max abs err " + std::to_string(err));
  }

  const AttnConfig tile_cfg{2, 48, 32, 4, 4, 8};
  Tensor x = uniform_tensor({2, 48, 32}, seed++, 1.0f);
  AttentionFactorSet set = make_attn_factors(tile_cfg, seed += 64);
  Tensor base = flash_run(x, set, tile_cfg.heads, TilePlan{});
  for (std::size_t bm : {std::size_t{8}, std::size_t{32}}) {
    for (std::size_t br : {std::size_t{4}, std::size_t{16}}) {
      TilePlan plan;
      plan.bm = bm;
      plan.br = br;
      Tensor other = flash_run(x, set, tile_cfg.heads, plan);
      const float err = max_abs_diff(other, base);
      add_check(report,
                "tiling invariance (bm=" + std::to_string(bm) +
                    " br=" + std::to_string(br) + ")",
                err <= kKernelTol, "max abs err " + std::to_string(err));
    }
  }
  return report;
}

struct FfnConfig {
  std::size_t b, m, d, df, rank;
};

FfnFactors make_ffn_factors(const FfnConfig& c, std::uint64_t seed) {
  FfnFactors f;
  f.up.u = uniform_tensor({c.d, c.rank}, seed, 0.3f);
  f.up.v = uniform_tensor({c.rank, c.df}, seed + 1, 0.3f);
  f.up.bias = uniform_tensor({c.df}, seed + 2, 0.1f);
  f.down.u = uniform_tensor({c.df, c.rank}, seed + 3, 0.3f);
  f.down.v = uniform_tensor({c.rank, c.d}, seed + 4, 0.3f);
  f.down.bias = uniform_tensor({c.d}, seed + 5, 0.1f);
  return f;
}

SuiteReport ffn_suite(std::uint64_t seed) {
  SuiteReport report{"ffn", {}};
  const FfnConfig configs[] = {
      {1, 16, 24, 48, 6}, {2, 24, 32, 64, 8}, {2, 8, 48, 96, 12}};
  for (const FfnConfig& c : configs) {
    const std::string where = "B=" + std::to_string(c.b) +
                              " M=" + std::to_string(c.m) +
                              " d=" + std::to_string(c.d) +
                              " d_ff=" + std::to_string(c.df) +
                              " r=" + std::to_string(c.rank);
    Tensor x = uniform_tensor({c.b, c.m, c.d}, seed++, 1.0f);
    FfnFactors f = make_ffn_factors(c, seed += 8);
    Tensor w_in = reconstruct(f.up);
    Tensor w_out = reconstruct(f.down);
    Tensor want(x.shape());
    MemoryMeter m0;
    ffn_dense(x, w_in, f.up.bias, w_out, f.down.bias, f.activation, m0, want);

    Tensor v1(x.shape()), v2(x.shape()), naive(x.shape());
    MemoryMeter m1, m2, m3;
    ffn_v1(x, f, TilePlan{}, m1, "ffn", v1);
    ffn_v2(x, f, TilePlan{}, m2, "ffn", v2);
    ffn_naive_lowrank(x, f, m3, naive);
    const float e1 = max_abs_diff(v1, want);
    const float e2 = max_abs_diff(v2, want);
    const float e3 = max_abs_diff(naive, want);
    add_check(report, "ffn_v1 matches dense on reconstructed factors (" +
                          where + ")",
              e1 <= kKernelTol, "max abs err " + std::to_string(e1));
    add_check(report, "ffn_v2 matches dense on reconstructed factors (" +
                          where + ")",
              e2 <= kKernelTol, "max abs err " + std::to_string(e2));
    add_check(report, "naive low-rank matches dense (" + where + ")",
              e3 <= kKernelTol, "max abs err " + std::to_string(e3));
  }

  // Feature-block size must not change either streaming variant.
  const FfnConfig c{2, 24, 32, 64, 8};
  Tensor x = uniform_tensor({2, 24, 32}, seed++, 1.0f);
  FfnFactors f = make_ffn_factors(c, seed += 8);
  Tensor v1_base(x.shape()), v2_base(x.shape());
  MemoryMeter mb1, mb2;
  ffn_v1(x, f, TilePlan{}, mb1, "ffn", v1_base);
  ffn_v2(x, f, TilePlan{}, mb2, "ffn", v2_base);
  for (std::size_t bdf : {std::size_t{16}, std::size_t{32}}) {
    TilePlan plan;
    plan.bdf = bdf;
    Tensor v1_alt(x.shape()), v2_alt(x.shape());
    MemoryMeter ma1, ma2;
    ffn_v1(x, f, plan, ma1, "ffn", v1_alt);
    ffn_v2(x, f, plan, ma2, "ffn", v2_alt);
    const float e1 = max_abs_diff(v1_alt, v1_base);
    const float e2 = max_abs_diff(v2_alt, v2_base);
    add_check(report, "ffn tiling invariance (bdf=" + std::to_string(bdf) + ")",
              e1 <= kKernelTol && e2 <= kKernelTol,
              "max abs err v1 " + std::to_string(e1) + " v2 " +
                  std::to_string(e2));
  }
  return report;
}

// One measurement of each metered kernel at one grid point; each entry is
// compared against formula(id, geom) and failures are attributed to the id.
struct MeterPoint {
  FormulaId id;
  const char* label;
  std::size_t measured;
  Geometry geom;
};

std::vector<MeterPoint> measure_point(std::size_t b, std::size_t m,
                                      std::size_t heads, std::size_t rank,
                                      std::uint64_t seed) {
  const std::size_t d = 16, df = 32;
  Geometry g{b, m, d, df, heads, heads, rank, 1};
  Geometry whole = g;
  whole.groups = 1;

  Tensor x = uniform_tensor({b, m, d}, seed, 1.0f);
  Tensor wq = uniform_tensor({d, d}, seed + 1, 0.3f);
  Tensor bq = uniform_tensor({d}, seed + 2, 0.1f);
  Tensor wk = uniform_tensor({d, d}, seed + 3, 0.3f);
  Tensor bk = uniform_tensor({d}, seed + 4, 0.1f);
  Tensor wv = uniform_tensor({d, d}, seed + 5, 0.3f);
  Tensor bv = uniform_tensor({d}, seed + 6, 0.1f);
  Tensor w_in = uniform_tensor({d, df}, seed + 7, 0.3f);
  Tensor b_in = uniform_tensor({df}, seed + 8, 0.1f);
  Tensor w_out = uniform_tensor({df, d}, seed + 9, 0.3f);
  Tensor b_out = uniform_tensor({d}, seed + 10, 0.1f);
  AttentionFactorSet per_head =
      make_attn_factors({b, m, d, heads, heads, rank}, seed + 20);
  AttentionFactorSet single =
      make_attn_factors({b, m, d, heads, 1, rank}, seed + 80);
  FfnFactors ffn = make_ffn_factors({b, m, d, df, rank}, seed + 140);

  std::vector<MeterPoint> points;
  Tensor out({b, m, d});
  {
    MemoryMeter meter;
    dense_attention(x, wq, bq, wk, bk, wv, bv, heads, meter, out);
    points.push_back({FormulaId::DenseAttn, "dense_attn",
                      meter.peak_transient_bytes(), g});
  }
  {
    MemoryMeter meter;
    flash_attention_dense_qkv(x, wq, bq, wk, bk, wv, bv, heads, TilePlan{},
                              meter, out);
    points.push_back({FormulaId::FlashAttnDenseQkv, "flash_attn_dense_qkv",
                      meter.peak_transient_bytes(), g});
  }
  {
    MemoryMeter meter;
    flash_svd_attention(x, per_head, heads, TilePlan{}, meter, "attn", out);
    points.push_back({FormulaId::FlashSvdAttn, "flash_svd_attn",
                      meter.peak_transient_bytes(), g});
  }
  {
    MemoryMeter meter;
    flash_svd_attention(x, single, heads, TilePlan{}, meter, "attn", out);
    points.push_back({FormulaId::GroupedAttn, "grouped_attn",
                      meter.peak_transient_bytes(), whole});
  }
  {
    MemoryMeter meter;
    ffn_dense(x, w_in, b_in, w_out, b_out, Activation::GeluErf, meter, out);
    points.push_back({FormulaId::FfnDense, "ffn_dense",
                      meter.peak_transient_bytes(), g});
  }
  {
    MemoryMeter meter;
    ffn_naive_lowrank(x, ffn, meter, out);
    points.push_back({FormulaId::FfnNaiveLowRank, "ffn_naive_lowrank",
                      meter.peak_transient_bytes(), g});
  }
  {
    MemoryMeter meter;
    ffn_v1(x, ffn, TilePlan{}, meter, "ffn", out);
    points.push_back({FormulaId::FfnV1, "ffn_v1",
                      meter.peak_transient_bytes(), g});
  }
  {
    MemoryMeter meter;
    ffn_v2(x, ffn, TilePlan{}, meter, "ffn", out);
    points.push_back({FormulaId::FfnV2, "ffn_v2",
                      meter.peak_transient_bytes(), g});
  }
  return points;
}

SuiteReport threshold_suite(std::uint64_t seed) {
  SuiteReport report{"threshold", {}};
  const AttnConfig configs[] = {
      {1, 8, 12, 2, 2, 0}, {2, 8, 16, 2, 2, 0}, {1, 16, 16, 4, 4, 0}};
  for (AttnConfig c : configs) {
    Geometry g{c.b, c.m, c.d, 4 * c.d, c.heads, c.heads, 1, 1};
    const Rational bound = memory_threshold(g, ThresholdMode::MultiHead);
    // Savings require strictly r < bound, so at an integer bound the last
    // saving rank is bound - 1.
    const std::size_t lo =
        std::size_t(bound.is_integer() ? bound.floor() - 1 : bound.floor());
    const std::size_t hi = std::size_t(bound.is_integer() ? bound.floor()
                                                          : bound.ceil());
    Tensor x = uniform_tensor({c.b, c.m, c.d}, seed++, 1.0f);
    Tensor wq = uniform_tensor({c.d, c.d}, seed + 1, 0.3f);
    Tensor bq = uniform_tensor({c.d}, seed + 2, 0.1f);
    Tensor wk = uniform_tensor({c.d, c.d}, seed + 3, 0.3f);
    Tensor bk = uniform_tensor({c.d}, seed + 4, 0.1f);
    Tensor wv = uniform_tensor({c.d, c.d}, seed + 5, 0.3f);
    Tensor bv = uniform_tensor({c.d}, seed + 6, 0.1f);
    Tensor out({c.b, c.m, c.d});
    MemoryMeter base_meter;
    flash_attention_dense_qkv(x, wq, bq, wk, bk, wv, bv, c.heads, TilePlan{},
                              base_meter, out);
    const std::size_t baseline = base_meter.peak_transient_bytes() +
                                 base_meter.persistent_bytes();

    auto flash_total = [&](std::size_t rank) {
      c.rank = rank;
      AttentionFactorSet set = make_attn_factors(c, seed += 64);
      MemoryMeter meter;
      flash_svd_attention(x, set, c.heads, TilePlan{}, meter, "attn", out);
      return meter.peak_transient_bytes() + meter.persistent_bytes();
    };
    const std::size_t below = flash_total(lo);
    const std::size_t above = flash_total(hi);
    const std::string where = " (B=" + std::to_string(c.b) +
                              " M=" + std::to_string(c.m) +
                              " d=" + std::to_string(c.d) +
                              " H=" + std::to_string(c.heads) +
                              ", bound " + bound.str() + ")";
    add_check(report, "saves memory below the bound" + where, below < baseline,
              std::to_string(below) + " bytes vs baseline " +
                  std::to_string(baseline) + " at r=" + std::to_string(lo));
    add_check(report, "stops saving at the bound" + where, above >= baseline,
              std::to_string(above) + " bytes vs baseline " +
                  std::to_string(baseline) + " at r=" + std::to_string(hi));
  }
  return report;
}

}  // namespace

bool SuiteReport::passed() const {
  for (const CheckResult& c : checks)
    if (!c.passed) return false;
  return true;
}

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names = {"attn", "ffn", "meter",
                                                 "threshold"};
  return names;
}

SuiteReport run_meter_suite(std::uint64_t seed, const ByteFormula& formula) {
  SuiteReport report{"meter", {}};
  // One aggregated check per formula over the whole grid, so a wrong entry
  // in the byte table is pinned to its kernel.
  struct Tally {
    const char* label = nullptr;
    bool ok = true;
    std::string first_failure;
  };
  std::vector<Tally> tallies;
  for (std::size_t b : {1, 2}) {
    for (std::size_t m : {8, 16}) {
      for (std::size_t heads : {2, 4}) {
        for (std::size_t rank : {2, 4}) {
          auto points = measure_point(b, m, heads, rank, seed);
          seed += 1000;
          if (tallies.empty()) {
            tallies.resize(points.size());
            for (std::size_t i = 0; i < points.size(); ++i)
              tallies[i].label = points[i].label;
          }
          for (std::size_t i = 0; i < points.size(); ++i) {
            const std::size_t want = formula(points[i].id, points[i].geom);
            if (points[i].measured != want && tallies[i].ok) {
              tallies[i].ok = false;
              tallies[i].first_failure =
                  "B=" + std::to_string(b) + " M=" + std::to_string(m) +
                  " H=" + std::to_string(heads) +
                  " r=" + std::to_string(rank) + ": measured " +
                  std::to_string(points[i].measured) + ", formula " +
                  std::to_string(want);
            }
          }
        }
      }
    }
  }
  for (const Tally& t : tallies)
    add_check(report,
              std::string("measured bytes match ") + t.label +
                  " formula on 16 geometries",
              t.ok, t.first_failure);
  return report;
}

SuiteReport run_verify_suite(const std::string& name, std::uint64_t seed) {
  if (name == "attn") return attn_suite(seed);
  if (name == "ffn") return ffn_suite(seed);
  if (name == "meter") return run_meter_suite(seed, ByteFormula(&expected_bytes));
  if (name == "threshold") return threshold_suite(seed);
  throw ConfigError("unknown verify suite: " + name +
                    " (expected attn|ffn|meter|threshold)");
}

std::vector<SuiteReport> run_all_verify_suites(std::uint64_t seed) {
  std::vector<SuiteReport> reports;
  for (const std::string& name : verify_suite_names())
    reports.push_back(run_verify_suite(name, seed));
  return reports;
}

}  // namespace flashsvd
