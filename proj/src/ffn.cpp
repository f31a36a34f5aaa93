#include "flashsvd/ffn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "flashsvd/errors.hpp"
#include "flashsvd/geometry.hpp"
#include "flashsvd/parallel.hpp"

namespace flashsvd {

namespace {

float apply_act(float v, Activation act) {
  switch (act) {
    case Activation::GeluErf: return gelu_erf(v);
    case Activation::GeluTanh: return gelu_tanh(v);
    case Activation::Relu: return v > 0.0f ? v : 0.0f;
    case Activation::Identity: return v;
  }
  return v;
}

void gemm_acc_ld(const float* a, std::size_t lda, const float* b, std::size_t ldb,
                 float* c, std::size_t ldc, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * ldc;
    const float* ai = a + i * lda;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = ai[kk];
      const float* bk = b + kk * ldb;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

void check_ffn_io(const Tensor& x, const FfnFactors& f, const Tensor& out) {
  if (x.shape().size() != 3) throw ShapeError("ffn input must be B x M x D");
  const std::size_t d = x.shape()[2];
  if (f.up.in_dim() != d || f.down.out_dim() != d)
    throw ShapeError("ffn factor dims do not match the activation width");
  if (f.up.out_dim() != f.down.in_dim())
    throw ShapeError("ffn up/down widths do not chain");
  if (f.up.rank() != f.down.rank())
    throw ConfigError("ffn factor pairs must share one rank");
  if (!out.same_shape(x)) throw ShapeError("ffn output must be shaped like input");
}

Geometry ffn_geometry(const Tensor& x, std::size_t d_ff, std::size_t rank) {
  Geometry g;
  g.batch = x.shape()[0];
  g.seq_len = x.shape()[1];
  g.d_model = x.shape()[2];
  g.d_ff = d_ff;
  g.heads = 1;
  g.groups = 1;
  g.rank = rank;
  return g;
}

void pin_ffn(MemoryMeter& meter, const FfnFactors& f,
             const std::string& pin_prefix) {
  meter.pin_persistent(pin_prefix + ".up.u", sizeof(float) * f.up.u.numel());
  meter.pin_persistent(pin_prefix + ".up.v", sizeof(float) * f.up.v.numel());
  meter.pin_persistent(pin_prefix + ".down.u", sizeof(float) * f.down.u.numel());
  meter.pin_persistent(pin_prefix + ".down.v", sizeof(float) * f.down.v.numel());
}

// SRAM-tier tile state for the feature-block loop shared by V1 and V2:
// given a rank-space row tile p (rows x r), accumulates
// z += act(p * V_up[:, blk] + b_up[blk]) * U_down[blk, :] over feature blocks.
struct FfnTiles {
  std::vector<float> h, v1_panel, u2_panel, bias;
  FfnTiles(const TilePlan& plan, std::size_t rank)
      : h(plan.bm * plan.bdf),
        v1_panel(rank * plan.bdf),
        u2_panel(plan.bdf * rank),
        bias(plan.bdf) {}
};

void stream_feature_blocks(const float* p, std::size_t rows, const FfnFactors& f,
                           const TilePlan& plan, FfnTiles& t, float* z) {
  const std::size_t rank = f.up.rank();
  const std::size_t d_ff = f.up.out_dim();
  for (std::size_t f0 = 0; f0 < d_ff; f0 += plan.bdf) {
    const std::size_t flen = std::min(plan.bdf, d_ff - f0);
    for (std::size_t kk = 0; kk < rank; ++kk)
      std::memcpy(t.v1_panel.data() + kk * flen, f.up.v.data() + kk * d_ff + f0,
                  sizeof(float) * flen);
    std::memcpy(t.bias.data(), f.up.bias.data() + f0, sizeof(float) * flen);
    std::memcpy(t.u2_panel.data(), f.down.u.data() + f0 * rank,
                sizeof(float) * flen * rank);
    std::fill(t.h.begin(), t.h.begin() + rows * flen, 0.0f);
    gemm_accumulate(p, t.v1_panel.data(), t.h.data(), rows, rank, flen);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < flen; ++j)
        t.h[i * flen + j] =
            apply_act(t.h[i * flen + j] + t.bias[j], f.activation);
    gemm_accumulate(t.h.data(), t.u2_panel.data(), z, rows, flen, rank);
  }
}

}  // namespace

FfnFactors factorize_ffn(const Tensor& w_in, const Tensor& b_in,
                         const Tensor& w_out, const Tensor& b_out,
                         std::size_t rank, Activation act) {
  FfnFactors f;
  f.up = factorize_linear(w_in, b_in, rank);
  f.down = factorize_linear(w_out, b_out, rank);
  f.activation = act;
  return f;
}

void ffn_v1(const Tensor& x, const FfnFactors& f, const TilePlan& plan,
            MemoryMeter& meter, const std::string& pin_prefix, Tensor& out) {
  check_ffn_io(x, f, out);
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  const std::size_t d_ff = f.up.out_dim(), rank = f.up.rank();
  validate_tile_plan(plan, KernelKind::FfnV1, ffn_geometry(x, d_ff, rank));
  pin_ffn(meter, f, pin_prefix);
  auto region = meter.scoped_region("ffn_v1");
  {
    ScopedBuffer p(meter, "p_mid", AllocClass::Transient, {batch, seq, rank});
    ScopedBuffer z(meter, "z_mid", AllocClass::Transient, {batch, seq, rank});
    std::fill(p.tensor().data(), p.tensor().data() + p.tensor().numel(), 0.0f);
    std::fill(z.tensor().data(), z.tensor().data() + z.tensor().numel(), 0.0f);
    parallel_for(batch, [&](std::size_t b) {
      gemm_acc_ld(x.data() + b * seq * d, d, f.up.u.data(), rank,
                  p.tensor().data() + b * seq * rank, rank, seq, d, rank);
    });
    const std::size_t m_tiles = (seq + plan.bm - 1) / plan.bm;
    parallel_for(batch * m_tiles, [&](std::size_t task) {
      const std::size_t b = task / m_tiles;
      const std::size_t m0 = (task % m_tiles) * plan.bm;
      const std::size_t mlen = std::min(plan.bm, seq - m0);
      FfnTiles tiles(plan, rank);
      std::vector<float> p_row(plan.bm * rank), z_acc(plan.bm * rank, 0.0f);
      std::memcpy(p_row.data(), p.tensor().data() + (b * seq + m0) * rank,
                  sizeof(float) * mlen * rank);
      stream_feature_blocks(p_row.data(), mlen, f, plan, tiles, z_acc.data());
      std::memcpy(z.tensor().data() + (b * seq + m0) * rank, z_acc.data(),
                  sizeof(float) * mlen * rank);
    });
    parallel_for(batch, [&](std::size_t b) {
      float* obase = out.data() + b * seq * d;
      for (std::size_t i = 0; i < seq; ++i)
        std::memcpy(obase + i * d, f.down.bias.data(), sizeof(float) * d);
      gemm_acc_ld(z.tensor().data() + b * seq * rank, rank, f.down.v.data(), d,
                  obase, d, seq, rank, d);
    });
  }
}

void ffn_v2(const Tensor& x, const FfnFactors& f, const TilePlan& plan,
            MemoryMeter& meter, const std::string& pin_prefix, Tensor& out) {
  check_ffn_io(x, f, out);
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  const std::size_t d_ff = f.up.out_dim(), rank = f.up.rank();
  validate_tile_plan(plan, KernelKind::FfnV2, ffn_geometry(x, d_ff, rank));
  pin_ffn(meter, f, pin_prefix);
  auto region = meter.scoped_region("ffn_v2");
  const std::size_t m_tiles = (seq + plan.bm - 1) / plan.bm;
  parallel_for(batch * m_tiles, [&](std::size_t task) {
    const std::size_t b = task / m_tiles;
    const std::size_t m0 = (task % m_tiles) * plan.bm;
    const std::size_t mlen = std::min(plan.bm, seq - m0);
    FfnTiles tiles(plan, rank);
    std::vector<float> p_tile(plan.bm * rank, 0.0f), z_acc(plan.bm * rank, 0.0f);
    std::vector<float> out_row(d);
    gemm_acc_ld(x.data() + (b * seq + m0) * d, d, f.up.u.data(), rank,
                p_tile.data(), rank, mlen, d, rank);
    stream_feature_blocks(p_tile.data(), mlen, f, plan, tiles, z_acc.data());
    for (std::size_t i = 0; i < mlen; ++i) {
      std::memcpy(out_row.data(), f.down.bias.data(), sizeof(float) * d);
      gemm_acc_ld(z_acc.data() + i * rank, rank, f.down.v.data(), d,
                  out_row.data(), d, 1, rank, d);
      std::memcpy(out.data() + (b * seq + m0 + i) * d, out_row.data(),
                  sizeof(float) * d);
    }
  });
}

void ffn_dense(const Tensor& x, const Tensor& w_in, const Tensor& b_in,
               const Tensor& w_out, const Tensor& b_out, Activation act,
               MemoryMeter& meter, Tensor& out) {
  if (x.shape().size() != 3) throw ShapeError("ffn input must be B x M x D");
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  if (w_in.shape().size() != 2 || w_in.shape()[0] != d)
    throw ShapeError("w_in must be d_model x d_ff");
  const std::size_t d_ff = w_in.shape()[1];
  if (w_out.shape().size() != 2 || w_out.shape()[0] != d_ff ||
      w_out.shape()[1] != d)
    throw ShapeError("w_out must be d_ff x d_model");
  if (!out.same_shape(x)) throw ShapeError("ffn output must be shaped like input");
  auto region = meter.scoped_region("ffn_dense");
  {
    ScopedBuffer hidden(meter, "hidden", AllocClass::Transient,
                        {batch, seq, d_ff});
    std::fill(hidden.tensor().data(),
              hidden.tensor().data() + hidden.tensor().numel(), 0.0f);
    parallel_for(batch, [&](std::size_t b) {
      float* hb = hidden.tensor().data() + b * seq * d_ff;
      gemm_acc_ld(x.data() + b * seq * d, d, w_in.data(), d_ff, hb, d_ff, seq,
                  d, d_ff);
      for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t j = 0; j < d_ff; ++j)
          hb[i * d_ff + j] = apply_act(hb[i * d_ff + j] + b_in.at(j), act);
      float* obase = out.data() + b * seq * d;
      for (std::size_t i = 0; i < seq; ++i)
        std::memcpy(obase + i * d, b_out.data(), sizeof(float) * d);
      gemm_acc_ld(hb, d_ff, w_out.data(), d, obase, d, seq, d_ff, d);
    });
  }
}

void ffn_naive_lowrank(const Tensor& x, const FfnFactors& f, MemoryMeter& meter,
                       Tensor& out) {
  check_ffn_io(x, f, out);
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  const std::size_t d_ff = f.up.out_dim(), rank = f.up.rank();
  auto region = meter.scoped_region("ffn_naive_lowrank");
  {
    ScopedBuffer hidden(meter, "hidden", AllocClass::Transient,
                        {batch, seq, d_ff});
    parallel_for(batch, [&](std::size_t b) {
      std::vector<float> scratch(rank);
      for (std::size_t i = 0; i < seq; ++i) {
        const float* xrow = x.data() + (b * seq + i) * d;
        float* hrow = hidden.tensor().data() + (b * seq + i) * d_ff;
        std::fill(scratch.begin(), scratch.end(), 0.0f);
        gemm_acc_ld(xrow, d, f.up.u.data(), rank, scratch.data(), rank, 1, d,
                    rank);
        std::memcpy(hrow, f.up.bias.data(), sizeof(float) * d_ff);
        gemm_acc_ld(scratch.data(), rank, f.up.v.data(), d_ff, hrow, d_ff, 1,
                    rank, d_ff);
        for (std::size_t j = 0; j < d_ff; ++j)
          hrow[j] = apply_act(hrow[j], f.activation);
      }
      for (std::size_t i = 0; i < seq; ++i) {
        const float* hrow = hidden.tensor().data() + (b * seq + i) * d_ff;
        float* orow = out.data() + (b * seq + i) * d;
        std::fill(scratch.begin(), scratch.end(), 0.0f);
        gemm_acc_ld(hrow, d_ff, f.down.u.data(), rank, scratch.data(), rank, 1,
                    d_ff, rank);
        std::memcpy(orow, f.down.bias.data(), sizeof(float) * d);
        gemm_acc_ld(scratch.data(), rank, f.down.v.data(), d, orow, d, 1, rank,
                    d);
      }
    });
  }
}

}  // namespace flashsvd
