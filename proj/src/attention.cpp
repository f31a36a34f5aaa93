#include "flashsvd/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "flashsvd/errors.hpp"
#include "flashsvd/geometry.hpp"
#include "flashsvd/parallel.hpp"

namespace flashsvd {

namespace {

// Strided GEMM on raw row-major spans, C += A * B with leading dimensions.
// Same per-element k-ascending accumulation order as gemm_accumulate.
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

// C = A * B^T on contiguous tiles: c[i][j] = sum_d a[i][d] * b[j][d].
void gemm_nt(const float* a, const float* b, float* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* bj = b + j * k;
      float acc = 0.0f;
      for (std::size_t d = 0; d < k; ++d) acc += ai[d] * bj[d];
      c[i * n + j] = acc;
    }
  }
}

void check_attention_io(const Tensor& x, std::size_t d_model, std::size_t heads,
                        const Tensor& out) {
  if (x.shape().size() != 3) throw ShapeError("attention input must be B x M x D");
  if (x.shape()[2] != d_model)
    throw ShapeError("input feature width does not match the projections");
  if (heads == 0 || d_model % heads != 0)
    throw ConfigError("heads must divide d_model");
  if (!out.same_shape(x))
    throw ShapeError("attention output must be shaped like the input");
}

Geometry plan_geometry(std::size_t b, std::size_t m, std::size_t d_model,
                       std::size_t heads) {
  Geometry g;
  g.batch = b;
  g.seq_len = m;
  g.d_model = d_model;
  g.d_ff = 1;
  g.heads = heads;
  g.groups = heads;  // attention tiles are head-wide regardless of factor grouping
  g.rank = 1;
  return g;
}

// SRAM-tier tile buffers for one head's pass.  Sized by the plan, reused
// across tiles; never registered with the byte meter (they model on-chip
// storage, which validate_tile_plan bounds separately).
struct AttentionTiles {
  std::vector<float> q, k, v, score, prob, acc, stage, row_max, row_sum, bias;
  AttentionTiles(const TilePlan& plan, std::size_t dh)
      : q(plan.bm * dh),
        k(plan.br * dh),
        v(plan.br * dh),
        score(plan.bm * plan.br),
        prob(plan.bm * plan.br),
        acc(plan.bm * dh),
        stage(std::max(plan.bm, plan.br) * dh),
        row_max(plan.bm),
        row_sum(plan.bm),
        bias(dh) {}
};

// One head's streaming pass over materialized-or-factored q/k/v tile loaders.
// load(which, row0, rows, dest) fills dest (rows x dh) with biased projection
// rows; q rows are additionally scaled by 1/sqrt(dh) here.
template <typename LoadTile>
void online_softmax_head(std::size_t seq_len, std::size_t dh,
                         const TilePlan& plan, AttentionTiles& t,
                         LoadTile&& load, float* out_base,
                         std::size_t out_stride) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (std::size_t m0 = 0; m0 < seq_len; m0 += plan.bm) {
    const std::size_t mlen = std::min(plan.bm, seq_len - m0);
    load(0, m0, mlen, t.q.data());
    for (std::size_t i = 0; i < mlen * dh; ++i) t.q[i] *= scale;
    std::fill(t.acc.begin(), t.acc.begin() + mlen * dh, 0.0f);
    std::fill(t.row_sum.begin(), t.row_sum.begin() + mlen, 0.0f);
    std::fill(t.row_max.begin(), t.row_max.begin() + mlen,
              -std::numeric_limits<float>::infinity());
    for (std::size_t n0 = 0; n0 < seq_len; n0 += plan.br) {
      const std::size_t nlen = std::min(plan.br, seq_len - n0);
      load(1, n0, nlen, t.k.data());
      load(2, n0, nlen, t.v.data());
      gemm_nt(t.q.data(), t.k.data(), t.score.data(), mlen, dh, nlen);
      for (std::size_t i = 0; i < mlen; ++i) {
        const float* srow = t.score.data() + i * nlen;
        float tile_max = srow[0];
        for (std::size_t j = 1; j < nlen; ++j) tile_max = std::max(tile_max, srow[j]);
        const float m_new = std::max(t.row_max[i], tile_max);
        const float alpha = std::exp(t.row_max[i] - m_new);
        float* prow = t.prob.data() + i * nlen;
        float part = 0.0f;
        for (std::size_t j = 0; j < nlen; ++j) {
          prow[j] = std::exp(srow[j] - m_new);
          part += prow[j];
        }
        t.row_sum[i] = t.row_sum[i] * alpha + part;
        float* arow = t.acc.data() + i * dh;
        for (std::size_t d = 0; d < dh; ++d) arow[d] *= alpha;
        t.row_max[i] = m_new;
      }
      gemm_acc_ld(t.prob.data(), nlen, t.v.data(), dh, t.acc.data(), dh, mlen,
                  nlen, dh);
    }
    for (std::size_t i = 0; i < mlen; ++i) {
      float* orow = out_base + (m0 + i) * out_stride;
      const float inv = 1.0f / t.row_sum[i];
      for (std::size_t d = 0; d < dh; ++d) orow[d] = t.acc[i * dh + d] * inv;
    }
  }
}

// Streaming attention over fully materialized q/k/v activations (B, M, D).
void streaming_core_materialized(const Tensor& q, const Tensor& k,
                                 const Tensor& v, std::size_t heads,
                                 const TilePlan& plan, Tensor& out) {
  const std::size_t batch = q.shape()[0], seq = q.shape()[1], d = q.shape()[2];
  const std::size_t dh = d / heads;
  parallel_for(batch * heads, [&](std::size_t task) {
    const std::size_t b = task / heads, h = task % heads;
    AttentionTiles tiles(plan, dh);
    const Tensor* mats[3] = {&q, &k, &v};
    auto load = [&](int which, std::size_t row0, std::size_t rows, float* dest) {
      const float* src = mats[which]->data() + (b * seq + row0) * d + h * dh;
      for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(dest + i * dh, src + i * d, sizeof(float) * dh);
    };
    online_softmax_head(seq, dh, plan, tiles, load,
                        out.data() + b * seq * d + h * dh, d);
  });
}

// Materializes one dense projection x*w + bias into dst (B, M, D).
void project_dense(const Tensor& x, const Tensor& w, const Tensor& bias,
                   Tensor& dst) {
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  std::fill(dst.data(), dst.data() + dst.numel(), 0.0f);
  parallel_for(batch, [&](std::size_t b) {
    gemm_acc_ld(x.data() + b * seq * d, d, w.data(), d,
                dst.data() + b * seq * d, d, seq, d, d);
    for (std::size_t i = 0; i < seq; ++i) {
      float* row = dst.data() + (b * seq + i) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += bias.at(j);
    }
  });
}

// Materializes one grouped-factor projection through a rank-width row
// scratch: q_row = (x_row * U_g) * V_g + bias.  The scratch lives in the
// SRAM tier; the only HBM-tier allocation is dst itself.
void project_from_factors(const Tensor& x, const std::vector<FactorizedLinear>& fac,
                          std::size_t groups, Tensor& dst) {
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  const std::size_t gd = d / groups;
  const std::size_t rank = fac[0].rank();
  parallel_for(batch, [&](std::size_t b) {
    std::vector<float> scratch(rank);
    for (std::size_t i = 0; i < seq; ++i) {
      const float* xrow = x.data() + (b * seq + i) * d;
      float* drow = dst.data() + (b * seq + i) * d;
      for (std::size_t g = 0; g < groups; ++g) {
        std::fill(scratch.begin(), scratch.end(), 0.0f);
        gemm_acc_ld(xrow, d, fac[g].u.data(), rank, scratch.data(), rank, 1, d,
                    rank);
        float* dcol = drow + g * gd;
        std::memcpy(dcol, fac[g].bias.data(), sizeof(float) * gd);
        gemm_acc_ld(scratch.data(), rank, fac[g].v.data(), gd, dcol, gd, 1,
                    rank, gd);
      }
    }
  });
}

}  // namespace

void flash_svd_attention(const Tensor& x, const AttentionFactorSet& set,
                         std::size_t heads, const TilePlan& plan,
                         MemoryMeter& meter, const std::string& pin_prefix,
                         Tensor& out) {
  const std::size_t d = set.d_model;
  check_attention_io(x, d, heads, out);
  const std::size_t groups = set.groups;
  if (groups == 0 || heads % groups != 0)
    throw ConfigError("factor groups must evenly cover the heads");
  const std::size_t batch = x.shape()[0], seq = x.shape()[1];
  const std::size_t dh = d / heads;
  const std::size_t gd = d / groups;
  const std::size_t rank = set.rank;
  const std::size_t heads_per_group = heads / groups;
  validate_tile_plan(plan, KernelKind::Attention,
                     plan_geometry(batch, seq, d, heads));

  static const char* names[3] = {"q", "k", "v"};
  for (int mat = 0; mat < 3; ++mat) {
    const auto& fac = set.matrix(static_cast<Qkv>(mat));
    for (std::size_t g = 0; g < groups; ++g)
      meter.pin_persistent(pin_prefix + "." + names[mat] + ".g" +
                               std::to_string(g) + ".v",
                           sizeof(float) * fac[g].v.numel());
  }

  auto region = meter.scoped_region("flash_svd_attention");
  {
    ScopedBuffer p_q(meter, "p_q", AllocClass::Transient, {groups, batch, seq, rank});
    ScopedBuffer p_k(meter, "p_k", AllocClass::Transient, {groups, batch, seq, rank});
    ScopedBuffer p_v(meter, "p_v", AllocClass::Transient, {groups, batch, seq, rank});
    ScopedBuffer* projected[3] = {&p_q, &p_k, &p_v};

    for (int mat = 0; mat < 3; ++mat)
      std::fill(projected[mat]->tensor().data(),
                projected[mat]->tensor().data() + projected[mat]->tensor().numel(),
                0.0f);
    parallel_for(3 * groups * batch, [&](std::size_t task) {
      const int mat = static_cast<int>(task / (groups * batch));
      const std::size_t g = (task / batch) % groups;
      const std::size_t b = task % batch;
      const auto& fac = set.matrix(static_cast<Qkv>(mat));
      float* dst = projected[mat]->tensor().data() + ((g * batch + b) * seq) * rank;
      gemm_acc_ld(x.data() + b * seq * d, d, fac[g].u.data(), rank, dst, rank,
                  seq, d, rank);
    });

    parallel_for(batch * heads, [&](std::size_t task) {
      const std::size_t b = task / heads, h = task % heads;
      const std::size_t g = h / heads_per_group;
      const std::size_t head_col = (h % heads_per_group) * dh;  // within group
      AttentionTiles tiles(plan, dh);
      auto load = [&](int which, std::size_t row0, std::size_t rows, float* dest) {
        const auto& fac = set.matrix(static_cast<Qkv>(which));
        const float* prows = projected[which]->tensor().data() +
                             ((g * batch + b) * seq + row0) * rank;
        std::memcpy(tiles.bias.data(), fac[g].bias.data() + head_col,
                    sizeof(float) * dh);
        for (std::size_t i = 0; i < rows; ++i)
          std::memcpy(dest + i * dh, tiles.bias.data(), sizeof(float) * dh);
        gemm_acc_ld(prows, rank, fac[g].v.data() + head_col, gd, dest, dh, rows,
                    rank, dh);
      };
      online_softmax_head(seq, dh, plan, tiles, load,
                          out.data() + b * seq * d + h * dh, d);
    });
  }
}

void naive_lowrank_attention(const Tensor& x, const AttentionFactorSet& set,
                             std::size_t heads, const TilePlan& plan,
                             MemoryMeter& meter, Tensor& out) {
  const std::size_t d = set.d_model;
  check_attention_io(x, d, heads, out);
  if (heads % set.groups != 0)
    throw ConfigError("factor groups must evenly cover the heads");
  const std::size_t batch = x.shape()[0], seq = x.shape()[1];
  validate_tile_plan(plan, KernelKind::Attention,
                     plan_geometry(batch, seq, d, heads));
  auto region = meter.scoped_region("naive_lowrank_attention");
  {
    ScopedBuffer q(meter, "q_full", AllocClass::Transient, {batch, seq, d});
    ScopedBuffer k(meter, "k_full", AllocClass::Transient, {batch, seq, d});
    ScopedBuffer v(meter, "v_full", AllocClass::Transient, {batch, seq, d});
    project_from_factors(x, set.q, set.groups, q.tensor());
    project_from_factors(x, set.k, set.groups, k.tensor());
    project_from_factors(x, set.v, set.groups, v.tensor());
    streaming_core_materialized(q.tensor(), k.tensor(), v.tensor(), heads, plan,
                                out);
  }
}

void flash_attention_dense_qkv(const Tensor& x, const Tensor& wq,
                               const Tensor& bq, const Tensor& wk,
                               const Tensor& bk, const Tensor& wv,
                               const Tensor& bv, std::size_t heads,
                               const TilePlan& plan, MemoryMeter& meter,
                               Tensor& out) {
  const std::size_t d = wq.shape().size() == 2 ? wq.shape()[1] : 0;
  check_attention_io(x, d, heads, out);
  const std::size_t batch = x.shape()[0], seq = x.shape()[1];
  validate_tile_plan(plan, KernelKind::Attention,
                     plan_geometry(batch, seq, d, heads));
  auto region = meter.scoped_region("flash_attention_dense_qkv");
  {
    ScopedBuffer q(meter, "q_full", AllocClass::Transient, {batch, seq, d});
    ScopedBuffer k(meter, "k_full", AllocClass::Transient, {batch, seq, d});
    ScopedBuffer v(meter, "v_full", AllocClass::Transient, {batch, seq, d});
    project_dense(x, wq, bq, q.tensor());
    project_dense(x, wk, bk, k.tensor());
    project_dense(x, wv, bv, v.tensor());
    streaming_core_materialized(q.tensor(), k.tensor(), v.tensor(), heads, plan,
                                out);
  }
}

void dense_attention(const Tensor& x, const Tensor& wq, const Tensor& bq,
                     const Tensor& wk, const Tensor& bk, const Tensor& wv,
                     const Tensor& bv, std::size_t heads, MemoryMeter& meter,
                     Tensor& out) {
  const std::size_t d = wq.shape().size() == 2 ? wq.shape()[1] : 0;
  check_attention_io(x, d, heads, out);
  const std::size_t batch = x.shape()[0], seq = x.shape()[1];
  const std::size_t dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  auto region = meter.scoped_region("dense_attention");
  {
    ScopedBuffer q(meter, "q_full", AllocClass::Transient, {batch, seq, d});
    ScopedBuffer k(meter, "k_full", AllocClass::Transient, {batch, seq, d});
    ScopedBuffer v(meter, "v_full", AllocClass::Transient, {batch, seq, d});
    project_dense(x, wq, bq, q.tensor());
    project_dense(x, wk, bk, k.tensor());
    project_dense(x, wv, bv, v.tensor());
    // The full score tensor is the point of this baseline: it coexists with
    // q/k/v, so the metered peak is 4*(3*B*M*D + B*H*M^2) bytes.
    ScopedBuffer scores(meter, "scores", AllocClass::Transient,
                        {batch, heads, seq, seq});
    parallel_for(batch * heads, [&](std::size_t task) {
      const std::size_t b = task / heads, h = task % heads;
      float* s = scores.tensor().data() + (b * heads + h) * seq * seq;
      const float* qb = q.tensor().data() + b * seq * d + h * dh;
      const float* kb = k.tensor().data() + b * seq * d + h * dh;
      const float* vb = v.tensor().data() + b * seq * d + h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t j = 0; j < seq; ++j) {
          float acc = 0.0f;
          for (std::size_t dd = 0; dd < dh; ++dd)
            acc += qb[i * d + dd] * kb[j * d + dd];
          s[i * seq + j] = acc * scale;
        }
      }
      for (std::size_t i = 0; i < seq; ++i) softmax_row(s + i * seq, seq);
      float* ob = out.data() + b * seq * d + h * dh;
      for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t dd = 0; dd < dh; ++dd) {
          float acc = 0.0f;
          for (std::size_t j = 0; j < seq; ++j)
            acc += s[i * seq + j] * vb[j * d + dd];
          ob[i * d + dd] = acc;
        }
    });
  }
}

void lowrank_output_projection(const Tensor& ctx, const FactorizedLinear& proj,
                               MemoryMeter& meter, const std::string& pin_prefix,
                               Tensor& out) {
  if (ctx.shape().size() != 3 || ctx.shape()[2] != proj.in_dim())
    throw ShapeError("context width does not match the projection factors");
  if (!out.same_shape(ctx) || proj.out_dim() != ctx.shape()[2])
    throw ShapeError("output projection must preserve the activation shape");
  const std::size_t batch = ctx.shape()[0], seq = ctx.shape()[1];
  const std::size_t d = proj.in_dim(), rank = proj.rank();
  meter.pin_persistent(pin_prefix + ".out.u", sizeof(float) * proj.u.numel());
  meter.pin_persistent(pin_prefix + ".out.v", sizeof(float) * proj.v.numel());
  auto region = meter.scoped_region("lowrank_output_projection");
  {
    ScopedBuffer p(meter, "p_out", AllocClass::Transient, {batch, seq, rank});
    std::fill(p.tensor().data(), p.tensor().data() + p.tensor().numel(), 0.0f);
    parallel_for(batch, [&](std::size_t b) {
      gemm_acc_ld(ctx.data() + b * seq * d, d, proj.u.data(), rank,
                  p.tensor().data() + b * seq * rank, rank, seq, d, rank);
      float* orow = out.data() + b * seq * d;
      for (std::size_t i = 0; i < seq; ++i)
        std::memcpy(orow + i * d, proj.bias.data(), sizeof(float) * d);
      gemm_acc_ld(p.tensor().data() + b * seq * rank, rank, proj.v.data(), d,
                  orow, d, seq, rank, d);
    });
  }
}

void dense_output_projection(const Tensor& ctx, const Tensor& w, const Tensor& b,
                             Tensor& out) {
  if (ctx.shape().size() != 3 || w.shape().size() != 2 ||
      ctx.shape()[2] != w.shape()[0])
    throw ShapeError("context width does not match the projection weight");
  if (!out.same_shape(ctx))
    throw ShapeError("output projection must preserve the activation shape");
  const std::size_t batch = ctx.shape()[0], seq = ctx.shape()[1];
  const std::size_t d = ctx.shape()[2];
  parallel_for(batch, [&](std::size_t bb) {
    float* obase = out.data() + bb * seq * d;
    for (std::size_t i = 0; i < seq; ++i)
      std::memcpy(obase + i * d, b.data(), sizeof(float) * d);
    gemm_acc_ld(ctx.data() + bb * seq * d, d, w.data(), d, obase, d, seq, d, d);
  });
}

}  // namespace flashsvd
