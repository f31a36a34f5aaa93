#include "flashsvd/encoder.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "flashsvd/errors.hpp"

namespace flashsvd {

namespace {

void check_vec(const Tensor& t, std::size_t n, const char* what) {
  if (t.ndim() != 1 || t.numel() != n)
    throw ShapeError(std::string(what) + ": expected a length-" +
                     std::to_string(n) + " vector");
}

void check_mat(const Tensor& t, std::size_t rows, std::size_t cols,
               const char* what) {
  if (t.ndim() != 2 || t.shape()[0] != rows || t.shape()[1] != cols)
    throw ShapeError(std::string(what) + ": expected shape (" +
                     std::to_string(rows) + ", " + std::to_string(cols) + ")");
}

void check_mode_weights(const EncoderLayer& layer, RunMode mode) {
  if (mode == RunMode::Dense) {
    if (!layer.attn_dense || !layer.ffn_dense)
      throw ConfigError("dense mode needs dense weights on both sublayers");
  } else if (!layer.attn_factors || !layer.out_proj || !layer.ffn_factors) {
    throw ConfigError(std::string(mode_name(mode)) +
                      " mode needs factorized weights on both sublayers");
  }
}

// dst = LN(a + b), row-wise over the trailing model dimension.
void residual_norm(const Tensor& a, const Tensor& b, const LayerNormParams& ln,
                   Tensor& dst) {
  const std::size_t d = ln.gamma.numel();
  const std::size_t rows = a.numel() / d;
  std::vector<float> sum(d);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* ar = a.data() + i * d;
    const float* br = b.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) sum[j] = ar[j] + br[j];
    layer_norm_row(sum.data(), dst.data() + i * d, d, ln.gamma.data(),
                   ln.beta.data(), ln.eps);
  }
}

void norm_only(const Tensor& a, const LayerNormParams& ln, Tensor& dst) {
  const std::size_t d = ln.gamma.numel();
  const std::size_t rows = a.numel() / d;
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_row(a.data() + i * d, dst.data() + i * d, d, ln.gamma.data(),
                   ln.beta.data(), ln.eps);
}

void add_only(const Tensor& a, const Tensor& b, Tensor& dst) {
  for (std::size_t i = 0; i < a.numel(); ++i) dst.at(i) = a.at(i) + b.at(i);
}

// Unmetered factor projection for the NaiveLowRank path: same per-row rank
// scratch the naive kernels use, nothing pinned.
void naive_projection(const Tensor& ctx, const FactorizedLinear& f,
                      Tensor& out) {
  const std::size_t d = f.in_dim(), n = f.out_dim(), r = f.rank();
  const std::size_t rows = ctx.numel() / d;
  std::vector<float> scratch(r);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* xrow = ctx.data() + i * d;
    float* orow = out.data() + i * n;
    std::fill(scratch.begin(), scratch.end(), 0.0f);
    gemm_accumulate(xrow, f.u.data(), scratch.data(), 1, d, r);
    std::memcpy(orow, f.bias.data(), sizeof(float) * n);
    gemm_accumulate(scratch.data(), f.v.data(), orow, 1, r, n);
  }
}

void attention_sublayer(const Tensor& in, const EncoderLayer& layer,
                        RunMode mode, const TilePlan& plan, MemoryMeter& meter,
                        const std::string& prefix, Tensor& ctx,
                        Tensor& attn_out) {
  auto region = meter.scoped_region(prefix);
  switch (mode) {
    case RunMode::Dense: {
      const DenseAttentionWeights& w = *layer.attn_dense;
      dense_attention(in, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, layer.heads,
                      meter, ctx);
      dense_output_projection(ctx, w.wo, w.bo, attn_out);
      break;
    }
    case RunMode::NaiveLowRank:
      naive_lowrank_attention(in, *layer.attn_factors, layer.heads, plan,
                              meter, ctx);
      naive_projection(ctx, *layer.out_proj, attn_out);
      break;
    case RunMode::FlashV1:
    case RunMode::FlashV2:
      flash_svd_attention(in, *layer.attn_factors, layer.heads, plan, meter,
                          prefix, ctx);
      lowrank_output_projection(ctx, *layer.out_proj, meter, prefix, attn_out);
      break;
  }
}

void ffn_sublayer(const Tensor& in, const EncoderLayer& layer, RunMode mode,
                  const TilePlan& plan, MemoryMeter& meter,
                  const std::string& prefix, Tensor& out) {
  auto region = meter.scoped_region(prefix);
  switch (mode) {
    case RunMode::Dense: {
      const DenseFfnWeights& w = *layer.ffn_dense;
      ffn_dense(in, w.w_in, w.b_in, w.w_out, w.b_out, w.activation, meter, out);
      break;
    }
    case RunMode::NaiveLowRank:
      ffn_naive_lowrank(in, *layer.ffn_factors, meter, out);
      break;
    case RunMode::FlashV1:
      ffn_v1(in, *layer.ffn_factors, plan, meter, prefix, out);
      break;
    case RunMode::FlashV2:
      ffn_v2(in, *layer.ffn_factors, plan, meter, prefix, out);
      break;
  }
}

}  // namespace

const char* mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::Dense: return "dense";
    case RunMode::NaiveLowRank: return "naive_lowrank";
    case RunMode::FlashV1: return "flash_v1";
    case RunMode::FlashV2: return "flash_v2";
  }
  throw ConfigError("unknown run mode");
}

RunMode parse_run_mode(const std::string& name) {
  if (name == "dense") return RunMode::Dense;
  if (name == "naive_lowrank") return RunMode::NaiveLowRank;
  if (name == "flash_v1") return RunMode::FlashV1;
  if (name == "flash_v2") return RunMode::FlashV2;
  throw ConfigError("unknown run mode: " + name);
}

std::size_t EncoderLayer::d_ff() const {
  if (ffn_factors) return ffn_factors->up.out_dim();
  if (ffn_dense) return ffn_dense->b_in.numel();
  return 0;
}

void EncoderLayer::validate() const {
  const std::size_t d = d_model();
  if (d == 0) throw ShapeError("layer norm parameters are empty");
  check_vec(ln1.gamma, d, "ln1.gamma");
  check_vec(ln1.beta, d, "ln1.beta");
  check_vec(ln2.gamma, d, "ln2.gamma");
  check_vec(ln2.beta, d, "ln2.beta");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("heads must divide d_model");
  if (!attn_dense && !attn_factors)
    throw ConfigError("layer has no attention weights");
  if (!ffn_dense && !ffn_factors) throw ConfigError("layer has no FFN weights");
  if (out_proj && !attn_factors)
    throw ConfigError("output projection factors without attention factors");

  if (attn_factors) {
    const AttentionFactorSet& s = *attn_factors;
    if (s.d_model != d) throw ShapeError("attention factors d_model mismatch");
    if (s.groups == 0 || d % s.groups != 0)
      throw ConfigError("groups must divide d_model");
    if (heads % s.groups != 0) throw ConfigError("groups must divide heads");
    const std::size_t gd = d / s.groups;
    if (s.q.size() != s.groups || s.k.size() != s.groups ||
        s.v.size() != s.groups)
      throw ShapeError("attention factor group count mismatch");
    for (std::size_t g = 0; g < s.groups; ++g)
      for (const FactorizedLinear* f : {&s.q[g], &s.k[g], &s.v[g]}) {
        check_mat(f->u, d, s.rank, "attention factor U");
        check_mat(f->v, s.rank, gd, "attention factor V");
        check_vec(f->bias, gd, "attention factor bias");
      }
    if (!out_proj)
      throw ConfigError("factorized attention needs an output projection");
    check_mat(out_proj->u, d, out_proj->rank(), "out_proj U");
    check_mat(out_proj->v, out_proj->rank(), d, "out_proj V");
    check_vec(out_proj->bias, d, "out_proj bias");
  }
  if (attn_dense) {
    const DenseAttentionWeights& w = *attn_dense;
    for (const Tensor* m : {&w.wq, &w.wk, &w.wv, &w.wo})
      check_mat(*m, d, d, "attention weight");
    for (const Tensor* b : {&w.bq, &w.bk, &w.bv, &w.bo})
      check_vec(*b, d, "attention bias");
  }

  const std::size_t df = d_ff();
  if (ffn_factors) {
    const FfnFactors& f = *ffn_factors;
    if (f.up.rank() != f.down.rank())
      throw ConfigError("FFN up/down factor ranks differ");
    check_mat(f.up.u, d, f.up.rank(), "ffn up U");
    check_mat(f.up.v, f.up.rank(), df, "ffn up V");
    check_vec(f.up.bias, df, "ffn up bias");
    check_mat(f.down.u, df, f.down.rank(), "ffn down U");
    check_mat(f.down.v, f.down.rank(), d, "ffn down V");
    check_vec(f.down.bias, d, "ffn down bias");
  }
  if (ffn_dense) {
    const DenseFfnWeights& w = *ffn_dense;
    check_mat(w.w_in, d, df, "ffn input weight");
    check_vec(w.b_in, df, "ffn input bias");
    check_mat(w.w_out, df, d, "ffn output weight");
    check_vec(w.b_out, d, "ffn output bias");
    if (ffn_factors && ffn_factors->activation != w.activation)
      throw ConfigError("dense and factorized FFN activations differ");
  }
}

void run_layer(const Tensor& x, const EncoderLayer& layer, RunMode mode,
               const TilePlan& plan, MemoryMeter& meter, Tensor& out,
               const LayerRunOptions& opts) {
  layer.validate();
  check_mode_weights(layer, mode);
  if (x.ndim() != 3 || x.shape()[2] != layer.d_model())
    throw ShapeError("run_layer: x must be (batch, seq, d_model)");
  if (static_cast<const void*>(&out) == static_cast<const void*>(&x))
    throw ConfigError("run_layer: out must be a distinct tensor");
  if (!out.same_shape(x)) throw ShapeError("run_layer: out shape must match x");

  const std::string& pfx = opts.meter_prefix;
  ScopedBuffer ctx(meter, pfx + ".attn_ctx", AllocClass::Excluded, x.shape());
  ScopedBuffer branch(meter, pfx + ".sublayer_out", AllocClass::Excluded,
                      x.shape());
  ScopedBuffer resid(meter, pfx + ".resid", AllocClass::Excluded, x.shape());

  if (!opts.pre_layer_norm) {
    attention_sublayer(x, layer, mode, plan, meter, pfx + ".attn",
                       ctx.tensor(), branch.tensor());
    residual_norm(x, branch.tensor(), layer.ln1, resid.tensor());
    ffn_sublayer(resid.tensor(), layer, mode, plan, meter, pfx + ".ffn",
                 branch.tensor());
    residual_norm(resid.tensor(), branch.tensor(), layer.ln2, out);
  } else {
    ScopedBuffer normed(meter, pfx + ".norm_in", AllocClass::Excluded,
                        x.shape());
    norm_only(x, layer.ln1, normed.tensor());
    attention_sublayer(normed.tensor(), layer, mode, plan, meter,
                       pfx + ".attn", ctx.tensor(), branch.tensor());
    add_only(x, branch.tensor(), resid.tensor());
    norm_only(resid.tensor(), layer.ln2, normed.tensor());
    ffn_sublayer(normed.tensor(), layer, mode, plan, meter, pfx + ".ffn",
                 branch.tensor());
    add_only(resid.tensor(), branch.tensor(), out);
  }
}

void run_model(const Tensor& x, const std::vector<EncoderLayer>& layers,
               RunMode mode, const TilePlan& plan, MemoryMeter& meter,
               Tensor& out, const LayerRunOptions& opts) {
  if (x.ndim() != 3) throw ShapeError("run_model: x must be (batch, seq, d_model)");
  if (static_cast<const void*>(&out) == static_cast<const void*>(&x))
    throw ConfigError("run_model: out must be a distinct tensor");
  if (!out.same_shape(x)) throw ShapeError("run_model: out shape must match x");
  if (layers.empty()) {
    std::memcpy(out.data(), x.data(), sizeof(float) * x.numel());
    return;
  }

  LayerRunOptions layer_opts = opts;
  if (layers.size() == 1) {
    layer_opts.meter_prefix = opts.meter_prefix + ".0";
    run_layer(x, layers.front(), mode, plan, meter, out, layer_opts);
    return;
  }
  ScopedBuffer ping(meter, opts.meter_prefix + ".interlayer.0",
                    AllocClass::Excluded, x.shape());
  ScopedBuffer pong(meter, opts.meter_prefix + ".interlayer.1",
                    AllocClass::Excluded, x.shape());
  const Tensor* cur = &x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Tensor& dst = i + 1 == layers.size()
                      ? out
                      : (i % 2 == 0 ? ping : pong).tensor();
    layer_opts.meter_prefix = opts.meter_prefix + "." + std::to_string(i);
    run_layer(*cur, layers[i], mode, plan, meter, dst, layer_opts);
    cur = &dst;
  }
}

EncoderLayer dense_equivalent(const EncoderLayer& layer) {
  if (!layer.attn_factors || !layer.out_proj || !layer.ffn_factors)
    throw ConfigError("dense twin needs a fully factorized layer");
  const AttentionFactorSet& s = *layer.attn_factors;
  auto concat_bias = [&](const std::vector<FactorizedLinear>& fl) {
    Tensor b({s.d_model});
    std::size_t off = 0;
    for (const FactorizedLinear& f : fl) {
      std::memcpy(b.data() + off, f.bias.data(),
                  sizeof(float) * f.bias.numel());
      off += f.bias.numel();
    }
    return b;
  };
  EncoderLayer twin;
  twin.heads = layer.heads;
  twin.ln1 = layer.ln1;
  twin.ln2 = layer.ln2;
  DenseAttentionWeights aw;
  aw.wq = reconstruct_attention(s, Qkv::Q);
  aw.bq = concat_bias(s.q);
  aw.wk = reconstruct_attention(s, Qkv::K);
  aw.bk = concat_bias(s.k);
  aw.wv = reconstruct_attention(s, Qkv::V);
  aw.bv = concat_bias(s.v);
  aw.wo = reconstruct(*layer.out_proj);
  aw.bo = layer.out_proj->bias;
  DenseFfnWeights fw;
  fw.w_in = reconstruct(layer.ffn_factors->up);
  fw.b_in = layer.ffn_factors->up.bias;
  fw.w_out = reconstruct(layer.ffn_factors->down);
  fw.b_out = layer.ffn_factors->down.bias;
  fw.activation = layer.ffn_factors->activation;
  twin.attn_dense = std::move(aw);
  twin.ffn_dense = std::move(fw);
  return twin;
}

std::size_t flash_layer_peak_transient_bytes(const Geometry& geom) {
  return 4 * 3 * geom.groups * geom.batch * geom.seq_len * geom.rank;
}

std::size_t flash_layer_persistent_bytes(const Geometry& geom) {
  return 4 * geom.rank * (7 * geom.d_model + 2 * geom.d_ff);
}

std::size_t flash_layer_bound_bytes(const Geometry& geom) {
  const std::size_t c = std::max<std::size_t>(3 * geom.groups, 7);
  return 4 * c * geom.rank *
         (geom.batch * geom.seq_len + geom.d_model + geom.d_ff);
}

}  // namespace flashsvd
