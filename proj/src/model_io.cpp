#include "flashsvd/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flashsvd/errors.hpp"

namespace flashsvd {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'V', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kMaxNdim = 8;

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are written with the native byte order");

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::string serialize(const std::vector<NamedTensor>& tensors) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  if (tensors.size() > 0xffffffffu)
    throw ConfigError("too many tensors for the container");
  put_u32(out, std::uint32_t(tensors.size()));
  for (const NamedTensor& nt : tensors) {
    if (nt.name.empty() || nt.name.size() > 0xffff)
      throw ConfigError("tensor name length out of range: " + nt.name);
    put_u16(out, std::uint16_t(nt.name.size()));
    out.append(nt.name);
    out.push_back(0);  // dtype: 32-bit float
    const std::vector<std::size_t>& shape = nt.tensor.shape();
    if (shape.empty() || shape.size() > kMaxNdim)
      throw ConfigError("tensor rank out of range: " + nt.name);
    out.push_back(char(shape.size()));
    for (std::size_t e : shape) put_u64(out, e);
    out.append(reinterpret_cast<const char*>(nt.tensor.data()),
               sizeof(float) * nt.tensor.numel());
  }
  return out;
}

// Sequential reader that reports the offset of the first unreadable byte; a
// field running past the end points at the end of the file.
struct Cursor {
  const unsigned char* p;
  std::size_t size;
  std::size_t off = 0;

  void need(std::size_t n, const char* what) {
    if (size - off < n)
      throw FormatError(size, std::string("file truncated in ") + what);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = std::uint16_t(p[off]) | std::uint16_t(p[off + 1]) << 8;
    off += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[off + i]) << (8 * i);
    off += 8;
    return v;
  }
};

std::vector<NamedTensor> deserialize(const std::string& bytes) {
  Cursor c{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()};
  c.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(0, "bad magic, not an FSVD file");
  c.off = 4;
  const std::size_t version_at = c.off;
  if (c.u32("version") != kVersion)
    throw FormatError(version_at, "unsupported container version");
  const std::uint32_t count = c.u32("tensor count");

  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = c.u16("name length");
    c.need(name_len, "name");
    std::string name(bytes.data() + c.off, name_len);
    c.off += name_len;

    c.need(1, "dtype");
    if (c.p[c.off] != 0)
      throw FormatError(c.off, "unsupported dtype for tensor " + name);
    ++c.off;

    c.need(1, "tensor rank");
    const std::size_t ndim = c.p[c.off];
    if (ndim == 0 || ndim > kMaxNdim)
      throw FormatError(c.off, "bad tensor rank for " + name);
    ++c.off;

    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
      const std::size_t extent_at = c.off;
      const std::uint64_t e = c.u64("extent");
      if (e == 0) throw FormatError(extent_at, "zero extent in " + name);
      if (e > (SIZE_MAX / sizeof(float)) / numel)
        throw FormatError(extent_at, "extent overflow in " + name);
      shape[i] = std::size_t(e);
      numel *= std::size_t(e);
    }

    c.need(sizeof(float) * numel, "tensor payload");
    std::vector<float> data(numel);
    std::memcpy(data.data(), bytes.data() + c.off, sizeof(float) * numel);
    c.off += sizeof(float) * numel;
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (c.off != bytes.size())
    throw FormatError(c.off, "trailing bytes after the last tensor");
  return out;
}

Tensor scalar_tensor(float v) { return Tensor({1}, {v}); }

float activation_code(Activation act) {
  return float(static_cast<int>(act));
}

Activation activation_from_code(float code) {
  const int c = int(code);
  if (float(c) != code || c < 0 || c > 3)
    throw ConfigError("bad activation code in model file");
  return static_cast<Activation>(c);
}

std::size_t count_from_scalar(float v, const char* what) {
  const std::size_t n = std::size_t(v);
  if (v <= 0.0f || float(n) != v)
    throw ConfigError(std::string(what) + " must be a positive integer");
  return n;
}

std::vector<NamedTensor> flatten_model(const std::vector<EncoderLayer>& layers) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const EncoderLayer& layer = layers[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    auto push = [&out](std::string name, const Tensor& t) {
      out.push_back({std::move(name), t});
    };

    push(p + "heads", scalar_tensor(float(layer.heads)));
    push(p + "ln1.gamma", layer.ln1.gamma);
    push(p + "ln1.beta", layer.ln1.beta);
    push(p + "ln1.eps", scalar_tensor(layer.ln1.eps));
    push(p + "ln2.gamma", layer.ln2.gamma);
    push(p + "ln2.beta", layer.ln2.beta);
    push(p + "ln2.eps", scalar_tensor(layer.ln2.eps));

    if (layer.attn_dense) {
      const DenseAttentionWeights& w = *layer.attn_dense;
      push(p + "attn.q.W", w.wq);
      push(p + "attn.q.b", w.bq);
      push(p + "attn.k.W", w.wk);
      push(p + "attn.k.b", w.bk);
      push(p + "attn.v.W", w.wv);
      push(p + "attn.v.b", w.bv);
      push(p + "attn.out.W", w.wo);
      push(p + "attn.out.b", w.bo);
    }
    if (layer.attn_factors) {
      const AttentionFactorSet& s = *layer.attn_factors;
      const char* names[3] = {"q", "k", "v"};
      for (int m = 0; m < 3; ++m) {
        const std::vector<FactorizedLinear>& fl =
            s.matrix(m == 0 ? Qkv::Q : m == 1 ? Qkv::K : Qkv::V);
        for (std::size_t g = 0; g < s.groups; ++g) {
          const std::string gp =
              p + "attn." + names[m] + ".head." + std::to_string(g) + ".";
          push(gp + "U", fl[g].u);
          push(gp + "V", fl[g].v);
          push(gp + "b", fl[g].bias);
        }
      }
      push(p + "attn.out.U", layer.out_proj->u);
      push(p + "attn.out.V", layer.out_proj->v);
      push(p + "attn.out.bias", layer.out_proj->bias);
    }

    if (layer.ffn_dense) {
      const DenseFfnWeights& w = *layer.ffn_dense;
      push(p + "ffn.in.W", w.w_in);
      push(p + "ffn.in.b", w.b_in);
      push(p + "ffn.out.W", w.w_out);
      push(p + "ffn.out.b", w.b_out);
    }
    if (layer.ffn_factors) {
      const FfnFactors& f = *layer.ffn_factors;
      push(p + "ffn.up.U", f.up.u);
      push(p + "ffn.up.V", f.up.v);
      push(p + "ffn.up.b", f.up.bias);
      push(p + "ffn.down.U", f.down.u);
      push(p + "ffn.down.V", f.down.v);
      push(p + "ffn.down.b", f.down.bias);
    }
    const Activation act = layer.ffn_factors ? layer.ffn_factors->activation
                                             : layer.ffn_dense->activation;
    push(p + "ffn.act", scalar_tensor(activation_code(act)));
  }
  return out;
}

class TensorMap {
 public:
  explicit TensorMap(std::vector<NamedTensor>&& tensors) {
    for (NamedTensor& nt : tensors) {
      auto [it, inserted] = map_.emplace(std::move(nt.name), std::move(nt.tensor));
      if (!inserted) throw ConfigError("duplicate tensor name: " + it->first);
    }
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end())
      throw ConfigError("model file is missing tensor: " + name);
    return it->second;
  }
  float scalar(const std::string& name) const {
    const Tensor& t = get(name);
    if (t.numel() != 1) throw ShapeError(name + " must hold a single value");
    return t.at(std::size_t{0});
  }

 private:
  std::map<std::string, Tensor> map_;
};

std::vector<EncoderLayer> assemble(std::vector<NamedTensor>&& tensors) {
  std::size_t count = 0;
  for (const NamedTensor& nt : tensors) {
    if (nt.name.rfind("layer.", 0) != 0)
      throw ConfigError("unrecognized tensor name: " + nt.name);
    const std::size_t dot = nt.name.find('.', 6);
    std::size_t index = SIZE_MAX;
    if (dot != std::string::npos && dot > 6) {
      const std::string digits = nt.name.substr(6, dot - 6);
      if (digits.find_first_not_of("0123456789") == std::string::npos)
        index = std::stoul(digits);
    }
    if (index == SIZE_MAX)
      throw ConfigError("unrecognized tensor name: " + nt.name);
    count = std::max(count, index + 1);
  }
  TensorMap m(std::move(tensors));

  std::vector<EncoderLayer> layers;
  layers.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    EncoderLayer layer;
    layer.heads = count_from_scalar(m.scalar(p + "heads"), "heads");
    layer.ln1 = {m.get(p + "ln1.gamma"), m.get(p + "ln1.beta"),
                 m.scalar(p + "ln1.eps")};
    layer.ln2 = {m.get(p + "ln2.gamma"), m.get(p + "ln2.beta"),
                 m.scalar(p + "ln2.eps")};
    const Activation act = activation_from_code(m.scalar(p + "ffn.act"));

    if (m.has(p + "attn.q.W")) {
      layer.attn_dense = DenseAttentionWeights{
          m.get(p + "attn.q.W"), m.get(p + "attn.q.b"),
          m.get(p + "attn.k.W"), m.get(p + "attn.k.b"),
          m.get(p + "attn.v.W"), m.get(p + "attn.v.b"),
          m.get(p + "attn.out.W"), m.get(p + "attn.out.b")};
    }
    if (m.has(p + "attn.q.head.0.U")) {
      AttentionFactorSet s;
      while (m.has(p + "attn.q.head." + std::to_string(s.groups) + ".U"))
        ++s.groups;
      const char* names[3] = {"q", "k", "v"};
      for (int mat = 0; mat < 3; ++mat) {
        std::vector<FactorizedLinear>& fl =
            mat == 0 ? s.q : mat == 1 ? s.k : s.v;
        for (std::size_t g = 0; g < s.groups; ++g) {
          const std::string gp =
              p + "attn." + names[mat] + ".head." + std::to_string(g) + ".";
          fl.push_back({m.get(gp + "U"), m.get(gp + "V"), m.get(gp + "b")});
        }
      }
      if (s.q[0].u.ndim() != 2)
        throw ShapeError("attention factor U must be a matrix");
      s.d_model = s.q[0].u.shape()[0];
      s.rank = s.q[0].u.shape()[1];
      layer.attn_factors = std::move(s);
      layer.out_proj = FactorizedLinear{m.get(p + "attn.out.U"),
                                        m.get(p + "attn.out.V"),
                                        m.get(p + "attn.out.bias")};
    }

    if (m.has(p + "ffn.in.W")) {
      layer.ffn_dense = DenseFfnWeights{
          m.get(p + "ffn.in.W"), m.get(p + "ffn.in.b"),
          m.get(p + "ffn.out.W"), m.get(p + "ffn.out.b"), act};
    }
    if (m.has(p + "ffn.up.U")) {
      layer.ffn_factors = FfnFactors{
          {m.get(p + "ffn.up.U"), m.get(p + "ffn.up.V"), m.get(p + "ffn.up.b")},
          {m.get(p + "ffn.down.U"), m.get(p + "ffn.down.V"),
           m.get(p + "ffn.down.b")},
          act};
    }
    layer.validate();
    layers.push_back(std::move(layer));
  }
  return layers;
}

// Same-seed determinism requires an explicit uint64 -> double mapping:
// std::normal_distribution's algorithm is implementation-defined.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}

  double next() {
    constexpr double kPi = 3.14159265358979323846;
    const double u1 = double((rng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = double(rng_() >> 11) * 0x1.0p-53;        // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  Tensor tensor(std::vector<std::size_t> shape, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
      t.at(i) = float(stddev * next());
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

LayerNormParams identity_norm(std::size_t d) {
  Tensor gamma({d});
  Tensor beta({d});
  for (std::size_t i = 0; i < d; ++i) gamma.at(i) = 1.0f;
  return {std::move(gamma), std::move(beta), 1e-5f};
}

}  // namespace

void write_tensor_file(const std::string& path,
                       const std::vector<NamedTensor>& tensors) {
  const std::string bytes = serialize(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed: " + path);
  return deserialize(bytes);
}

ModelInfo infer_model_info(const std::vector<EncoderLayer>& layers) {
  ModelInfo info;
  info.layers = layers.size();
  if (layers.empty()) return info;
  const EncoderLayer& l0 = layers.front();
  info.d_model = l0.d_model();
  info.d_ff = l0.d_ff();
  info.heads = l0.heads;
  if (l0.attn_factors) {
    info.groups = l0.attn_factors->groups;
    info.rank = l0.attn_factors->rank;
  }
  if (l0.out_proj) info.proj_rank = l0.out_proj->rank();
  if (l0.ffn_factors) info.ffn_rank = l0.ffn_factors->up.rank();
  return info;
}

void save_model(const std::string& path,
                const std::vector<EncoderLayer>& layers,
                const std::optional<ModelInfo>& info) {
  for (const EncoderLayer& l : layers) l.validate();
  write_tensor_file(path, flatten_model(layers));

  const ModelInfo mi = info ? *info : infer_model_info(layers);
  nlohmann::json j;
  j["layers"] = mi.layers;
  j["d_model"] = mi.d_model;
  j["d_ff"] = mi.d_ff;
  j["heads"] = mi.heads;
  j["groups"] = mi.groups;
  j["rank"] = mi.rank;
  j["proj_rank"] = mi.proj_rank;
  j["ffn_rank"] = mi.ffn_rank;
  j["mode"] = mode_name(mi.mode);
  j["seed"] = mi.seed;
  j["plan"] = {{"bm", mi.plan.bm},
               {"br", mi.plan.br},
               {"bdf", mi.plan.bdf},
               {"sram_budget_bytes", mi.plan.sram_budget_bytes}};
  std::ofstream f(path + ".json", std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path + ".json");
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path + ".json");
}

std::vector<EncoderLayer> load_model(const std::string& path) {
  return assemble(read_tensor_file(path));
}

ModelInfo load_model_info(const std::string& path) {
  std::ifstream f(path + ".json");
  if (!f) throw IoError("cannot open sidecar: " + path + ".json");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("sidecar parse failed: ") + e.what());
  }
  ModelInfo mi;
  try {
    mi.layers = j.at("layers").get<std::size_t>();
    mi.d_model = j.at("d_model").get<std::size_t>();
    mi.d_ff = j.at("d_ff").get<std::size_t>();
    mi.heads = j.at("heads").get<std::size_t>();
    mi.groups = j.at("groups").get<std::size_t>();
    mi.rank = j.at("rank").get<std::size_t>();
    mi.proj_rank = j.at("proj_rank").get<std::size_t>();
    mi.ffn_rank = j.at("ffn_rank").get<std::size_t>();
    mi.mode = parse_run_mode(j.at("mode").get<std::string>());
    mi.seed = j.at("seed").get<std::uint64_t>();
    const nlohmann::json& p = j.at("plan");
    mi.plan.bm = p.at("bm").get<std::size_t>();
    mi.plan.br = p.at("br").get<std::size_t>();
    mi.plan.bdf = p.at("bdf").get<std::size_t>();
    mi.plan.sram_budget_bytes = p.at("sram_budget_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sidecar field error: ") + e.what());
  }
  return mi;
}

std::vector<EncoderLayer> synth_model(const SynthSpec& spec) {
  if (spec.layers == 0) throw ConfigError("synth_model: need at least one layer");
  const std::size_t d = spec.d_model, df = spec.d_ff, h = spec.heads;
  const std::size_t groups = spec.groups == 0 ? h : spec.groups;

  Geometry geom;
  geom.d_model = d;
  geom.d_ff = df;
  geom.heads = h;
  geom.groups = groups;
  geom.rank = spec.rank == 0 ? d / groups : spec.rank;
  geom.layers = spec.layers;
  geom.validate();
  const std::size_t rank = geom.rank;
  const std::size_t proj_rank =
      spec.proj_rank == 0 ? std::min(rank * groups, d) : spec.proj_rank;
  const std::size_t ffn_rank =
      spec.ffn_rank == 0 ? std::min(proj_rank, std::min(d, df)) : spec.ffn_rank;
  if (proj_rank > d) throw RankError("proj_rank exceeds d_model");
  if (ffn_rank > std::min(d, df))
    throw RankError("ffn_rank exceeds min(d_model, d_ff)");

  GaussianStream gauss(spec.seed);
  const double wstd = 1.0 / std::sqrt(double(d));
  const double bstd = 0.02;

  std::vector<EncoderLayer> layers;
  layers.reserve(spec.layers);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    // Draw order is part of the determinism contract; keep_dense must not
    // change which values the factors see.
    DenseAttentionWeights aw;
    aw.wq = gauss.tensor({d, d}, wstd);
    aw.bq = gauss.tensor({d}, bstd);
    aw.wk = gauss.tensor({d, d}, wstd);
    aw.bk = gauss.tensor({d}, bstd);
    aw.wv = gauss.tensor({d, d}, wstd);
    aw.bv = gauss.tensor({d}, bstd);
    aw.wo = gauss.tensor({d, d}, wstd);
    aw.bo = gauss.tensor({d}, bstd);
    DenseFfnWeights fw;
    fw.w_in = gauss.tensor({d, df}, wstd);
    fw.b_in = gauss.tensor({df}, bstd);
    fw.w_out = gauss.tensor({df, d}, wstd);
    fw.b_out = gauss.tensor({d}, bstd);
    fw.activation = spec.activation;

    EncoderLayer layer;
    layer.heads = h;
    layer.ln1 = identity_norm(d);
    layer.ln2 = identity_norm(d);
    layer.attn_factors = factorize_attention(aw.wq, aw.bq, aw.wk, aw.bk,
                                             aw.wv, aw.bv, groups, rank);
    layer.out_proj = factorize_linear(aw.wo, aw.bo, proj_rank);
    layer.ffn_factors = factorize_ffn(fw.w_in, fw.b_in, fw.w_out, fw.b_out,
                                      ffn_rank, spec.activation);
    if (spec.keep_dense) {
      layer.attn_dense = std::move(aw);
      layer.ffn_dense = std::move(fw);
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

}  // namespace flashsvd
