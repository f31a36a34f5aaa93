#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flashsvd/encoder.hpp"
#include "flashsvd/memtier.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

/*
 * FSVD1 container, little-endian throughout, no alignment padding:
 *
 *   magic  "FSVD" (4 bytes)
 *   u32    version = 1
 *   u32    tensor_count
 *   per tensor:
 *     u16    name_len
 *     bytes  name (UTF-8, e.g. "layer.0.attn.q.head.3.U")
 *     u8     dtype (0 = 32-bit float)
 *     u8     ndim
 *     u64[]  extents (ndim entries)
 *     f32[]  row-major payload
 *
 * A plain-text JSON sidecar at <path>.json carries the run configuration
 * (geometry, mode, tile plan, seed).
 */

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Low-level container access.  write produces a canonical byte stream (same
// tensors in the same order give the same bytes); read validates the header
// and every record, throwing FormatError with the offset of the first bad
// byte.
void write_tensor_file(const std::string& path,
                       const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_file(const std::string& path);

// Sidecar payload.
struct ModelInfo {
  std::size_t layers = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t heads = 0;
  std::size_t groups = 0;
  std::size_t rank = 0;       // per-group q/k/v rank
  std::size_t proj_rank = 0;  // output projection rank
  std::size_t ffn_rank = 0;
  RunMode mode = RunMode::FlashV1;
  TilePlan plan;
  std::uint64_t seed = 0;
};

// Reads the geometry back out of an assembled model (ranks 0 when a layer
// has no factorized representation).
ModelInfo infer_model_info(const std::vector<EncoderLayer>& layers);

// Saves layers as FSVD1 plus the JSON sidecar; with no explicit info the
// sidecar geometry is inferred.  save -> load -> save is byte-identical.
void save_model(const std::string& path,
                const std::vector<EncoderLayer>& layers,
                const std::optional<ModelInfo>& info = std::nullopt);
std::vector<EncoderLayer> load_model(const std::string& path);
ModelInfo load_model_info(const std::string& path);

// Seeded synthetic encoder stack: dense weights drawn N(0, 1/sqrt(d_model)),
// biases N(0, 0.02), LayerNorm at identity, then factorized.  Zero-valued
// rank knobs resolve to the matched defaults noted inline; the same spec
// always produces byte-identical layers.
struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t layers = 1;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t heads = 4;
  std::size_t groups = 0;     // 0: per-head (groups = heads)
  std::size_t rank = 0;       // per-group q/k/v rank; 0: full (d_model/groups)
  std::size_t proj_rank = 0;  // 0: rank * groups capped at d_model
  std::size_t ffn_rank = 0;   // 0: proj_rank capped at min(d_model, d_ff)
  bool keep_dense = true;     // retain the original dense weights as well
  Activation activation = Activation::GeluErf;
};

std::vector<EncoderLayer> synth_model(const SynthSpec& spec);

}  // namespace flashsvd
