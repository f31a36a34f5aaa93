#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "flashsvd/errors.hpp"
#include "flashsvd/geometry.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

// Accounting class for a metered allocation.
//
//   Transient  — activation workspace whose peak is the quantity under test.
//   Persistent — weight factors pinned for the lifetime of a model; tracked
//                as a running total, never freed through the meter.
//   Excluded   — buffers shared by every execution mode (sublayer inputs and
//                outputs, residual/LayerNorm scratch) that would mask the
//                mode-dependent differences if they were counted.
enum class AllocClass { Transient, Persistent, Excluded };

enum class MeterEventKind { Alloc, Free, Pin, RegionBegin, RegionEnd };

struct MeterEvent {
  MeterEventKind kind;
  AllocClass cls;          // valid for Alloc/Free
  std::string tag;         // buffer tag, pin tag, or region name
  std::size_t bytes;       // alloc/free/pin size; 0 for region markers
  std::uint64_t id;        // allocation id; 0 for pin/region events
};

struct MeterHandle {
  std::uint64_t id = 0;    // 0 = invalid / moved-from
};

class MeterRegion;

// Byte meter for the two-tier memory model.  Every buffer a kernel touches is
// registered here; nothing else in the engine measures memory, so the event
// log is a complete record that tests can replay independently.
class MemoryMeter {
 public:
  MeterHandle alloc(const std::string& tag, AllocClass cls, std::size_t bytes);
  void free(MeterHandle handle);

  // Registers a weight buffer as persistent.  Idempotent by tag: re-pinning
  // the same tag with the same size is a no-op, so kernels that run many
  // times may pin unconditionally.  A size mismatch for an existing tag is an
  // accounting bug and throws.
  void pin_persistent(const std::string& tag, std::size_t bytes);

  MeterRegion scoped_region(const std::string& name);

  std::size_t current_transient_bytes() const;
  std::size_t peak_transient_bytes() const;
  std::size_t persistent_bytes() const;
  std::size_t current_excluded_bytes() const;

  // Restarts peak tracking from the current level (for measuring one phase
  // of a longer run).
  void reset_peak();

  // Throws AccountingError if any scoped region ended with unbalanced
  // transient bytes.  Region destructors cannot throw, so the violation is
  // latched here instead.
  void assert_clean() const;

  std::vector<MeterEvent> events() const;

 private:
  friend class MeterRegion;
  void end_region(const std::string& name, std::size_t entry_transient);

  struct Live {
    AllocClass cls;
    std::string tag;
    std::size_t bytes;
  };

  mutable std::mutex mu_;
  std::uint64_t next_id_ = 1;
  std::map<std::uint64_t, Live> live_;
  std::map<std::string, std::size_t> pins_;
  std::size_t current_transient_ = 0;
  std::size_t peak_transient_ = 0;
  std::size_t persistent_ = 0;
  std::size_t current_excluded_ = 0;
  std::string violation_;
  std::vector<MeterEvent> events_;
};

// Marks a span of execution whose transient usage must balance: every
// transient byte allocated inside must be freed before the region ends.
class MeterRegion {
 public:
  MeterRegion(MemoryMeter& meter, std::string name, std::size_t entry_transient)
      : meter_(&meter), name_(std::move(name)), entry_transient_(entry_transient) {}
  MeterRegion(const MeterRegion&) = delete;
  MeterRegion& operator=(const MeterRegion&) = delete;
  MeterRegion(MeterRegion&& other) noexcept
      : meter_(other.meter_), name_(std::move(other.name_)),
        entry_transient_(other.entry_transient_) {
    other.meter_ = nullptr;
  }
  MeterRegion& operator=(MeterRegion&&) = delete;
  ~MeterRegion() {
    if (meter_) meter_->end_region(name_, entry_transient_);
  }

 private:
  MemoryMeter* meter_;
  std::string name_;
  std::size_t entry_transient_;
};

// Tensor whose storage is registered with a meter for its lifetime.
class ScopedBuffer {
 public:
  ScopedBuffer(MemoryMeter& meter, const std::string& tag, AllocClass cls,
               std::vector<std::size_t> shape)
      : tensor_(std::move(shape)),
        meter_(&meter),
        handle_(meter.alloc(tag, cls, sizeof(float) * tensor_.numel())) {}
  ScopedBuffer(const ScopedBuffer&) = delete;
  ScopedBuffer& operator=(const ScopedBuffer&) = delete;
  ScopedBuffer(ScopedBuffer&& other) noexcept
      : tensor_(std::move(other.tensor_)), meter_(other.meter_), handle_(other.handle_) {
    other.handle_.id = 0;
  }
  ScopedBuffer& operator=(ScopedBuffer&&) = delete;
  ~ScopedBuffer() {
    if (handle_.id != 0) meter_->free(handle_);
  }

  Tensor& tensor() { return tensor_; }
  const Tensor& tensor() const { return tensor_; }

 private:
  Tensor tensor_;
  MemoryMeter* meter_;
  MeterHandle handle_;
};

// Tile geometry for the streaming kernels.  bm tiles the sequence dimension
// of the output rows, br tiles the key/value sequence dimension, bdf tiles
// the feed-forward hidden dimension.  The budget models per-core scratchpad
// capacity; validate_tile_plan rejects plans whose working set exceeds it.
struct TilePlan {
  std::size_t bm = 16;
  std::size_t br = 16;
  std::size_t bdf = 64;
  std::size_t sram_budget_bytes = 131072;
};

enum class KernelKind { Attention, FfnV1, FfnV2 };

// Sums the on-chip working set (in bytes) of the named kernel under the plan
// and returns it; throws BudgetError naming the largest buffer if it exceeds
// the plan's budget, ConfigError if a tile dimension is zero.
std::size_t validate_tile_plan(const TilePlan& plan, KernelKind kind,
                               const Geometry& geom);

// Closed-form peak transient activation bytes per execution mode, 4 bytes per
// element.  These are the contract the meter is checked against.
enum class FormulaId {
  DenseAttn,          // 4 * (3*B*M*D_A + B*H*M^2)
  FlashAttnDenseQkv,  // 4 * 3*B*M*D_A
  FlashSvdAttn,       // 4 * 3*H*B*M*r
  GroupedAttn,        // 4 * 3*G*B*M*r
  FfnDense,           // 4 * B*M*D_F
  FfnNaiveLowRank,    // 4 * B*M*D_F
  FfnV1,              // 4 * 2*B*M*r
  FfnV2,              // 0
};

std::size_t expected_bytes(FormulaId id, const Geometry& geom);

}  // namespace flashsvd
