#include "flashsvd/memtier.hpp"

#include <algorithm>
#include <utility>

namespace flashsvd {

MeterHandle MemoryMeter::alloc(const std::string& tag, AllocClass cls,
                               std::size_t bytes) {
  std::lock_guard<std::mutex> lock(mu_);
  const std::uint64_t id = next_id_++;
  live_.emplace(id, Live{cls, tag, bytes});
  switch (cls) {
    case AllocClass::Transient:
      current_transient_ += bytes;
      peak_transient_ = std::max(peak_transient_, current_transient_);
      break;
    case AllocClass::Persistent:
      persistent_ += bytes;
      break;
    case AllocClass::Excluded:
      current_excluded_ += bytes;
      break;
  }
  events_.push_back({MeterEventKind::Alloc, cls, tag, bytes, id});
  return MeterHandle{id};
}

void MemoryMeter::free(MeterHandle handle) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = live_.find(handle.id);
  if (it == live_.end())
    throw AccountingError("free of unknown or already-freed handle " +
                          std::to_string(handle.id));
  const Live live = it->second;
  live_.erase(it);
  switch (live.cls) {
    case AllocClass::Transient:
      current_transient_ -= live.bytes;
      break;
    case AllocClass::Persistent:
      persistent_ -= live.bytes;
      break;
    case AllocClass::Excluded:
      current_excluded_ -= live.bytes;
      break;
  }
  events_.push_back({MeterEventKind::Free, live.cls, live.tag, live.bytes, handle.id});
}

void MemoryMeter::pin_persistent(const std::string& tag, std::size_t bytes) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = pins_.find(tag);
  if (it != pins_.end()) {
    if (it->second != bytes)
      throw AccountingError("pin \"" + tag + "\" re-registered with " +
                            std::to_string(bytes) + " bytes, was " +
                            std::to_string(it->second));
    return;
  }
  pins_.emplace(tag, bytes);
  persistent_ += bytes;
  events_.push_back({MeterEventKind::Pin, AllocClass::Persistent, tag, bytes, 0});
}

MeterRegion MemoryMeter::scoped_region(const std::string& name) {
  std::lock_guard<std::mutex> lock(mu_);
  events_.push_back({MeterEventKind::RegionBegin, AllocClass::Transient, name, 0, 0});
  return MeterRegion(*this, name, current_transient_);
}

void MemoryMeter::end_region(const std::string& name, std::size_t entry_transient) {
  std::lock_guard<std::mutex> lock(mu_);
  events_.push_back({MeterEventKind::RegionEnd, AllocClass::Transient, name, 0, 0});
  if (current_transient_ != entry_transient && violation_.empty()) {
    violation_ = "region \"" + name + "\" ended with " +
                 std::to_string(current_transient_) +
                 " transient bytes live, entered with " +
                 std::to_string(entry_transient);
  }
}

std::size_t MemoryMeter::current_transient_bytes() const {
  std::lock_guard<std::mutex> lock(mu_);
  return current_transient_;
}

std::size_t MemoryMeter::peak_transient_bytes() const {
  std::lock_guard<std::mutex> lock(mu_);
  return peak_transient_;
}

std::size_t MemoryMeter::persistent_bytes() const {
  std::lock_guard<std::mutex> lock(mu_);
  return persistent_;
}

std::size_t MemoryMeter::current_excluded_bytes() const {
  std::lock_guard<std::mutex> lock(mu_);
  return current_excluded_;
}

void MemoryMeter::reset_peak() {
  std::lock_guard<std::mutex> lock(mu_);
  peak_transient_ = current_transient_;
}

void MemoryMeter::assert_clean() const {
  std::lock_guard<std::mutex> lock(mu_);
  if (!violation_.empty()) throw AccountingError(violation_);
}

std::vector<MeterEvent> MemoryMeter::events() const {
  std::lock_guard<std::mutex> lock(mu_);
  return events_;
}

namespace {

struct WorkingBuffer {
  const char* name;
  std::size_t floats;
};

std::vector<WorkingBuffer> working_set(const TilePlan& plan, KernelKind kind,
                                       const Geometry& geom) {
  const std::size_t bm = plan.bm, br = plan.br, bdf = plan.bdf;
  const std::size_t gd = geom.group_dim();
  const std::size_t r = geom.rank;
  switch (kind) {
    case KernelKind::Attention:
      return {
          {"q_tile", bm * gd},
          {"k_tile", br * gd},
          {"v_tile", br * gd},
          {"score_tile", bm * br},
          {"prob_tile", bm * br},
          {"out_acc", bm * gd},
          {"load_stage", std::max(bm, br) * gd},
          {"row_max", bm},
          {"row_sum", bm},
          {"bias_row", gd},
      };
    case KernelKind::FfnV1:
      return {
          {"h_tile", bm * bdf},
          {"p_row_tile", bm * r},
          {"z_acc_tile", bm * r},
          {"v1_panel", r * bdf},
          {"u2_panel", bdf * r},
          {"bias_slice", bdf},
      };
    case KernelKind::FfnV2:
      return {
          {"h_tile", bm * bdf},
          {"p_tile", bm * r},
          {"p_row_tile", bm * r},
          {"z_acc_tile", bm * r},
          {"v1_panel", r * bdf},
          {"u2_panel", bdf * r},
          {"bias_slice", bdf},
          {"out_row", geom.d_model},
      };
  }
  throw ConfigError("unknown kernel kind");
}

}  // namespace

std::size_t validate_tile_plan(const TilePlan& plan, KernelKind kind,
                               const Geometry& geom) {
  if (plan.bm == 0 || plan.br == 0 || plan.bdf == 0)
    throw ConfigError("tile dimensions must be positive");
  const auto buffers = working_set(plan, kind, geom);
  std::size_t total_floats = 0;
  for (const auto& b : buffers) total_floats += b.floats;
  const std::size_t total_bytes = sizeof(float) * total_floats;
  if (total_bytes > plan.sram_budget_bytes) {
    const auto largest = std::max_element(
        buffers.begin(), buffers.end(),
        [](const WorkingBuffer& a, const WorkingBuffer& b) { return a.floats < b.floats; });
    throw BudgetError("tile working set " + std::to_string(total_bytes) +
                      " bytes exceeds budget " +
                      std::to_string(plan.sram_budget_bytes) +
                      "; largest buffer is \"" + largest->name + "\" (" +
                      std::to_string(sizeof(float) * largest->floats) + " bytes)");
  }
  return total_bytes;
}

std::size_t expected_bytes(FormulaId id, const Geometry& geom) {
  const std::size_t b = geom.batch, m = geom.seq_len, da = geom.d_model,
                    df = geom.d_ff, h = geom.heads, g = geom.groups, r = geom.rank;
  switch (id) {
    case FormulaId::DenseAttn:
      return 4 * (3 * b * m * da + b * h * m * m);
    case FormulaId::FlashAttnDenseQkv:
      return 4 * (3 * b * m * da);
    case FormulaId::FlashSvdAttn:
      return 4 * (3 * h * b * m * r);
    case FormulaId::GroupedAttn:
      return 4 * (3 * g * b * m * r);
    case FormulaId::FfnDense:
    case FormulaId::FfnNaiveLowRank:
      return 4 * (b * m * df);
    case FormulaId::FfnV1:
      return 4 * (2 * b * m * r);
    case FormulaId::FfnV2:
      return 0;
  }
  throw ConfigError("unknown formula id");
}

}  // namespace flashsvd
