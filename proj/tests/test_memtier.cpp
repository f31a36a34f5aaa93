#include <doctest.h>

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "flashsvd/memtier.hpp"

using namespace flashsvd;

namespace {

// Independent replay of a meter's event log.  Rebuilds the counters from the
// events alone so any internal bookkeeping slip in MemoryMeter shows up as a
// disagreement here.
struct Replay {
  std::size_t current_transient = 0;
  std::size_t peak_transient = 0;
  std::size_t persistent = 0;
  std::size_t current_excluded = 0;

  explicit Replay(const std::vector<MeterEvent>& events) {
    for (const auto& e : events) {
      switch (e.kind) {
        case MeterEventKind::Alloc:
          add(e.cls, e.bytes);
          break;
        case MeterEventKind::Free:
          sub(e.cls, e.bytes);
          break;
        case MeterEventKind::Pin:
          persistent += e.bytes;
          break;
        case MeterEventKind::RegionBegin:
        case MeterEventKind::RegionEnd:
          break;
      }
    }
  }

  void add(AllocClass cls, std::size_t bytes) {
    if (cls == AllocClass::Transient) {
      current_transient += bytes;
      peak_transient = std::max(peak_transient, current_transient);
    } else if (cls == AllocClass::Persistent) {
      persistent += bytes;
    } else {
      current_excluded += bytes;
    }
  }
  void sub(AllocClass cls, std::size_t bytes) {
    if (cls == AllocClass::Transient)
      current_transient -= bytes;
    else if (cls == AllocClass::Persistent)
      persistent -= bytes;
    else
      current_excluded -= bytes;
  }
};

bool message_contains(const std::exception& e, const std::string& needle) {
  return std::string(e.what()).find(needle) != std::string::npos;
}

}  // namespace

TEST_SUITE("memtier") {

TEST_CASE("alloc and free drive current and peak transient bytes") {
  MemoryMeter meter;
  auto a = meter.alloc("a", AllocClass::Transient, 100);
  CHECK(meter.current_transient_bytes() == 100);
  CHECK(meter.peak_transient_bytes() == 100);
  auto b = meter.alloc("b", AllocClass::Transient, 50);
  CHECK(meter.current_transient_bytes() == 150);
  CHECK(meter.peak_transient_bytes() == 150);
  meter.free(a);
  CHECK(meter.current_transient_bytes() == 50);
  CHECK(meter.peak_transient_bytes() == 150);
  auto c = meter.alloc("c", AllocClass::Transient, 80);
  CHECK(meter.current_transient_bytes() == 130);
  CHECK(meter.peak_transient_bytes() == 150);
  meter.free(b);
  meter.free(c);
  CHECK(meter.current_transient_bytes() == 0);
  CHECK(meter.peak_transient_bytes() == 150);
  meter.reset_peak();
  CHECK(meter.peak_transient_bytes() == 0);
}

TEST_CASE("persistent and excluded allocations do not move the transient peak") {
  MemoryMeter meter;
  auto p = meter.alloc("weights", AllocClass::Persistent, 4096);
  auto e = meter.alloc("residual", AllocClass::Excluded, 2048);
  CHECK(meter.persistent_bytes() == 4096);
  CHECK(meter.current_excluded_bytes() == 2048);
  CHECK(meter.current_transient_bytes() == 0);
  CHECK(meter.peak_transient_bytes() == 0);
  meter.free(p);
  meter.free(e);
  CHECK(meter.persistent_bytes() == 0);
  CHECK(meter.current_excluded_bytes() == 0);
}

TEST_CASE("double free and unknown handle are accounting errors") {
  MemoryMeter meter;
  auto a = meter.alloc("a", AllocClass::Transient, 8);
  meter.free(a);
  CHECK_THROWS_AS(meter.free(a), AccountingError);
  CHECK_THROWS_AS(meter.free(MeterHandle{9999}), AccountingError);
}

TEST_CASE("pin_persistent is idempotent by tag and rejects size conflicts") {
  MemoryMeter meter;
  meter.pin_persistent("layer.0.attn.v", 1024);
  CHECK(meter.persistent_bytes() == 1024);
  meter.pin_persistent("layer.0.attn.v", 1024);  // re-pin: no double count
  CHECK(meter.persistent_bytes() == 1024);
  meter.pin_persistent("layer.0.ffn.u1", 512);
  CHECK(meter.persistent_bytes() == 1536);
  CHECK_THROWS_AS(meter.pin_persistent("layer.0.attn.v", 2048), AccountingError);
  // The suppressed duplicate pin must not appear in the event log either.
  std::size_t pin_events = 0;
  for (const auto& e : meter.events())
    if (e.kind == MeterEventKind::Pin) ++pin_events;
  CHECK(pin_events == 2);
}

TEST_CASE("event-log replay agrees with the meter across a random op sequence") {
  MemoryMeter meter;
  std::mt19937 rng(20240817);
  std::vector<MeterHandle> live;
  std::size_t pins_done = 0;
  for (int step = 0; step < 400; ++step) {
    const unsigned op = rng() % 4;
    if (op == 0 || live.empty()) {
      const AllocClass cls = static_cast<AllocClass>(rng() % 3);
      const std::size_t bytes = 1 + rng() % 4096;
      live.push_back(meter.alloc("buf" + std::to_string(step), cls, bytes));
    } else if (op == 1) {
      const std::size_t pick = rng() % live.size();
      meter.free(live[pick]);
      live.erase(live.begin() + static_cast<std::ptrdiff_t>(pick));
    } else if (op == 2) {
      meter.pin_persistent("pin" + std::to_string(pins_done++ % 7), 64);
    }
  }
  Replay replay(meter.events());
  CHECK(replay.current_transient == meter.current_transient_bytes());
  CHECK(replay.peak_transient == meter.peak_transient_bytes());
  CHECK(replay.persistent == meter.persistent_bytes());
  CHECK(replay.current_excluded == meter.current_excluded_bytes());
  for (auto h : live) meter.free(h);
  Replay drained(meter.events());
  CHECK(drained.current_transient == 0);
  CHECK(drained.current_excluded == 0);
  CHECK(meter.current_transient_bytes() == 0);
}

TEST_CASE("balanced scoped region leaves the meter clean") {
  MemoryMeter meter;
  {
    auto region = meter.scoped_region("attention");
    auto h = meter.alloc("scratch", AllocClass::Transient, 256);
    meter.free(h);
  }
  meter.assert_clean();
  const auto events = meter.events();
  REQUIRE(events.size() == 4);
  CHECK(events.front().kind == MeterEventKind::RegionBegin);
  CHECK(events.back().kind == MeterEventKind::RegionEnd);
}

TEST_CASE("unbalanced scoped region latches an accounting violation") {
  MemoryMeter meter;
  MeterHandle leaked;
  {
    auto region = meter.scoped_region("ffn");
    leaked = meter.alloc("scratch", AllocClass::Transient, 64);
  }
  bool threw = false;
  try {
    meter.assert_clean();
  } catch (const AccountingError& e) {
    threw = true;
    CHECK(message_contains(e, "ffn"));
  }
  CHECK(threw);
  meter.free(leaked);
}

TEST_CASE("ScopedBuffer meters its tensor storage for its lifetime") {
  MemoryMeter meter;
  {
    ScopedBuffer buf(meter, "p_all", AllocClass::Transient, {2, 3, 4});
    CHECK(meter.current_transient_bytes() == 4 * 24);
    buf.tensor().at(1, 2, 3) = 1.0f;
  }
  CHECK(meter.current_transient_bytes() == 0);
  CHECK(meter.peak_transient_bytes() == 96);
}

TEST_CASE("moved-from ScopedBuffer does not double free") {
  MemoryMeter meter;
  {
    ScopedBuffer a(meter, "stage", AllocClass::Transient, {8});
    ScopedBuffer b = std::move(a);
    CHECK(meter.current_transient_bytes() == 32);
    CHECK(b.tensor().numel() == 8);
  }
  CHECK(meter.current_transient_bytes() == 0);
  std::size_t allocs = 0, frees = 0;
  for (const auto& e : meter.events()) {
    if (e.kind == MeterEventKind::Alloc) ++allocs;
    if (e.kind == MeterEventKind::Free) ++frees;
  }
  CHECK(allocs == 1);
  CHECK(frees == 1);
}

TEST_CASE("attention tile plan working set matches the hand sum") {
  // bm=16, br=16, head width 64:
  //   q 16*64 + k 16*64 + v 16*64 + score 16*16 + prob 16*16 + acc 16*64
  //   + stage 16*64 + row_max 16 + row_sum 16 + bias 64 = 5728 floats.
  Geometry geom;
  geom.d_model = 768;
  geom.heads = 12;
  geom.groups = 12;
  geom.rank = 64;
  TilePlan plan;  // bm=16 br=16 bdf=64, 128 KiB budget
  const std::size_t bytes = validate_tile_plan(plan, KernelKind::Attention, geom);
  CHECK(bytes == 22912);
  CHECK(bytes <= plan.sram_budget_bytes);
}

TEST_CASE("ffn tile plan working sets match the hand sums") {
  Geometry geom;
  geom.d_model = 256;
  geom.heads = 4;
  geom.groups = 4;
  geom.rank = 32;
  TilePlan plan;
  // v1: h 16*64 + p_row 16*32 + z_acc 16*32 + v1_panel 32*64 + u2_panel 64*32
  //     + bias 64 = 6208 floats
  CHECK(validate_tile_plan(plan, KernelKind::FfnV1, geom) == 24832);
  // v2 adds p_tile 16*32 and out_row 256
  CHECK(validate_tile_plan(plan, KernelKind::FfnV2, geom) == 24832 + 4 * (512 + 256));
}

TEST_CASE("over-budget tile plan names the largest buffer") {
  Geometry geom;
  geom.d_model = 768;
  geom.heads = 12;
  geom.groups = 12;
  geom.rank = 64;
  TilePlan plan;
  plan.sram_budget_bytes = 1024;
  bool threw = false;
  try {
    validate_tile_plan(plan, KernelKind::Attention, geom);
  } catch (const BudgetError& e) {
    threw = true;
    CHECK(message_contains(e, "q_tile"));
    CHECK(message_contains(e, "22912"));
  }
  CHECK(threw);
  plan.bm = 0;
  CHECK_THROWS_AS(validate_tile_plan(plan, KernelKind::Attention, geom), ConfigError);
}

TEST_CASE("expected transient bytes match the closed forms") {
  Geometry bert;
  bert.batch = 1;
  bert.seq_len = 128;
  bert.d_model = 768;
  bert.heads = 12;
  bert.groups = 12;
  bert.rank = 64;
  CHECK(expected_bytes(FormulaId::DenseAttn, bert) == 1966080);
  CHECK(expected_bytes(FormulaId::FlashAttnDenseQkv, bert) == 1179648);

  Geometry small;
  small.batch = 2;
  small.seq_len = 64;
  small.d_model = 256;
  small.d_ff = 256;
  small.heads = 4;
  small.groups = 4;
  small.rank = 16;
  CHECK(expected_bytes(FormulaId::FlashSvdAttn, small) == 98304);
  CHECK(expected_bytes(FormulaId::FfnDense, small) == 131072);
  CHECK(expected_bytes(FormulaId::FfnNaiveLowRank, small) == 131072);
  small.rank = 32;
  CHECK(expected_bytes(FormulaId::FfnV1, small) == 32768);
  CHECK(expected_bytes(FormulaId::FfnV2, small) == 0);

  Geometry grouped = small;
  grouped.groups = 2;
  grouped.rank = 16;
  CHECK(expected_bytes(FormulaId::GroupedAttn, grouped) == 49152);
}

}  // TEST_SUITE
