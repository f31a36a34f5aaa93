#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flashsvd/geometry.hpp"
#include "flashsvd/memtier.hpp"

namespace flashsvd {

// Self-contained property suites over the streaming kernels, shared by the
// CLI's verify command and the acceptance runner.  Each suite executes real
// kernels on seeded inputs and reports one result per property.

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // filled on failure: what was measured vs expected
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  bool passed() const;
};

// The meter suite compares measured bytes against this formula.  Production
// callers pass expected_bytes; tests inject perturbed formulas to prove that
// a wrong byte table cannot slip through.
using ByteFormula = std::function<std::size_t(FormulaId, const Geometry&)>;

// Suite names accepted by run_verify_suite, in execution order:
// attn (kernel equivalence + tiling invariance), ffn (variant equivalence),
// meter (byte exactness), threshold (memory crossover).
const std::vector<std::string>& verify_suite_names();

// Runs one named suite.  Unknown names throw ConfigError.
SuiteReport run_verify_suite(const std::string& name, std::uint64_t seed);

// The meter suite with an explicit byte formula (injection point).
SuiteReport run_meter_suite(std::uint64_t seed, const ByteFormula& formula);

std::vector<SuiteReport> run_all_verify_suites(std::uint64_t seed);

}  // namespace flashsvd
