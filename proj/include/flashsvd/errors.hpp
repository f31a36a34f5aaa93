#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flashsvd {

// Error taxonomy. Every failure mode the library reports maps to one kind;
// the CLI maps kinds to exit codes (config-class errors -> 2, I/O -> 3).
enum class ErrorKind {
  Shape,       // operand extents inconsistent with the operation
  Rank,        // rank out of range for the factorization target
  Config,      // invalid configuration value (mode, flag, hardware rate)
  Budget,      // tile working set exceeds the on-chip budget
  Accounting,  // meter misuse: double free, unknown handle, region imbalance
  Format,      // malformed model file; carries the offending byte offset
  Numeric,     // non-finite values or failed convergence
  Infeasible,  // no feasible answer (e.g. parameter budget below rank 1)
  Io,          // filesystem read/write failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::Shape, w) {}
};
struct RankError : Error {
  explicit RankError(const std::string& w) : Error(ErrorKind::Rank, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct BudgetError : Error {
  explicit BudgetError(const std::string& w) : Error(ErrorKind::Budget, w) {}
};
struct AccountingError : Error {
  explicit AccountingError(const std::string& w) : Error(ErrorKind::Accounting, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::Numeric, w) {}
};
struct InfeasibleError : Error {
  explicit InfeasibleError(const std::string& w) : Error(ErrorKind::Infeasible, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};

// Format errors point at the first byte that made the file unreadable.
class FormatError : public Error {
 public:
  FormatError(std::size_t byte_offset, const std::string& w)
      : Error(ErrorKind::Format, w + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

}  // namespace flashsvd
