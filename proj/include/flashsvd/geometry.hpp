#pragma once

#include <cstddef>

#include "flashsvd/errors.hpp"

namespace flashsvd {

// One encoder workload point. d_model must divide evenly into heads, and into
// groups when a grouped factorization is in play; rank applies per head/group.
struct Geometry {
  std::size_t batch = 1;        // B
  std::size_t seq_len = 128;    // M
  std::size_t d_model = 768;    // D_A
  std::size_t d_ff = 3072;      // D_F
  std::size_t heads = 12;       // H
  std::size_t groups = 12;      // G (G == heads: per-head, G == 1: single block)
  std::size_t rank = 64;        // r per head/group
  std::size_t layers = 1;       // L

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t group_dim() const { return d_model / groups; }

  void validate() const {
    if (batch == 0 || seq_len == 0 || d_model == 0 || d_ff == 0)
      throw ConfigError("geometry extents must be positive");
    if (heads == 0 || d_model % heads != 0)
      throw ConfigError("heads must divide d_model");
    if (groups == 0 || d_model % groups != 0)
      throw ConfigError("groups must divide d_model");
    if (rank == 0) throw RankError("rank must be at least 1");
    if (rank > group_dim())
      throw RankError("rank exceeds per-group width d_model/groups");
  }
};

}  // namespace flashsvd
