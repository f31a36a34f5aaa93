#pragma once

#include <cstddef>
#include <vector>

#include "flashsvd/rational.hpp"
#include "flashsvd/tensor.hpp"

namespace flashsvd {

// Rank-r factor pair for a linear layer: w (in x out) ~ u (in x r) * v (r x out),
// with the layer bias carried alongside.
struct FactorizedLinear {
  Tensor u;
  Tensor v;
  Tensor bias;

  std::size_t rank() const { return u.shape()[1]; }
  std::size_t in_dim() const { return u.shape()[0]; }
  std::size_t out_dim() const { return v.shape()[1]; }
};

enum class Qkv { Q, K, V };

// Grouped factorization of the three attention projections.  Each d_model x
// d_model weight is split into `groups` column blocks of width d_model/groups
// and every block is factorized independently at the same rank.  groups == 1
// is whole-matrix (single-head) compression; groups == heads is per-head.
struct AttentionFactorSet {
  std::size_t d_model = 0;
  std::size_t groups = 0;
  std::size_t rank = 0;
  std::vector<FactorizedLinear> q;  // one entry per group
  std::vector<FactorizedLinear> k;
  std::vector<FactorizedLinear> v;

  const std::vector<FactorizedLinear>& matrix(Qkv which) const {
    return which == Qkv::Q ? q : which == Qkv::K ? k : v;
  }
};

FactorizedLinear factorize_linear(const Tensor& w, const Tensor& bias,
                                  std::size_t rank);

Tensor reconstruct(const FactorizedLinear& f);

AttentionFactorSet factorize_attention(const Tensor& wq, const Tensor& bq,
                                       const Tensor& wk, const Tensor& bk,
                                       const Tensor& wv, const Tensor& bv,
                                       std::size_t groups, std::size_t rank);

Tensor reconstruct_attention(const AttentionFactorSet& set, Qkv which);

// Stored parameters of one grouped-factorized d_model x d_model projection:
// per group d_model*r + r*(d_model/groups), summed over groups
// = r * d_model * (groups + 1).
std::size_t lowrank_param_count(std::size_t d_model, std::size_t groups,
                                std::size_t rank);

std::size_t dense_param_count(std::size_t d_model);

// Rank below which the grouped factorization stores fewer parameters than the
// dense matrix: r < d_model / (groups + 1), returned exactly.
Rational param_threshold(std::size_t d_model, std::size_t groups);

struct RankBudget {
  std::size_t rank;
  double loss;  // 1 - rank / max_rank
};

// Largest per-group rank whose q/k/v storage fits the parameter budget, and
// the relative rank reduction that choice represents.  Storage is capped at
// the dense cost 3*d_model^2 — past break-even one would simply keep the
// dense matrices — so any budget covering dense storage yields zero loss.
// Throws InfeasibleError when even rank 1 does not fit.
RankBudget rank_loss_for_budget(std::size_t d_model, std::size_t groups,
                                std::size_t budget_params);

}  // namespace flashsvd
