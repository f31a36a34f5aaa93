#include "flashsvd/factorize.hpp"

#include <cstring>

#include "flashsvd/errors.hpp"
#include "flashsvd/parallel.hpp"

namespace flashsvd {

FactorizedLinear factorize_linear(const Tensor& w, const Tensor& bias,
                                  std::size_t rank) {
  if (w.shape().size() != 2) throw ShapeError("factorize_linear expects a matrix");
  if (bias.shape().size() != 1 || bias.shape()[0] != w.shape()[1])
    throw ShapeError("bias length must match the output dimension");
  LowRankPair pair = factor_rank_r(w, rank);
  return FactorizedLinear{std::move(pair.u), std::move(pair.v), bias};
}

Tensor reconstruct(const FactorizedLinear& f) { return gemm(f.u, f.v); }

AttentionFactorSet factorize_attention(const Tensor& wq, const Tensor& bq,
                                       const Tensor& wk, const Tensor& bk,
                                       const Tensor& wv, const Tensor& bv,
                                       std::size_t groups, std::size_t rank) {
  const Tensor* weights[3] = {&wq, &wk, &wv};
  const Tensor* biases[3] = {&bq, &bk, &bv};
  const std::size_t d = wq.shape().size() == 2 ? wq.shape()[0] : 0;
  for (int i = 0; i < 3; ++i) {
    const Tensor& w = *weights[i];
    if (w.shape().size() != 2 || w.shape()[0] != d || w.shape()[1] != d)
      throw ShapeError("attention projections must be square d_model x d_model");
    if (biases[i]->shape().size() != 1 || biases[i]->shape()[0] != d)
      throw ShapeError("attention bias length must be d_model");
  }
  if (groups == 0 || d % groups != 0)
    throw ConfigError("groups must divide d_model");
  const std::size_t gd = d / groups;
  if (rank == 0) throw RankError("rank must be at least 1");
  if (rank > gd) throw RankError("rank exceeds per-group width d_model/groups");

  AttentionFactorSet set;
  set.d_model = d;
  set.groups = groups;
  set.rank = rank;
  set.q.resize(groups);
  set.k.resize(groups);
  set.v.resize(groups);
  std::vector<FactorizedLinear>* out[3] = {&set.q, &set.k, &set.v};

  // One independent factorization per (matrix, group) column block; tasks are
  // deterministic in isolation so the schedule does not affect the result.
  parallel_for(3 * groups, [&](std::size_t task) {
    const std::size_t mat = task / groups;
    const std::size_t g = task % groups;
    const Tensor& w = *weights[mat];
    Tensor block({d, gd});
    for (std::size_t i = 0; i < d; ++i)
      std::memcpy(&block.at(i, 0), w.data() + i * d + g * gd, sizeof(float) * gd);
    Tensor bias_slice({gd});
    std::memcpy(bias_slice.data(), biases[mat]->data() + g * gd, sizeof(float) * gd);
    (*out[mat])[g] = factorize_linear(block, bias_slice, rank);
  });
  return set;
}

Tensor reconstruct_attention(const AttentionFactorSet& set, Qkv which) {
  const std::size_t d = set.d_model;
  const std::size_t gd = d / set.groups;
  Tensor w({d, d});
  const auto& factors = set.matrix(which);
  for (std::size_t g = 0; g < set.groups; ++g) {
    Tensor block = reconstruct(factors[g]);
    for (std::size_t i = 0; i < d; ++i)
      std::memcpy(&w.at(i, g * gd), &block.at(i, 0), sizeof(float) * gd);
  }
  return w;
}

std::size_t lowrank_param_count(std::size_t d_model, std::size_t groups,
                                std::size_t rank) {
  return rank * d_model * (groups + 1);
}

std::size_t dense_param_count(std::size_t d_model) { return d_model * d_model; }

Rational param_threshold(std::size_t d_model, std::size_t groups) {
  return Rational(static_cast<std::int64_t>(d_model),
                  static_cast<std::int64_t>(groups + 1));
}

RankBudget rank_loss_for_budget(std::size_t d_model, std::size_t groups,
                                std::size_t budget_params) {
  if (groups == 0 || d_model % groups != 0)
    throw ConfigError("groups must divide d_model");
  const std::size_t max_rank = d_model / groups;
  const std::size_t dense_cost = 3 * d_model * d_model;
  if (budget_params >= dense_cost) return RankBudget{max_rank, 0.0};
  const std::size_t per_rank = 3 * d_model * (groups + 1);
  const std::size_t rank = budget_params / per_rank;
  if (rank < 1)
    throw InfeasibleError("budget " + std::to_string(budget_params) +
                          " params cannot fit rank 1 (needs " +
                          std::to_string(per_rank) + ")");
  return RankBudget{rank, 1.0 - static_cast<double>(rank) /
                              static_cast<double>(max_rank)};
}

}  // namespace flashsvd
