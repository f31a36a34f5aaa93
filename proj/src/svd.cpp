#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "flashsvd/tensor.hpp"

namespace flashsvd {

namespace {

// ============================================================================
// One-sided cyclic Jacobi on the columns of a column-major m x n matrix.
// Rotations zero the pairwise column dot products; at convergence the columns
// are u_j * sigma_j. Column norms are cached and updated by the rotation
// identities (a' = a - t*c, b' = b + t*c), then recomputed exactly at the end.
// The pivot order (p ascending, q ascending) and the small-angle tangent make
// the run fully deterministic for a given input.
// ============================================================================

constexpr double kPairTol = 1.0e-15;   // relative off-diagonal threshold
constexpr int kMaxSweeps = 60;

void one_sided_jacobi(std::vector<double>& a, std::size_t m, std::size_t n,
                      std::vector<double>* v) {
  if (v) {
    v->assign(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) (*v)[j * n + j] = 1.0;
  }
  std::vector<double> sq(n, 0.0);
  double max_sq = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double* col = a.data() + j * m;
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += col[i] * col[i];
    sq[j] = s;
    max_sq = std::max(max_sq, s);
  }
  // Columns this far below the dominant one are numerically zero; rotating
  // them only chases rounding noise.
  const double zero_floor = max_sq * 1.0e-30;

  auto visit_pair = [&](std::size_t p, std::size_t q) -> std::size_t {
    if (sq[p] <= zero_floor || sq[q] <= zero_floor) return 0;
    double* cp = a.data() + p * m;
    double* cq = a.data() + q * m;
    // Fixed-order 8-lane dot: breaks the FMA dependency chain without
    // changing determinism (the summation order is part of the contract).
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= m; i += 8) {
      acc[0] += cp[i] * cq[i];
      acc[1] += cp[i + 1] * cq[i + 1];
      acc[2] += cp[i + 2] * cq[i + 2];
      acc[3] += cp[i + 3] * cq[i + 3];
      acc[4] += cp[i + 4] * cq[i + 4];
      acc[5] += cp[i + 5] * cq[i + 5];
      acc[6] += cp[i + 6] * cq[i + 6];
      acc[7] += cp[i + 7] * cq[i + 7];
    }
    double c = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
               ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < m; ++i) c += cp[i] * cq[i];
    if (std::abs(c) <= kPairTol * std::sqrt(sq[p] * sq[q])) return 0;
    const double zeta = (sq[q] - sq[p]) / (2.0 * c);
    const double t =
        std::copysign(1.0 / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta)), zeta);
    const double cs = 1.0 / std::sqrt(1.0 + t * t);
    const double sn = cs * t;
    for (std::size_t i = 0; i < m; ++i) {
      const double xp = cp[i], xq = cq[i];
      cp[i] = cs * xp - sn * xq;
      cq[i] = sn * xp + cs * xq;
    }
    if (v) {
      double* vp = v->data() + p * n;
      double* vq = v->data() + q * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double xp = vp[i], xq = vq[i];
        vp[i] = cs * xp - sn * xq;
        vq[i] = sn * xp + cs * xq;
      }
    }
    sq[p] -= t * c;
    sq[q] += t * c;
    if (sq[p] < 0.0) sq[p] = 0.0;
    return 1;
  };
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    std::size_t rotations = 0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) rotations += visit_pair(p, q);
    }
    if (rotations == 0) break;
  }
}

// Descending singular-value order; equal values keep ascending column index.
std::vector<std::size_t> sorted_order(const std::vector<double>& s) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });
  return idx;
}

// Sign convention: the largest-magnitude entry of each U column is positive
// (first such entry on exact magnitude ties). Flips the matching Vt row.
void fix_signs(std::vector<double>& u, std::vector<double>& vt,
               std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t j = 0; j < p; ++j) {
    double best = 0.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double mag = std::abs(u[i * p + j]);
      if (mag > best) { best = mag; arg = i; }
    }
    if (u[arg * p + j] < 0.0) {
      for (std::size_t i = 0; i < m; ++i) u[i * p + j] = -u[i * p + j];
      for (std::size_t k = 0; k < n; ++k) vt[j * n + k] = -vt[j * n + k];
    }
  }
}

// Deterministic completion of U columns whose singular value is zero: first
// standard basis vector with a large component outside the current span,
// orthogonalized and normalized.
void complete_column(std::vector<double>& u, std::size_t m, std::size_t p,
                     std::size_t col) {
  for (std::size_t cand = 0; cand < m; ++cand) {
    std::vector<double> w(m, 0.0);
    w[cand] = 1.0;
    for (std::size_t k = 0; k < col; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < m; ++i) d += u[i * p + k] * w[i];
      for (std::size_t i = 0; i < m; ++i) w[i] -= d * u[i * p + k];
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += w[i] * w[i];
    norm = std::sqrt(norm);
    if (norm > 0.5) {
      for (std::size_t i = 0; i < m; ++i) u[i * p + col] = w[i] / norm;
      return;
    }
  }
  throw NumericError("svd basis completion failed");
}

// Core thin SVD for m >= n, column-major input, full U/S/Vt in doubles.
void svd_tall_core(std::vector<double> cols, std::size_t m, std::size_t n,
                   std::vector<double>& u, std::vector<double>& s,
                   std::vector<double>& vt) {
  std::vector<double> v;  // n x n column-major rotation accumulator
  one_sided_jacobi(cols, m, n, &v);

  std::vector<double> sigma(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double* col = cols.data() + j * m;
    double sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) sq += col[i] * col[i];
    sigma[j] = std::sqrt(sq);
  }
  const auto order = sorted_order(sigma);
  const double sigma_max = sigma.empty() ? 0.0 : sigma[order[0]];
  const double zero_tol = sigma_max * 1.0e-15;

  u.assign(m * n, 0.0);
  s.assign(n, 0.0);
  vt.assign(n * n, 0.0);
  std::vector<std::size_t> dead;
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t src = order[jj];
    s[jj] = sigma[src];
    for (std::size_t k = 0; k < n; ++k) vt[jj * n + k] = v[src * n + k];
    if (sigma[src] > zero_tol && sigma[src] > 0.0) {
      const double* col = cols.data() + src * m;
      for (std::size_t i = 0; i < m; ++i) u[i * n + jj] = col[i] / sigma[src];
    } else {
      dead.push_back(jj);
    }
  }
  for (std::size_t jj : dead) complete_column(u, m, n, jj);
  fix_signs(u, vt, m, n, n);
}

std::vector<double> to_col_major(const std::vector<double>& row_major,
                                 std::size_t m, std::size_t n) {
  std::vector<double> cols(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cols[j * m + i] = row_major[i * n + j];
  return cols;
}

// ============================================================================
// Householder QR used to precondition tall factorizations: A = Q R with the
// reflectors kept for applying Q later. Columns of the work matrix are
// overwritten; R comes back as a dense n x n column-major upper triangle.
// ============================================================================

struct HouseholderQr {
  std::vector<std::vector<double>> reflectors;  // unit vectors, length m - j
  std::vector<double> r;                        // n x n column-major
};

HouseholderQr householder_qr(std::vector<double> cols, std::size_t m, std::size_t n) {
  HouseholderQr qr;
  qr.reflectors.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    double* col = cols.data() + j * m;
    double norm = 0.0;
    for (std::size_t i = j; i < m; ++i) norm += col[i] * col[i];
    norm = std::sqrt(norm);
    std::vector<double>& v = qr.reflectors[j];
    v.assign(m - j, 0.0);
    if (norm > 0.0) {
      const double alpha = -std::copysign(norm, col[j]);
      for (std::size_t i = j; i < m; ++i) v[i - j] = col[i];
      v[0] -= alpha;
      double vnorm = 0.0;
      for (double x : v) vnorm += x * x;
      vnorm = std::sqrt(vnorm);
      if (vnorm > 0.0) {
        for (double& x : v) x /= vnorm;
        for (std::size_t q = j; q < n; ++q) {
          double* cq = cols.data() + q * m;
          double d = 0.0;
          for (std::size_t i = j; i < m; ++i) d += v[i - j] * cq[i];
          d *= 2.0;
          for (std::size_t i = j; i < m; ++i) cq[i] -= d * v[i - j];
        }
      }
    }
  }
  qr.r.assign(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i <= j; ++i) qr.r[j * n + i] = cols[j * m + i];
  return qr;
}

// B (m x k column-major, top n rows filled) <- Q * B.
void apply_q(const HouseholderQr& qr, std::vector<double>& b, std::size_t m,
             std::size_t k) {
  const std::size_t n = qr.reflectors.size();
  for (std::size_t jj = n; jj-- > 0;) {
    const std::vector<double>& v = qr.reflectors[jj];
    if (v.empty()) continue;
    for (std::size_t q = 0; q < k; ++q) {
      double* cq = b.data() + q * m;
      double d = 0.0;
      for (std::size_t i = jj; i < m; ++i) d += v[i - jj] * cq[i];
      d *= 2.0;
      for (std::size_t i = jj; i < m; ++i) cq[i] -= d * v[i - jj];
    }
  }
}

}  // namespace

SvdResult64 svd64(const std::vector<double>& a, std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) throw ShapeError("svd input must be nonempty");
  if (a.size() != m * n) throw ShapeError("svd input size mismatch");
  SvdResult64 out;
  if (m >= n) {
    out.m = m; out.n = n; out.p = n;
    svd_tall_core(to_col_major(a, m, n), m, n, out.u, out.s, out.vt);
  } else {
    // A = (U' S V't)^T of the transpose: U = V', Vt = U'^T.
    std::vector<double> at(n * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
    std::vector<double> ut, st, vtt;
    svd_tall_core(to_col_major(at, n, m), n, m, ut, st, vtt);
    out.m = m; out.n = n; out.p = m;
    out.s = std::move(st);
    out.u.assign(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) out.u[i * m + j] = vtt[j * m + i];
    out.vt.assign(m * n, 0.0);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < n; ++k) out.vt[j * n + k] = ut[k * m + j];
    // Transposing swaps which factor carried the sign convention; reapply.
    fix_signs(out.u, out.vt, m, n, m);
  }
  return out;
}

SvdResult svd(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("svd input must be 2-D");
  const std::size_t m = a.extent(0), n = a.extent(1);
  std::vector<double> a64(m * n);
  for (std::size_t i = 0; i < m * n; ++i) a64[i] = a.at(i);
  SvdResult64 f = svd64(a64, m, n);
  SvdResult out;
  out.u = Tensor({m, f.p});
  out.vt = Tensor({f.p, n});
  out.s.resize(f.p);
  for (std::size_t i = 0; i < m * f.p; ++i) out.u.at(i) = static_cast<float>(f.u[i]);
  for (std::size_t i = 0; i < f.p * n; ++i) out.vt.at(i) = static_cast<float>(f.vt[i]);
  for (std::size_t i = 0; i < f.p; ++i) out.s[i] = static_cast<float>(f.s[i]);
  return out;
}

LowRankPair truncate_even_split(const SvdResult& f, std::size_t r) {
  const std::size_t m = f.u.extent(0), p = f.u.extent(1), n = f.vt.extent(1);
  if (r == 0) throw RankError("truncation rank must be at least 1");
  if (r > p) throw RankError("truncation rank exceeds min(m, n)");
  LowRankPair out{Tensor({m, r}), Tensor({r, n})};
  for (std::size_t j = 0; j < r; ++j) {
    const double root = std::sqrt(static_cast<double>(f.s[j]));
    for (std::size_t i = 0; i < m; ++i)
      out.u.at(i, j) = static_cast<float>(f.u.at(i, j) * root);
    for (std::size_t k = 0; k < n; ++k)
      out.v.at(j, k) = static_cast<float>(root * f.vt.at(j, k));
  }
  return out;
}

namespace {

// Leading-r split factors for a tall matrix (m >= n), 64-bit internal.
// Tall-and-skinny inputs are QR-preconditioned so the Jacobi sweeps run on the
// n x n triangle; U_r = Q * UR[:, :r] and V_r = R^T UR[:, :r] / sigma come
// from exact identities instead of a full basis accumulation.
void factor_tall(const std::vector<double>& a, std::size_t m, std::size_t n,
                 std::size_t r, std::vector<double>& uf, std::vector<double>& vf) {
  std::vector<double> cols = to_col_major(a, m, n);
  const bool precondition = m >= 2 * n;

  std::vector<double> work;         // matrix handed to Jacobi (column-major)
  std::size_t work_rows;
  HouseholderQr qr;
  if (precondition) {
    qr = householder_qr(std::move(cols), m, n);
    work = qr.r;
    work_rows = n;
  } else {
    work = std::move(cols);
    work_rows = m;
  }
  const std::vector<double> original = work;  // for the V recovery products

  one_sided_jacobi(work, work_rows, n, nullptr);

  std::vector<double> sigma(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double* col = work.data() + j * work_rows;
    double sq = 0.0;
    for (std::size_t i = 0; i < work_rows; ++i) sq += col[i] * col[i];
    sigma[j] = std::sqrt(sq);
  }
  const auto order = sorted_order(sigma);
  const double sigma_max = sigma[order[0]];
  const double zero_tol = sigma_max * 1.0e-15;

  // Leading-r left vectors of the Jacobi operand, then lift through Q.
  std::vector<double> ur(work_rows * r, 0.0);  // column-major
  std::vector<double> sr(r, 0.0);
  for (std::size_t jj = 0; jj < r; ++jj) {
    const std::size_t src = order[jj];
    sr[jj] = sigma[src];
    if (sigma[src] <= zero_tol || sigma[src] == 0.0) continue;  // zero factor
    const double* col = work.data() + src * work_rows;
    for (std::size_t i = 0; i < work_rows; ++i)
      ur[jj * work_rows + i] = col[i] / sigma[src];
  }

  // v_j = Op^T u_j / sigma_j against the pre-rotation operand.
  std::vector<double> vr(r * n, 0.0);  // row-major r x n
  for (std::size_t jj = 0; jj < r; ++jj) {
    if (sr[jj] <= zero_tol || sr[jj] == 0.0) continue;
    const double* ucol = ur.data() + jj * work_rows;
    for (std::size_t k = 0; k < n; ++k) {
      const double* ocol = original.data() + k * work_rows;
      double d = 0.0;
      for (std::size_t i = 0; i < work_rows; ++i) d += ocol[i] * ucol[i];
      vr[jj * n + k] = d / sr[jj];
    }
  }

  std::vector<double> ufull;  // m x r column-major left vectors
  if (precondition) {
    ufull.assign(m * r, 0.0);
    for (std::size_t jj = 0; jj < r; ++jj)
      for (std::size_t i = 0; i < n; ++i) ufull[jj * m + i] = ur[jj * n + i];
    apply_q(qr, ufull, m, r);
  } else {
    ufull = std::move(ur);
  }

  // Even split with the shared sign convention on the left factor.
  uf.assign(m * r, 0.0);  // row-major m x r
  vf.assign(r * n, 0.0);  // row-major r x n
  for (std::size_t jj = 0; jj < r; ++jj) {
    const double root = std::sqrt(sr[jj]);
    double best = 0.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double mag = std::abs(ufull[jj * m + i]);
      if (mag > best) { best = mag; arg = i; }
    }
    const double flip = (ufull[jj * m + arg] < 0.0) ? -1.0 : 1.0;
    for (std::size_t i = 0; i < m; ++i)
      uf[i * r + jj] = flip * root * ufull[jj * m + i];
    for (std::size_t k = 0; k < n; ++k)
      vf[jj * n + k] = flip * root * vr[jj * n + k];
  }
}

}  // namespace

LowRankPair factor_rank_r(const Tensor& a, std::size_t r) {
  if (a.ndim() != 2) throw ShapeError("factorization input must be 2-D");
  const std::size_t m = a.extent(0), n = a.extent(1);
  if (r == 0) throw RankError("factorization rank must be at least 1");
  if (r > std::min(m, n)) throw RankError("factorization rank exceeds min(m, n)");

  std::vector<double> a64(m * n);
  for (std::size_t i = 0; i < m * n; ++i) a64[i] = a.at(i);

  std::vector<double> uf, vf;
  if (m >= n) {
    factor_tall(a64, m, n, r, uf, vf);
  } else {
    std::vector<double> at(n * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) at[j * m + i] = a64[i * n + j];
    std::vector<double> uft, vft;  // factors of A^T: (n x r), (r x m)
    factor_tall(at, n, m, r, uft, vft);
    // A = (U' V')^T pairwise: U = V'^T carries sqrt(S), V = U'^T.
    uf.assign(m * r, 0.0);
    vf.assign(r * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t jj = 0; jj < r; ++jj) uf[i * r + jj] = vft[jj * m + i];
    for (std::size_t jj = 0; jj < r; ++jj)
      for (std::size_t k = 0; k < n; ++k) vf[jj * n + k] = uft[k * r + jj];
    // Reapply the convention to the left factor of the final orientation.
    for (std::size_t jj = 0; jj < r; ++jj) {
      double best = 0.0;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double mag = std::abs(uf[i * r + jj]);
        if (mag > best) { best = mag; arg = i; }
      }
      if (uf[arg * r + jj] < 0.0) {
        for (std::size_t i = 0; i < m; ++i) uf[i * r + jj] = -uf[i * r + jj];
        for (std::size_t k = 0; k < n; ++k) vf[jj * n + k] = -vf[jj * n + k];
      }
    }
  }

  LowRankPair out{Tensor({m, r}), Tensor({r, n})};
  for (std::size_t i = 0; i < m * r; ++i) out.u.at(i) = static_cast<float>(uf[i]);
  for (std::size_t i = 0; i < r * n; ++i) out.v.at(i) = static_cast<float>(vf[i]);
  return out;
}

}  // namespace flashsvd
