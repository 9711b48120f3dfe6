#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rlogit/prism.hpp"
#include "rlogit/utility.hpp"

namespace rlogit {

constexpr double kRlResidualTol = 1e-10;
constexpr double kPowerIterTol = 1e-8;
constexpr int kPowerIterMax = 10000;
constexpr double kValueIterTol = 1e-12;
constexpr int kValueIterMax = 10000;
constexpr double kValueIterDiverged = 1e300;

// ---------------------------------------------------------------------------
// Value tables.
// ---------------------------------------------------------------------------

/// z_k = exp(V(k)/mu_k); unreachable states hold z = 0.
struct ValueTable {
  std::vector<double> z;
  double value(StateId k, double mu_k = 1.0) const { return mu_k * std::log(z[k]); }
};

/// Stage-indexed values over the active states of a prism.
class StagedValueTable {
 public:
  explicit StagedValueTable(const Prism& prism)
      : T_(prism.T) {
    offsets_.assign(T_ + 2, 0);
    for (int t = 0; t <= T_; ++t)
      offsets_[t + 1] = offsets_[t] + prism.stage_state_count(t);
    values_.assign(offsets_[T_ + 1], 0.0);
  }

  int T() const { return T_; }
  double& at(const Prism& prism, int t, StateId k) {
    return values_[offsets_[t] + position(prism, t, k)];
  }
  double get(const Prism& prism, int t, StateId k) const {
    int p = try_position(prism, t, k);
    return p < 0 ? 0.0 : values_[offsets_[t] + p];
  }
  double stage_value(int t, int pos) const { return values_[offsets_[t] + pos]; }
  double& stage_value(int t, int pos) { return values_[offsets_[t] + pos]; }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static int try_position(const Prism& prism, int t, StateId k) {
    const auto& states = prism.stage_states(t);
    auto it = std::lower_bound(states.begin(), states.end(), k);
    if (it == states.end() || *it != k) return -1;
    return static_cast<int>(it - states.begin());
  }
  static int position(const Prism& prism, int t, StateId k) {
    int p = try_position(prism, t, k);
    if (p < 0)
      throw DataError("state " + std::to_string(k) + " not in prism at stage " +
                      std::to_string(t));
    return p;
  }

 private:
  int T_;
  std::vector<int> offsets_;
  std::vector<double> values_;
};

struct FeasibilityReport {
  bool solvable = false;
  double spectral_radius = std::numeric_limits<double>::quiet_NaN();
  double frac_row_sums_below_one = std::numeric_limits<double>::quiet_NaN();
  double max_row_sum = std::numeric_limits<double>::quiet_NaN();
  std::string failure;
};

template <typename T>
struct SolveOutcome {
  bool feasible = false;
  T value;
  FeasibilityReport report;
};

// ---------------------------------------------------------------------------
// Feasibility diagnostics: spectral radius by power iteration and the
// row-sum contraction statistics, both over the real-link submatrix.
// ---------------------------------------------------------------------------

inline FeasibilityReport check_feasibility(const StateGraph& sg, const WeightMatrix& m) {
  FeasibilityReport r;
  int n = sg.n_links();
  double max_row = 0;
  int below = 0;
  for (StateId k = 0; k < n; ++k) {
    double s = 0;
    for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e)
      if (!sg.is_dummy(sg.edge_to(e))) s += m.w[e];
    max_row = std::max(max_row, s);
    if (s < 1.0) ++below;
  }
  r.max_row_sum = max_row;
  r.frac_row_sums_below_one = n > 0 ? static_cast<double>(below) / n : 1.0;

  // power iteration from the uniform vector
  std::vector<double> x(n, 1.0), y(n, 0.0);
  double rho = 0, prev = -1;
  for (int it = 0; it < kPowerIterMax; ++it) {
    double norm = 0;
    for (StateId k = 0; k < n; ++k) {
      double s = 0;
      for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
        StateId a = sg.edge_to(e);
        if (!sg.is_dummy(a)) s += m.w[e] * x[a];
      }
      y[k] = s;
      norm = std::max(norm, std::abs(s));
    }
    rho = norm;
    if (norm == 0) break;
    for (StateId k = 0; k < n; ++k) x[k] = y[k] / norm;
    if (std::abs(rho - prev) < kPowerIterTol * std::max(1.0, rho)) break;
    prev = rho;
  }
  r.spectral_radius = rho;
  r.solvable = rho < 1.0;
  return r;
}

// ---------------------------------------------------------------------------
// RL value function: z = (I - M)^{-1} b with a residual certificate, declared
// infeasible on solver failure, non-finite entries, or nonpositive values on
// states that can reach the destination.
// ---------------------------------------------------------------------------

inline Eigen::SparseMatrix<double> build_i_minus_m(const StateGraph& sg, const WeightMatrix& m) {
  int n = sg.n_states();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(sg.n_edges()) + n);
  for (StateId k = 0; k < n; ++k) {
    double diag = 1.0;
    for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
      StateId a = sg.edge_to(e);
      if (a == k)
        diag -= m.w[e];
      else
        trips.emplace_back(k, a, -m.w[e]);
    }
    trips.emplace_back(k, k, diag);
  }
  Eigen::SparseMatrix<double> A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());
  return A;
}

inline SolveOutcome<ValueTable> solve_rl(const StateGraph& sg, const WeightMatrix& m,
                                         int dest_node,
                                         const std::vector<int>& steps_to_dest) {
  SolveOutcome<ValueTable> out;
  int n = sg.n_states();
  Eigen::SparseMatrix<double> A = build_i_minus_m(sg, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  b[sg.dummy_state(dest_node)] = 1.0;

  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) {
    out.report = check_feasibility(sg, m);
    out.report.solvable = false;
    out.report.failure = "sparse LU factorization failed (I - M singular)";
    return out;
  }
  Eigen::VectorXd z = lu.solve(b);
  double resid = (A * z - b).lpNorm<Eigen::Infinity>();

  out.value.z.assign(z.data(), z.data() + n);
  for (StateId k = 0; k < n; ++k) {
    double& zk = out.value.z[k];
    if (steps_to_dest[k] == kUnreachable) {
      zk = 0.0;  // states that cannot reach the destination
      continue;
    }
    if (!std::isfinite(zk)) {
      out.report = check_feasibility(sg, m);
      out.report.failure = "non-finite value at state " + std::to_string(k);
      return out;
    }
    if (zk <= 0.0) {
      out.report = check_feasibility(sg, m);
      out.report.failure = "nonpositive value at reachable state " + std::to_string(k);
      return out;
    }
  }
  if (!(resid < kRlResidualTol)) {
    out.report = check_feasibility(sg, m);
    out.report.failure = "residual " + std::to_string(resid) + " exceeds tolerance";
    return out;
  }
  out.feasible = true;
  out.report.solvable = true;
  return out;
}

/// dz/dbeta_i = (I - M)^{-1} (dM/dbeta_i z), reusing one factorization.
inline std::vector<std::vector<double>> solve_rl_sensitivities(
    const StateGraph& sg, const WeightMatrix& m, const TermCache& cache,
    const ValueTable& table) {
  int n = sg.n_states();
  Eigen::SparseMatrix<double> A = build_i_minus_m(sg, m);
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success)
    throw DataError("sensitivity solve: factorization failed at a feasible point");
  std::vector<std::vector<double>> out;
  for (int i = 0; i < cache.n_terms(); ++i) {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    for (StateId k = 0; k < sg.n_links(); ++k) {
      double s = 0;
      for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e)
        s += m.w[e] * (cache.edge_term(e, i) / m.mu) * table.z[sg.edge_to(e)];
      rhs[k] = s;
    }
    Eigen::VectorXd dz = lu.solve(rhs);
    out.emplace_back(dz.data(), dz.data() + n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prism-RL value function: backward sweep z_t = M'_t z_{t+1} + b, finite for
// every finite parameter vector.
// ---------------------------------------------------------------------------

inline StagedValueTable solve_prism_rl(const StateGraph& sg, const WeightMatrix& m,
                                       const Prism& prism) {
  StagedValueTable table(prism);
  std::vector<double> next(sg.n_states(), 0.0), cur(sg.n_states(), 0.0);
  for (int t = prism.T; t >= 0; --t) {
    std::fill(cur.begin(), cur.end(), 0.0);
    const auto& states = prism.stage_states(t);
    for (size_t p = 0; p < states.size(); ++p) {
      StateId k = states[p];
      double zk;
      if (k == prism.dummy) {
        zk = 1.0;  // sitting at the destination, V = 0
      } else {
        zk = 0.0;
        for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
          StateId a = sg.edge_to(e);
          if (t < prism.T && prism.exists(t + 1, a)) zk += m.w[e] * next[a];
        }
      }
      cur[k] = zk;
      table.stage_value(t, static_cast<int>(p)) = zk;
    }
    std::swap(cur, next);
  }
  return table;
}

/// Backward sweep carrying dz/dbeta_i alongside z.
struct StagedSensitivities {
  StagedValueTable z;
  std::vector<StagedValueTable> dz;  // one per parameter

  StagedSensitivities(const Prism& prism, int n_params)
      : z(prism), dz(static_cast<size_t>(n_params), StagedValueTable(prism)) {}
};

inline StagedSensitivities solve_prism_rl_sensitivities(const StateGraph& sg,
                                                        const WeightMatrix& m,
                                                        const TermCache& cache,
                                                        const Prism& prism) {
  int P = cache.n_terms();
  StagedSensitivities out(prism, P);
  int n = sg.n_states();
  std::vector<double> next(n, 0.0), cur(n, 0.0);
  std::vector<std::vector<double>> dnext(P, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> dcur(P, std::vector<double>(n, 0.0));
  for (int t = prism.T; t >= 0; --t) {
    std::fill(cur.begin(), cur.end(), 0.0);
    for (auto& v : dcur) std::fill(v.begin(), v.end(), 0.0);
    const auto& states = prism.stage_states(t);
    for (size_t p = 0; p < states.size(); ++p) {
      StateId k = states[p];
      if (k == prism.dummy) {
        cur[k] = 1.0;
        out.z.stage_value(t, static_cast<int>(p)) = 1.0;
        continue;  // derivative stays zero
      }
      double zk = 0;
      for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
        StateId a = sg.edge_to(e);
        if (!(t < prism.T && prism.exists(t + 1, a))) continue;
        zk += m.w[e] * next[a];
        for (int i = 0; i < P; ++i)
          dcur[i][k] += m.w[e] * ((cache.edge_term(e, i) / m.mu) * next[a] + dnext[i][a]);
      }
      cur[k] = zk;
      out.z.stage_value(t, static_cast<int>(p)) = zk;
      for (int i = 0; i < P; ++i) out.dz[i].stage_value(t, static_cast<int>(p)) = dcur[i][k];
    }
    std::swap(cur, next);
    std::swap(dcur, dnext);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nested recursive logit: fixed point of z = [M o X(z)] e + b with
// X(z)_{ka} = z_a^{mu_a / mu_k}, solved by value iteration from z = b.
// ---------------------------------------------------------------------------

inline SolveOutcome<ValueTable> solve_nrl(const StateGraph& sg, const WeightMatrix& m,
                                          const std::vector<double>& scales, int dest_node,
                                          const std::vector<int>& steps_to_dest) {
  SolveOutcome<ValueTable> out;
  int n = sg.n_states();
  StateId dummy = sg.dummy_state(dest_node);

  // state-specific weights exp(v/mu_k) and exponents mu_a/mu_k per edge
  std::vector<double> w(sg.n_edges()), r(sg.n_edges());
  for (StateId k = 0; k < n; ++k)
    for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
      w[e] = std::exp(m.v[e] / scales[k]);
      r[e] = scales[sg.edge_to(e)] / scales[k];
    }

  std::vector<double> z(n, 0.0), znew(n, 0.0);
  z[dummy] = 1.0;
  bool converged = false;
  for (int it = 0; it < kValueIterMax; ++it) {
    double diff = 0;
    for (StateId k = 0; k < n; ++k) {
      double s = (k == dummy) ? 1.0 : 0.0;
      if (!sg.is_dummy(k)) {
        for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
          double za = z[sg.edge_to(e)];
          if (za > 0) s += w[e] * std::pow(za, r[e]);
        }
      }
      znew[k] = s;
      diff = std::max(diff, std::abs(s - z[k]));
      if (s > kValueIterDiverged) {
        out.report = check_feasibility(sg, m);
        out.report.failure = "value iteration diverged at state " + std::to_string(k);
        return out;
      }
    }
    std::swap(z, znew);
    if (diff < kValueIterTol) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    out.report = check_feasibility(sg, m);
    out.report.failure = "value iteration did not converge";
    return out;
  }
  for (StateId k = 0; k < n; ++k) {
    if (steps_to_dest[k] == kUnreachable) {
      z[k] = 0.0;
      continue;
    }
    if (!(z[k] > 0) || !std::isfinite(z[k])) {
      out.report = check_feasibility(sg, m);
      out.report.failure = "invalid fixed point at state " + std::to_string(k);
      return out;
    }
  }
  out.value.z = std::move(z);
  out.feasible = true;
  out.report.solvable = true;
  return out;
}

/// Implicit differentiation of the NRL fixed point:
/// (I - dF/dz) dz = dF/dtheta, theta = (beta..., omega).
inline std::vector<std::vector<double>> solve_nrl_sensitivities(
    const StateGraph& sg, const WeightMatrix& m, const TermCache& cache,
    const std::vector<double>& scales, const std::vector<double>& roots,
    const ValueTable& table, const std::vector<int>& steps_to_dest) {
  int n = sg.n_states();
  int P = cache.n_terms();
  std::vector<Eigen::Triplet<double>> trips;
  std::vector<Eigen::VectorXd> rhs(static_cast<size_t>(P) + 1, Eigen::VectorXd::Zero(n));
  for (StateId k = 0; k < n; ++k) {
    trips.emplace_back(k, k, 1.0);
    if (sg.is_dummy(k) || steps_to_dest[k] == kUnreachable) continue;
    for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
      StateId a = sg.edge_to(e);
      double za = table.z[a];
      if (!(za > 0)) continue;
      double rk = scales[a] / scales[k];
      double term = std::exp(m.v[e] / scales[k]) * std::pow(za, rk);
      trips.emplace_back(k, a, -term * rk / za);
      for (int i = 0; i < P; ++i)
        rhs[i][k] += term * cache.edge_term(e, i) / scales[k];
      rhs[P][k] += term * (-roots[k] * m.v[e] / scales[k] + (roots[a] - roots[k]) * rk *
                                                               std::log(za));
    }
  }
  Eigen::SparseMatrix<double> A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success)
    throw DataError("NRL sensitivity solve: factorization failed at the fixed point");
  std::vector<std::vector<double>> out;
  for (auto& b : rhs) {
    Eigen::VectorXd dz = lu.solve(b);
    out.emplace_back(dz.data(), dz.data() + n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prism-NRL: the staged update of the nested model, finite by construction.
// ---------------------------------------------------------------------------

inline StagedValueTable solve_prism_nrl(const StateGraph& sg, const WeightMatrix& m,
                                        const std::vector<double>& scales, const Prism& prism) {
  StagedValueTable table(prism);
  std::vector<double> next(sg.n_states(), 0.0), cur(sg.n_states(), 0.0);
  for (int t = prism.T; t >= 0; --t) {
    std::fill(cur.begin(), cur.end(), 0.0);
    const auto& states = prism.stage_states(t);
    for (size_t p = 0; p < states.size(); ++p) {
      StateId k = states[p];
      double zk;
      if (k == prism.dummy) {
        zk = 1.0;
      } else {
        zk = 0.0;
        for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
          StateId a = sg.edge_to(e);
          if (!(t < prism.T && prism.exists(t + 1, a))) continue;
          double za = next[a];
          if (za > 0)
            zk += std::exp(m.v[e] / scales[k]) * std::pow(za, scales[a] / scales[k]);
        }
      }
      cur[k] = zk;
      table.stage_value(t, static_cast<int>(p)) = zk;
    }
    std::swap(cur, next);
  }
  return table;
}

/// Staged nested sweep carrying dz for (beta..., omega).
inline StagedSensitivities solve_prism_nrl_sensitivities(
    const StateGraph& sg, const WeightMatrix& m, const TermCache& cache,
    const std::vector<double>& scales, const std::vector<double>& roots, const Prism& prism) {
  int P = cache.n_terms();
  StagedSensitivities out(prism, P + 1);  // last slot is omega
  int n = sg.n_states();
  std::vector<double> next(n, 0.0), cur(n, 0.0);
  std::vector<std::vector<double>> dnext(P + 1, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> dcur(P + 1, std::vector<double>(n, 0.0));
  for (int t = prism.T; t >= 0; --t) {
    std::fill(cur.begin(), cur.end(), 0.0);
    for (auto& v : dcur) std::fill(v.begin(), v.end(), 0.0);
    const auto& states = prism.stage_states(t);
    for (size_t p = 0; p < states.size(); ++p) {
      StateId k = states[p];
      if (k == prism.dummy) {
        cur[k] = 1.0;
        out.z.stage_value(t, static_cast<int>(p)) = 1.0;
        continue;
      }
      double zk = 0;
      for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
        StateId a = sg.edge_to(e);
        if (!(t < prism.T && prism.exists(t + 1, a))) continue;
        double za = next[a];
        if (!(za > 0)) continue;
        double rk = scales[a] / scales[k];
        double term = std::exp(m.v[e] / scales[k]) * std::pow(za, rk);
        zk += term;
        for (int i = 0; i < P; ++i)
          dcur[i][k] += term * (cache.edge_term(e, i) / scales[k] + rk * dnext[i][a] / za);
        dcur[P][k] += term * (-roots[k] * m.v[e] / scales[k] +
                              (roots[a] - roots[k]) * rk * std::log(za) +
                              rk * dnext[P][a] / za);
      }
      cur[k] = zk;
      out.z.stage_value(t, static_cast<int>(p)) = zk;
      for (int i = 0; i <= P; ++i) out.dz[i].stage_value(t, static_cast<int>(p)) = dcur[i][k];
    }
    std::swap(cur, next);
    std::swap(dcur, dnext);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feasible-region scan over a 2-parameter grid.
// ---------------------------------------------------------------------------

struct ScanPoint {
  double beta1 = 0, beta2 = 0;
  bool feasible = false;
};

inline std::vector<ScanPoint> scan_feasible_region(
    const StateGraph& sg, const TermCache& cache, const UtilitySpec& spec,
    const std::map<int, std::vector<int>>& steps_by_dest, const std::vector<double>& beta1_grid,
    const std::vector<double>& beta2_grid) {
  if (spec.n_params() != 2) throw ConfigError("feasible-region scan needs a 2-parameter spec");
  std::vector<ScanPoint> out;
  for (double b1 : beta1_grid)
    for (double b2 : beta2_grid) {
      std::vector<double> beta = {b1, b2};
      WeightMatrix m = evaluate_utilities(sg, cache, spec, beta);
      bool ok = true;
      for (const auto& [dest, steps] : steps_by_dest) {
        if (!solve_rl(sg, m, dest, steps).feasible) {
          ok = false;
          break;
        }
      }
      out.push_back({b1, b2, ok});
    }
  return out;
}

}  // namespace rlogit
