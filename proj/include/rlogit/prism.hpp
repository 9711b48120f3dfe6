#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlogit/network.hpp"

namespace rlogit {

// ---------------------------------------------------------------------------
// Choice stage constraints.
// ---------------------------------------------------------------------------

enum class StagePolicyMode { Scalar, PerDestination, PerOd };

struct ChoiceStagePolicy {
  StagePolicyMode mode = StagePolicyMode::PerDestination;
  double gamma = 4.0 / 3.0;  // detour rate, >= 1
  int t_min = 1;             // minimum constraint, >= 1

  void validate() const {
    if (gamma < 1.0) throw ConfigError("prism policy: gamma must be >= 1");
    if (t_min < 1) throw ConfigError("prism policy: t_min must be >= 1");
  }
};

struct DetourStatistics {
  int count = 0;
  double mean = 0, stddev = 0;
  double min = 0, q25 = 0, q50 = 0, q75 = 0, max = 0;
};

/// Detour rate of each observation: J_n / D^{d_n}(k_0).
inline std::vector<double> detour_rates(const std::vector<PathObservation>& obs,
                                        const std::map<int, std::vector<int>>& steps_by_dest) {
  std::vector<double> rates;
  rates.reserve(obs.size());
  for (const auto& o : obs) {
    const auto& steps = steps_by_dest.at(o.dest_node);
    int d = steps[o.origin_state()];
    if (d == kUnreachable || d <= 0)
      throw DataError("observation " + std::to_string(o.id) + ": origin cannot reach destination");
    rates.push_back(static_cast<double>(o.transitions()) / static_cast<double>(d));
  }
  return rates;
}

inline DetourStatistics detour_statistics(const std::vector<PathObservation>& obs,
                                          const std::map<int, std::vector<int>>& steps_by_dest) {
  auto rates = detour_rates(obs, steps_by_dest);
  DetourStatistics s;
  s.count = static_cast<int>(rates.size());
  if (rates.empty()) return s;
  s.mean = mean(rates);
  s.stddev = rates.size() > 1 ? stddev(rates) : 0.0;
  s.min = quantile(rates, 0.0);
  s.q25 = quantile(rates, 0.25);
  s.q50 = quantile(rates, 0.5);
  s.q75 = quantile(rates, 0.75);
  s.max = quantile(rates, 1.0);
  return s;
}

/// Data-oriented detour rate: a quantile of the observed rates.
inline double select_gamma(const std::vector<PathObservation>& obs,
                           const std::map<int, std::vector<int>>& steps_by_dest,
                           double q = 0.75) {
  return quantile(detour_rates(obs, steps_by_dest), q);
}

/// T_d = max over observations n of max{ceil(gamma * D^d(k_0)), J_n}, floored
/// at t_min. Destinations without observations get t_min. In Scalar mode
/// every destination gets exactly t_min.
inline std::map<int, int> choose_T(const std::vector<PathObservation>& obs,
                                   const std::map<int, std::vector<int>>& steps_by_dest,
                                   const ChoiceStagePolicy& policy,
                                   std::span<const int> all_destinations) {
  policy.validate();
  std::map<int, int> T;
  for (int d : all_destinations) T[d] = policy.t_min;
  if (policy.mode == StagePolicyMode::Scalar) return T;
  for (const auto& o : obs) {
    const auto& steps = steps_by_dest.at(o.dest_node);
    int dmin = steps[o.origin_state()];
    if (dmin == kUnreachable)
      throw DataError("observation " + std::to_string(o.id) + ": origin cannot reach destination");
    int need = std::max(static_cast<int>(std::ceil(policy.gamma * dmin)), o.transitions());
    auto it = T.find(o.dest_node);
    if (it == T.end())
      throw DataError("observation destination " + std::to_string(o.dest_node) +
                      " missing from destination set");
    it->second = std::max(it->second, need);
  }
  return T;
}

/// Per-OD variant of choose_T; keys are (origin node, destination node).
inline std::map<std::pair<int, int>, int> choose_T_per_od(
    const std::vector<PathObservation>& obs,
    const std::map<int, std::vector<int>>& steps_by_dest, const ChoiceStagePolicy& policy) {
  policy.validate();
  std::map<std::pair<int, int>, int> T;
  for (const auto& o : obs) {
    const auto& steps = steps_by_dest.at(o.dest_node);
    int dmin = steps[o.origin_state()];
    if (dmin == kUnreachable)
      throw DataError("observation " + std::to_string(o.id) + ": origin cannot reach destination");
    int need = std::max({static_cast<int>(std::ceil(policy.gamma * dmin)), o.transitions(),
                         policy.t_min});
    auto key = std::make_pair(o.origin_node, o.dest_node);
    auto it = T.find(key);
    if (it == T.end())
      T[key] = need;
    else
      it->second = std::max(it->second, need);
  }
  return T;
}

// ---------------------------------------------------------------------------
// Prism: stage-indexed restriction of the state space.
// ---------------------------------------------------------------------------

class Prism {
 public:
  int dest_node = 0;
  std::optional<int> origin_node;  // set for doubly constrained prisms
  int T = 0;
  StateId dummy = -1;

  bool exists(int t, StateId k) const { return mask_[t][static_cast<size_t>(k)]; }

  /// Δ_t(a|k) over an explicit edge of the state graph.
  bool connected(const StateGraph& sg, int t, StateId k, StateId a) const {
    return t < T && exists(t, k) && exists(t + 1, a) && sg.incidence(k, a);
  }

  const std::vector<StateId>& stage_states(int t) const { return stage_states_[t]; }
  int stage_state_count(int t) const { return static_cast<int>(stage_states_[t].size()); }

  int64_t stage_edge_count(const StateGraph& sg, int t) const {
    int64_t n = 0;
    for (StateId k : stage_states_[t]) {
      if (sg.is_dummy(k)) continue;
      for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e)
        if (exists(t + 1, sg.edge_to(e))) ++n;
    }
    return n;
  }

  /// True iff the observation is representable inside this prism:
  /// J_n <= T and every real transition satisfies Δ_t = 1. Stages at and
  /// beyond arrival stay at the dummy, which is feasible wherever it exists.
  bool contains_path(const StateGraph& sg, const PathObservation& obs) const {
    int J = obs.transitions();
    if (J > T) return false;
    for (int t = 0; t < J; ++t)
      if (!connected(sg, t, obs.states[t], obs.states[t + 1])) return false;
    for (int t = J; t <= T; ++t)
      if (!exists(t, dummy)) return false;
    return true;
  }

  static Prism build(const StateGraph& sg, const std::vector<int>& steps_to_dest, int dest_node,
                     int T, const std::vector<int>* steps_from_origin = nullptr,
                     std::optional<int> origin_node = std::nullopt) {
    if (T < 1) throw DataError("prism requires T >= 1");
    Prism p;
    p.dest_node = dest_node;
    p.origin_node = origin_node;
    p.T = T;
    p.dummy = sg.dummy_state(dest_node);
    p.mask_.assign(T + 1, std::vector<bool>(sg.n_states(), false));

    // existence by step distances; the terminal stage keeps only the dummy
    for (int t = 0; t <= T; ++t) {
      for (StateId k = 0; k < sg.n_states(); ++k) {
        int dd = steps_to_dest[k];
        if (dd == kUnreachable || dd > T - t) continue;
        if (steps_from_origin) {
          int od = (*steps_from_origin)[k];
          if (od == kUnreachable || od > t) continue;
        }
        p.mask_[t][k] = true;
      }
    }

    // backward sweep: drop states whose admissible successors are all
    // masked out; the absorbing dummy is exempt (implicit stay)
    for (int t = T - 1; t >= 0; --t) {
      for (StateId k = 0; k < sg.n_states(); ++k) {
        if (!p.mask_[t][k] || k == p.dummy) continue;
        bool any = false;
        for (int e = sg.first_edge(k); e < sg.end_edge(k) && !any; ++e)
          any = p.mask_[t + 1][sg.edge_to(e)];
        if (!any) p.mask_[t][k] = false;
      }
    }

    for (int t = 0; t <= T; ++t) {
      std::vector<StateId> states;
      for (StateId k = 0; k < sg.n_states(); ++k)
        if (p.mask_[t][k]) states.push_back(k);
      p.stage_states_.push_back(std::move(states));
    }

    bool any_start = false;
    for (StateId k : p.stage_states_[0]) any_start = any_start || !sg.is_dummy(k);
    if (!any_start && !(p.mask_[0][p.dummy]))
      throw DataError("empty prism: no feasible path to destination " +
                      std::to_string(dest_node) + " within T=" + std::to_string(T));
    return p;
  }

 private:
  std::vector<std::vector<bool>> mask_;            // (T+1) x n_states
  std::vector<std::vector<StateId>> stage_states_;  // active states per stage
};

/// Destination-only prism.
inline Prism build_prism(const StateGraph& sg, const std::vector<int>& steps_to_dest,
                         int dest_node, int T) {
  return Prism::build(sg, steps_to_dest, dest_node, T);
}

/// Doubly constrained prism; origins are the stage-0 states (e.g. the links
/// leaving an origin node, or a single observed start link).
inline Prism build_prism_od(const StateGraph& sg, const std::vector<int>& steps_to_dest,
                            int dest_node, int T, std::span<const StateId> origin_states,
                            std::optional<int> origin_node = std::nullopt) {
  auto from_origin = min_steps_from_origins(sg, origin_states);
  return Prism::build(sg, steps_to_dest, dest_node, T, &from_origin, origin_node);
}

}  // namespace rlogit
