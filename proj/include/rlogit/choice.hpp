#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlogit/value.hpp"

namespace rlogit {

enum class ModelKind { RL, NRL, PrismRL, PrismNRL };

inline bool is_prism(ModelKind k) { return k == ModelKind::PrismRL || k == ModelKind::PrismNRL; }
inline bool is_nested(ModelKind k) { return k == ModelKind::NRL || k == ModelKind::PrismNRL; }

inline std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::RL: return "RL";
    case ModelKind::NRL: return "NRL";
    case ModelKind::PrismRL: return "Prism-RL";
    case ModelKind::PrismNRL: return "Prism-NRL";
  }
  return "?";
}

/// Prism counterpart of a model (phase 1 of the two-phase procedure).
inline ModelKind prism_kind_of(ModelKind k) {
  return is_nested(k) ? ModelKind::PrismNRL : ModelKind::PrismRL;
}
inline ModelKind flat_kind_of(ModelKind k) {
  return is_nested(k) ? ModelKind::NRL : ModelKind::RL;
}

// ---------------------------------------------------------------------------
// Stage-indexed form of an observation.
// ---------------------------------------------------------------------------

struct TranslatedPath {
  int T = 0;
  int Jn = 0;
  int dest_node = 0;
  std::vector<StateId> seq;  // length T+1; entries from Jn onward are the dummy
};

inline TranslatedPath translate_path(const PathObservation& obs, int T) {
  TranslatedPath tp;
  tp.Jn = obs.transitions();
  if (tp.Jn > T)
    throw DataError("observation " + std::to_string(obs.id) + " has " + std::to_string(tp.Jn) +
                    " transitions and violates the prism; requires T >= " +
                    std::to_string(tp.Jn) + " for destination " + std::to_string(obs.dest_node));
  tp.T = T;
  tp.dest_node = obs.dest_node;
  tp.seq = obs.states;
  tp.seq.resize(T + 1, obs.states.back());
  return tp;
}

// ---------------------------------------------------------------------------
// Problem: immutable data context shared by all four models — network, state
// space, distances, prisms, observations and their cached attribute sums.
// ---------------------------------------------------------------------------

struct PrismSettings {
  ChoiceStagePolicy policy;
  bool enabled = false;
  /// OD pairs that must have a prism even without observations (simulation).
  std::vector<std::pair<int, int>> extra_od_pairs;
};

class Problem {
 public:
  struct Group {
    int origin_node = -1;  // -1 for destination-level groups
    int dest_node = 0;
    std::optional<Prism> prism;
    std::vector<int> obs;  // indices into observations()
  };

  Problem(Network network, UtilitySpec spec, std::vector<int> destination_nodes,
          std::vector<PathObservation> observations, const PrismSettings& prism_settings = {},
          int threads = 1)
      : net_(std::move(network)), spec_(std::move(spec)), threads_(std::max(1, threads)) {
    for (const auto& o : observations) destination_nodes.push_back(o.dest_node);
    sg_ = std::make_unique<StateGraph>(net_, destination_nodes);
    cache_ = std::make_unique<TermCache>(*sg_, spec_);
    obs_ = std::move(observations);

    for (int d : sg_->destination_nodes()) steps_[d] = min_steps_to_destination(*sg_, d);
    if (spec_.nested()) {
      for (int d : sg_->destination_nodes()) {
        sp_[d] = length_distances(*sg_, d);
        roots_[d] = scale_roots(*sg_, sp_[d]);
      }
    }

    // re-key observations against the final state graph and cache attribute
    // sums and edge ids along each path
    pooled_terms_.resize(obs_.size());
    pooled_fixed_.resize(obs_.size());
    edge_ids_.resize(obs_.size());
    for (size_t n = 0; n < obs_.size(); ++n) {
      const auto& o = obs_[n];
      pooled_terms_[n].assign(cache_->n_terms(), 0.0);
      pooled_fixed_[n].assign(cache_->n_fixed(), 0.0);
      for (size_t j = 0; j + 1 < o.states.size(); ++j) {
        int e = sg_->find_edge(o.states[j], o.states[j + 1]);
        if (e < 0)
          throw DataError("observation " + std::to_string(o.id) + ": transition missing");
        edge_ids_[n].push_back(e);
        for (int i = 0; i < cache_->n_terms(); ++i)
          pooled_terms_[n][i] += cache_->edge_term(e, i);
        for (int j2 = 0; j2 < cache_->n_fixed(); ++j2)
          pooled_fixed_[n][j2] += cache_->edge_fixed(e, j2);
      }
    }

    // destination-level groups (always present, used by RL/NRL)
    for (int d : sg_->destination_nodes()) {
      flat_index_[d] = static_cast<int>(flat_groups_.size());
      flat_groups_.push_back({-1, d, std::nullopt, {}});
    }
    for (size_t n = 0; n < obs_.size(); ++n)
      flat_groups_[flat_index_.at(obs_[n].dest_node)].obs.push_back(static_cast<int>(n));

    if (prism_settings.enabled) build_prisms(prism_settings);
  }

  Problem(const Problem&) = delete;
  Problem& operator=(const Problem&) = delete;

  const Network& network() const { return net_; }
  const StateGraph& state_graph() const { return *sg_; }
  const UtilitySpec& spec() const { return spec_; }
  const TermCache& cache() const { return *cache_; }
  const std::vector<PathObservation>& observations() const { return obs_; }
  const std::map<int, std::vector<int>>& steps_by_dest() const { return steps_; }
  const std::vector<int>& steps_to(int dest) const { return steps_.at(dest); }
  const std::vector<double>& sp_to(int dest) const { return sp_.at(dest); }
  const std::vector<double>& roots_to(int dest) const { return roots_.at(dest); }
  int threads() const { return threads_; }
  const std::map<int, int>& chosen_T() const { return chosen_T_; }

  const std::vector<Group>& groups(ModelKind kind) const {
    if (!is_prism(kind)) return flat_groups_;
    if (prism_groups_.empty())
      throw ConfigError("prism model requested but no prism policy configured");
    return prism_groups_;
  }

  int group_of(ModelKind kind, const PathObservation& o) const {
    if (!is_prism(kind)) {
      auto it = flat_index_.find(o.dest_node);
      return it == flat_index_.end() ? -1 : it->second;
    }
    auto it = prism_index_.find({prism_origin_key(o.origin_node), o.dest_node});
    return it == prism_index_.end() ? -1 : it->second;
  }

  double pooled_term(int n, int i) const { return pooled_terms_[n][i]; }
  double pooled_fixed(int n, int j) const { return pooled_fixed_[n][j]; }
  const std::vector<int>& path_edges(int n) const { return edge_ids_[n]; }

  /// Sum of fixed-term utility along a path (constant in the parameters).
  double pooled_fixed_utility(int n) const {
    double v = 0;
    for (int j = 0; j < cache_->n_fixed(); ++j) v += spec_.fixed[j].coef * pooled_fixed_[n][j];
    return v;
  }

 private:
  int prism_origin_key(int origin_node) const {
    return per_od_ ? origin_node : -1;
  }

  void build_prisms(const PrismSettings& ps) {
    ps.policy.validate();
    per_od_ = ps.policy.mode == StagePolicyMode::PerOd;
    if (!per_od_) {
      chosen_T_ = choose_T(obs_, steps_, ps.policy, sg_->destination_nodes());
      for (const auto& [d, T] : chosen_T_) {
        prism_index_[{-1, d}] = static_cast<int>(prism_groups_.size());
        prism_groups_.push_back({-1, d, build_prism(*sg_, steps_.at(d), d, T), {}});
      }
    } else {
      auto T_od = choose_T_per_od(obs_, steps_, ps.policy);
      for (const auto& [o, d] : ps.extra_od_pairs) {
        auto key = std::make_pair(o, d);
        if (!T_od.count(key)) T_od[key] = ps.policy.t_min;
      }
      for (const auto& [key, T] : T_od) {
        auto origins = sg_->states_from_node(key.first);
        if (origins.empty())
          throw DataError("origin node " + std::to_string(key.first) + " has no outgoing link");
        prism_index_[{key.first, key.second}] = static_cast<int>(prism_groups_.size());
        prism_groups_.push_back({key.first, key.second,
                                 build_prism_od(*sg_, steps_.at(key.second), key.second, T,
                                                origins, key.first),
                                 {}});
      }
    }
    for (size_t n = 0; n < obs_.size(); ++n) {
      const auto& o = obs_[n];
      auto it = prism_index_.find({prism_origin_key(o.origin_node), o.dest_node});
      if (it == prism_index_.end())
        throw DataError("observation " + std::to_string(o.id) + ": no prism for its OD");
      auto& g = prism_groups_[it->second];
      if (!g.prism->contains_path(*sg_, o))
        throw DataError("observation " + std::to_string(o.id) + " with " +
                        std::to_string(o.transitions()) +
                        " transitions is outside the prism (T=" + std::to_string(g.prism->T) +
                        ") for destination " + std::to_string(o.dest_node));
      g.obs.push_back(static_cast<int>(n));
    }
  }

  Network net_;
  UtilitySpec spec_;
  std::unique_ptr<StateGraph> sg_;
  std::unique_ptr<TermCache> cache_;
  std::vector<PathObservation> obs_;
  std::map<int, std::vector<int>> steps_;
  std::map<int, std::vector<double>> sp_;
  std::map<int, std::vector<double>> roots_;
  std::vector<Group> flat_groups_;
  std::vector<Group> prism_groups_;
  std::map<int, int> flat_index_;
  std::map<std::pair<int, int>, int> prism_index_;
  std::map<int, int> chosen_T_;
  bool per_od_ = false;
  int threads_ = 1;
  std::vector<std::vector<double>> pooled_terms_;
  std::vector<std::vector<double>> pooled_fixed_;
  std::vector<std::vector<int>> edge_ids_;
};

// ---------------------------------------------------------------------------
// Fitted model: parameters plus the value tables they imply.
// ---------------------------------------------------------------------------

struct FittedModel {
  ModelKind kind = ModelKind::RL;
  std::vector<double> beta;  // spec terms only
  double omega = 0.0;        // nested scale parameter
  WeightMatrix weights;
  std::vector<ValueTable> flat_tables;          // parallel to groups(kind) for RL/NRL
  std::vector<StagedValueTable> staged_tables;  // parallel to groups(kind) for prism kinds
  std::map<int, std::vector<double>> scales;    // per destination (nested kinds)
};

/// Split a packed parameter vector (beta..., omega) per the spec.
inline void unpack_theta(const UtilitySpec& spec, std::span<const double> theta,
                         std::vector<double>& beta, double& omega) {
  if (static_cast<int>(theta.size()) != spec.n_free())
    throw ConfigError("parameter vector has " + std::to_string(theta.size()) +
                      " entries, model needs " + std::to_string(spec.n_free()));
  beta.assign(theta.begin(), theta.begin() + spec.n_params());
  omega = spec.nested() ? theta.back() : 0.0;
}

/// Solve all value tables for the given parameters. Infeasibility is a
/// regular outcome for RL/NRL; prism models always succeed.
inline SolveOutcome<FittedModel> fit_model(const Problem& pb, ModelKind kind,
                                           std::span<const double> theta) {
  SolveOutcome<FittedModel> out;
  FittedModel& fm = out.value;
  fm.kind = kind;
  unpack_theta(pb.spec(), theta, fm.beta, fm.omega);
  if (is_nested(kind) && !pb.spec().nested())
    throw ConfigError("nested model requires scale {type: nested} in the utility spec");
  const auto& sg = pb.state_graph();
  fm.weights = evaluate_utilities(sg, pb.cache(), pb.spec(), fm.beta);
  if (is_nested(kind))
    for (int d : sg.destination_nodes())
      fm.scales[d] = nested_scales(sg, fm.omega, pb.sp_to(d));

  const auto& groups = pb.groups(kind);
  for (const auto& g : groups) {
    switch (kind) {
      case ModelKind::RL: {
        auto res = solve_rl(sg, fm.weights, g.dest_node, pb.steps_to(g.dest_node));
        if (!res.feasible) {
          out.report = res.report;
          return out;
        }
        fm.flat_tables.push_back(std::move(res.value));
        break;
      }
      case ModelKind::NRL: {
        auto res = solve_nrl(sg, fm.weights, fm.scales.at(g.dest_node), g.dest_node,
                             pb.steps_to(g.dest_node));
        if (!res.feasible) {
          out.report = res.report;
          return out;
        }
        fm.flat_tables.push_back(std::move(res.value));
        break;
      }
      case ModelKind::PrismRL:
        fm.staged_tables.push_back(solve_prism_rl(sg, fm.weights, *g.prism));
        break;
      case ModelKind::PrismNRL:
        fm.staged_tables.push_back(
            solve_prism_nrl(sg, fm.weights, fm.scales.at(g.dest_node), *g.prism));
        break;
    }
  }
  out.feasible = true;
  out.report.solvable = true;
  return out;
}

// ---------------------------------------------------------------------------
// Transition probabilities.
// ---------------------------------------------------------------------------

/// Probability vector over the actions of state k (aligned with the state
/// graph's edge order for k; masked actions get probability zero). For prism
/// models t is the current choice stage.
inline std::vector<double> transition_probs(const Problem& pb, const FittedModel& fm,
                                            int group_index, StateId k, int t = 0) {
  const auto& sg = pb.state_graph();
  const auto& g = pb.groups(fm.kind)[group_index];
  std::vector<double> p(sg.out_degree(k), 0.0);
  double denom = 0;
  const double* mu = nullptr;
  if (is_nested(fm.kind)) mu = fm.scales.at(g.dest_node).data();
  for (int e = sg.first_edge(k), i = 0; e < sg.end_edge(k); ++e, ++i) {
    StateId a = sg.edge_to(e);
    double num = 0;
    if (is_prism(fm.kind)) {
      const auto& prism = *g.prism;
      const auto& table = fm.staged_tables[group_index];
      if (t < prism.T && prism.exists(t, k) && prism.exists(t + 1, a)) {
        double za = table.get(prism, t + 1, a);
        if (za > 0)
          num = is_nested(fm.kind)
                    ? std::exp(fm.weights.v[e] / mu[k]) * std::pow(za, mu[a] / mu[k])
                    : fm.weights.w[e] * za;
      }
    } else {
      const auto& table = fm.flat_tables[group_index];
      double za = table.z[a];
      if (za > 0)
        num = is_nested(fm.kind) ? std::exp(fm.weights.v[e] / mu[k]) * std::pow(za, mu[a] / mu[k])
                                 : fm.weights.w[e] * za;
    }
    p[i] = num;
    denom += num;
  }
  if (denom <= 0)
    throw DataError("state " + std::to_string(k) + " has no admissible continuation" +
                    (is_prism(fm.kind) ? " at stage " + std::to_string(t) : ""));
  for (double& x : p) x /= denom;
  return p;
}

// ---------------------------------------------------------------------------
// Path probability and log-likelihood.
// ---------------------------------------------------------------------------

/// Log-probability of one observation, or nullopt when it is not
/// representable under the model's path set (out of prism).
inline std::optional<double> score_path(const Problem& pb, const FittedModel& fm,
                                        const PathObservation& o) {
  const auto& sg = pb.state_graph();
  int gi = pb.group_of(fm.kind, o);
  if (gi < 0) return std::nullopt;
  const auto& g = pb.groups(fm.kind)[gi];
  int J = o.transitions();
  double ll = 0;
  if (is_prism(fm.kind)) {
    const auto& prism = *g.prism;
    const auto& table = fm.staged_tables[gi];
    if (!prism.contains_path(sg, o)) return std::nullopt;
    const std::vector<double>* mu =
        is_nested(fm.kind) ? &fm.scales.at(g.dest_node) : nullptr;
    for (int t = 0; t < J; ++t) {
      StateId k = o.states[t], a = o.states[t + 1];
      int e = sg.find_edge(k, a);
      double zk = table.get(prism, t, k), za = table.get(prism, t + 1, a);
      if (!(zk > 0) || !(za > 0) || !std::isfinite(zk) || !std::isfinite(za))
        return std::nullopt;
      if (mu)
        ll += fm.weights.v[e] / (*mu)[k] + ((*mu)[a] / (*mu)[k]) * std::log(za) - std::log(zk);
      else
        ll += fm.weights.v[e] / fm.weights.mu + std::log(za) - std::log(zk);
    }
  } else {
    const auto& table = fm.flat_tables[gi];
    const std::vector<double>* mu =
        is_nested(fm.kind) ? &fm.scales.at(g.dest_node) : nullptr;
    for (int t = 0; t < J; ++t) {
      StateId k = o.states[t], a = o.states[t + 1];
      int e = sg.find_edge(k, a);
      if (e < 0) return std::nullopt;
      double zk = table.z[k], za = table.z[a];
      if (!(zk > 0) || !(za > 0)) return std::nullopt;
      if (mu)
        ll += fm.weights.v[e] / (*mu)[k] + ((*mu)[a] / (*mu)[k]) * std::log(za) - std::log(zk);
      else
        ll += fm.weights.v[e] / fm.weights.mu + std::log(za) - std::log(zk);
    }
  }
  return ll;
}

/// Probability of an observed path as an explicit product of transition
/// probabilities (the telescoped log-likelihood is the primary route; this
/// one exists for prediction output and cross-checks).
inline double path_probability(const Problem& pb, const FittedModel& fm,
                               const PathObservation& o) {
  const auto& sg = pb.state_graph();
  int gi = pb.group_of(fm.kind, o);
  if (gi < 0) return 0.0;
  if (is_prism(fm.kind) && !pb.groups(fm.kind)[gi].prism->contains_path(sg, o)) return 0.0;
  double p = 1.0;
  for (int t = 0; t < o.transitions(); ++t) {
    StateId k = o.states[t];
    int e = sg.find_edge(k, o.states[t + 1]);
    if (e < 0) return 0.0;
    auto probs = transition_probs(pb, fm, gi, k, t);
    p *= probs[e - sg.first_edge(k)];
  }
  return p;
}

struct LLResult {
  double total = 0;
  int n_scored = 0;
  int n_out_of_prism = 0;
  std::vector<double> per_obs;  // -inf for unscored paths
};

/// Log-likelihood over the problem's observations. Fixed-scale models use the
/// telescoped closed form with the cached per-path attribute sums; nested
/// models accumulate per-transition log-probabilities.
inline LLResult log_likelihood(const Problem& pb, const FittedModel& fm) {
  LLResult r;
  r.per_obs.assign(pb.observations().size(), -kInf);
  const auto& groups = pb.groups(fm.kind);
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    for (int n : g.obs) {
      const auto& o = pb.observations()[n];
      double ll;
      if (!is_nested(fm.kind)) {
        double v = pb.pooled_fixed_utility(n);
        for (int i = 0; i < pb.cache().n_terms(); ++i) v += fm.beta[i] * pb.pooled_term(n, i);
        double z0;
        if (is_prism(fm.kind))
          z0 = fm.staged_tables[gi].get(*g.prism, 0, o.origin_state());
        else
          z0 = fm.flat_tables[gi].z[o.origin_state()];
        if (!(z0 > 0) || !std::isfinite(z0)) {
          ++r.n_out_of_prism;
          continue;
        }
        ll = v / fm.weights.mu - std::log(z0);
      } else {
        auto s = score_path(pb, fm, o);
        if (!s) {
          ++r.n_out_of_prism;
          continue;
        }
        ll = *s;
      }
      r.per_obs[n] = ll;
      r.total += ll;
      ++r.n_scored;
    }
  }
  return r;
}

}  // namespace rlogit
