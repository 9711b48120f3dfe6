#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rlogit/network.hpp"

namespace rlogit {

// ---------------------------------------------------------------------------
// Declarative utility specification: a linear-in-parameters sum of attribute
// expressions plus fixed-coefficient terms. An expression is one attribute
// or a product of two (interaction). Attributes live on the entered link
// (Length, Capacity, ...) or on the transition pair (Uturn).
// ---------------------------------------------------------------------------

struct AttrRef {
  enum Kind { Link, Pair } kind = Link;
  int index = 0;  // link attribute index; pair attributes: 0 = Uturn
  std::string name;
};

struct UtilityExpr {
  std::vector<AttrRef> factors;  // 1 or 2 factors
};

struct UtilityTerm {
  std::string name;  // parameter name, e.g. "b_len"
  UtilityExpr expr;
};

struct FixedTerm {
  double coef = 0;  // e.g. -10 for the u-turn penalty
  UtilityExpr expr;
};

enum class ScaleKind { Fixed, Nested };

struct UtilitySpec {
  std::vector<UtilityTerm> terms;
  std::vector<FixedTerm> fixed;
  ScaleKind scale = ScaleKind::Fixed;
  double mu = 1.0;  // global scale for Fixed (normalized to one)

  int n_params() const { return static_cast<int>(terms.size()); }
  bool nested() const { return scale == ScaleKind::Nested; }

  /// Total parameter count including omega for nested scales.
  int n_free() const { return n_params() + (nested() ? 1 : 0); }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (const auto& t : terms) out.push_back(t.name);
    if (nested()) out.push_back("omega");
    return out;
  }
};

inline AttrRef resolve_attr(const Network& net, const std::string& name) {
  if (name == "Uturn") return {AttrRef::Pair, 0, name};
  int idx = net.attr_index(name);
  if (idx < 0) throw ConfigError("unknown attribute '" + name + "'");
  return {AttrRef::Link, idx, name};
}

inline UtilityExpr make_expr(const Network& net, const std::vector<std::string>& attrs) {
  if (attrs.empty() || attrs.size() > 2)
    throw ConfigError("utility expression must reference one or two attributes");
  UtilityExpr e;
  for (const auto& a : attrs) e.factors.push_back(resolve_attr(net, a));
  return e;
}

inline void validate_spec(const UtilitySpec& spec) {
  std::map<std::string, int> seen;
  for (const auto& t : spec.terms)
    if (++seen[t.name] > 1) throw ConfigError("duplicate parameter name '" + t.name + "'");
}

// ---------------------------------------------------------------------------
// Per-edge term values, precomputed once per (state graph, spec).
// Transitions into a dummy absorbing state carry all-zero attributes.
// ---------------------------------------------------------------------------

class TermCache {
 public:
  TermCache(const StateGraph& sg, const UtilitySpec& spec)
      : n_terms_(spec.n_params()), n_fixed_(static_cast<int>(spec.fixed.size())) {
    validate_spec(spec);
    int width = n_terms_ + n_fixed_;
    edge_values_.assign(static_cast<size_t>(sg.n_edges()) * width, 0.0);
    for (StateId k = 0; k < sg.n_states(); ++k) {
      for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
        StateId a = sg.edge_to(e);
        if (sg.is_dummy(a)) continue;  // all-zero attributes
        double* row = &edge_values_[static_cast<size_t>(e) * width];
        for (int i = 0; i < n_terms_; ++i)
          row[i] = eval_expr(sg, spec.terms[i].expr, e, a);
        for (int j = 0; j < n_fixed_; ++j)
          row[n_terms_ + j] = eval_expr(sg, spec.fixed[j].expr, e, a);
      }
    }
    // virtual-origin values: entering link a with no previous link, so pair
    // attributes are zero
    link_values_.assign(static_cast<size_t>(sg.n_links()) * width, 0.0);
    for (StateId a = 0; a < sg.n_links(); ++a) {
      double* row = &link_values_[static_cast<size_t>(a) * width];
      for (int i = 0; i < n_terms_; ++i)
        row[i] = eval_expr_link_only(sg, spec.terms[i].expr, a);
      for (int j = 0; j < n_fixed_; ++j)
        row[n_terms_ + j] = eval_expr_link_only(sg, spec.fixed[j].expr, a);
    }
  }

  int n_terms() const { return n_terms_; }
  int n_fixed() const { return n_fixed_; }
  int width() const { return n_terms_ + n_fixed_; }
  double edge_term(int edge, int i) const {
    return edge_values_[static_cast<size_t>(edge) * width() + i];
  }
  double edge_fixed(int edge, int j) const {
    return edge_values_[static_cast<size_t>(edge) * width() + n_terms_ + j];
  }
  double link_term(StateId a, int i) const {
    return link_values_[static_cast<size_t>(a) * width() + i];
  }
  double link_fixed(StateId a, int j) const {
    return link_values_[static_cast<size_t>(a) * width() + n_terms_ + j];
  }

 private:
  static double eval_expr(const StateGraph& sg, const UtilityExpr& expr, int edge, StateId a) {
    double v = 1.0;
    for (const auto& f : expr.factors) {
      if (f.kind == AttrRef::Pair)
        v *= sg.edge_uturn(edge) ? 1.0 : 0.0;
      else
        v *= sg.link_of(a).attrs[f.index];
    }
    return v;
  }
  static double eval_expr_link_only(const StateGraph& sg, const UtilityExpr& expr, StateId a) {
    double v = 1.0;
    for (const auto& f : expr.factors) {
      if (f.kind == AttrRef::Pair) return 0.0;
      v *= sg.link_of(a).attrs[f.index];
    }
    return v;
  }

  int n_terms_, n_fixed_;
  std::vector<double> edge_values_;
  std::vector<double> link_values_;
};

// ---------------------------------------------------------------------------
// Weight matrix: v(a|k) and exp(v/mu) per admissible transition, in the CSR
// layout of the state graph. Entries into dummy states have v = 0, weight 1.
// ---------------------------------------------------------------------------

struct WeightMatrix {
  double mu = 1.0;
  std::vector<double> v;  // per edge
  std::vector<double> w;  // exp(v/mu) per edge
};

/// v(a|k) = sum_i beta_i x_i(a|k) + sum_j c_j x_j(a|k).
inline WeightMatrix evaluate_utilities(const StateGraph& sg, const TermCache& cache,
                                       const UtilitySpec& spec, std::span<const double> beta) {
  if (static_cast<int>(beta.size()) != spec.n_params())
    throw ConfigError("parameter vector has " + std::to_string(beta.size()) +
                      " entries, spec needs " + std::to_string(spec.n_params()));
  WeightMatrix m;
  m.mu = spec.mu;
  m.v.resize(sg.n_edges());
  m.w.resize(sg.n_edges());
  for (int e = 0; e < sg.n_edges(); ++e) {
    double v = 0;
    for (int i = 0; i < cache.n_terms(); ++i) v += beta[i] * cache.edge_term(e, i);
    for (int j = 0; j < cache.n_fixed(); ++j) v += spec.fixed[j].coef * cache.edge_fixed(e, j);
    if (!std::isfinite(v)) throw DataError("non-finite utility on edge " + std::to_string(e));
    m.v[e] = v;
    m.w[e] = std::exp(v / m.mu);
  }
  return m;
}

/// Utility of entering link a from a virtual origin (pair attributes zero).
inline double origin_entry_utility(const TermCache& cache, const UtilitySpec& spec,
                                   std::span<const double> beta, StateId a) {
  double v = 0;
  for (int i = 0; i < cache.n_terms(); ++i) v += beta[i] * cache.link_term(a, i);
  for (int j = 0; j < cache.n_fixed(); ++j) v += spec.fixed[j].coef * cache.link_fixed(a, j);
  return v;
}

// ---------------------------------------------------------------------------
// Nested scales: mu^d_k = exp(omega * sqrt(SP_kd)), one for the RL variants.
// ---------------------------------------------------------------------------

inline std::vector<double> nested_scales(const StateGraph& sg, double omega,
                                         const std::vector<double>& sp_to_dest) {
  std::vector<double> mu(sg.n_states(), 1.0);
  for (StateId k = 0; k < sg.n_states(); ++k) {
    double sp = sp_to_dest[k];
    if (!std::isfinite(sp)) continue;  // unreachable states keep scale 1
    mu[k] = std::exp(omega * std::sqrt(sp));
  }
  return mu;
}

/// sqrt(SP) per state, the omega-sensitivity of log mu.
inline std::vector<double> scale_roots(const StateGraph& sg,
                                       const std::vector<double>& sp_to_dest) {
  std::vector<double> s(sg.n_states(), 0.0);
  for (StateId k = 0; k < sg.n_states(); ++k)
    if (std::isfinite(sp_to_dest[k])) s[k] = std::sqrt(sp_to_dest[k]);
  return s;
}

}  // namespace rlogit
