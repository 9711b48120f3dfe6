#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rlogit/util.hpp"

namespace rlogit {

// ---------------------------------------------------------------------------
// Directed network with per-link attribute vectors.
// ---------------------------------------------------------------------------

struct NetworkNode {
  int id = 0;
  double x = 0, y = 0;
};

struct NetworkLink {
  int id = 0;
  int from = 0, to = 0;
  std::vector<double> attrs;  // aligned with Network::attr_names
};

struct LoadOptions {
  // Attribute columns to divide by their maximum (e.g. {"Capacity"}).
  std::vector<std::string> normalize_max;
};

class Network {
 public:
  std::vector<NetworkNode> nodes;
  std::vector<NetworkLink> links;
  std::vector<std::string> attr_names;

  int attr_index(const std::string& name) const {
    for (size_t i = 0; i < attr_names.size(); ++i)
      if (attr_names[i] == name) return static_cast<int>(i);
    return -1;
  }

  bool has_node(int id) const { return node_index_.count(id) > 0; }
  const NetworkNode& node(int id) const { return nodes[node_index_.at(id)]; }
  bool has_link(int id) const { return link_index_.count(id) > 0; }
  const NetworkLink& link(int id) const { return links[link_index_.at(id)]; }

  void finalize(const LoadOptions& opts = {}) {
    std::sort(nodes.begin(), nodes.end(),
              [](const NetworkNode& a, const NetworkNode& b) { return a.id < b.id; });
    std::sort(links.begin(), links.end(),
              [](const NetworkLink& a, const NetworkLink& b) { return a.id < b.id; });
    node_index_.clear();
    link_index_.clear();
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (!node_index_.emplace(nodes[i].id, i).second)
        throw DataError("duplicate node id " + std::to_string(nodes[i].id));
    }
    for (size_t i = 0; i < links.size(); ++i) {
      if (!link_index_.emplace(links[i].id, i).second)
        throw DataError("duplicate link id " + std::to_string(links[i].id));
    }
    for (const auto& name : opts.normalize_max) {
      int ai = attr_index(name);
      if (ai < 0) throw DataError("normalize: unknown attribute '" + name + "'");
      double mx = 0;
      for (const auto& l : links) mx = std::max(mx, l.attrs[ai]);
      if (mx > 0)
        for (auto& l : links) l.attrs[ai] /= mx;
    }
    validate();
  }

  void validate() const {
    int len = attr_index("Length");
    for (const auto& l : links) {
      if (!has_node(l.from) || !has_node(l.to))
        throw DataError("link " + std::to_string(l.id) + " references missing node " +
                        std::to_string(has_node(l.from) ? l.to : l.from));
      if (l.attrs.size() != attr_names.size())
        throw DataError("link " + std::to_string(l.id) + " has " +
                        std::to_string(l.attrs.size()) + " attributes, expected " +
                        std::to_string(attr_names.size()));
      for (double a : l.attrs)
        if (!std::isfinite(a))
          throw DataError("link " + std::to_string(l.id) + " has non-finite attribute");
      if (len >= 0 && !(l.attrs[len] > 0))
        throw DataError("link " + std::to_string(l.id) + " has non-positive Length");
    }
  }

 private:
  std::map<int, size_t> node_index_;
  std::map<int, size_t> link_index_;
};

// ---------------------------------------------------------------------------
// Loaders: CSV edge list and TNTP.
// ---------------------------------------------------------------------------

inline Network load_network_csv(const std::string& nodes_path, const std::string& links_path,
                                const LoadOptions& opts = {}) {
  Network net;
  std::ifstream nf(nodes_path);
  if (!nf) throw DataError("cannot open " + nodes_path);
  std::string line;
  if (!std::getline(nf, line)) throw DataError("empty node file " + nodes_path);
  while (std::getline(nf, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    auto cols = detail::split(line, ',');
    if (cols.size() < 3) throw DataError("node row needs node_id,x,y: '" + line + "'");
    NetworkNode n;
    n.id = static_cast<int>(detail::parse_int(cols[0], nodes_path));
    n.x = detail::parse_double(cols[1], nodes_path);
    n.y = detail::parse_double(cols[2], nodes_path);
    net.nodes.push_back(n);
  }

  std::ifstream lf(links_path);
  if (!lf) throw DataError("cannot open " + links_path);
  if (!std::getline(lf, line)) throw DataError("empty link file " + links_path);
  auto header = detail::split(line, ',');
  if (header.size() < 3 || header[0] != "link_id" || header[1] != "from" || header[2] != "to")
    throw DataError("link header must start with link_id,from,to in " + links_path);
  net.attr_names.assign(header.begin() + 3, header.end());
  while (std::getline(lf, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    auto cols = detail::split(line, ',');
    if (cols.size() != header.size())
      throw DataError("link row has " + std::to_string(cols.size()) + " columns, expected " +
                      std::to_string(header.size()) + ": '" + line + "'");
    NetworkLink l;
    l.id = static_cast<int>(detail::parse_int(cols[0], links_path));
    l.from = static_cast<int>(detail::parse_int(cols[1], links_path));
    l.to = static_cast<int>(detail::parse_int(cols[2], links_path));
    for (size_t i = 3; i < cols.size(); ++i)
      l.attrs.push_back(detail::parse_double(cols[i], links_path));
    net.links.push_back(l);
  }
  net.finalize(opts);
  return net;
}

/// TNTP reader. Free-flow cost column becomes Length, capacity becomes
/// Capacity. Node coordinates come from the optional companion node file;
/// without one, nodes referenced by links are created at the origin.
inline Network load_network_tntp(const std::string& net_path,
                                 const std::string& node_path = "",
                                 const LoadOptions& opts = {}) {
  std::ifstream f(net_path);
  if (!f) throw DataError("cannot open " + net_path);
  Network net;
  net.attr_names = {"Length", "Capacity"};
  std::string line;
  bool in_body = false;
  int next_link_id = 1;
  std::set<int> seen_nodes;
  while (std::getline(f, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line[0] == '<') {
      if (line.find("<END OF METADATA>") != std::string::npos) in_body = true;
      continue;
    }
    if (line[0] == '~') {
      in_body = true;
      continue;
    }
    if (!in_body) continue;
    std::istringstream is(line);
    double init, term, capacity, length, fft;
    if (!(is >> init >> term >> capacity >> length >> fft))
      throw DataError("bad TNTP link row: '" + line + "'");
    NetworkLink l;
    l.id = next_link_id++;
    l.from = static_cast<int>(init);
    l.to = static_cast<int>(term);
    l.attrs = {fft, capacity};
    net.links.push_back(l);
    seen_nodes.insert(l.from);
    seen_nodes.insert(l.to);
  }
  if (!node_path.empty()) {
    std::ifstream nf(node_path);
    if (!nf) throw DataError("cannot open " + node_path);
    while (std::getline(nf, line)) {
      line = detail::trim(line);
      if (line.empty() || line[0] == '~' || line[0] == '<') continue;
      std::replace(line.begin(), line.end(), ';', ' ');
      std::istringstream is(line);
      double id, x, y;
      if (!(is >> id)) continue;
      if (std::floor(id) != id) continue;  // header line like "node x y"
      if (!(is >> x >> y)) throw DataError("bad TNTP node row: '" + line + "'");
      NetworkNode n;
      n.id = static_cast<int>(id);
      n.x = x;
      n.y = y;
      net.nodes.push_back(n);
    }
  }
  if (net.nodes.empty())
    for (int id : seen_nodes) net.nodes.push_back({id, 0, 0});
  net.finalize(opts);
  return net;
}

// ---------------------------------------------------------------------------
// Link-based state space. States are the links of G in stable (link_id)
// order, followed by one dummy absorbing state per destination node in
// node-id order. Transitions into a dummy carry zero attributes.
// ---------------------------------------------------------------------------

using StateId = int;

class StateGraph {
 public:
  StateGraph(const Network& net, std::vector<int> destination_nodes) : net_(&net) {
    std::sort(destination_nodes.begin(), destination_nodes.end());
    destination_nodes.erase(std::unique(destination_nodes.begin(), destination_nodes.end()),
                            destination_nodes.end());
    dest_nodes_ = destination_nodes;

    n_links_ = static_cast<int>(net.links.size());
    for (int d : dest_nodes_) {
      if (!net.has_node(d))
        throw DataError("destination node " + std::to_string(d) + " not in network");
      bool has_in = false;
      for (const auto& l : net.links) has_in = has_in || l.to == d;
      if (!has_in)
        throw DataError("destination node " + std::to_string(d) + " has no incoming link");
    }
    n_states_ = n_links_ + static_cast<int>(dest_nodes_.size());
    for (size_t i = 0; i < dest_nodes_.size(); ++i)
      dummy_of_[dest_nodes_[i]] = n_links_ + static_cast<int>(i);

    // outgoing links per node, in stable link order
    std::map<int, std::vector<int>> out_links;
    for (int i = 0; i < n_links_; ++i) out_links[net.links[i].from].push_back(i);

    offsets_.assign(n_states_ + 1, 0);
    for (int k = 0; k < n_links_; ++k) {
      const auto& lk = net.links[k];
      int deg = 0;
      auto it = out_links.find(lk.to);
      if (it != out_links.end()) deg += static_cast<int>(it->second.size());
      if (dummy_of_.count(lk.to)) deg += 1;
      offsets_[k + 1] = offsets_[k] + deg;
    }
    for (int k = n_links_; k < n_states_; ++k) offsets_[k + 1] = offsets_[k];

    to_.resize(offsets_[n_states_]);
    uturn_.resize(offsets_[n_states_]);
    for (int k = 0; k < n_links_; ++k) {
      const auto& lk = net.links[k];
      int e = offsets_[k];
      auto it = out_links.find(lk.to);
      if (it != out_links.end()) {
        for (int a : it->second) {
          const auto& la = net.links[a];
          to_[e] = a;
          uturn_[e] = (la.to == lk.from && la.from == lk.to);
          ++e;
        }
      }
      auto dit = dummy_of_.find(lk.to);
      if (dit != dummy_of_.end()) {
        to_[e] = dit->second;
        uturn_[e] = false;
        ++e;
      }
    }
  }

  const Network& network() const { return *net_; }
  int n_states() const { return n_states_; }
  int n_links() const { return n_links_; }
  const std::vector<int>& destination_nodes() const { return dest_nodes_; }

  bool is_dummy(StateId k) const { return k >= n_links_; }
  /// Destination node of a dummy state.
  int dummy_node(StateId k) const { return dest_nodes_[k - n_links_]; }
  StateId dummy_state(int dest_node) const {
    auto it = dummy_of_.find(dest_node);
    if (it == dummy_of_.end())
      throw DataError("no dummy state for destination " + std::to_string(dest_node));
    return it->second;
  }
  const NetworkLink& link_of(StateId k) const { return net_->links[k]; }
  int head_node(StateId k) const { return is_dummy(k) ? dummy_node(k) : link_of(k).to; }
  int tail_node(StateId k) const { return is_dummy(k) ? dummy_node(k) : link_of(k).from; }

  int n_edges() const { return offsets_[n_states_]; }
  int first_edge(StateId k) const { return offsets_[k]; }
  int end_edge(StateId k) const { return offsets_[k + 1]; }
  int out_degree(StateId k) const { return offsets_[k + 1] - offsets_[k]; }
  StateId edge_to(int e) const { return to_[e]; }
  bool edge_uturn(int e) const { return uturn_[e]; }

  /// δ(a|k): 1 iff a is an admissible action from k.
  bool incidence(StateId k, StateId a) const { return find_edge(k, a) >= 0; }
  bool uturn(StateId k, StateId a) const {
    int e = find_edge(k, a);
    return e >= 0 && uturn_[e];
  }
  int find_edge(StateId k, StateId a) const {
    for (int e = offsets_[k]; e < offsets_[k + 1]; ++e)
      if (to_[e] == a) return e;
    return -1;
  }

  /// Links leaving a node, as states (used for virtual-origin choices).
  std::vector<StateId> states_from_node(int node) const {
    std::vector<StateId> out;
    for (int k = 0; k < n_links_; ++k)
      if (net_->links[k].from == node) out.push_back(k);
    return out;
  }

  StateId state_of_link(int link_id) const {
    for (int k = 0; k < n_links_; ++k)
      if (net_->links[k].id == link_id) return k;
    throw DataError("unknown link id " + std::to_string(link_id));
  }

 private:
  const Network* net_;
  std::vector<int> dest_nodes_;
  std::map<int, StateId> dummy_of_;
  int n_links_ = 0, n_states_ = 0;
  std::vector<int> offsets_;
  std::vector<StateId> to_;
  std::vector<char> uturn_;
};

// ---------------------------------------------------------------------------
// Step and length distances.
// ---------------------------------------------------------------------------

/// Minimum number of state transitions from every state to the absorbing
/// state of `dest_node` (kUnreachable if none).
inline std::vector<int> min_steps_to_destination(const StateGraph& sg, int dest_node) {
  std::vector<int> dist(sg.n_states(), kUnreachable);
  std::vector<std::vector<StateId>> preds(sg.n_states());
  for (StateId k = 0; k < sg.n_states(); ++k)
    for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) preds[sg.edge_to(e)].push_back(k);
  std::deque<StateId> queue;
  StateId dummy = sg.dummy_state(dest_node);
  dist[dummy] = 0;
  queue.push_back(dummy);
  while (!queue.empty()) {
    StateId s = queue.front();
    queue.pop_front();
    for (StateId p : preds[s])
      if (dist[p] == kUnreachable) {
        dist[p] = dist[s] + 1;
        queue.push_back(p);
      }
  }
  return dist;
}

/// Minimum number of state transitions from any of `origins` to every state.
inline std::vector<int> min_steps_from_origins(const StateGraph& sg,
                                               std::span<const StateId> origins) {
  std::vector<int> dist(sg.n_states(), kUnreachable);
  std::deque<StateId> queue;
  for (StateId o : origins) {
    if (o < 0 || o >= sg.n_states()) throw DataError("origin state out of range");
    if (dist[o] == kUnreachable) {
      dist[o] = 0;
      queue.push_back(o);
    }
  }
  while (!queue.empty()) {
    StateId s = queue.front();
    queue.pop_front();
    for (int e = sg.first_edge(s); e < sg.end_edge(s); ++e) {
      StateId a = sg.edge_to(e);
      if (dist[a] == kUnreachable) {
        dist[a] = dist[s] + 1;
        queue.push_back(a);
      }
    }
  }
  return dist;
}

/// Shortest-path length SP(k,d) satisfying
///   SP(k,d) = min_{a in A(k)} [ Length(a) + SP(a,d) ],  SP(dummy,d) = 0,
/// where Length of a transition into a dummy is zero. Dijkstra over the
/// reversed state graph.
inline std::vector<double> length_distances(const StateGraph& sg, int dest_node) {
  int len_idx = sg.network().attr_index("Length");
  if (len_idx < 0) throw DataError("length_distances requires a Length attribute");
  std::vector<double> dist(sg.n_states(), kInf);
  // reversed adjacency with the cost of edge (k -> a) = Length(a)
  std::vector<std::vector<std::pair<StateId, double>>> rev(sg.n_states());
  for (StateId k = 0; k < sg.n_states(); ++k)
    for (int e = sg.first_edge(k); e < sg.end_edge(k); ++e) {
      StateId a = sg.edge_to(e);
      double cost = sg.is_dummy(a) ? 0.0 : sg.link_of(a).attrs[len_idx];
      rev[a].push_back({k, cost});
    }
  using Item = std::pair<double, StateId>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  StateId dummy = sg.dummy_state(dest_node);
  dist[dummy] = 0;
  pq.push({0.0, dummy});
  while (!pq.empty()) {
    auto [d, s] = pq.top();
    pq.pop();
    if (d > dist[s]) continue;
    for (auto [p, cost] : rev[s])
      if (d + cost < dist[p]) {
        dist[p] = d + cost;
        pq.push({dist[p], p});
      }
  }
  return dist;
}

// ---------------------------------------------------------------------------
// Path observations.
// ---------------------------------------------------------------------------

struct PathObservation {
  int id = 0;
  int origin_node = 0;
  int dest_node = 0;
  /// [k_0, ..., k_J] with k_J the dummy state of dest_node.
  std::vector<StateId> states;

  /// Number of transitions, including the absorbing one.
  int transitions() const { return static_cast<int>(states.size()) - 1; }
  StateId origin_state() const { return states.front(); }
};

/// Build a validated observation from a raw link-id sequence.
inline PathObservation make_observation(const StateGraph& sg, int id, int origin_node,
                                        int dest_node,
                                        const std::vector<int>& link_ids) {
  if (link_ids.empty()) throw DataError("observation " + std::to_string(id) + ": empty path");
  PathObservation obs;
  obs.id = id;
  obs.origin_node = origin_node;
  obs.dest_node = dest_node;
  for (int lid : link_ids) {
    if (!sg.network().has_link(lid))
      throw DataError("observation " + std::to_string(id) + ": unknown link id " +
                      std::to_string(lid));
    obs.states.push_back(sg.state_of_link(lid));
  }
  for (size_t j = 0; j + 1 < obs.states.size(); ++j)
    if (!sg.incidence(obs.states[j], obs.states[j + 1]))
      throw DataError("observation " + std::to_string(id) + ": links " +
                      std::to_string(sg.link_of(obs.states[j]).id) + " and " +
                      std::to_string(sg.link_of(obs.states[j + 1]).id) + " are not connected");
  if (sg.tail_node(obs.states.front()) != origin_node)
    throw DataError("observation " + std::to_string(id) + ": first link does not leave origin " +
                    std::to_string(origin_node));
  if (sg.head_node(obs.states.back()) != dest_node)
    throw DataError("observation " + std::to_string(id) + ": last link does not enter destination " +
                    std::to_string(dest_node));
  obs.states.push_back(sg.dummy_state(dest_node));
  return obs;
}

/// Observations CSV: obs_id,origin_node,dest_node,link_sequence with
/// ';'-separated link ids.
inline std::vector<PathObservation> load_observations(const std::string& path,
                                                      const StateGraph& sg) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty observation file " + path);
  std::vector<PathObservation> out;
  while (std::getline(f, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    auto cols = detail::split(line, ',');
    if (cols.size() != 4)
      throw DataError("observation row needs obs_id,origin_node,dest_node,link_sequence: '" +
                      line + "'");
    std::vector<int> link_ids;
    for (const auto& tok : detail::split(cols[3], ';'))
      if (!tok.empty()) link_ids.push_back(static_cast<int>(detail::parse_int(tok, path)));
    out.push_back(make_observation(sg, static_cast<int>(detail::parse_int(cols[0], path)),
                                   static_cast<int>(detail::parse_int(cols[1], path)),
                                   static_cast<int>(detail::parse_int(cols[2], path)),
                                   link_ids));
  }
  return out;
}

inline std::string observations_to_csv(const StateGraph& sg,
                                       const std::vector<PathObservation>& obs) {
  std::string out = "obs_id,origin_node,dest_node,link_sequence\n";
  for (const auto& o : obs) {
    out += std::to_string(o.id) + "," + std::to_string(o.origin_node) + "," +
           std::to_string(o.dest_node) + ",";
    for (size_t j = 0; j + 1 < o.states.size(); ++j) {
      if (j) out += ";";
      out += std::to_string(sg.link_of(o.states[j]).id);
    }
    out += "\n";
  }
  return out;
}

}  // namespace rlogit
