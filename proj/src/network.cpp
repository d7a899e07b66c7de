#include "kss/network.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <unordered_map>

#include "kss/error.hpp"
#include "kss/stats.hpp"

namespace kss {

int MobilityGraph::num_movers() const {
  int m = 0;
  for (const auto& w : workers) m += w.mover() ? 1 : 0;
  return m;
}

std::vector<int> MobilityGraph::worker_codes() const {
  std::vector<int> codes;
  for (const auto& w : workers) codes.push_back(w.worker);
  return codes;
}

namespace {

std::vector<int> firms_of(const std::vector<WorkerEdge>& workers) {
  std::vector<int> firms;
  for (const auto& w : workers) firms.insert(firms.end(), w.firms.begin(), w.firms.end());
  std::sort(firms.begin(), firms.end());
  firms.erase(std::unique(firms.begin(), firms.end()), firms.end());
  return firms;
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

// Firm-local indexing shared by the connectivity routines.
struct LocalFirms {
  std::vector<int> loc;
  explicit LocalFirms(const MobilityGraph& g) : loc(g.firm_code_count, -1) {
    for (std::size_t i = 0; i < g.firms.size(); ++i) loc[g.firms[i]] = static_cast<int>(i);
  }
};

// Articulation points of the bipartite graph restricted to workers with include[w] != 0.
std::vector<int> articulation_workers(const MobilityGraph& g, const std::vector<char>& include) {
  const int F = static_cast<int>(g.firms.size()), W = static_cast<int>(g.workers.size());
  LocalFirms lf(g);
  std::vector<std::vector<int>> adj(F + W);
  for (int w = 0; w < W; ++w) {
    if (!include[w]) continue;
    for (int f : g.workers[w].firms) {
      const int a = lf.loc[f];
      adj[a].push_back(F + w);
      adj[F + w].push_back(a);
    }
  }
  std::vector<int> disc(F + W, -1), low(F + W, 0);
  std::vector<char> is_ap(F + W, 0);
  int timer = 0;
  struct Frame {
    int v, parent;
    std::size_t next;
  };
  for (int root = 0; root < F + W; ++root) {
    if (disc[root] != -1 || adj[root].empty()) continue;
    int root_children = 0;
    std::vector<Frame> stack{{root, -1, 0}};
    disc[root] = low[root] = timer++;
    while (!stack.empty()) {
      Frame& fr = stack.back();
      if (fr.next < adj[fr.v].size()) {
        const int u = adj[fr.v][fr.next++];
        if (u == fr.parent) continue;
        if (disc[u] == -1) {
          disc[u] = low[u] = timer++;
          if (fr.v == root) ++root_children;
          stack.push_back({u, fr.v, 0});
        } else {
          low[fr.v] = std::min(low[fr.v], disc[u]);
        }
      } else {
        const int v = fr.v, p = fr.parent;
        stack.pop_back();
        if (p >= 0) {
          low[p] = std::min(low[p], low[v]);
          if (p != root && low[v] >= disc[p]) is_ap[p] = 1;
        }
      }
    }
    if (root_children >= 2) is_ap[root] = 1;
  }
  std::vector<int> out;
  for (int w = 0; w < W; ++w) {
    if (include[w] && is_ap[F + w]) out.push_back(w);
  }
  return out;
}

}  // namespace

MobilityGraph build_mobility_graph(const Panel& panel) {
  MobilityGraph g;
  g.firm_code_count = panel.num_firms();
  for (int w = 0; w < panel.num_workers(); ++w) {
    const auto& idx = panel.group_index[w];
    WorkerEdge e;
    e.worker = w;
    for (int r : idx) e.firms.push_back(panel.firm[r]);
    e.from = panel.firm[idx.front()];
    e.to = panel.firm[idx.back()];
    std::sort(e.firms.begin(), e.firms.end());
    e.firms.erase(std::unique(e.firms.begin(), e.firms.end()), e.firms.end());
    g.workers.push_back(std::move(e));
  }
  g.firms = firms_of(g.workers);
  return g;
}

MobilityGraph make_mobility_graph(int firm_count, const std::vector<std::pair<int, int>>& mover_edges) {
  MobilityGraph g;
  g.firm_code_count = firm_count;
  for (std::size_t i = 0; i < mover_edges.size(); ++i) {
    WorkerEdge e;
    e.worker = static_cast<int>(i);
    e.from = mover_edges[i].first;
    e.to = mover_edges[i].second;
    e.firms = {e.from, e.to};
    std::sort(e.firms.begin(), e.firms.end());
    e.firms.erase(std::unique(e.firms.begin(), e.firms.end()), e.firms.end());
    g.workers.push_back(std::move(e));
  }
  g.firms = firms_of(g.workers);
  return g;
}

MobilityGraph subgraph_without(const MobilityGraph& g, const std::vector<char>& drop_worker) {
  MobilityGraph out;
  out.firm_code_count = g.firm_code_count;
  for (std::size_t w = 0; w < g.workers.size(); ++w) {
    if (!drop_worker[w]) out.workers.push_back(g.workers[w]);
  }
  out.firms = firms_of(out.workers);
  return out;
}

namespace {

std::vector<int> component_labels(const MobilityGraph& g, const std::vector<char>* include) {
  LocalFirms lf(g);
  UnionFind uf(static_cast<int>(g.firms.size()));
  for (std::size_t w = 0; w < g.workers.size(); ++w) {
    if (include && !(*include)[w]) continue;
    const auto& fs = g.workers[w].firms;
    for (std::size_t t = 1; t < fs.size(); ++t) uf.unite(lf.loc[fs[0]], lf.loc[fs[t]]);
  }
  std::vector<int> lab(g.firms.size());
  for (std::size_t i = 0; i < g.firms.size(); ++i) lab[i] = uf.find(static_cast<int>(i));
  return lab;
}

}  // namespace

bool is_connected(const MobilityGraph& g) {
  if (g.firms.size() <= 1) return true;
  const auto lab = component_labels(g, nullptr);
  return std::all_of(lab.begin(), lab.end(), [&](int c) { return c == lab[0]; });
}

std::vector<int> worker_articulation_points(const MobilityGraph& g) {
  return articulation_workers(g, std::vector<char>(g.workers.size(), 1));
}

MobilityGraph largest_connected_component(const MobilityGraph& g) {
  if (g.firms.empty()) return g;
  LocalFirms lf(g);
  const auto lab = component_labels(g, nullptr);
  // Union-find roots are the smallest local index, which is the smallest firm code.
  std::vector<long> size(g.firms.size(), 0);
  for (std::size_t i = 0; i < g.firms.size(); ++i) ++size[lab[i]];
  for (const auto& w : g.workers) ++size[lab[lf.loc[w.firms[0]]]];
  int best = -1;
  for (std::size_t c = 0; c < size.size(); ++c) {
    if (size[c] > 0 && (best < 0 || size[c] > size[best])) best = static_cast<int>(c);
  }
  std::vector<char> drop(g.workers.size(), 0);
  for (std::size_t w = 0; w < g.workers.size(); ++w) drop[w] = lab[lf.loc[g.workers[w].firms[0]]] != best;
  return subgraph_without(g, drop);
}

MobilityGraph leave_one_out_connected(const MobilityGraph& g) {
  if (!is_connected(g)) fail_validation("Disconnected", "leave-one-out pruning needs a connected graph");
  const auto ap = worker_articulation_points(g);
  std::vector<char> drop(g.workers.size(), 0);
  for (int w : ap) drop[w] = 1;
  return largest_connected_component(subgraph_without(g, drop));
}

MobilityGraph leave_two_out_connected(const MobilityGraph& g0) {
  MobilityGraph g = g0;
  while (true) {
    std::vector<char> del(g.workers.size(), 0);
    std::vector<char> include(g.workers.size(), 1);
    bool any = false;
    for (std::size_t w = 0; w < g.workers.size(); ++w) {
      if (!g.workers[w].mover()) continue;
      include[w] = 0;
      for (int a : articulation_workers(g, include)) {
        del[a] = 1;
        any = true;
      }
      include[w] = 1;
    }
    if (!any) return g;
    g = leave_one_out_connected(largest_connected_component(subgraph_without(g, del)));
  }
}

Panel restrict_panel(const Panel& panel, const MobilityGraph& g) {
  std::vector<char> keep_worker(panel.num_workers(), 0);
  for (const auto& w : g.workers) keep_worker[w.worker] = 1;
  std::vector<int> rows;
  for (int i = 0; i < panel.n(); ++i) {
    if (keep_worker[panel.worker[i]]) rows.push_back(i);
  }
  return panel.subset(rows);
}

namespace {

// Firm multigraph with movers as edges, used by the path search.
class FirmNet {
 public:
  explicit FirmNet(const MobilityGraph& g) {
    loc_.assign(g.firm_code_count, -1);
    for (std::size_t i = 0; i < g.firms.size(); ++i) loc_[g.firms[i]] = static_cast<int>(i);
    const int F = static_cast<int>(g.firms.size());
    adj_.resize(F);
    int max_code = 0;
    for (const auto& w : g.workers) max_code = std::max(max_code, w.worker);
    edge_of_worker_.assign(max_code + 1, -1);
    std::unordered_map<long long, int> eid;
    for (const auto& w : g.workers) {
      if (!w.mover()) continue;
      if (w.firms.size() != 2) fail_validation("NotTwoPeriods", "path search needs movers between two firms");
      const int a = loc_[w.firms[0]], b = loc_[w.firms[1]];
      const long long key = static_cast<long long>(a) * F + b;
      auto it = eid.find(key);
      if (it == eid.end()) {
        it = eid.emplace(key, static_cast<int>(edge_workers_.size())).first;
        edge_workers_.emplace_back();
        adj_[a].push_back({b, it->second});
        adj_[b].push_back({a, it->second});
      }
      edge_workers_[it->second].push_back(w.worker);
      edge_of_worker_[w.worker] = it->second;
    }
    for (auto& l : adj_) std::sort(l.begin(), l.end());
    for (auto& l : edge_workers_) std::sort(l.begin(), l.end());
  }

  int loc(int firm) const { return loc_[firm]; }

  struct State {
    std::vector<char> avail;
    std::vector<int> count;
  };

  State full_state() const {
    State s;
    s.avail.assign(edge_of_worker_.size(), 0);
    s.count.assign(edge_workers_.size(), 0);
    for (std::size_t e = 0; e < edge_workers_.size(); ++e) {
      for (int w : edge_workers_[e]) s.avail[w] = 1;
      s.count[e] = static_cast<int>(edge_workers_[e].size());
    }
    return s;
  }

  void remove(State& s, int worker) const {
    if (s.avail[worker]) {
      s.avail[worker] = 0;
      --s.count[edge_of_worker_[worker]];
    }
  }

  std::vector<int> dist_to(const State& s, int target) const {
    std::vector<int> dist(adj_.size(), -1);
    std::queue<int> q;
    dist[target] = 0;
    q.push(target);
    while (!q.empty()) {
      const int v = q.front();
      q.pop();
      for (auto [u, e] : adj_[v]) {
        if (s.count[e] > 0 && dist[u] < 0) {
          dist[u] = dist[v] + 1;
          q.push(u);
        }
      }
    }
    return dist;
  }

  // Edge ids of the lexicographically smallest shortest path from a to b; empty if none.
  std::vector<int> shortest_path(const State& s, int a, int b) const {
    const auto dist = dist_to(s, b);
    std::vector<int> path;
    if (dist[a] < 0 || a == b) return path;
    int cur = a;
    while (cur != b) {
      for (auto [u, e] : adj_[cur]) {
        if (s.count[e] > 0 && dist[u] == dist[cur] - 1) {
          path.push_back(e);
          cur = u;
          break;
        }
      }
    }
    return path;
  }

  std::vector<int> available_on(const State& s, int e) const {
    std::vector<int> out;
    for (int w : edge_workers_[e]) {
      if (s.avail[w]) out.push_back(w);
    }
    return out;
  }

 private:
  std::vector<int> loc_;
  std::vector<std::vector<std::pair<int, int>>> adj_;
  std::vector<std::vector<int>> edge_workers_;
  std::vector<int> edge_of_worker_;
};

const WorkerEdge& find_worker(const MobilityGraph& g, int worker) {
  for (const auto& w : g.workers) {
    if (w.worker == worker) return w;
  }
  fail_validation("UnknownWorker", "worker code " + std::to_string(worker) + " not in graph");
}

SplitPaths run_paths(const FirmNet& net, const WorkerEdge& we, std::uint64_t seed, int cap) {
  SplitPaths out;
  const int a = net.loc(we.from), b = net.loc(we.to);
  auto st = net.full_state();
  net.remove(st, we.worker);
  auto take_all = [&](const std::vector<int>& path, std::vector<int>& dest) {
    for (int e : path) {
      for (int w : net.available_on(st, e)) {
        dest.push_back(w);
        net.remove(st, w);
      }
    }
  };
  const auto p0 = net.shortest_path(st, a, b);
  if (p0.empty()) fail_validation("NoPath", "no path between the firms of worker " + std::to_string(we.worker));
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(we.worker), 0x5a17);
  for (int e : p0) {
    const auto cand = net.available_on(st, e);
    std::uniform_int_distribution<std::size_t> pick(0, cand.size() - 1);
    const int w = cand[pick(rng)];
    out.S1.push_back(w);
    net.remove(st, w);
  }
  take_all(net.shortest_path(st, a, b), out.S2);
  take_all(p0, out.S1);
  int s = 1;
  while (static_cast<int>(out.S1.size()) < cap && static_cast<int>(out.S2.size()) < cap) {
    const auto p = net.shortest_path(st, a, b);
    if (p.empty()) break;
    take_all(p, s == 1 ? out.S1 : out.S2);
    s = s == 1 ? 2 : 1;
  }
  out.second_found = !out.S2.empty();
  std::sort(out.S1.begin(), out.S1.end());
  std::sort(out.S2.begin(), out.S2.end());
  return out;
}

}  // namespace

SplitPaths edge_disjoint_paths(const MobilityGraph& g, int worker, std::uint64_t seed, int cap) {
  const WorkerEdge& we = find_worker(g, worker);
  if (!we.mover()) fail_validation("NotMover", "worker " + std::to_string(worker) + " does not move");
  FirmNet net(g);
  return run_paths(net, we, seed, cap);
}

int detour_length(const MobilityGraph& g, int worker) {
  const WorkerEdge& we = find_worker(g, worker);
  if (!we.mover()) return -1;
  FirmNet net(g);
  auto st = net.full_state();
  net.remove(st, worker);
  return net.dist_to(st, net.loc(we.to))[net.loc(we.from)];
}

double SplitSamplePlan::weight(int s, int i, int l) const {
  const SparseRow& row = (s == 1 ? w1 : w2)[i];
  auto it = std::lower_bound(row.begin(), row.end(), std::make_pair(l, -1e300));
  return (it != row.end() && it->first == l) ? it->second : 0.0;
}

double SplitSamplePlan::q_share() const {
  if (n == 0) return 0.0;
  double c = 0.0;
  for (auto m : missing) c += m;
  return c / n;
}

namespace {

// P_{il} = x_l'(X_S'X_S)^+ x_i for l in S; false when x_i is outside the row space of X_S.
bool subsample_weights(const SpMat& X, int i, const std::vector<int>& S, SparseRow& out) {
  out.clear();
  if (S.empty()) return false;
  std::vector<int> cols;
  for (int l : S) {
    for (SpMat::InnerIterator it(X, l); it; ++it) cols.push_back(static_cast<int>(it.col()));
  }
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  auto local = [&](int c) {
    auto it = std::lower_bound(cols.begin(), cols.end(), c);
    return (it != cols.end() && *it == c) ? static_cast<int>(it - cols.begin()) : -1;
  };
  const int m = static_cast<int>(cols.size());
  Vec xi = Vec::Zero(m);
  for (SpMat::InnerIterator it(X, i); it; ++it) {
    const int c = local(static_cast<int>(it.col()));
    if (c < 0) return false;
    xi(c) = it.value();
  }
  Mat XS = Mat::Zero(static_cast<int>(S.size()), m);
  for (std::size_t r = 0; r < S.size(); ++r) {
    for (SpMat::InnerIterator it(X, S[r]); it; ++it) XS(r, local(static_cast<int>(it.col()))) = it.value();
  }
  const Mat G = XS.transpose() * XS;
  Eigen::SelfAdjointEigenSolver<Mat> es(G);
  const Vec ev = es.eigenvalues();
  const double tol = 1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  Vec inv = Vec::Zero(m);
  for (int j = 0; j < m; ++j) inv(j) = ev(j) > tol ? 1.0 / ev(j) : 0.0;
  const Vec h = es.eigenvectors() * inv.asDiagonal() * (es.eigenvectors().transpose() * xi);
  const Vec w = XS * h;
  const double err = (XS.transpose() * w - xi).norm();
  if (err > 1e-8 * std::max(1.0, xi.norm())) return false;
  std::vector<std::pair<int, double>> tmp;
  for (std::size_t r = 0; r < S.size(); ++r) {
    if (w(r) != 0.0) tmp.emplace_back(S[r], w(r));
  }
  std::sort(tmp.begin(), tmp.end());
  out = std::move(tmp);
  return true;
}

}  // namespace

SplitSamplePlan plan_from_subsamples(const DesignMatrix& design, const std::vector<std::vector<int>>& s1,
                                     const std::vector<std::vector<int>>& s2) {
  const int n = design.n();
  SplitSamplePlan plan;
  plan.n = n;
  plan.w1.resize(n);
  plan.w2.resize(n);
  plan.missing.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    if (design.X.row(i).nonZeros() == 0) continue;  // x_i = 0 is predicted exactly by zero weights
    for (int l : s1[i]) {
      if (l == i) fail_validation("OwnObservation", "subsample contains the observation itself");
    }
    if (!subsample_weights(design.X, i, s1[i], plan.w1[i])) {
      fail_numerical("NoPath", "first split-sample predictor unavailable for observation " + std::to_string(i));
    }
    std::vector<int> s2i;
    for (int l : s2[i]) {
      if (l == i) fail_validation("OwnObservation", "subsample contains the observation itself");
      s2i.push_back(l);
    }
    if (!subsample_weights(design.X, i, s2i, plan.w2[i])) {
      plan.w2[i].clear();
      plan.missing[i] = 1;
    }
  }
  return plan;
}

SplitSamplePlan build_split_plan(const DesignMatrix& design, const MobilityGraph& g, std::uint64_t seed, int cap) {
  if (design.kind != ModelKind::FirstDifference) {
    fail_validation("NotFirstDifference", "path-based split plans need a first-difference design");
  }
  FirmNet net(g);
  std::unordered_map<int, int> row_of_worker;
  for (int r = 0; r < design.n(); ++r) row_of_worker[design.row_worker[r]] = r;
  std::unordered_map<int, const WorkerEdge*> edge_of;
  for (const auto& w : g.workers) edge_of[w.worker] = &w;
  const int n = design.n();
  std::vector<std::vector<int>> s1(n), s2(n);
  auto to_rows = [&](const std::vector<int>& workers) {
    std::vector<int> rows;
    for (int w : workers) rows.push_back(row_of_worker.at(w));
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  for (int r = 0; r < n; ++r) {
    if (design.row_from[r] == design.row_to[r]) continue;
    auto it = edge_of.find(design.row_worker[r]);
    if (it == edge_of.end()) fail_validation("UnknownWorker", "design row without a graph edge");
    const SplitPaths sp = run_paths(net, *it->second, seed, cap);
    s1[r] = to_rows(sp.S1);
    s2[r] = to_rows(sp.S2);
  }
  return plan_from_subsamples(design, s1, s2);
}

SplitSamplePlan build_group_split_plan(const DesignMatrix& design, const std::vector<int>& group) {
  const int n = design.n();
  if (static_cast<int>(group.size()) != n) fail_validation("DimensionMismatch", "group vector length");
  std::map<int, std::vector<int>> members;
  for (int i = 0; i < n; ++i) members[group[i]].push_back(i);
  std::vector<std::vector<int>> s1(n), s2(n);
  for (const auto& [g, rows] : members) {
    // h = parameters local to the group, i.e. distinct columns its rows touch.
    std::set<int> cols;
    for (int r : rows) {
      for (SpMat::InnerIterator it(design.X, r); it; ++it) {
        if (it.value() != 0.0) cols.insert(static_cast<int>(it.col()));
      }
    }
    const int T = static_cast<int>(rows.size());
    const int h = std::max(1, static_cast<int>(cols.size()));
    // Cyclic neighbours: the next h members and the previous h members.
    for (int j = 0; j < T; ++j) {
      const int i = rows[j];
      if (T >= h + 1) {
        for (int a = 1; a <= h; ++a) s1[i].push_back(rows[(j + a) % T]);
      }
      if (T >= 2 * h + 1) {
        for (int a = 1; a <= h; ++a) s2[i].push_back(rows[(j - a + T) % T]);
      }
      std::sort(s1[i].begin(), s1[i].end());
      std::sort(s2[i].begin(), s2[i].end());
    }
  }
  return plan_from_subsamples(design, s1, s2);
}

PlanCheck check_plan(const DesignMatrix& design, const SplitSamplePlan& plan) {
  PlanCheck c;
  for (int i = 0; i < plan.n; ++i) {
    for (auto [l, w] : plan.w1[i]) c.max_overlap = std::max(c.max_overlap, std::abs(w * plan.weight(2, i, l)));
    c.max_own_weight = std::max({c.max_own_weight, std::abs(plan.weight(1, i, i)), std::abs(plan.weight(2, i, i))});
    const Vec xi = Vec(design.X.row(i).transpose());
    for (int s = 1; s <= 2; ++s) {
      if (s == 2 && plan.missing[i]) continue;
      Vec acc = Vec::Zero(design.k());
      for (auto [l, w] : (s == 1 ? plan.w1 : plan.w2)[i]) acc += w * Vec(design.X.row(l).transpose());
      c.max_bias = std::max(c.max_bias, (acc - xi).norm());
    }
  }
  return c;
}

}  // namespace kss
