#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "kss/design.hpp"

namespace kss {

struct WorkerEdge {
  int worker = -1;          // worker code in the source panel
  std::vector<int> firms;   // distinct firm codes, sorted
  int from = -1;            // firm in the first period
  int to = -1;              // firm in the last period
  bool mover() const { return firms.size() > 1; }
};

// Bipartite worker-firm network. Firms are vertices of the firm multigraph and
// movers with two firms are its edges; stayers hang off a single firm.
struct MobilityGraph {
  int firm_code_count = 0;
  std::vector<int> firms;  // firm codes present, sorted
  std::vector<WorkerEdge> workers;

  int num_movers() const;
  int num_stayers() const { return static_cast<int>(workers.size()) - num_movers(); }
  std::vector<int> worker_codes() const;
};

MobilityGraph build_mobility_graph(const Panel& panel);
MobilityGraph make_mobility_graph(int firm_count, const std::vector<std::pair<int, int>>& mover_edges);

// Keeps only listed worker indices (positions in graph.workers); firms follow the workers.
MobilityGraph subgraph_without(const MobilityGraph& g, const std::vector<char>& drop_worker);
bool is_connected(const MobilityGraph& g);
// Positions in g.workers of workers that are articulation points of the bipartite graph.
std::vector<int> worker_articulation_points(const MobilityGraph& g);

MobilityGraph largest_connected_component(const MobilityGraph& g);
MobilityGraph leave_one_out_connected(const MobilityGraph& g);
MobilityGraph leave_two_out_connected(const MobilityGraph& g);

// Rows of the panel whose worker survives in the graph.
Panel restrict_panel(const Panel& panel, const MobilityGraph& g);

struct PruneStage {
  std::string stage;
  int firms = 0;
  int workers = 0;
  int movers = 0;
  int person_years = 0;
};

struct SplitPaths {
  std::vector<int> S1;  // worker codes
  std::vector<int> S2;
  bool second_found = false;
};

constexpr int kDefaultSubsampleCap = 100;

// Split-sample subsamples for mover `worker` (a worker code); see README for the procedure.
SplitPaths edge_disjoint_paths(const MobilityGraph& g, int worker, std::uint64_t seed,
                               int cap = kDefaultSubsampleCap);

// Hop length of the shortest firm path between the mover's two firms once the mover is removed; -1 if none.
int detour_length(const MobilityGraph& g, int worker);

using SparseRow = std::vector<std::pair<int, double>>;

struct SplitSamplePlan {
  int n = 0;
  std::vector<SparseRow> w1;
  std::vector<SparseRow> w2;
  std::vector<unsigned char> missing;  // Q_i: no unbiased second predictor

  double weight(int s, int i, int l) const;
  double q_share() const;
};

// Builds P_{il,s} from explicit subsamples given as design row indices.
SplitSamplePlan plan_from_subsamples(const DesignMatrix& design, const std::vector<std::vector<int>>& s1,
                                     const std::vector<std::vector<int>>& s2);
// First-difference plan from edge-disjoint firm paths.
SplitSamplePlan build_split_plan(const DesignMatrix& design, const MobilityGraph& g, std::uint64_t seed,
                                 int cap = kDefaultSubsampleCap);
// Within-group plan: the other rows of the group alternate between the two subsamples.
SplitSamplePlan build_group_split_plan(const DesignMatrix& design, const std::vector<int>& group);

struct PlanCheck {
  double max_overlap = 0.0;    // max |P_il,1 P_il,2|
  double max_own_weight = 0.0;  // max |P_ii,s|
  double max_bias = 0.0;       // max ||sum_l P_il,s x_l - x_i|| over usable predictors
};
PlanCheck check_plan(const DesignMatrix& design, const SplitSamplePlan& plan);

}  // namespace kss
