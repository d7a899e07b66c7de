#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "kss/design.hpp"
#include "kss/network.hpp"
#include "kss/simulation.hpp"
#include "kss/stats.hpp"

namespace fx {

using kss::Mat;
using kss::Vec;

// Dense n x k design: intercept, a few sparse dummies and continuous columns.
inline Mat random_dense_X(int n, int k, double density, std::uint64_t seed) {
  kss::Rng rng = kss::make_rng(seed, 0xd1);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u;
  Mat X = Mat::Zero(n, k);
  X.col(0).setOnes();
  for (int c = 1; c < k; ++c) {
    for (int i = 0; i < n; ++i) {
      if (u(rng) < density) X(i, c) = nd(rng);
    }
    // Guarantee a nonzero column.
    X(static_cast<int>(u(rng) * n), c) += 1.0;
  }
  return X;
}

// Random symmetric k x k matrix; psd when requested.
inline Mat random_A(int k, bool psd, std::uint64_t seed) {
  kss::Rng rng = kss::make_rng(seed, 0xa1);
  std::normal_distribution<double> nd;
  Mat G(k, k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) G(i, j) = nd(rng);
  }
  if (psd) return G * G.transpose() / k;
  return (G + G.transpose()) / 2.0;
}

inline Vec random_vec(int n, std::uint64_t seed, double sd = 1.0) {
  kss::Rng rng = kss::make_rng(seed, 0xb1);
  std::normal_distribution<double> nd;
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = sd * nd(rng);
  return v;
}

// Two-period worker panel on J firms; stayers with probability stay.
inline kss::Panel random_two_period_panel(int J, int workers, double stay, std::uint64_t seed) {
  kss::Rng rng = kss::make_rng(seed, 0x9a);
  std::uniform_real_distribution<double> u;
  std::uniform_int_distribution<int> firm(0, J - 1);
  std::normal_distribution<double> nd;
  kss::Panel p;
  for (int g = 0; g < workers; ++g) {
    const int f1 = firm(rng);
    int f2 = f1;
    if (u(rng) >= stay) {
      while (f2 == f1) f2 = firm(rng);
    }
    const std::string id = "w" + std::to_string(g);
    p.rows.push_back({id, std::to_string(f1), 1, nd(rng), {}});
    p.rows.push_back({id, std::to_string(f2), 2, nd(rng), {}});
  }
  p.index();
  return p;
}

// Group labels for an unbalanced one-way layout.
inline std::vector<int> group_labels(const std::vector<int>& sizes) {
  std::vector<int> g;
  for (std::size_t s = 0; s < sizes.size(); ++s) g.insert(g.end(), sizes[s], static_cast<int>(s));
  return g;
}

struct FdFixture {
  kss::Panel panel;
  kss::DesignMatrix design;
  kss::MobilityGraph graph;
  std::vector<int> firm_block;  // block of each firm code in `panel`
  kss::SbmDraw draw;
};

// SBM network, pruned to its leave-one-out or leave-two-out connected set, as a first-difference design.
inline FdFixture sbm_fd(const kss::SbmConfig& cfg, bool two_out) {
  FdFixture f;
  f.draw = kss::gen_sbm(cfg);
  kss::MobilityGraph g = kss::leave_one_out_connected(f.draw.graph);
  if (two_out) g = kss::leave_two_out_connected(g);
  f.panel = kss::restrict_panel(f.draw.panel, g);
  kss::ModelSpec spec;
  spec.kind = kss::ModelKind::FirstDifference;
  f.design = kss::build_design(f.panel, spec);
  f.graph = kss::build_mobility_graph(f.panel);
  for (int j = 0; j < f.panel.num_firms(); ++j) f.firm_block.push_back(f.draw.block[std::stoi(f.panel.firm_ids[j])]);
  return f;
}

// Firm effects by firm code of `f.panel`.
inline Vec fixture_firm_effects(const FdFixture& f, const std::vector<double>& block_means, double within_sd,
                                std::uint64_t seed) {
  const Vec all = kss::block_firm_effects(f.draw, block_means, within_sd, seed);
  Vec psi(f.panel.num_firms());
  for (int j = 0; j < f.panel.num_firms(); ++j) psi(j) = all(std::stoi(f.panel.firm_ids[j]));
  return psi;
}

}  // namespace fx
