#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kss/solver.hpp"

namespace kss {

struct SketchConfig {
  int p = 500;
  std::uint64_t seed = 0;
  double fallback_margin = 1e-3;  // exact leverage when P_hat > 1 - margin
};

// Rademacher sketches of P_ii and B_ii. Factors shared across forms (by id) share their p solves.
LeverageSet sketched_leverages(const DesignMatrix& design, const GramSolver& solver,
                               const std::vector<const QuadraticForm*>& forms, const SketchConfig& cfg);

// Number of distinct solves against S_xx the sketch needs for these forms.
int sketch_solve_count(const std::vector<const QuadraticForm*>& forms, int p);

// Leave-out variances with the non-linearity correction; exact-fallback rows are left uncorrected.
Vec jla_sigma2(const Vec& y, const FitResult& fit, const LeverageSet& sketched);

// (1/p) sum_i P_ii^2 |B_ii| |sigma2_i|.
double jla_bias_bound(const LeverageSet& lev, const std::string& form, const Vec& sigma2);

// Whether the interval widening is applied (skipped when n/p^2 < 0.01).
bool jla_widening_needed(int n, int p);

}  // namespace kss
