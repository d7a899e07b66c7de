#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kss/design.hpp"

namespace kss {

struct SolverOptions {
  int dense_threshold = 2000;  // dense Cholesky when k <= threshold
  double cg_tolerance = 1e-10;
  int cg_max_iter_per_k = 10;  // max iterations = 10 k
  bool force_cg = false;
};

struct SolverStats {
  std::string method;
  long solves = 0;
  long iterations = 0;       // total CG iterations
  double max_rel_residual = 0.0;
};

// Solves S_xx z = b by dense Cholesky or Jacobi-preconditioned conjugate gradients.
class GramSolver {
 public:
  GramSolver(const DesignMatrix& design, SolverOptions opts = {});
  ~GramSolver();
  GramSolver(GramSolver&&) noexcept;
  GramSolver& operator=(GramSolver&&) noexcept;

  int k() const { return k_; }
  bool is_dense() const { return dense_; }
  const SpMatCol& gram() const { return S_; }
  // Explicit inverse; dense path only.
  const Mat& inverse() const;

  Vec solve(const Vec& b) const;
  Mat solve(const Mat& B) const;
  const SolverStats& stats() const { return stats_; }

 private:
  struct CgImpl;
  int k_ = 0;
  bool dense_ = true;
  SolverOptions opts_;
  SpMatCol S_;
  Mat Sinv_;
  std::unique_ptr<CgImpl> cg_;
  mutable SolverStats stats_;
};

struct FitResult {
  Vec beta;
  Vec fitted;
  Vec residuals;
  SolverStats stats;
};

FitResult fit(const DesignMatrix& design, const GramSolver& solver, const Vec& y);

enum class LeverageMode { Exact, Sketched };

struct LeverageSet {
  LeverageMode mode = LeverageMode::Exact;
  int p = 0;
  Vec P;
  Vec M;
  std::vector<std::string> form_names;
  std::vector<Vec> B;
  std::vector<unsigned char> exact_fallback;  // sketched mode: observation used exact leverage

  const Vec& B_of(const std::string& name) const;
  double max_P() const { return P.size() ? P.maxCoeff() : 0.0; }
};

LeverageSet exact_leverages(const DesignMatrix& design, const GramSolver& solver,
                            const std::vector<const QuadraticForm*>& forms);

constexpr double kDefaultDelta = 1e-8;

// Raises LeverageOne when some P_ii > 1 - delta.
void check_leverage(const LeverageSet& lev, double delta = kDefaultDelta);

double leave_out_residual(const FitResult& fit, const LeverageSet& lev, int i, double delta = kDefaultDelta);

// Dense Z = X S_xx^{-1} (n x k); row i is z_i'.
Mat solve_rows(const DesignMatrix& design, const GramSolver& solver);

}  // namespace kss
