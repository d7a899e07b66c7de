#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kss/network.hpp"
#include "kss/solver.hpp"

namespace kss {

// ---- dense kernel -------------------------------------------------------

// Dense pairwise quantities for one design and form (n x n).
struct DenseKernel {
  Mat Z;     // rows z_i' = (S^{-1} x_i)'
  Mat P;     // x_i' S^{-1} x_l
  Mat B;     // x_i' S^{-1} A S^{-1} x_l
  Vec M;     // 1 - P_ii
  Mat C;     // U-statistic kernel, zero diagonal
};

DenseKernel dense_kernel(const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form,
                         double delta = kDefaultDelta);
// C = B - M (b 1' + 1 b') / 2 with b_i = B_ii / M_ii and M = I - P; diagonal set to zero.
Mat kernel_from(const Mat& P, const Mat& B, const Vec& Mdiag);
// y'Cy.
double theta_ustat(const Mat& C, const Vec& y);

// ---- eigen-structure ----------------------------------------------------

struct EigenOptions {
  int dense_threshold = 2000;
  int hutchinson_probes = 256;
  std::uint64_t seed = 0;
  int max_iter = 1000;
  double tol = 1e-10;
};

struct EigenInfo {
  Vec lambdas;   // ordered by |lambda|, descending
  Mat vectors;   // k x q_max, generalized eigenvectors with v'S v = 1
  Mat W;         // n x q_max, w_il = v_l' x_i
  double trace_sq = 0.0;
  bool trace_exact = true;
  double trace_se = 0.0;
  Vec shares;    // lambda_l^2 / trace_sq
  double lindeberg1 = 0.0;  // max_i w_i1^2
  double lindeberg2 = 0.0;  // max_i (w_i1^2 + w_i2^2)
  double max_residual = 0.0;
  int q_max() const { return static_cast<int>(lambdas.size()); }
};

EigenInfo top_eigen(const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form, int q_max,
                    const EigenOptions& opts = {});
int select_q(const EigenInfo& eig, double threshold = 0.1);

// ---- split-sample variance ----------------------------------------------

// Per-pair case codes for the product estimator; depends only on the plan.
class SplitStructure {
 public:
  explicit SplitStructure(const SplitSamplePlan& plan);
  int n() const { return n_; }
  unsigned char code(int i, int l) const { return codes_[static_cast<std::size_t>(l) * n_ + i]; }
  const SplitSamplePlan& plan() const { return *plan_; }
  bool any_missing() const { return any_missing_; }
  double problem_share() const { return problem_share_; }  // share of ordered pairs in the set B
  const SpMat& P1() const { return P1_; }
  const SpMat& P2() const { return P2_; }

 private:
  const SplitSamplePlan* plan_;
  int n_ = 0;
  bool any_missing_ = false;
  double problem_share_ = 0.0;
  std::vector<unsigned char> codes_;
  SpMat P1_, P2_;
};

// Outcome-dependent split-sample quantities.
struct SplitSigmas {
  Vec a1, a2;       // y_i (y_i - yhat_{i,s})
  Vec cross;        // (y_i - yhat_{i,1})(y_i - yhat_{i,2})
  Vec centered_sq;  // (y_i - ybar)^2
  Vec cross2;       // cross with the Q_i substitution
};

SplitSigmas split_sigmas(const SplitStructure& s, const Vec& y);

struct VarianceValue {
  double value = 0.0;
  double first_term = 0.0;
  double correction = 0.0;
  bool floored = false;
};

// V_hat for a kernel C on a fixed plan; C tilde and per-pair signs are cached.
class VarianceEngine {
 public:
  VarianceEngine(const SplitStructure& s, Mat C);
  const Mat& C() const { return C_; }
  const Mat& Ctilde() const { return Ct_; }
  VarianceValue evaluate(const Vec& y, const SplitSigmas& sig) const;
  VarianceValue evaluate(const Vec& y) const { return evaluate(y, split_sigmas(*s_, y)); }

 private:
  const SplitStructure* s_;
  Mat C_;
  Mat Ct_;
};

struct WeakIdVariance {
  int q = 0;
  Mat Sigma;         // (q+1) x (q+1)
  Vec b_hat;         // q
  double theta_q = 0.0;
  bool conservative = false;
  bool projected = false;
  bool floored = false;
};

// Fixed-design inference state shared across outcomes (Monte Carlo friendly).
class InferenceModel {
 public:
  InferenceModel(const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form,
                 const SplitSamplePlan& plan, int q_max = 3, const EigenOptions& eopts = {});
  ~InferenceModel();

  const DenseKernel& kernel() const { return kernel_; }
  const EigenInfo& eig() const { return eig_; }
  const SplitStructure& structure() const { return *structure_; }
  int n() const { return static_cast<int>(kernel_.M.size()); }

  double theta(const Vec& y) const { return theta_ustat(kernel_.C, y); }
  Vec sigma2(const Vec& y) const;  // leave-one-out variances
  VarianceValue vhat(const Vec& y) const;
  // Sigma_q; q = 0 gives the 1 x 1 matrix V_hat[theta_hat].
  WeakIdVariance sigma_q(const Vec& y, int q) const;
  // C_q for q >= 1.
  const Mat& kernel_q(int q) const;

 private:
  const VarianceEngine& engine(int q) const;
  DenseKernel kernel_;
  EigenInfo eig_;
  std::unique_ptr<SplitStructure> structure_;
  std::unique_ptr<SplitSamplePlan> plan_;
  mutable std::vector<std::unique_ptr<VarianceEngine>> engines_;
};

// ---- curvature, critical values, intervals -----------------------------

// kappa for Sigma_q with eigenvalues lambdas (q = lambdas.size(); q = 0 gives 0).
double curvature(const Vec& lambdas, const Mat& Sigma);

// z_{alpha,kappa} (not squared). kappa = 0 or q = 0 gives the chi2_1 root; kappa = inf gives the chi2_{q+1} root.
double critical_value(double alpha, int q, double kappa, long draws = 1000000, std::uint64_t seed = 20240607);

// z_{alpha,kappa} on a grid in t = 1/(1+kappa) with common random numbers; linear interpolation.
class CriticalValueTable {
 public:
  CriticalValueTable(double alpha, int q, long draws = 200000, std::uint64_t seed = 20240607, int grid = 401);
  double z(double kappa) const;

 private:
  int q_;
  std::vector<double> t_, z_;
};

struct ConfidenceInterval {
  double lower = 0.0;
  double upper = 0.0;
  double alpha = 0.05;
  int q = 0;
  double kappa = 0.0;
  double critical_value = 0.0;
  std::string method;  // normal, closed_form_q1, ellipsoid_opt
  double jla_widening = 0.0;
  bool contains(double v) const { return lower <= v && v <= upper; }
};

ConfidenceInterval ci_normal(double theta_hat, double variance, double alpha, double z);
// q = 1 closed form from the quartic first-order condition.
ConfidenceInterval ci_closed_form_q1(double lambda, double b_hat, double theta_q, const Mat& Sigma, double z);
// Extremes of sum lambda b^2 + theta over the ellipsoid (any q >= 1).
ConfidenceInterval ci_ellipsoid(const Vec& lambdas, const Vec& b_hat, double theta_q, const Mat& Sigma, double z,
                                std::uint64_t seed = 7);
// Dispatch on q: normal (q = 0), closed form (q = 1), ellipsoid (q > 1).
ConfidenceInterval confidence_interval(double theta_hat, const Vec& lambdas, const WeakIdVariance& v, double z,
                                       double alpha);
void widen(ConfidenceInterval& ci, double amount);

// Real roots of c4 x^4 + c3 x^3 + c2 x^2 + c1 x + c0 (leading zeros allowed).
std::vector<double> real_poly_roots(std::vector<double> coeffs_high_first);

// ---- linear restrictions ------------------------------------------------

struct RestrictionTest {
  std::string mode;  // fixed_rank or growing_rank
  int r = 0;
  double theta = 0.0;
  double se = 0.0;
  double statistic = 0.0;
  double p_value = 1.0;
};

// A = (1/r) R'(R S^{-1} R')^{-1} R as a custom form.
QuadraticForm restriction_form(const GramSolver& solver, const Mat& R);

// theta_hat / V_hat^{1/2} against the standard normal (one-sided).
RestrictionTest test_growing_rank(const Vec& y, const DesignMatrix& design, const GramSolver& solver, const Mat& R,
                                  const SplitSamplePlan& plan);
// Reference law (1/r)(Z'Z - tr V_hat[b_hat]) with Z ~ N(0, V_hat[b_hat]).
RestrictionTest test_fixed_rank(const Vec& y, const DesignMatrix& design, const GramSolver& solver, const Mat& R,
                                long draws = 100000, std::uint64_t seed = 11);
// Nested-model wrapper: B_ii = (P_ii - P_ii,restricted) / r, statistic from the growing-rank rule.
RestrictionTest test_nested(const Vec& y, const DesignMatrix& full, const DesignMatrix& restricted,
                            const SplitSamplePlan& plan);

}  // namespace kss
