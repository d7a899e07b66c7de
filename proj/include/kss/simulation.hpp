#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kss/inference.hpp"
#include "kss/network.hpp"

namespace kss {

// ---- stochastic block model ---------------------------------------------

struct SbmConfig {
  int J = 40;             // firms, split evenly across blocks
  int N = 400;            // movers
  double p_b = 0.5;       // between-block move probability
  std::uint64_t seed = 1;
  int blocks = 2;
  int max_retries = 100;  // redraws when the network is disconnected
};

struct SbmDraw {
  MobilityGraph graph;      // one edge per mover, firm codes 0..J-1
  Panel panel;              // two periods per mover, zero outcomes
  std::vector<int> block;   // block of each firm code
  int between_moves = 0;
  int attempts = 1;
};

void validate(const SbmConfig& cfg);
SbmDraw gen_sbm(const SbmConfig& cfg);
// Two-period panel for the mover edges of a graph (worker i moves from -> to).
Panel panel_from_graph(const MobilityGraph& g);
// Firm effects: per-block mean plus N(0, within_sd^2) noise, indexed by firm code.
Vec block_firm_effects(const SbmDraw& draw, const std::vector<double>& block_means, double within_sd,
                       std::uint64_t seed);
// Coefficient vector of a first-difference design for firm effects given by firm code (normalized firm at 0).
Vec fd_coefficients(const DesignMatrix& design, const Vec& firm_effects);

// ---- wage DGP -----------------------------------------------------------

struct HeteroModel {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0, a4 = 0.0;
  static HeteroModel estimated();  // coefficients fitted in the application
  static HeteroModel homoscedastic(double variance);
  // exp(a0 + a1 B + a2 P + a3 ln L2 + a4 ln L1), elementwise.
  Vec variances(const Vec& B, const Vec& P, const Vec& L2, const Vec& L1) const;
};

// Per-row variances for a first-difference design; firm sizes L are firm degrees in the design.
Vec fd_variances(const DesignMatrix& design, const LeverageSet& lev, const std::string& form, const HeteroModel& het);

enum class ErrorLaw { Normal, ScaledT };

struct ErrorSpec {
  ErrorLaw law = ErrorLaw::Normal;
  double df = 5.0;  // scaled t only; must exceed 4
};

// Errors with the given variances for replication `rep`; (seed, rep) fixes the draw.
Vec gen_errors(const Vec& variances, const ErrorSpec& spec, std::uint64_t seed, std::uint64_t rep);
// X beta + errors.
Vec gen_wages(const DesignMatrix& design, const Vec& beta, const Vec& variances, const ErrorSpec& spec,
              std::uint64_t seed, std::uint64_t rep);

// Draws of sum_l lambda_l (chi2_1 - 1) scaled by sigma2.
std::vector<double> weighted_chi2_draws(const Vec& lambdas, double sigma2, long draws, std::uint64_t seed);

// ---- Monte Carlo harness --------------------------------------------------

struct McScenario {
  std::string name = "scenario";
  const DesignMatrix* design = nullptr;
  const GramSolver* solver = nullptr;
  const QuadraticForm* form = nullptr;
  const SplitSamplePlan* plan = nullptr;
  Vec beta;
  Vec variances;
  ErrorSpec errors;
  std::vector<int> qs = {0, 1, 2};
  double alpha = 0.05;
  std::uint64_t seed = 1;
  long cv_draws = 200000;
};

struct McReplication {
  double theta_kss = 0.0, theta_pi = 0.0, theta_ho = 0.0;
  double vhat = 0.0;
  std::vector<double> lower, upper;  // per entry of McScenario::qs
  std::vector<double> kappa;
};

struct McMethodSummary {
  double mean = 0.0, bias = 0.0, bias_se = 0.0, sd = 0.0;
};

struct McReport {
  std::string name;
  long reps = 0;
  double theta = 0.0;
  McMethodSummary kss, pi, ho;
  double pi_bias_theory = 0.0;  // sum_i B_ii sigma_i^2
  double mean_vhat = 0.0;
  double var_theta = 0.0;
  double variance_ratio = 0.0;  // mean(V_hat) / var(theta_hat)
  double se_ratio = 0.0;        // mean(V_hat^{1/2}) / sd(theta_hat)
  std::vector<int> qs;
  std::vector<double> coverage;
  std::vector<double> shares;   // top eigenvalue shares
  double skewness = 0.0;
  double ks_stat = 0.0, ks_p = 1.0;  // theta_hat vs fitted normal
  std::vector<McReplication> draws;
};

McReport monte_carlo(const McScenario& sc, long reps);
void write_mc_csv(const McReport& r, const std::string& path);
void write_mc_json(const McReport& r, const std::string& path);

}  // namespace kss
