#include <algorithm>
#include <cmath>

#include "kss/error.hpp"
#include "kss/inference.hpp"
#include "kss/stats.hpp"

namespace kss {

namespace {

Mat inverse_sqrt(const Mat& G) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (G + G.transpose()));
  const Vec ev = es.eigenvalues();
  if (ev.minCoeff() <= 1e-12 * std::max(1.0, ev.maxCoeff())) {
    fail_validation("RankDeficientRestriction", "R S^{-1} R' is singular");
  }
  return es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

void check_R(const GramSolver& solver, const Mat& R) {
  if (R.rows() < 1 || R.cols() != solver.k()) fail_validation("DimensionMismatch", "R must be r x k with r >= 1");
}

RestrictionTest finish_growing(const std::string& mode, int r, double theta, const VarianceValue& v) {
  RestrictionTest t;
  t.mode = mode;
  t.r = r;
  t.theta = theta;
  t.se = std::sqrt(v.value);
  t.statistic = theta / t.se;
  t.p_value = 1.0 - normal_cdf(t.statistic);
  return t;
}

}  // namespace

QuadraticForm restriction_form(const GramSolver& solver, const Mat& R) {
  check_R(solver, R);
  const Mat SinvRt = solver.solve(Mat(R.transpose()));
  const Mat G = R * SinvRt;
  Eigen::LLT<Mat> llt(0.5 * (G + G.transpose()));
  if (llt.info() != Eigen::Success) fail_validation("RankDeficientRestriction", "R S^{-1} R' is singular");
  const Mat A = R.transpose() * llt.solve(R) / static_cast<double>(R.rows());
  return make_custom_form("restriction", Mat(0.5 * (A + A.transpose())));
}

RestrictionTest test_growing_rank(const Vec& y, const DesignMatrix& design, const GramSolver& solver, const Mat& R,
                                  const SplitSamplePlan& plan) {
  const QuadraticForm form = restriction_form(solver, R);
  const InferenceModel model(design, solver, form, plan, 0);
  return finish_growing("growing_rank", static_cast<int>(R.rows()), model.theta(y), model.vhat(y));
}

RestrictionTest test_fixed_rank(const Vec& y, const DesignMatrix& design, const GramSolver& solver, const Mat& R,
                                long draws, std::uint64_t seed) {
  check_R(solver, R);
  const int r = static_cast<int>(R.rows());
  const FitResult f = fit(design, solver, y);
  const Mat Z = solve_rows(design, solver);
  const Mat G = R * solver.solve(Mat(R.transpose()));
  const Mat Gh = inverse_sqrt(G);
  const Vec b = Gh * (R * f.beta);
  const Mat W = Z * R.transpose() * Gh;  // row i is w_i'
  const int n = design.n();
  Mat V = Mat::Zero(r, r);
  for (int i = 0; i < n; ++i) {
    double Pii = 0.0;
    for (SpMat::InnerIterator it(design.X, i); it; ++it) Pii += it.value() * Z(i, it.col());
    const double Mii = 1.0 - Pii;
    if (Mii < kDefaultDelta) fail_numerical("LeverageOne", "observation " + std::to_string(i) + " has leverage one");
    const double s2 = y(i) * f.residuals(i) / Mii;
    V.noalias() += s2 * W.row(i).transpose() * W.row(i);
  }
  const double trV = V.trace();
  RestrictionTest t;
  t.mode = "fixed_rank";
  t.r = r;
  t.theta = (b.squaredNorm() - trV) / r;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (V + V.transpose()));
  const Vec ev = es.eigenvalues().cwiseMax(0.0);
  t.se = std::sqrt(2.0 * ev.squaredNorm()) / r;
  t.statistic = t.theta;
  // Z'Z for Z ~ N(0, V) is a weighted sum of independent chi-square(1) draws.
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(r), 0xf1d);
  std::normal_distribution<double> nd;
  long exceed = 0;
  for (long d = 0; d < draws; ++d) {
    double q = 0.0;
    for (int j = 0; j < r; ++j) {
      const double u = nd(rng);
      q += ev(j) * u * u;
    }
    if ((q - trV) / r >= t.theta) ++exceed;
  }
  t.p_value = static_cast<double>(exceed) / static_cast<double>(draws);
  return t;
}

RestrictionTest test_nested(const Vec& y, const DesignMatrix& full, const DesignMatrix& restricted,
                            const SplitSamplePlan& plan) {
  if (full.n() != restricted.n()) fail_validation("DimensionMismatch", "nested designs need the same rows");
  const int r = full.k() - restricted.k();
  if (r < 1) fail_validation("NotNested", "restricted model must have fewer columns");
  const GramSolver sf(full), sr(restricted);
  const Mat Pf = Mat(full.X * solve_rows(full, sf).transpose());
  const Mat Pr = Mat(restricted.X * solve_rows(restricted, sr).transpose());
  const Mat P = 0.5 * (Pf + Pf.transpose());
  const Mat B = (P - 0.5 * (Pr + Pr.transpose())) / static_cast<double>(r);
  const Vec M = Vec::Ones(full.n()) - P.diagonal();
  for (int i = 0; i < M.size(); ++i) {
    if (M(i) < kDefaultDelta) fail_numerical("LeverageOne", "observation " + std::to_string(i) + " has leverage one");
  }
  const SplitStructure s(plan);
  const VarianceEngine eng(s, kernel_from(P, B, M));
  return finish_growing("growing_rank", r, theta_ustat(eng.C(), y), eng.evaluate(y));
}

}  // namespace kss
