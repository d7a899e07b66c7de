#include <algorithm>
#include <numeric>

#include "kss/error.hpp"
#include "kss/inference.hpp"
#include "kss/stats.hpp"

namespace kss {

namespace {

std::vector<int> order_by_magnitude(const Vec& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return std::abs(v(a)) > std::abs(v(b)); });
  return idx;
}

Mat apply_form(const QuadraticForm& form, const Mat& X) {
  Mat out(X.rows(), X.cols());
  for (int c = 0; c < X.cols(); ++c) out.col(c) = form.apply(Vec(X.col(c)));
  return out;
}

void finish(EigenInfo& e, const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form) {
  const int q = e.q_max();
  e.W = design.X * e.vectors;
  e.shares = Vec::Zero(q);
  for (int l = 0; l < q; ++l) e.shares(l) = e.trace_sq > 0.0 ? e.lambdas(l) * e.lambdas(l) / e.trace_sq : 0.0;
  e.lindeberg1 = q >= 1 ? e.W.col(0).cwiseAbs2().maxCoeff() : 0.0;
  e.lindeberg2 = q >= 2 ? (e.W.col(0).cwiseAbs2() + e.W.col(1).cwiseAbs2()).maxCoeff() : e.lindeberg1;
  e.max_residual = 0.0;
  for (int l = 0; l < q; ++l) {
    const Vec v = e.vectors.col(l);
    const Vec r = form.apply(v) - e.lambdas(l) * (solver.gram() * v);
    e.max_residual = std::max(e.max_residual, std::sqrt(std::max(0.0, r.dot(solver.solve(r)))));
  }
}

}  // namespace

EigenInfo top_eigen(const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form, int q_max,
                    const EigenOptions& opts) {
  const int k = design.k();
  q_max = std::clamp(q_max, 0, k);
  EigenInfo e;
  if (k <= opts.dense_threshold) {
    const Mat A = form.dense();
    const Mat S = Mat(solver.gram());
    Eigen::GeneralizedSelfAdjointEigenSolver<Mat> ges(A, S);
    if (ges.info() != Eigen::Success) fail_numerical("NotConverged", "generalized eigensolver failed");
    const Vec ev = ges.eigenvalues();
    const auto idx = order_by_magnitude(ev);
    e.lambdas.resize(q_max);
    e.vectors.resize(k, q_max);
    for (int l = 0; l < q_max; ++l) {
      e.lambdas(l) = ev(idx[l]);
      e.vectors.col(l) = ges.eigenvectors().col(idx[l]);
    }
    e.trace_sq = ev.squaredNorm();
    e.trace_exact = true;
  } else {
    const int b = std::min(k, q_max + 8);
    Rng rng = make_rng(opts.seed, 0xe16e);
    std::normal_distribution<double> nd;
    Mat X(k, b);
    for (int c = 0; c < b; ++c) {
      for (int r = 0; r < k; ++r) X(r, c) = nd(rng);
    }
    Vec theta = Vec::Zero(b);
    bool converged = false;
    for (int it = 0; it < opts.max_iter && !converged; ++it) {
      Mat Y = solver.solve(apply_form(form, X));
      const Mat G = Y.transpose() * (solver.gram() * Y);
      Eigen::LLT<Mat> llt(0.5 * (G + G.transpose()));
      if (llt.info() != Eigen::Success) fail_numerical("NotConverged", "subspace basis lost rank");
      llt.matrixU().solveInPlace<Eigen::OnTheRight>(Y);
      const Mat H = Y.transpose() * apply_form(form, Y);
      Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (H + H.transpose()));
      const auto idx = order_by_magnitude(es.eigenvalues());
      Mat U(b, b);
      for (int c = 0; c < b; ++c) {
        U.col(c) = es.eigenvectors().col(idx[c]);
        theta(c) = es.eigenvalues()(idx[c]);
      }
      X = Y * U;
      double worst = 0.0;
      for (int l = 0; l < q_max; ++l) {
        const Vec v = X.col(l);
        const Vec r = form.apply(v) - theta(l) * (solver.gram() * v);
        worst = std::max(worst, std::sqrt(std::max(0.0, r.dot(solver.solve(r)))) / std::max(1e-300, std::abs(theta(0))));
      }
      converged = worst < opts.tol;
    }
    if (!converged) fail_numerical("NotConverged", "subspace iteration did not converge");
    e.lambdas = theta.head(q_max);
    e.vectors = X.leftCols(q_max);
    RunningStats rs;
    for (int p = 0; p < opts.hutchinson_probes; ++p) {
      Vec r(k);
      for (int j = 0; j < k; ++j) r(j) = rademacher(opts.seed, 0x7ace, j, p);
      const Vec a = solver.solve(r);
      const Vec u = solver.solve(form.apply(r));
      rs.add(a.dot(form.apply(u)));
    }
    e.trace_sq = rs.mean();
    e.trace_se = rs.se_mean();
    e.trace_exact = false;
  }
  finish(e, design, solver, form);
  return e;
}

int select_q(const EigenInfo& eig, double threshold) {
  int q = 0;
  while (q < eig.shares.size() && eig.shares(q) >= threshold) ++q;
  return q;
}

}  // namespace kss
