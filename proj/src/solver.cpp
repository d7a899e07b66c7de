#include "kss/solver.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <cmath>

#include "kss/error.hpp"

namespace kss {

struct GramSolver::CgImpl {
  Eigen::ConjugateGradient<SpMatCol, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg;
};

GramSolver::GramSolver(const DesignMatrix& design, SolverOptions opts) : k_(design.k()), opts_(opts) {
  S_ = design.gram();
  if (k_ == 0) fail_validation("EmptyDesign", "design has no columns");
  dense_ = !opts.force_cg && k_ <= opts.dense_threshold;
  const Vec diag = S_.diagonal();
  for (int j = 0; j < k_; ++j) {
    if (!(diag(j) > 0.0)) fail_numerical("RankDeficient", "column " + std::to_string(j) + " is identically zero");
  }
  if (dense_) {
    stats_.method = "dense_cholesky";
    Mat Sd = Mat(S_);
    Eigen::LLT<Mat> llt(Sd);
    if (llt.info() != Eigen::Success) fail_numerical("RankDeficient", "S_xx is not positive definite");
    const Mat L = llt.matrixL();
    for (int j = 0; j < k_; ++j) {
      if (L(j, j) * L(j, j) < 1e-12 * diag(j)) {
        fail_numerical("RankDeficient", "S_xx is numerically singular at column " + std::to_string(j));
      }
    }
    Sinv_ = llt.solve(Mat::Identity(k_, k_));
    Sinv_ = 0.5 * (Sinv_ + Sinv_.transpose()).eval();
  } else {
    stats_.method = "jacobi_cg";
    cg_ = std::make_unique<CgImpl>();
    cg_->cg.setTolerance(opts.cg_tolerance);
    cg_->cg.setMaxIterations(static_cast<long>(opts.cg_max_iter_per_k) * k_);
    cg_->cg.compute(S_);
  }
}

GramSolver::~GramSolver() = default;
GramSolver::GramSolver(GramSolver&&) noexcept = default;
GramSolver& GramSolver::operator=(GramSolver&&) noexcept = default;

const Mat& GramSolver::inverse() const {
  if (!dense_) fail_validation("NoDenseInverse", "explicit inverse only on the dense path");
  return Sinv_;
}

Vec GramSolver::solve(const Vec& b) const {
  ++stats_.solves;
  if (dense_) return Sinv_ * b;
  const double bn = b.norm();
  if (bn == 0.0) return Vec::Zero(k_);
  Vec x = cg_->cg.solve(b);
  stats_.iterations += cg_->cg.iterations();
  const double rel = (S_ * x - b).norm() / bn;
  stats_.max_rel_residual = std::max(stats_.max_rel_residual, rel);
  if (cg_->cg.info() != Eigen::Success || rel > 10.0 * opts_.cg_tolerance) {
    fail_numerical("NotConverged", "conjugate gradient stopped at relative residual " + std::to_string(rel) +
                                       " after " + std::to_string(cg_->cg.iterations()) + " iterations");
  }
  return x;
}

Mat GramSolver::solve(const Mat& B) const {
  if (dense_) {
    stats_.solves += B.cols();
    return Sinv_ * B;
  }
  Mat X(k_, B.cols());
  for (int c = 0; c < B.cols(); ++c) X.col(c) = solve(Vec(B.col(c)));
  return X;
}

FitResult fit(const DesignMatrix& design, const GramSolver& solver, const Vec& y) {
  if (y.size() != design.n()) fail_validation("DimensionMismatch", "outcome length differs from design rows");
  FitResult r;
  const Vec xty = design.xty(y);
  r.beta = solver.solve(xty);
  r.fitted = design.X * r.beta;
  r.residuals = y - r.fitted;
  r.stats = solver.stats();
  return r;
}

const Vec& LeverageSet::B_of(const std::string& name) const {
  for (std::size_t f = 0; f < form_names.size(); ++f) {
    if (form_names[f] == name) return B[f];
  }
  fail_validation("UnknownForm", "no leverages stored for form " + name);
}

Mat solve_rows(const DesignMatrix& design, const GramSolver& solver) {
  const int n = design.n(), k = design.k();
  Mat Z(n, k);
  if (solver.is_dense()) {
    const Mat& Sinv = solver.inverse();
    for (int i = 0; i < n; ++i) {
      Vec z = Vec::Zero(k);
      for (SpMat::InnerIterator it(design.X, i); it; ++it) z += it.value() * Sinv.col(it.col());
      Z.row(i) = z.transpose();
    }
  } else {
    for (int i = 0; i < n; ++i) {
      Vec x = Vec(design.X.row(i).transpose());
      Z.row(i) = solver.solve(x).transpose();
    }
  }
  return Z;
}

LeverageSet exact_leverages(const DesignMatrix& design, const GramSolver& solver,
                            const std::vector<const QuadraticForm*>& forms) {
  const int n = design.n(), k = design.k();
  LeverageSet lev;
  lev.mode = LeverageMode::Exact;
  lev.P.resize(n);
  for (const auto* f : forms) {
    lev.form_names.push_back(f->name);
    lev.B.emplace_back(n);
  }
  for (int i = 0; i < n; ++i) {
    Vec z;
    if (solver.is_dense()) {
      z = Vec::Zero(k);
      for (SpMat::InnerIterator it(design.X, i); it; ++it) z += it.value() * solver.inverse().col(it.col());
    } else {
      z = solver.solve(Vec(design.X.row(i).transpose()));
    }
    double p = 0.0;
    for (SpMat::InnerIterator it(design.X, i); it; ++it) p += it.value() * z(it.col());
    lev.P(i) = p;
    for (std::size_t f = 0; f < forms.size(); ++f) lev.B[f](i) = forms[f]->quad(z);
  }
  lev.M = Vec::Ones(n) - lev.P;
  return lev;
}

void check_leverage(const LeverageSet& lev, double delta) {
  for (int i = 0; i < lev.P.size(); ++i) {
    if (lev.P(i) > 1.0 - delta) {
      fail_numerical("LeverageOne", "observation " + std::to_string(i) + " has leverage " + std::to_string(lev.P(i)));
    }
  }
}

double leave_out_residual(const FitResult& fit, const LeverageSet& lev, int i, double delta) {
  if (lev.P(i) > 1.0 - delta) fail_numerical("LeverageOne", "observation " + std::to_string(i));
  return fit.residuals(i) / (1.0 - lev.P(i));
}

}  // namespace kss
