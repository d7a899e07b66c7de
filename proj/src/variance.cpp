#include <algorithm>

#include "kss/error.hpp"
#include "kss/inference.hpp"

namespace kss {

namespace {

enum PairCase : unsigned char { kNone = 0, kBoth = 1, kCrossI = 2, kCrossL = 3, kUncL = 4, kUncI = 5, kUncBoth = 6 };
constexpr unsigned char kCaseMask = 7;
constexpr unsigned char kSelI = 8;   // sigma2_{i,-l} uses the second predictor
constexpr unsigned char kSelL = 16;  // sigma2_{l,-i} uses the second predictor

SpMat plan_matrix(const SplitSamplePlan& plan, int s) {
  std::vector<Triplet> t;
  const auto& rows = s == 1 ? plan.w1 : plan.w2;
  for (int i = 0; i < plan.n; ++i) {
    for (auto [l, w] : rows[i]) t.emplace_back(i, l, w);
  }
  SpMat P(plan.n, plan.n);
  P.setFromTriplets(t.begin(), t.end());
  P.makeCompressed();
  return P;
}

}  // namespace

SplitStructure::SplitStructure(const SplitSamplePlan& plan) : plan_(&plan), n_(plan.n) {
  const int n = n_;
  P1_ = plan_matrix(plan, 1);
  P2_ = plan_matrix(plan, 2);
  for (auto m : plan.missing) any_missing_ = any_missing_ || m;
  const std::size_t words = (static_cast<std::size_t>(n) + 63) / 64;
  std::vector<std::vector<std::uint64_t>> bits[2];
  std::vector<std::vector<int>> supp[2];
  for (int s = 0; s < 2; ++s) {
    bits[s].assign(n, std::vector<std::uint64_t>(words, 0));
    supp[s].resize(n);
    const auto& rows = s == 0 ? plan.w1 : plan.w2;
    for (int i = 0; i < n; ++i) {
      for (auto [l, w] : rows[i]) {
        if (w == 0.0) continue;
        supp[s][i].push_back(l);
        bits[s][i][l / 64] |= std::uint64_t{1} << (l % 64);
      }
    }
  }
  auto has = [&](int s, int i, int l) { return (bits[s][i][l / 64] >> (l % 64)) & 1U; };
  auto disjoint = [&](int i, int si, int l, int sl) {
    const auto& a = supp[si][i];
    const auto& b = supp[sl][l];
    if (a.size() <= b.size()) {
      for (int m : a) {
        if (has(sl, l, m)) return false;
      }
    } else {
      for (int m : b) {
        if (has(si, i, m)) return false;
      }
    }
    return true;
  };
  codes_.assign(static_cast<std::size_t>(n) * n, kNone);
  long problems = 0;
  for (int l = 0; l < n; ++l) {
    for (int i = 0; i < n; ++i) {
      if (i == l) continue;
      const bool p1_il = has(0, i, l), p2_il = has(1, i, l);
      const bool p1_li = has(0, l, i), p2_li = has(1, l, i);
      const int si = p1_il ? 1 : 0, sl = p1_li ? 1 : 0;
      const bool Qi = plan.missing[i], Ql = plan.missing[l];
      const bool Qil = p1_il && Qi, Qli = p1_li && Ql;
      unsigned char c;
      if (!Qil && !Qli && disjoint(i, si, l, sl)) {
        c = kBoth;
      } else if (!p1_il && !p2_il && !Qi && !Qli) {
        c = kCrossI;
      } else if (!p1_li && !p2_li && !Ql && !Qil) {
        c = kCrossL;
      } else if (!Qil) {
        c = kUncL;
      } else if (!Qli) {
        c = kUncI;
      } else {
        c = kUncBoth;
      }
      if (c >= kUncL) ++problems;
      if (si) c |= kSelI;
      if (sl) c |= kSelL;
      codes_[static_cast<std::size_t>(l) * n + i] = c;
    }
  }
  problem_share_ = n > 1 ? static_cast<double>(problems) / (static_cast<double>(n) * (n - 1)) : 0.0;
  // Stored column-major: code(i, l) reads codes_[l * n + i].
}

SplitSigmas split_sigmas(const SplitStructure& s, const Vec& y) {
  SplitSigmas g;
  const Vec r1 = y - s.P1() * y;
  const Vec r2 = y - s.P2() * y;
  g.a1 = y.cwiseProduct(r1);
  g.a2 = y.cwiseProduct(r2);
  g.cross = r1.cwiseProduct(r2);
  const double ybar = y.mean();
  g.centered_sq = (y.array() - ybar).square().matrix();
  g.cross2 = g.cross;
  for (int i = 0; i < y.size(); ++i) {
    if (s.plan().missing[i]) g.cross2(i) = g.centered_sq(i);
  }
  return g;
}

VarianceEngine::VarianceEngine(const SplitStructure& s, Mat C) : s_(&s), C_(std::move(C)) {
  const int n = s.n();
  if (C_.rows() != n || C_.cols() != n) fail_validation("DimensionMismatch", "kernel and plan sizes differ");
  SpMat U1 = s.P1(), U2 = s.P2();
  for (int i = 0; i < U1.outerSize(); ++i) {
    for (SpMat::InnerIterator it(U1, i); it; ++it) it.valueRef() *= C_(it.row(), it.col());
  }
  for (int i = 0; i < U2.outerSize(); ++i) {
    for (SpMat::InnerIterator it(U2, i); it; ++it) it.valueRef() *= C_(it.row(), it.col());
  }
  const SpMatCol U1c = U1, U2c = U2;
  const SpMatCol X12 = SpMatCol(U1c.transpose()) * U2c;
  const Mat D = Mat(X12);
  Ct_ = C_.cwiseAbs2() + 2.0 * (D + D.transpose());
}

VarianceValue VarianceEngine::evaluate(const Vec& y, const SplitSigmas& g) const {
  const int n = s_->n();
  const Vec Cy = C_ * y;
  VarianceValue v;
  v.first_term = 4.0 * Cy.cwiseAbs2().dot(g.cross2);
  double corr = 0.0;
  for (int l = 0; l < n; ++l) {
    const double* ct = Ct_.data() + static_cast<std::size_t>(l) * n;
    for (int i = 0; i < n; ++i) {
      const unsigned char code = s_->code(i, l);
      const unsigned char c = code & kCaseMask;
      if (c == kNone) continue;
      const double w = ct[i];
      const double ai = (code & kSelI) ? g.a2(i) : g.a1(i);
      const double al = (code & kSelL) ? g.a2(l) : g.a1(l);
      double prod = 0.0;
      switch (c) {
        case kBoth: prod = ai * al; break;
        case kCrossI: prod = g.cross(i) * al; break;
        case kCrossL: prod = ai * g.cross(l); break;
        case kUncL: prod = w < 0.0 ? ai * g.centered_sq(l) : 0.0; break;
        case kUncI: prod = w < 0.0 ? g.centered_sq(i) * al : 0.0; break;
        case kUncBoth: prod = w < 0.0 ? g.centered_sq(i) * g.centered_sq(l) : 0.0; break;
        default: break;
      }
      corr += w * prod;
    }
  }
  v.correction = 2.0 * corr;
  v.value = v.first_term - v.correction;
  if (!(v.value > 0.0)) {
    v.value = std::max(1e-6 * std::abs(v.first_term), 1e-300);
    v.floored = true;
  }
  return v;
}

InferenceModel::InferenceModel(const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form,
                               const SplitSamplePlan& plan, int q_max, const EigenOptions& eopts) {
  if (plan.n != design.n()) fail_validation("NoPlan", "split-sample plan does not match the design");
  kernel_ = dense_kernel(design, solver, form);
  if (q_max > 0) eig_ = top_eigen(design, solver, form, q_max, eopts);
  plan_ = std::make_unique<SplitSamplePlan>(plan);
  structure_ = std::make_unique<SplitStructure>(*plan_);
  engines_.resize(eig_.q_max() + 1);
}

InferenceModel::~InferenceModel() = default;

const Mat& InferenceModel::kernel_q(int q) const { return engine(q).C(); }

const VarianceEngine& InferenceModel::engine(int q) const {
  if (q < 0 || q > eig_.q_max()) fail_validation("InsufficientEigen", "q exceeds the extracted eigenpairs");
  if (!engines_[q]) {
    if (q == 0) {
      engines_[q] = std::make_unique<VarianceEngine>(*structure_, kernel_.C);
    } else {
      const Mat Wq = eig_.W.leftCols(q);
      const Mat Bq = kernel_.B - Wq * eig_.lambdas.head(q).asDiagonal() * Wq.transpose();
      engines_[q] = std::make_unique<VarianceEngine>(*structure_, kernel_from(kernel_.P, Bq, kernel_.M));
    }
  }
  return *engines_[q];
}

Vec InferenceModel::sigma2(const Vec& y) const {
  const Vec e = y - kernel_.P * y;
  return y.cwiseProduct(e).cwiseQuotient(kernel_.M);
}

VarianceValue InferenceModel::vhat(const Vec& y) const { return engine(0).evaluate(y); }

WeakIdVariance InferenceModel::sigma_q(const Vec& y, int q) const {
  WeakIdVariance w;
  w.q = q;
  w.conservative = structure_->any_missing();
  const VarianceEngine& eng = engine(q);
  const SplitSigmas g = split_sigmas(*structure_, y);
  const VarianceValue vt = eng.evaluate(y, g);
  w.floored = vt.floored;
  w.theta_q = theta_ustat(eng.C(), y);
  w.Sigma = Mat::Zero(q + 1, q + 1);
  w.Sigma(q, q) = vt.value;
  if (q == 0) return w;
  const Mat Wq = eig_.W.leftCols(q);
  w.b_hat = Wq.transpose() * y;
  Vec s2 = sigma2(y);
  for (int i = 0; i < s2.size(); ++i) {
    if (structure_->plan().missing[i]) s2(i) = g.centered_sq(i);
  }
  w.Sigma.topLeftCorner(q, q) = Wq.transpose() * s2.asDiagonal() * Wq;
  const Vec Cy = eng.C() * y;
  const Vec cross = 2.0 * Wq.transpose() * Cy.cwiseProduct(g.cross2);
  w.Sigma.block(0, q, q, 1) = cross;
  w.Sigma.block(q, 0, 1, q) = cross.transpose();
  Eigen::SelfAdjointEigenSolver<Mat> es(w.Sigma);
  const double tr = std::abs(w.Sigma.trace());
  if (es.eigenvalues().minCoeff() < -1e-10 * tr) {
    const Vec ev = es.eigenvalues().cwiseMax(0.0);
    w.Sigma = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    w.projected = true;
  }
  return w;
}

}  // namespace kss
