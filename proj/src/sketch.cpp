#include "kss/sketch.hpp"

#include <map>

#include "kss/error.hpp"
#include "kss/stats.hpp"

namespace kss {

namespace {

constexpr std::uint64_t kTagP = 1;
constexpr std::uint64_t kTagB = 2;
constexpr int kBlock = 64;

Vec rademacher_column(std::uint64_t seed, std::uint64_t tag, int rows, int col) {
  Vec r(rows);
  for (int m = 0; m < rows; ++m) r(m) = rademacher(seed, tag, m, col);
  return r;
}

std::vector<const Factor*> unique_factors(const std::vector<const QuadraticForm*>& forms) {
  std::vector<const Factor*> out;
  auto add = [&](const Factor& f) {
    for (const auto* g : out) {
      if (g->id == f.id) return;
    }
    out.push_back(&f);
  };
  for (const auto* q : forms) {
    add(q->f1);
    add(q->f2);
  }
  return out;
}

int factor_index(const std::vector<const Factor*>& fs, const std::string& id) {
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (fs[i]->id == id) return static_cast<int>(i);
  }
  return -1;
}

}  // namespace

int sketch_solve_count(const std::vector<const QuadraticForm*>& forms, int p) {
  return p * (1 + static_cast<int>(unique_factors(forms).size()));
}

LeverageSet sketched_leverages(const DesignMatrix& design, const GramSolver& solver,
                               const std::vector<const QuadraticForm*>& forms, const SketchConfig& cfg) {
  if (cfg.p < 1) fail_validation("InvalidSketch", "projection dimension p must be positive");
  const int n = design.n(), k = design.k(), p = cfg.p;
  const auto factors = unique_factors(forms);
  const SpMatCol Xt = SpMatCol(design.X.transpose());

  LeverageSet lev;
  lev.mode = LeverageMode::Sketched;
  lev.p = p;
  lev.P = Vec::Zero(n);
  for (const auto* f : forms) {
    lev.form_names.push_back(f->name);
    lev.B.push_back(Vec::Zero(n));
  }
  lev.exact_fallback.assign(n, 0);

  for (int j0 = 0; j0 < p; j0 += kBlock) {
    const int b = std::min(kBlock, p - j0);
    Mat rhs(k, b);
    for (int j = 0; j < b; ++j) rhs.col(j) = Xt * rademacher_column(cfg.seed, kTagP, n, j0 + j);
    const Mat XZ = design.X * solver.solve(rhs);
    lev.P += XZ.rowwise().squaredNorm();
    std::vector<Mat> XF(factors.size());
    for (std::size_t f = 0; f < factors.size(); ++f) {
      const Factor& F = *factors[f];
      for (int j = 0; j < b; ++j) rhs.col(j) = F.apply_t(rademacher_column(cfg.seed, kTagB, F.rows(), j0 + j));
      XF[f] = design.X * solver.solve(rhs);
    }
    for (std::size_t q = 0; q < forms.size(); ++q) {
      const Mat& a = XF[factor_index(factors, forms[q]->f1.id)];
      const Mat& c = XF[factor_index(factors, forms[q]->f2.id)];
      lev.B[q] += a.cwiseProduct(c).rowwise().sum();
    }
  }
  lev.P /= p;
  for (auto& Bq : lev.B) Bq /= p;

  for (int i = 0; i < n; ++i) {
    if (lev.P(i) <= 1.0 - cfg.fallback_margin) continue;
    const Vec z = solver.solve(Vec(design.X.row(i).transpose()));
    lev.P(i) = design.X.row(i).dot(z);
    for (std::size_t q = 0; q < forms.size(); ++q) lev.B[q](i) = forms[q]->quad(z);
    lev.exact_fallback[i] = 1;
  }
  lev.M = Vec::Ones(n) - lev.P;
  return lev;
}

Vec jla_sigma2(const Vec& y, const FitResult& fit, const LeverageSet& lev) {
  const int n = static_cast<int>(y.size());
  Vec s(n);
  const double p = lev.p > 0 ? lev.p : 1.0;
  for (int i = 0; i < n; ++i) {
    const double P = lev.P(i);
    if (P >= 1.0) {
      fail_numerical("SketchedLeverageOne", "sketched leverage " + std::to_string(P) + " at observation " +
                                                std::to_string(i) + "; increase p");
    }
    double v = y(i) * fit.residuals(i) / (1.0 - P);
    const bool exact = !lev.exact_fallback.empty() && lev.exact_fallback[i];
    if (lev.mode == LeverageMode::Sketched && !exact) v *= 1.0 - (3.0 * P * P * P + P * P) / (p * (1.0 - P));
    s(i) = v;
  }
  return s;
}

double jla_bias_bound(const LeverageSet& lev, const std::string& form, const Vec& sigma2) {
  if (lev.p <= 0) return 0.0;
  const Vec& B = lev.B_of(form);
  double s = 0.0;
  for (int i = 0; i < lev.P.size(); ++i) s += lev.P(i) * lev.P(i) * std::abs(B(i)) * std::abs(sigma2(i));
  return s / lev.p;
}

bool jla_widening_needed(int n, int p) { return static_cast<double>(n) / (static_cast<double>(p) * p) >= 0.01; }

}  // namespace kss
