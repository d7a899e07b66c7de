#include <doctest.h>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "kss/error.hpp"
#include "kss/estimators.hpp"
#include "kss/inference.hpp"
#include "kss/simulation.hpp"
#include "kss/stats.hpp"

using namespace kss;

namespace {

Mat sigma2x2(double vb, double vt, double rho) {
  Mat S(2, 2);
  S << vb, rho * std::sqrt(vb * vt), rho * std::sqrt(vb * vt), vt;
  return S;
}

}  // namespace

TEST_CASE("coefficient of determination: nonzero eigenvalues equal 1/n") {
  const int n = 60;
  const DesignMatrix d = make_generic_design(fx::random_dense_X(n, 4, 1.0, 1));
  EstimandSpec e;
  e.kind = EstimandKind::CoefficientOfDetermination;
  const QuadraticForm A = build_quadratic_form(d, e);
  GramSolver s(d);
  const EigenInfo eig = top_eigen(d, s, A, 3);
  for (int l = 0; l < 3; ++l) CHECK(eig.lambdas(l) == doctest::Approx(1.0 / n).epsilon(1e-9));
  CHECK(eig.trace_sq == doctest::Approx(3.0 / (n * n)).epsilon(1e-9));
}

TEST_CASE("random coefficients: eigenvalues are (T_g/n)/S_zz,g") {
  const std::vector<int> sizes = {4, 5, 6};
  const auto grp = fx::group_labels(sizes);
  const int n = static_cast<int>(grp.size());
  const Vec z = fx::random_vec(n, 2);
  const DesignMatrix d = make_random_coefficient_design(grp, z);
  EstimandSpec e;
  e.kind = EstimandKind::RandomCoefficientVariance;
  e.centered = false;
  const QuadraticForm A = build_quadratic_form(d, e);
  GramSolver s(d);
  const EigenInfo eig = top_eigen(d, s, A, 3);
  std::vector<double> expect;
  for (int g = 0, start = 0; g < 3; start += sizes[g], ++g) {
    double m = 0.0, ss = 0.0;
    for (int i = start; i < start + sizes[g]; ++i) m += z(i) / sizes[g];
    for (int i = start; i < start + sizes[g]; ++i) ss += (z(i) - m) * (z(i) - m);
    expect.push_back(static_cast<double>(sizes[g]) / n / ss);
  }
  std::sort(expect.rbegin(), expect.rend());
  for (int l = 0; l < 3; ++l) CHECK(eig.lambdas(l) == doctest::Approx(expect[l]).epsilon(1e-8));
}

TEST_CASE("eigenvectors are S-orthonormal and W = X v") {
  SbmConfig c;
  c.J = 10;
  c.N = 120;
  c.seed = 3;
  const fx::FdFixture f = fx::sbm_fd(c, false);
  EstimandSpec e;
  const QuadraticForm A = build_quadratic_form(f.design, e);
  GramSolver s(f.design);
  const EigenInfo eig = top_eigen(f.design, s, A, 2);
  const Mat S = Mat(s.gram());
  CHECK((eig.vectors.transpose() * S * eig.vectors - Mat::Identity(2, 2)).norm() < 1e-8);
  CHECK((eig.W - f.design.X * eig.vectors).norm() < 1e-10);
  CHECK(eig.max_residual < 1e-6);
}

TEST_CASE("selecting q from eigenvalue shares") {
  EigenInfo e;
  e.shares = (Vec(4) << 0.58, 0.04, 0.03, 0.02).finished();
  CHECK(select_q(e) == 1);
  e.shares = (Vec(3) << 0.09, 0.08, 0.07).finished();
  CHECK(select_q(e) == 0);
  e.shares = Vec::Constant(3, 1.0 / 50);
  CHECK(select_q(e) == 0);
  e.shares = (Vec(3) << 0.4, 0.3, 0.05).finished();
  CHECK(select_q(e) == 2);
}

TEST_CASE("variance estimate is unbiased under homoscedastic noise with beta = 0") {
  const auto grp = fx::group_labels(std::vector<int>(30, 8));
  const DesignMatrix d = make_group_design(grp);
  EstimandSpec e;
  e.kind = EstimandKind::AnovaGroupVariance;
  const QuadraticForm A = build_quadratic_form(d, e);
  GramSolver s(d);
  const SplitSamplePlan plan = build_group_split_plan(d, grp);
  const InferenceModel m(d, s, A, plan, 0);
  CHECK(m.structure().problem_share() == 0.0);
  RunningStats th, vh;
  for (int r = 0; r < 10000; ++r) {
    const Vec y = gen_errors(Vec::Ones(d.n()), {}, 4, r);
    th.add(m.theta(y));
    vh.add(m.vhat(y).value);
  }
  // Standard error of the sample variance for a near-normal statistic: var * sqrt(2 / (R - 1)).
  const double se = std::sqrt(vh.se_mean() * vh.se_mean() + 2.0 * th.variance() * th.variance() / 9999.0);
  CHECK(std::abs(vh.mean() - th.variance()) < 4.0 * se);
}

TEST_CASE("missing second predictors make the variance estimate conservative") {
  const auto grp = fx::group_labels(std::vector<int>(60, 2));
  const DesignMatrix d = make_group_design(grp);
  EstimandSpec e;
  e.kind = EstimandKind::AnovaGroupVariance;
  const QuadraticForm A = build_quadratic_form(d, e);
  GramSolver s(d);
  const SplitSamplePlan plan = build_group_split_plan(d, grp);
  CHECK(plan.q_share() == 1.0);
  const InferenceModel m(d, s, A, plan, 0);
  const Vec beta = fx::random_vec(60, 5);
  RunningStats th, vh;
  for (int r = 0; r < 4000; ++r) {
    const Vec y = gen_wages(d, beta, Vec::Ones(d.n()), {}, 6, r);
    th.add(m.theta(y));
    vh.add(m.vhat(y).value);
  }
  CHECK(vh.mean() >= th.variance());
}

TEST_CASE("weak-identification covariance: symmetric and zero cross term in mean under symmetry") {
  const auto grp = fx::group_labels(std::vector<int>(25, 6));
  const DesignMatrix d = make_group_design(grp);
  EstimandSpec e;
  e.kind = EstimandKind::AnovaGroupVariance;
  const QuadraticForm A = build_quadratic_form(d, e);
  GramSolver s(d);
  const SplitSamplePlan plan = build_group_split_plan(d, grp);
  const InferenceModel m(d, s, A, plan, 1);
  RunningStats cross;
  for (int r = 0; r < 4000; ++r) {
    const Vec y = gen_errors(Vec::Ones(d.n()), {}, 7, r);
    const WeakIdVariance w = m.sigma_q(y, 1);
    CHECK(w.Sigma(0, 1) == doctest::Approx(w.Sigma(1, 0)).epsilon(1e-12));
    cross.add(w.Sigma(0, 1));
  }
  CHECK(std::abs(cross.mean()) < 4.0 * cross.se_mean());
}

TEST_CASE("curvature arithmetic and the singular guard") {
  Vec lam(1);
  lam << 1.0;
  CHECK(curvature(lam, sigma2x2(1.0, 4.0, 0.0)) == doctest::Approx(1.0));
  CHECK_THROWS_AS(curvature(lam, sigma2x2(1.0, 4.0, 1.0)), Error);
  CHECK(curvature(Vec(), Mat::Ones(1, 1)) == 0.0);
}

TEST_CASE("curvature for q = 2 reduces to q = 1 when the second direction is inert") {
  Vec l1(1), l2(2);
  l1 << 0.7;
  l2 << 0.7, 0.0;
  const Mat S1 = sigma2x2(1.3, 2.0, 0.4);
  Mat S2 = Mat::Zero(3, 3);
  S2(0, 0) = S1(0, 0);
  S2(0, 2) = S2(2, 0) = S1(0, 1);
  S2(2, 2) = S1(1, 1);
  S2(1, 1) = 1.0;
  CHECK(curvature(l2, S2) == doctest::Approx(curvature(l1, S1)).epsilon(1e-12));
}

TEST_CASE("critical values at the limits and in between") {
  const double z0 = critical_value(0.05, 1, 0.0);
  const double zi = critical_value(0.05, 1, std::numeric_limits<double>::infinity());
  CHECK(z0 * z0 == doctest::Approx(3.8415).epsilon(1e-4));
  CHECK(zi * zi == doctest::Approx(5.9915).epsilon(1e-4));
  const double z1 = critical_value(0.05, 1, 1.0, 200000);
  CHECK(z1 > z0);
  CHECK(z1 < zi);
  const CriticalValueTable t(0.05, 1, 200000);
  CHECK(t.z(0.0) == doctest::Approx(z0).epsilon(1e-3));
  CHECK(t.z(1.0) == doctest::Approx(z1).epsilon(5e-3));
  CHECK(t.z(1e9) == doctest::Approx(zi).epsilon(5e-3));
  CHECK_THROWS_AS(critical_value(1.5, 1, 0.0), Error);
}

TEST_CASE("normal interval by hand") {
  const ConfidenceInterval ci = ci_normal(0.01, 0.002 * 0.002, 0.05, 1.959964);
  CHECK(ci.lower == doctest::Approx(0.01 - 1.959964 * 0.002));
  CHECK(ci.upper == doctest::Approx(0.01 + 1.959964 * 0.002));
  CHECK(ci.contains(0.01));
}

TEST_CASE("q = 1 closed form agrees with the ellipsoid search") {
  Rng rng = make_rng(8, 1);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 100; ++t) {
    Vec lam(1), b(1);
    lam << nd(rng);
    b << 2.0 * nd(rng);
    const double tq = nd(rng);
    Mat L(2, 2);
    L << std::abs(nd(rng)) + 0.1, 0.0, nd(rng), std::abs(nd(rng)) + 0.1;
    const Mat S = L * L.transpose();
    const ConfidenceInterval a = ci_closed_form_q1(lam(0), b(0), tq, S, 2.2);
    const ConfidenceInterval e = ci_ellipsoid(lam, b, tq, S, 2.2);
    const double sc = 1.0 + std::abs(a.lower) + std::abs(a.upper);
    CHECK(std::abs(a.lower - e.lower) < 1e-6 * sc);
    CHECK(std::abs(a.upper - e.upper) < 1e-6 * sc);
    CHECK(a.contains(lam(0) * b(0) * b(0) + tq));
  }
}

TEST_CASE("q = 1 interval with no curvature is the normal interval of the center") {
  const Mat S = sigma2x2(0.5, 0.09, 0.3);
  const ConfidenceInterval a = ci_closed_form_q1(0.0, 1.2, 0.4, S, 1.959964);
  CHECK(a.lower == doctest::Approx(0.4 - 1.959964 * 0.3));
  CHECK(a.upper == doctest::Approx(0.4 + 1.959964 * 0.3));
}

TEST_CASE("q = 1 interval on a degenerate covariance matches the ellipsoid search") {
  const Mat S = sigma2x2(0.5, 0.2, 1.0);
  Vec lam(1), b(1);
  lam << 0.8;
  b << -0.3;
  const ConfidenceInterval a = ci_closed_form_q1(0.8, -0.3, 0.1, S, 2.0);
  const ConfidenceInterval e = ci_ellipsoid(lam, b, 0.1, S, 2.0);
  CHECK(a.lower == doctest::Approx(e.lower).epsilon(1e-6));
  CHECK(a.upper == doctest::Approx(e.upper).epsilon(1e-6));
}

TEST_CASE("quartic roots") {
  // (x - 1)(x + 2)(x^2 + 1) = x^4 + x^3 - x^2 + x - 2.
  const std::vector<double> r = real_poly_roots({1.0, 1.0, -1.0, 1.0, -2.0});
  std::vector<double> s = r;
  std::sort(s.begin(), s.end());
  REQUIRE(s.size() == 2);
  CHECK(s[0] == doctest::Approx(-2.0));
  CHECK(s[1] == doctest::Approx(1.0));
  const std::vector<double> lin = real_poly_roots({0.0, 0.0, 0.0, 2.0, -1.0});
  REQUIRE(lin.size() == 1);
  CHECK(lin[0] == doctest::Approx(0.5));
}

TEST_CASE("widening adds to both ends") {
  ConfidenceInterval ci = ci_normal(1.0, 1.0, 0.05, 2.0);
  widen(ci, 0.5);
  CHECK(ci.lower == doctest::Approx(-1.5));
  CHECK(ci.upper == doctest::Approx(3.5));
  CHECK(ci.jla_widening == doctest::Approx(0.5));
}

TEST_CASE("fixed-rank test with one restriction is the two-sided z-test") {
  const DesignMatrix d = make_generic_design(fx::random_dense_X(200, 4, 1.0, 9));
  GramSolver s(d);
  const Vec y = d.X * Vec::Constant(4, 0.2) + fx::random_vec(200, 10);
  Mat R = Mat::Zero(1, 4);
  R(0, 1) = 1.0;
  R(0, 2) = -1.0;
  const RestrictionTest t = test_fixed_rank(y, d, s, R, 400000);
  const FitResult f = fit(d, s, y);
  const LeverageSet lev = exact_leverages(d, s, {});
  const double se = lincom_se(d, s, sigma2_leave_out(y, f, lev), R.row(0).transpose());
  const double p = 2.0 * (1.0 - normal_cdf(std::abs(R.row(0).dot(f.beta)) / se));
  CHECK(std::abs(t.p_value - p) < 4.0 * std::sqrt(p * (1 - p) / 400000) + 1e-6);
}

TEST_CASE("growing-rank statistic: unbiased variance and size control under the null") {
  const int G = 80;
  const auto grp = fx::group_labels(std::vector<int>(G, 6));
  const DesignMatrix d = make_group_design(grp);
  GramSolver s(d);
  const SplitSamplePlan plan = build_group_split_plan(d, grp);
  Mat R = Mat::Zero(G - 1, G);
  for (int g = 0; g < G - 1; ++g) {
    R(g, g) = 1.0;
    R(g, g + 1) = -1.0;
  }
  const InferenceModel m(d, s, restriction_form(s, R), plan, 0);
  const int reps = 3000;
  RunningStats theta, vhat;
  long reject = 0;
  std::vector<double> stats;
  for (int r = 0; r < reps; ++r) {
    const Vec y = gen_wages(d, Vec::Ones(G), Vec::Ones(d.n()), {}, 11, r);
    const double t = m.theta(y), v = m.vhat(y).value;
    theta.add(t);
    vhat.add(v);
    stats.push_back(t / std::sqrt(v));
    reject += stats.back() > 1.6449;
  }
  // Sample variance of a near-normal statistic has relative SE sqrt(2 / reps).
  CHECK(std::abs(vhat.mean() / theta.variance() - 1.0) < 4.0 * std::sqrt(2.0 / reps));
  // V_hat is correlated with theta_hat in finite samples, which makes the one-sided test conservative.
  CHECK(reject / static_cast<double>(reps) < 0.05 + 3.0 * std::sqrt(0.05 * 0.95 / reps));
  CHECK(reject > 0);
  const Vec y = gen_wages(d, Vec::Ones(G), Vec::Ones(d.n()), {}, 11, 0);
  const RestrictionTest t = test_growing_rank(y, d, s, R, plan);
  CHECK(t.statistic == doctest::Approx(stats[0]).epsilon(1e-10));
  CHECK(t.r == G - 1);
}

TEST_CASE("nested-model test agrees with the restriction form") {
  const int G = 30;
  const auto grp = fx::group_labels(std::vector<int>(G, 5));
  const DesignMatrix full = make_group_design(grp);
  const DesignMatrix restricted = make_generic_design(Mat(Mat::Ones(full.n(), 1)));
  GramSolver s(full);
  const SplitSamplePlan plan = build_group_split_plan(full, grp);
  Mat R = Mat::Zero(G - 1, G);
  for (int g = 0; g < G - 1; ++g) {
    R(g, g) = 1.0;
    R(g, g + 1) = -1.0;
  }
  const Vec y = gen_wages(full, fx::random_vec(G, 12, 0.3), Vec::Ones(full.n()), {}, 13, 0);
  const RestrictionTest a = test_nested(y, full, restricted, plan);
  const RestrictionTest b = test_growing_rank(y, full, s, R, plan);
  CHECK(a.theta == doctest::Approx(b.theta).epsilon(1e-9));
  CHECK(a.statistic == doctest::Approx(b.statistic).epsilon(1e-9));
}
