#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "kss/estimators.hpp"
#include "kss/inference.hpp"
#include "kss/simulation.hpp"
#include "kss/stats.hpp"

using namespace kss;

namespace {

struct Intercept {
  DesignMatrix d = make_generic_design(Mat(Mat::Ones(2, 1)));
  QuadraticForm A = make_custom_form("one", Mat(Mat::Ones(1, 1)));
  GramSolver s{d};
  Vec y = (Vec(2) << 2.0, 0.0).finished();
};

}  // namespace

TEST_CASE("intercept-only variances and estimate by hand") {
  Intercept c;
  const LeverageSet lev = exact_leverages(c.d, c.s, {&c.A});
  const FitResult f = fit(c.d, c.s, c.y);
  const Vec s2 = sigma2_leave_out(c.y, f, lev);
  CHECK(s2(0) == doctest::Approx(4.0));
  CHECK(s2(1) == doctest::Approx(0.0));
  CHECK(lev.B[0](0) == doctest::Approx(0.25));
  CHECK(theta_leave_out(c.y, f, lev, c.A).theta == doctest::Approx(0.0));
  CHECK(theta_leave_out_covariance(c.y, c.d, c.s, c.A, f, lev) == doctest::Approx(0.0));
}

TEST_CASE("zero residuals give zero variances and agreeing methods") {
  const Mat X = fx::random_dense_X(30, 4, 1.0, 1);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const QuadraticForm A = make_custom_form("A", fx::random_A(4, true, 2));
  const LeverageSet lev = exact_leverages(d, s, {&A});
  const Vec y = X * fx::random_vec(4, 3);
  const FitResult f = fit(d, s, y);
  CHECK(sigma2_leave_out(y, f, lev).cwiseAbs().maxCoeff() < 1e-10);
  const AkmDecomposition dec = decompose_akm(y, f, lev, {&A}, 4, 1.0);
  const auto& c = dec.get("A");
  CHECK(c.pi.theta == doctest::Approx(c.ho.theta));
  CHECK(c.pi.theta == doctest::Approx(c.kss.theta));
}

TEST_CASE("a zero form gives a zero estimate") {
  const Mat X = fx::random_dense_X(20, 3, 1.0, 4);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const QuadraticForm A = make_custom_form("zero", Mat(Mat::Zero(3, 3)));
  const LeverageSet lev = exact_leverages(d, s, {&A});
  const Vec y = fx::random_vec(20, 5);
  CHECK(theta_leave_out(y, fit(d, s, y), lev, A).theta == 0.0);
  const std::vector<int> periods = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  for (auto v : {JackknifeVariant::JK, JackknifeVariant::PJK, JackknifeVariant::SPJK}) {
    CHECK(theta_jackknife(y, d, A, v, periods).theta == doctest::Approx(0.0));
  }
}

TEST_CASE("HC2 variances are nonnegative while leave-out variances may be negative") {
  const Mat X = fx::random_dense_X(60, 5, 1.0, 6);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const LeverageSet lev = exact_leverages(d, s, {});
  const Vec y = fx::random_vec(60, 7) + Vec::Constant(60, 0.1);
  const FitResult f = fit(d, s, y);
  CHECK(sigma2_hc2(f, lev).minCoeff() >= 0.0);
  CHECK(sigma2_leave_out(y, f, lev).minCoeff() < 0.0);
}

TEST_CASE("leave-out variances are unbiased per observation") {
  const std::vector<int> grp = fx::group_labels({3, 4, 5});
  const DesignMatrix d = make_group_design(grp);
  GramSolver s(d);
  const LeverageSet lev = exact_leverages(d, s, {});
  Vec v(12);
  for (int i = 0; i < 12; ++i) v(i) = 0.5 + 0.3 * i;
  const Vec beta = Vec::LinSpaced(3, -1.0, 1.0);
  std::vector<RunningStats> rs(12);
  for (int r = 0; r < 20000; ++r) {
    const Vec y = gen_wages(d, beta, v, {}, 8, r);
    const Vec s2 = sigma2_leave_out(y, fit(d, s, y), lev);
    for (int i = 0; i < 12; ++i) rs[i].add(s2(i));
  }
  for (int i = 0; i < 12; ++i) CHECK(std::abs(rs[i].mean() - v(i)) < 4.0 * rs[i].se_mean());
}

TEST_CASE("heteroscedastic one-way layout: unbiased leave-out, plug-in bias as predicted") {
  std::vector<int> sizes;
  for (int g = 0; g < 20; ++g) sizes.push_back(2 + g % 4);
  const auto grp = fx::group_labels(sizes);
  const DesignMatrix d = make_group_design(grp);
  EstimandSpec e;
  e.kind = EstimandKind::AnovaGroupVariance;
  const QuadraticForm A = build_quadratic_form(d, e);
  GramSolver s(d);
  const LeverageSet lev = exact_leverages(d, s, {&A});
  Vec v(d.n());
  for (int i = 0; i < d.n(); ++i) v(i) = 0.25 + 0.5 * (grp[i] % 3);
  const Vec beta = fx::random_vec(20, 9);
  const double theta = A.quad(beta);
  RunningStats k, p;
  for (int r = 0; r < 10000; ++r) {
    const Vec y = gen_wages(d, beta, v, {}, 10, r);
    const FitResult f = fit(d, s, y);
    k.add(theta_leave_out(y, f, lev, A).theta);
    p.add(theta_plugin(A, f.beta));
  }
  CHECK(std::abs(k.mean() - theta) < 4.0 * k.se_mean());
  CHECK(std::abs(p.mean() - theta - lev.B[0].dot(v)) < 4.0 * p.se_mean());
}

TEST_CASE("homoscedastic estimator is unbiased under homoscedasticity") {
  const Mat X = fx::random_dense_X(80, 6, 0.8, 11);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const QuadraticForm A = make_custom_form("A", fx::random_A(6, true, 12));
  const LeverageSet lev = exact_leverages(d, s, {&A});
  const Vec beta = fx::random_vec(6, 13);
  RunningStats h;
  for (int r = 0; r < 10000; ++r) {
    const Vec y = gen_wages(d, beta, Vec::Constant(80, 0.7), {}, 14, r);
    h.add(theta_homosc(y, fit(d, s, y), lev, A, 6).theta);
  }
  CHECK(std::abs(h.mean() - A.quad(beta)) < 4.0 * h.se_mean());
}

TEST_CASE("singleton clusters reproduce the leave-one-out estimate") {
  const Mat X = fx::random_dense_X(40, 5, 1.0, 15);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const QuadraticForm A = make_custom_form("A", fx::random_A(5, false, 16));
  const LeverageSet lev = exact_leverages(d, s, {&A});
  const Vec y = fx::random_vec(40, 17);
  std::vector<int> cl(40);
  for (int i = 0; i < 40; ++i) cl[i] = i;
  const double a = theta_leave_out(y, fit(d, s, y), lev, A).theta;
  const double b = theta_cluster(y, d, s, A, cl).theta;
  CHECK(std::abs(a - b) < 1e-12 * std::max(1.0, std::abs(a)));
}

TEST_CASE("leave-cluster-out matches an explicit refit oracle") {
  const Mat X = fx::random_dense_X(60, 4, 1.0, 18);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const Mat Ad = fx::random_A(4, true, 19);
  const QuadraticForm A = make_custom_form("A", Ad);
  const Vec y = fx::random_vec(60, 20);
  std::vector<int> cl(60);
  for (int i = 0; i < 60; ++i) cl[i] = i / 3;
  const Mat Sinv = (X.transpose() * X).inverse();
  const Vec beta = Sinv * X.transpose() * y;
  // theta = sum_i y_i x_i' S^{-1} A beta_{-c(i)}, the cluster analogue of the covariance form.
  double oracle = 0.0;
  for (int c = 0; c < 20; ++c) {
    Mat Xm(57, 4);
    Vec ym(57);
    for (int i = 0, r = 0; i < 60; ++i) {
      if (cl[i] == c) continue;
      Xm.row(r) = X.row(i);
      ym(r++) = y(i);
    }
    const Vec bm = Xm.colPivHouseholderQr().solve(ym);
    for (int i = 3 * c; i < 3 * c + 3; ++i) oracle += y(i) * X.row(i).dot(Sinv * Ad * bm);
  }
  const double est = theta_cluster(y, d, s, A, cl).theta;
  CHECK(est == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("panel jackknife is unbiased for squared group means; plain jackknife is not") {
  const int N = 50, T = 4;
  const auto grp = fx::group_labels(std::vector<int>(N, T));
  const DesignMatrix d = make_group_design(grp);
  const QuadraticForm A = make_custom_form("mean_sq", Mat(Mat::Identity(N, N) / N));
  std::vector<int> periods(N * T);
  for (int i = 0; i < N * T; ++i) periods[i] = i % T;
  const JackknifeFamily jk(d, A, periods);
  const Vec beta = fx::random_vec(N, 21);
  const double theta = A.quad(beta);
  RunningStats p, j;
  for (int r = 0; r < 10000; ++r) {
    const Vec y = gen_wages(d, beta, Vec::Ones(N * T), {}, 22, r);
    p.add(jk.estimate(JackknifeVariant::PJK, y).theta);
    j.add(jk.estimate(JackknifeVariant::JK, y).theta);
  }
  CHECK(std::abs(p.mean() - theta) < 4.0 * p.se_mean());
  CHECK(std::abs(j.mean() - theta + 1.0 / (T * (T - 1.0))) < 4.0 * j.se_mean());
}

TEST_CASE("firm-effect variance: first differences equal levels and ignore within-worker correlation") {
  Panel p = fx::random_two_period_panel(8, 80, 0.3, 23);
  const MobilityGraph g = leave_one_out_connected(build_mobility_graph(p));
  Panel q = restrict_panel(p, g);
  const DesignMatrix lv = build_design(q, ModelSpec{});
  ModelSpec fds;
  fds.kind = ModelKind::FirstDifference;
  const DesignMatrix fd = build_design(q, fds);
  EstimandSpec e;
  const QuadraticForm Al = build_quadratic_form(lv, e), Af = build_quadratic_form(fd, e);
  GramSolver sl(lv), sf(fd);
  const LeverageSet ll = exact_leverages(lv, sl, {&Al}), lf = exact_leverages(fd, sf, {&Af});
  for (int rep = 0; rep < 3; ++rep) {
    const Vec y = fx::random_vec(q.n(), 24 + rep);
    for (int i = 0; i < q.n(); ++i) q.rows[i].outcome = y(i);
    const Vec yl = design_outcome(q, lv), yf = design_outcome(q, fd);
    const double a = theta_leave_out(yl, fit(lv, sl, yl), ll, Al).theta;
    const double b = theta_leave_out(yf, fit(fd, sf, yf), lf, Af).theta;
    CHECK(a == doctest::Approx(b).epsilon(1e-10));
  }
  // Errors e_2 = rho e_1 + noise: the first-difference estimate stays unbiased.
  const Vec psi = fx::random_vec(q.num_firms(), 25, 0.5);
  const Vec beta = fd_coefficients(fd, psi);
  const double theta = Af.quad(beta);
  RunningStats rs;
  for (int r = 0; r < 5000; ++r) {
    const Vec e1 = gen_errors(Vec::Ones(q.num_workers()), {}, 26, r);
    const Vec e2 = gen_errors(Vec::Ones(q.num_workers()), {}, 27, r);
    for (int i = 0; i < q.n(); ++i) {
      const int w = q.worker[i];
      const bool second = q.group_index[w][1] == i;
      q.rows[i].outcome = psi(q.firm[i]) + (second ? 0.8 * e1(w) + 0.6 * e2(w) : e1(w));
    }
    const Vec yf = design_outcome(q, fd);
    rs.add(theta_leave_out(yf, fit(fd, sf, yf), lf, Af).theta);
  }
  CHECK(std::abs(rs.mean() - theta) < 4.0 * rs.se_mean());
}

TEST_CASE("coefficient covariance on a two-group layout matches the hand formula") {
  const std::vector<int> grp = {0, 0, 0, 1, 1};
  const DesignMatrix d = make_group_design(grp);
  GramSolver s(d);
  Vec s2(5);
  s2 << 1.0, 2.0, 3.0, 4.0, 5.0;
  const Mat V = vcov_beta(d, s, s2);
  CHECK(V(0, 0) == doctest::Approx(6.0 / 9.0));
  CHECK(V(1, 1) == doctest::Approx(9.0 / 4.0));
  CHECK(V(0, 1) == doctest::Approx(0.0));
  Vec v(2);
  v << 1.0, -1.0;
  CHECK(lincom_se(d, s, s2, v) == doctest::Approx(std::sqrt(6.0 / 9.0 + 9.0 / 4.0)));
}

TEST_CASE("linear-combination intervals cover at the nominal rate") {
  const int n = 2000;
  const Mat X = fx::random_dense_X(n, 5, 1.0, 28);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const LeverageSet lev = exact_leverages(d, s, {});
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = 0.2 + X(i, 1) * X(i, 1);
  const Vec beta = fx::random_vec(5, 29);
  const Vec c = Vec::Unit(5, 1);
  int cover = 0;
  const int reps = 1000;
  for (int r = 0; r < reps; ++r) {
    const Vec y = gen_wages(d, beta, v, {}, 30, r);
    const FitResult f = fit(d, s, y);
    const double se = lincom_se(d, s, sigma2_leave_out(y, f, lev), c);
    cover += std::abs(c.dot(f.beta) - c.dot(beta)) <= 1.959964 * se;
  }
  const double rate = static_cast<double>(cover) / reps;
  CHECK(rate >= 0.935);
  CHECK(rate <= 0.965);
}

TEST_CASE("U-statistic kernel has a zero diagonal") {
  const Mat X = fx::random_dense_X(30, 4, 1.0, 31);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const QuadraticForm A = make_custom_form("A", fx::random_A(4, false, 32));
  const DenseKernel k = dense_kernel(d, s, A);
  CHECK(k.C.diagonal().cwiseAbs().maxCoeff() == 0.0);
  CHECK((k.C - k.C.transpose()).cwiseAbs().maxCoeff() < 1e-14);
}
