#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "kss/error.hpp"
#include "kss/network.hpp"
#include "kss/simulation.hpp"
#include "kss/solver.hpp"

using namespace kss;

namespace {

DesignMatrix intercept(int n) { return make_generic_design(Mat(Mat::Ones(n, 1))); }

}  // namespace

TEST_CASE("intercept-only fit and leverages") {
  const DesignMatrix d = intercept(2);
  GramSolver s(d);
  Vec y(2);
  y << 2.0, 0.0;
  const FitResult f = fit(d, s, y);
  CHECK(f.beta(0) == doctest::Approx(1.0));
  const LeverageSet lev = exact_leverages(d, s, {});
  CHECK(lev.P(0) == doctest::Approx(0.5));
  CHECK(lev.P.sum() == doctest::Approx(1.0));
  // (2 - 1) / (1 - 1/2) = 2 = y_1 - beta_{-1} with beta_{-1} = 0.
  CHECK(leave_out_residual(f, lev, 0) == doctest::Approx(2.0));
}

TEST_CASE("two-row first-difference design recovers the firm effect") {
  Mat X(2, 1);
  X << 1.0, -1.0;
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  Vec y(2);
  y << 1.0, -1.0;
  CHECK(fit(d, s, y).beta(0) == doctest::Approx(1.0));
}

TEST_CASE("dense and conjugate-gradient solves agree with a QR oracle") {
  const Mat X = fx::random_dense_X(50, 10, 0.7, 3);
  const DesignMatrix d = make_generic_design(X);
  const Vec y = fx::random_vec(50, 4);
  const Vec oracle = X.colPivHouseholderQr().solve(y);
  GramSolver dense(d);
  SolverOptions o;
  o.force_cg = true;
  o.cg_tolerance = 1e-13;
  GramSolver cg(d, o);
  CHECK(dense.is_dense());
  CHECK_FALSE(cg.is_dense());
  CHECK((fit(d, dense, y).beta - oracle).norm() < 1e-8 * (1.0 + oracle.norm()));
  CHECK((fit(d, cg, y).beta - oracle).norm() < 1e-8 * (1.0 + oracle.norm()));
  CHECK(cg.stats().iterations > 0);
  CHECK_THROWS_AS(cg.inverse(), Error);
}

TEST_CASE("sparse leverages match the dense-inverse oracle") {
  const Mat X = fx::random_dense_X(500, 30, 0.1, 5);
  const DesignMatrix d = make_generic_design(X);
  SolverOptions o;
  o.force_cg = true;
  o.cg_tolerance = 1e-13;
  GramSolver s(d, o);
  const QuadraticForm A = make_custom_form("A", fx::random_A(30, true, 6));
  const LeverageSet lev = exact_leverages(d, s, {&A});
  const Mat Sinv = (X.transpose() * X).inverse();
  const Mat Ad = A.dense();
  double gp = 0.0, gb = 0.0;
  for (int i = 0; i < 500; ++i) {
    const Vec z = Sinv * X.row(i).transpose();
    gp = std::max(gp, std::abs(X.row(i).dot(z) - lev.P(i)));
    gb = std::max(gb, std::abs(z.dot(Ad * z) - lev.B[0](i)));
  }
  CHECK(gp < 1e-8);
  CHECK(gb < 1e-8);
  CHECK((lev.M - (Vec::Ones(500) - lev.P)).norm() == 0.0);
}

TEST_CASE("balanced pairs: leave-out residual is twice the residual") {
  const DesignMatrix d = make_group_design(fx::group_labels({2, 2, 2}));
  GramSolver s(d);
  const Vec y = fx::random_vec(6, 7);
  const FitResult f = fit(d, s, y);
  const LeverageSet lev = exact_leverages(d, s, {});
  for (int i = 0; i < 6; ++i) CHECK(leave_out_residual(f, lev, i) == doctest::Approx(2.0 * f.residuals(i)));
}

TEST_CASE("leave-out residual matches an explicit refit") {
  const Mat X = fx::random_dense_X(40, 5, 1.0, 8);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const Vec y = fx::random_vec(40, 9);
  const FitResult f = fit(d, s, y);
  const LeverageSet lev = exact_leverages(d, s, {});
  for (int i = 0; i < 40; i += 7) {
    Mat Xm(39, 5);
    Vec ym(39);
    for (int r = 0, c = 0; r < 40; ++r) {
      if (r == i) continue;
      Xm.row(c) = X.row(r);
      ym(c++) = y(r);
    }
    const Vec b = Xm.colPivHouseholderQr().solve(ym);
    CHECK(leave_out_residual(f, lev, i) == doctest::Approx(y(i) - X.row(i).dot(b)).epsilon(1e-8));
  }
}

TEST_CASE("unit leverage is detected") {
  Mat X = Mat::Zero(3, 2);
  X << 1, 0, 1, 0, 0, 1;
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const LeverageSet lev = exact_leverages(d, s, {});
  CHECK(lev.P(2) == doctest::Approx(1.0));
  try {
    check_leverage(lev);
    FAIL("expected LeverageOne");
  } catch (const Error& e) {
    CHECK(e.code() == "LeverageOne");
  }
}

TEST_CASE("mover leverage is bounded by its detour length") {
  SbmConfig c;
  c.J = 12;
  c.N = 60;
  c.seed = 10;
  const fx::FdFixture f = fx::sbm_fd(c, false);
  GramSolver s(f.design);
  const LeverageSet lev = exact_leverages(f.design, s, {});
  for (int i = 0; i < f.design.n(); ++i) {
    const int w = f.design.row_worker[i];
    const int len = detour_length(f.graph, w);
    REQUIRE(len > 0);
    CHECK(lev.P(i) <= static_cast<double>(len) / (1.0 + len) + 1e-12);
  }
}

TEST_CASE("solve_rows returns S^{-1} x_i as rows") {
  const Mat X = fx::random_dense_X(20, 4, 1.0, 11);
  const DesignMatrix d = make_generic_design(X);
  GramSolver s(d);
  const Mat Z = solve_rows(d, s);
  CHECK((Z - X * (X.transpose() * X).inverse()).norm() < 1e-10);
}
