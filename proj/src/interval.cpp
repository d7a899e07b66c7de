#include <algorithm>
#include <cmath>
#include <limits>

#include "kss/error.hpp"
#include "kss/inference.hpp"
#include "kss/stats.hpp"

namespace kss {

double curvature(const Vec& lambdas, const Mat& Sigma) {
  const int q = static_cast<int>(lambdas.size());
  if (q == 0) return 0.0;
  if (Sigma.rows() != q + 1 || Sigma.cols() != q + 1) fail_validation("DimensionMismatch", "Sigma must be (q+1)x(q+1)");
  const Mat Vb = Sigma.topLeftCorner(q, q);
  const Vec c = Sigma.block(0, q, q, 1);
  const double Vt = Sigma(q, q);
  Eigen::LLT<Mat> llt(Vb);
  if (llt.info() != Eigen::Success) fail_numerical("SingularConditional", "V[b_hat] is not positive definite");
  const Mat L = llt.matrixL();
  const double cond = Vt - c.dot(llt.solve(c));
  if (!(Vt > 0.0) || cond < 1e-12 * Vt) fail_numerical("SingularConditional", "conditional variance of theta_q is zero");
  const Mat K = L.transpose() * lambdas.asDiagonal() * L;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (K + K.transpose()));
  const double top = es.eigenvalues().cwiseAbs().maxCoeff();
  return 2.0 * top / std::sqrt(cond);
}

namespace {

// rho = sqrt(cq + (c1 + 1/kappa)^2) - 1/kappa, written without cancellation.
double rho(double cq, double c1, double kappa) {
  if (std::isinf(kappa)) return std::sqrt(cq + c1 * c1);
  if (kappa <= 0.0) return c1;
  const double inv = 1.0 / kappa;
  return (cq + c1 * c1 + 2.0 * c1 * inv) / (std::sqrt(cq + (c1 + inv) * (c1 + inv)) + inv);
}

void draw_chis(int q, long draws, std::uint64_t seed, std::vector<double>& cq, std::vector<double>& c1) {
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(q), 0xc417);
  std::normal_distribution<double> nd;
  std::chi_squared_distribution<double> chi(q > 0 ? q : 1);
  cq.resize(draws);
  c1.resize(draws);
  for (long d = 0; d < draws; ++d) {
    cq[d] = q > 0 ? chi(rng) : 0.0;
    c1[d] = std::abs(nd(rng));
  }
}

double order_quantile(std::vector<double>& v, double p) {
  const long n = static_cast<long>(v.size());
  long idx = static_cast<long>(std::ceil(p * n)) - 1;
  idx = std::clamp(idx, 0L, n - 1);
  std::nth_element(v.begin(), v.begin() + idx, v.end());
  return v[idx];
}

}  // namespace

double critical_value(double alpha, int q, double kappa, long draws, std::uint64_t seed) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail_validation("InvalidAlpha", "alpha must lie in (0,1)");
  if (kappa < 0.0) fail_validation("InvalidKappa", "curvature must be nonnegative");
  if (q == 0 || kappa == 0.0) return std::sqrt(chi2_quantile(1.0 - alpha, 1.0));
  if (std::isinf(kappa)) return std::sqrt(chi2_quantile(1.0 - alpha, q + 1.0));
  std::vector<double> cq, c1;
  draw_chis(q, draws, seed, cq, c1);
  std::vector<double> r(draws);
  for (long d = 0; d < draws; ++d) r[d] = rho(cq[d], c1[d], kappa);
  return order_quantile(r, 1.0 - alpha);
}

CriticalValueTable::CriticalValueTable(double alpha, int q, long draws, std::uint64_t seed, int grid) : q_(q) {
  if (q == 0) return;
  std::vector<double> cq, c1;
  draw_chis(q, draws, seed, cq, c1);
  std::vector<double> r(draws);
  for (int g = 0; g < grid; ++g) {
    const double t = static_cast<double>(g) / (grid - 1);
    const double kappa = t == 0.0 ? std::numeric_limits<double>::infinity() : (1.0 - t) / t;
    for (long d = 0; d < draws; ++d) r[d] = rho(cq[d], c1[d], kappa);
    t_.push_back(t);
    z_.push_back(order_quantile(r, 1.0 - alpha));
  }
}

double CriticalValueTable::z(double kappa) const {
  if (q_ == 0) fail_validation("InvalidTable", "no table for q = 0");
  const double t = std::isinf(kappa) ? 0.0 : 1.0 / (1.0 + std::max(0.0, kappa));
  auto it = std::upper_bound(t_.begin(), t_.end(), t);
  if (it == t_.end()) return z_.back();
  const std::size_t hi = static_cast<std::size_t>(it - t_.begin());
  if (hi == 0) return z_.front();
  const std::size_t lo = hi - 1;
  const double w = (t - t_[lo]) / (t_[hi] - t_[lo]);
  return (1.0 - w) * z_[lo] + w * z_[hi];
}

std::vector<double> real_poly_roots(std::vector<double> c) {
  while (!c.empty() && c.front() == 0.0) c.erase(c.begin());
  std::vector<double> roots;
  const int deg = static_cast<int>(c.size()) - 1;
  if (deg < 1) return roots;
  double scale = 0.0;
  for (double v : c) scale = std::max(scale, std::abs(v));
  // Drop a numerically negligible leading coefficient.
  while (c.size() > 2 && std::abs(c.front()) < 1e-14 * scale) c.erase(c.begin());
  const int d = static_cast<int>(c.size()) - 1;
  Mat comp = Mat::Zero(d, d);
  for (int j = 0; j < d; ++j) comp(0, j) = -c[j + 1] / c[0];
  for (int j = 1; j < d; ++j) comp(j, j - 1) = 1.0;
  Eigen::EigenSolver<Mat> es(comp);
  double rscale = 1.0;
  for (int j = 0; j < d; ++j) rscale = std::max(rscale, std::abs(es.eigenvalues()(j)));
  for (int j = 0; j < d; ++j) {
    const auto z = es.eigenvalues()(j);
    if (std::abs(z.imag()) <= 1e-8 * rscale) {
      // One Newton step on the original polynomial.
      double x = z.real();
      double p = 0.0, dp = 0.0;
      for (double a : c) {
        dp = dp * x + p;
        p = p * x + a;
      }
      if (dp != 0.0) x -= p / dp;
      roots.push_back(x);
    }
  }
  return roots;
}

ConfidenceInterval ci_normal(double theta_hat, double variance, double alpha, double z) {
  ConfidenceInterval ci;
  const double se = std::sqrt(std::max(0.0, variance));
  ci.lower = theta_hat - z * se;
  ci.upper = theta_hat + z * se;
  ci.alpha = alpha;
  ci.q = 0;
  ci.critical_value = z;
  ci.method = "normal";
  return ci;
}

ConfidenceInterval ci_closed_form_q1(double lambda, double b_hat, double theta_q, const Mat& Sigma, double z) {
  const double Vb = Sigma(0, 0), Vt = Sigma(1, 1), cov = Sigma(0, 1);
  if (!(Vb >= 0.0) || !(Vt >= 0.0)) fail_numerical("SingularConditional", "degenerate Sigma_1");
  ConfidenceInterval ci;
  ci.q = 1;
  ci.critical_value = z;
  ci.method = "closed_form_q1";
  const double sb = std::sqrt(Vb), st = std::sqrt(Vt);
  if (Vb == 0.0) {
    ci.lower = lambda * b_hat * b_hat + theta_q - z * st;
    ci.upper = lambda * b_hat * b_hat + theta_q + z * st;
    return ci;
  }
  const double r = Vt > 0.0 ? std::clamp(cov / (sb * st), -1.0, 1.0) : 0.0;
  const double omr = 1.0 - r * r;
  if (Vt == 0.0 || omr < 1e-12) {
    // The ellipse is a segment: b = b_hat + d, theta = theta_q + r (st / sb) d, |d| <= sb z.
    const double dmax = sb * z, slope = r * st / sb;
    std::vector<double> cand = {-dmax, dmax};
    if (lambda != 0.0) cand.push_back(std::clamp(-slope / (2.0 * lambda) - b_hat, -dmax, dmax));
    ci.lower = std::numeric_limits<double>::infinity();
    ci.upper = -std::numeric_limits<double>::infinity();
    for (double d : cand) {
      const double v = lambda * (b_hat + d) * (b_hat + d) + theta_q + slope * d;
      ci.lower = std::min(ci.lower, v);
      ci.upper = std::max(ci.upper, v);
    }
    ci.kappa = std::numeric_limits<double>::infinity();
    return ci;
  }
  const double sq = std::sqrt(omr);
  const double beta = 2.0 * lambda * sb / (st * sq);
  const double c0 = r / sq + beta * b_hat;
  const double z2 = z * z;
  const std::vector<double> coeffs = {beta * beta, 2.0 * c0 * beta, 1.0 + c0 * c0 - Vb * z2 * beta * beta,
                                      -2.0 * Vb * z2 * c0 * beta, -Vb * z2 * c0 * c0};
  const double dmax = sb * z;
  std::vector<double> cand = {-dmax, dmax};
  for (double d : real_poly_roots(coeffs)) {
    if (std::abs(d) <= dmax * (1.0 + 1e-12)) cand.push_back(std::clamp(d, -dmax, dmax));
  }
  double hi = -std::numeric_limits<double>::infinity(), lo = std::numeric_limits<double>::infinity();
  for (double d : cand) {
    const double b = b_hat + d;
    const double base = lambda * b * b + theta_q + r * (st / sb) * d;
    const double slack = std::sqrt(std::max(0.0, Vt * omr * (z2 - d * d / Vb)));
    hi = std::max(hi, base + slack);
    lo = std::min(lo, base - slack);
  }
  ci.lower = lo;
  ci.upper = hi;
  ci.kappa = 2.0 * std::abs(lambda) * Vb / (st * sq);
  return ci;
}

namespace {

Mat psd_sqrt_factor(const Mat& S) {
  Eigen::LLT<Mat> llt(S);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Mat> es(S);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

// Maximizes u'Hu + g'u over the unit sphere by the minorize-maximize update u <- normalize(2(H + mu I)u + g).
double sphere_max(const Mat& H, const Vec& g, Vec u) {
  Eigen::SelfAdjointEigenSolver<Mat> es(H);
  const double mu = std::max(0.0, -es.eigenvalues().minCoeff()) + 1e-12 * (1.0 + es.eigenvalues().cwiseAbs().maxCoeff());
  u.normalize();
  double f = u.dot(H * u) + g.dot(u);
  for (int it = 0; it < 200000; ++it) {
    Vec v = 2.0 * (H * u + mu * u) + g;
    const double nv = v.norm();
    if (nv == 0.0) break;
    v /= nv;
    const double fn = v.dot(H * v) + g.dot(v);
    const bool done = std::abs(fn - f) <= 1e-16 * (1.0 + std::abs(f)) && (v - u).norm() < 1e-12;
    u = v;
    f = std::max(f, fn);
    if (done) break;
  }
  return u.dot(H * u) + g.dot(u);
}

}  // namespace

ConfidenceInterval ci_ellipsoid(const Vec& lambdas, const Vec& b_hat, double theta_q, const Mat& Sigma, double z,
                                std::uint64_t seed) {
  const int q = static_cast<int>(lambdas.size());
  const int m = q + 1;
  const Mat L = psd_sqrt_factor(Sigma);
  const Mat Lb = L.topRows(q);
  const Vec lt = L.row(q).transpose();
  const Mat H = z * z * Lb.transpose() * lambdas.asDiagonal() * Lb;
  const Vec g = 2.0 * z * Lb.transpose() * lambdas.cwiseProduct(b_hat) + z * lt;
  const double c = lambdas.dot(b_hat.cwiseAbs2()) + theta_q;
  std::vector<Vec> starts;
  for (int j = 0; j < m; ++j) {
    starts.push_back(Vec::Unit(m, j));
    starts.push_back(-Vec::Unit(m, j));
  }
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(q), 0xe11);
  std::normal_distribution<double> nd;
  for (int s = 0; s < 8; ++s) {
    Vec u(m);
    for (int j = 0; j < m; ++j) u(j) = nd(rng);
    starts.push_back(u);
  }
  double hi = -std::numeric_limits<double>::infinity(), lo = std::numeric_limits<double>::infinity();
  for (const Vec& u0 : starts) {
    hi = std::max(hi, c + sphere_max(H, g, u0));
    lo = std::min(lo, c - sphere_max(-H, -g, u0));
  }
  if (!std::isfinite(hi) || !std::isfinite(lo)) fail_numerical("OptFailed", "ellipsoid optimization failed");
  // The ellipsoid centre is feasible; guard against a non-converged run.
  hi = std::max(hi, c);
  lo = std::min(lo, c);
  ConfidenceInterval ci;
  ci.lower = lo;
  ci.upper = hi;
  ci.q = q;
  ci.critical_value = z;
  ci.method = "ellipsoid_opt";
  return ci;
}

ConfidenceInterval confidence_interval(double theta_hat, const Vec& lambdas, const WeakIdVariance& v, double z,
                                       double alpha) {
  ConfidenceInterval ci;
  if (v.q == 0) {
    ci = ci_normal(theta_hat, v.Sigma(0, 0), alpha, z);
  } else if (v.q == 1) {
    ci = ci_closed_form_q1(lambdas(0), v.b_hat(0), v.theta_q, v.Sigma, z);
  } else {
    ci = ci_ellipsoid(lambdas.head(v.q), v.b_hat, v.theta_q, v.Sigma, z);
  }
  ci.alpha = alpha;
  ci.q = v.q;
  if (v.q > 0) {
    try {
      ci.kappa = curvature(lambdas.head(v.q), v.Sigma);
    } catch (const Error&) {
      ci.kappa = std::numeric_limits<double>::infinity();
    }
  }
  return ci;
}

void widen(ConfidenceInterval& ci, double amount) {
  ci.lower -= amount;
  ci.upper += amount;
  ci.jla_widening += amount;
}

}  // namespace kss
