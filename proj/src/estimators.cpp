#include "kss/estimators.hpp"

#include <algorithm>
#include <map>

#include "kss/error.hpp"
#include "kss/sketch.hpp"

namespace kss {

Vec sigma2_leave_out(const Vec& y, const FitResult& fit, const LeverageSet& lev, double delta) {
  check_leverage(lev, delta);
  return y.cwiseProduct(fit.residuals).cwiseQuotient(lev.M);
}

Vec sigma2_hc2(const FitResult& fit, const LeverageSet& lev, double delta) {
  check_leverage(lev, delta);
  return fit.residuals.cwiseAbs2().cwiseQuotient(lev.M);
}

double theta_plugin(const QuadraticForm& form, const Vec& beta) { return form.quad(beta); }

VarianceComponentEstimate plugin_estimate(const QuadraticForm& form, const Vec& beta) {
  VarianceComponentEstimate e;
  e.method = "PI";
  e.form = form.name;
  e.plugin = form.quad(beta);
  e.theta = e.plugin;
  return e;
}

namespace {

int count_negative(const Vec& s) {
  int c = 0;
  for (int i = 0; i < s.size(); ++i) c += s(i) < 0.0 ? 1 : 0;
  return c;
}

}  // namespace

VarianceComponentEstimate theta_leave_out(const Vec& y, const FitResult& fit, const LeverageSet& lev,
                                          const QuadraticForm& form, double delta) {
  const Vec s = sigma2_leave_out(y, fit, lev, delta);
  VarianceComponentEstimate e;
  e.method = "KSS";
  e.form = form.name;
  e.plugin = form.quad(fit.beta);
  e.correction = lev.B_of(form.name).dot(s);
  e.theta = e.plugin - e.correction;
  e.negative_sigma2 = count_negative(s);
  return e;
}

VarianceComponentEstimate theta_leave_out_jla(const Vec& y, const FitResult& fit, const LeverageSet& sketched,
                                              const QuadraticForm& form) {
  const Vec s = jla_sigma2(y, fit, sketched);
  VarianceComponentEstimate e;
  e.method = "KSS_JLA";
  e.form = form.name;
  e.plugin = form.quad(fit.beta);
  e.correction = sketched.B_of(form.name).dot(s);
  e.theta = e.plugin - e.correction;
  e.negative_sigma2 = count_negative(s);
  return e;
}

double theta_leave_out_covariance(const Vec& y, const DesignMatrix& design, const GramSolver& solver,
                                  const QuadraticForm& form, const FitResult& fit, const LeverageSet& lev) {
  check_leverage(lev);
  const Vec Ab = form.apply(fit.beta);
  double s = 0.0;
  for (int i = 0; i < design.n(); ++i) {
    const Vec z = solver.solve(Vec(design.X.row(i).transpose()));
    const Vec xt = form.apply(z);
    // x_tilde' beta_{-i} = x_tilde' beta - x_tilde' z e_i / M_ii
    s += y(i) * (z.dot(Ab) - xt.dot(z) * fit.residuals(i) / lev.M(i));
  }
  return s;
}

VarianceComponentEstimate theta_homosc(const Vec& y, const FitResult& fit, const LeverageSet& lev,
                                       const QuadraticForm& form, int k) {
  const int n = static_cast<int>(y.size());
  if (n <= k) fail_validation("DegenerateDof", "homoscedastic estimator needs n > k");
  const double s2 = fit.residuals.squaredNorm() / (n - k);
  VarianceComponentEstimate e;
  e.method = "HO";
  e.form = form.name;
  e.plugin = form.quad(fit.beta);
  e.correction = lev.B_of(form.name).sum() * s2;
  e.theta = e.plugin - e.correction;
  return e;
}

VarianceComponentEstimate theta_cluster(const Vec& y, const DesignMatrix& design, const GramSolver& solver,
                                        const QuadraticForm& form, const std::vector<int>& clusters, double delta) {
  const int n = design.n();
  if (static_cast<int>(clusters.size()) != n) fail_validation("DimensionMismatch", "cluster labels length");
  const FitResult f = fit(design, solver, y);
  std::map<int, std::vector<int>> members;
  for (int i = 0; i < n; ++i) members[clusters[i]].push_back(i);
  double corr = 0.0;
  for (const auto& [c, rows] : members) {
    const int m = static_cast<int>(rows.size());
    Mat Xc(design.k(), m);
    for (int a = 0; a < m; ++a) Xc.col(a) = Vec(design.X.row(rows[a]).transpose());
    const Mat Zc = solver.solve(Xc);
    const Mat Pc = Xc.transpose() * Zc;
    Mat AZ(design.k(), m);
    for (int a = 0; a < m; ++a) AZ.col(a) = form.apply(Vec(Zc.col(a)));
    const Mat Bc = Zc.transpose() * AZ;
    const Mat IP = Mat::Identity(m, m) - Pc;
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (IP + IP.transpose()));
    if (es.eigenvalues().minCoeff() < delta) {
      fail_numerical("ClusterLeverageOne", "cluster " + std::to_string(c) + " has a unit-leverage direction");
    }
    Vec yc(m), ec(m);
    for (int a = 0; a < m; ++a) {
      yc(a) = y(rows[a]);
      ec(a) = f.residuals(rows[a]);
    }
    corr += yc.dot(Bc * IP.ldlt().solve(ec));
  }
  VarianceComponentEstimate e;
  e.method = "KSS_cluster";
  e.form = form.name;
  e.plugin = form.quad(f.beta);
  e.correction = corr;
  e.theta = e.plugin - corr;
  return e;
}

DesignMatrix within_worker(const DesignMatrix& design, Vec& y) {
  const int n = design.n();
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < n; ++i) groups[design.row_worker[i]].push_back(i);
  std::vector<int> newcol(design.k(), -1);
  DesignMatrix d;
  d.kind = design.kind;
  d.normalized_firm = design.normalized_firm;
  int k = 0;
  for (int c = 0; c < design.k(); ++c) {
    if (design.roles[c] == Role::Person) continue;
    newcol[c] = k++;
    d.roles.push_back(design.roles[c]);
    d.labels.push_back(design.labels[c]);
  }
  Mat X = Mat::Zero(n, k);
  for (int i = 0; i < n; ++i) {
    for (SpMat::InnerIterator it(design.X, i); it; ++it) {
      if (newcol[it.col()] >= 0) X(i, newcol[it.col()]) = it.value();
    }
  }
  for (const auto& [g, rows] : groups) {
    Eigen::RowVectorXd mx = Eigen::RowVectorXd::Zero(k);
    double my = 0.0;
    for (int r : rows) {
      mx += X.row(r);
      my += y(r);
    }
    mx /= static_cast<double>(rows.size());
    my /= static_cast<double>(rows.size());
    for (int r : rows) {
      X.row(r) -= mx;
      y(r) -= my;
    }
  }
  d.X = X.sparseView(1.0, 1e-14);
  d.X.makeCompressed();
  d.worker_col.assign(design.worker_col.size(), -1);
  d.firm_col.resize(design.firm_col.size());
  for (std::size_t j = 0; j < design.firm_col.size(); ++j) {
    d.firm_col[j] = design.firm_col[j] >= 0 ? newcol[design.firm_col[j]] : -1;
  }
  d.slope_col.assign(design.slope_col.size(), -1);
  d.py_worker = design.py_worker;
  d.py_firm = design.py_firm;
  d.py_weight = design.py_weight;
  d.row_worker = design.row_worker;
  d.row_period = design.row_period;
  d.row_from = design.row_from;
  d.row_to = design.row_to;
  return d;
}

std::string jackknife_name(JackknifeVariant v) {
  switch (v) {
    case JackknifeVariant::JK: return "JK";
    case JackknifeVariant::PJK: return "PJK";
    case JackknifeVariant::SPJK: return "SPJK";
  }
  return "unknown";
}

struct JackknifeFamily::Impl {
  const QuadraticForm* form;
  int n = 0;
  std::vector<int> period_values;
  std::unique_ptr<GramSolver> full;
  SpMat X;
  Mat Z;   // rows z_i' for the full design
  Vec M;   // 1 - P_ii
  std::vector<std::vector<int>> drop_rows;  // per period
  std::vector<std::unique_ptr<GramSolver>> loo_period;
  std::vector<SpMat> X_loo_period;
  std::vector<std::vector<int>> half_rows;
  std::vector<std::unique_ptr<GramSolver>> half;
  std::vector<SpMat> X_half;
};

namespace {

SpMat select_rows(const SpMat& X, const std::vector<int>& rows) {
  std::vector<Triplet> t;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (SpMat::InnerIterator it(X, rows[r]); it; ++it) t.emplace_back(static_cast<int>(r), it.col(), it.value());
  }
  SpMat S(static_cast<int>(rows.size()), X.cols());
  S.setFromTriplets(t.begin(), t.end());
  S.makeCompressed();
  return S;
}

Vec select(const Vec& y, const std::vector<int>& rows) {
  Vec out(static_cast<int>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out(r) = y(rows[r]);
  return out;
}

}  // namespace

JackknifeFamily::JackknifeFamily(const DesignMatrix& design, const QuadraticForm& form, std::vector<int> periods)
    : impl_(std::make_unique<Impl>()) {
  Impl& m = *impl_;
  m.form = &form;
  m.n = design.n();
  m.X = design.X;
  if (static_cast<int>(periods.size()) != m.n) fail_validation("DimensionMismatch", "period labels length");
  m.full = std::make_unique<GramSolver>(design);
  m.Z = solve_rows(design, *m.full);
  m.M.resize(m.n);
  for (int i = 0; i < m.n; ++i) m.M(i) = 1.0 - design.X.row(i).dot(m.Z.row(i).transpose());
  m.period_values = periods;
  std::sort(m.period_values.begin(), m.period_values.end());
  m.period_values.erase(std::unique(m.period_values.begin(), m.period_values.end()), m.period_values.end());
  const int T = static_cast<int>(m.period_values.size());
  if (T < 2) return;
  auto rows_where = [&](auto pred) {
    std::vector<int> r;
    for (int i = 0; i < m.n; ++i) {
      if (pred(periods[i])) r.push_back(i);
    }
    return r;
  };
  for (int t : m.period_values) {
    m.drop_rows.push_back(rows_where([&](int p) { return p != t; }));
    m.X_loo_period.push_back(select_rows(design.X, m.drop_rows.back()));
    m.loo_period.push_back(std::make_unique<GramSolver>(make_generic_design(m.X_loo_period.back())));
  }
  if (T % 2 == 0) {
    const int cut = m.period_values[T / 2 - 1];
    m.half_rows.push_back(rows_where([&](int p) { return p <= cut; }));
    m.half_rows.push_back(rows_where([&](int p) { return p > cut; }));
    for (const auto& r : m.half_rows) {
      m.X_half.push_back(select_rows(design.X, r));
      m.half.push_back(std::make_unique<GramSolver>(make_generic_design(m.X_half.back())));
    }
  }
}

JackknifeFamily::~JackknifeFamily() = default;
JackknifeFamily::JackknifeFamily(JackknifeFamily&&) noexcept = default;
JackknifeFamily& JackknifeFamily::operator=(JackknifeFamily&&) noexcept = default;

int JackknifeFamily::num_periods() const { return static_cast<int>(impl_->period_values.size()); }

VarianceComponentEstimate JackknifeFamily::estimate(JackknifeVariant v, const Vec& y) const {
  const Impl& m = *impl_;
  const QuadraticForm& A = *m.form;
  const Vec beta = m.full->solve(Vec(m.X.transpose() * y));
  const double pi = A.quad(beta);
  const int T = num_periods();
  VarianceComponentEstimate e;
  e.method = jackknife_name(v);
  e.form = A.name;
  e.plugin = pi;
  auto refit = [&](const GramSolver& s, const SpMat& Xs, const std::vector<int>& rows) {
    return A.quad(s.solve(Vec(Xs.transpose() * select(y, rows))));
  };
  switch (v) {
    case JackknifeVariant::JK: {
      const Vec e_res = y - m.X * beta;
      double sum = 0.0;
      for (int i = 0; i < m.n; ++i) {
        if (m.M(i) < kDefaultDelta) fail_numerical("LeverageOne", "jackknife needs P_ii < 1");
        sum += A.quad(beta - m.Z.row(i).transpose() * (e_res(i) / m.M(i)));
      }
      e.theta = m.n * pi - (m.n - 1.0) / m.n * sum;
      break;
    }
    case JackknifeVariant::PJK: {
      if (T < 2) fail_validation("InsufficientPeriods", "panel jackknife needs at least two periods");
      double sum = 0.0;
      for (int t = 0; t < T; ++t) sum += refit(*m.loo_period[t], m.X_loo_period[t], m.drop_rows[t]);
      e.theta = T * pi - (T - 1.0) / T * sum;
      break;
    }
    case JackknifeVariant::SPJK: {
      if (T < 2) fail_validation("InsufficientPeriods", "split-panel jackknife needs at least two periods");
      if (T % 2 != 0) fail_validation("OddT", "split-panel jackknife needs an even number of periods");
      const double h1 = refit(*m.half[0], m.X_half[0], m.half_rows[0]);
      const double h2 = refit(*m.half[1], m.X_half[1], m.half_rows[1]);
      e.theta = 2.0 * pi - 0.5 * (h1 + h2);
      break;
    }
  }
  e.correction = e.plugin - e.theta;
  return e;
}

VarianceComponentEstimate theta_jackknife(const Vec& y, const DesignMatrix& design, const QuadraticForm& form,
                                          JackknifeVariant v, const std::vector<int>& periods) {
  if (v == JackknifeVariant::SPJK) {
    std::vector<int> p = periods;
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
    if (p.size() >= 2 && p.size() % 2 != 0) fail_validation("OddT", "split-panel jackknife needs even T");
  }
  return JackknifeFamily(design, form, periods).estimate(v, y);
}

const AkmComponent& AkmDecomposition::get(const std::string& name) const {
  for (const auto& c : components) {
    if (c.name == name) return c;
  }
  fail_validation("UnknownForm", "no component " + name);
}

AkmDecomposition decompose_akm(const Vec& y, const FitResult& fit, const LeverageSet& lev,
                               const std::vector<const QuadraticForm*>& forms, int k, double total_variance) {
  AkmDecomposition d;
  d.total_variance = total_variance;
  for (const auto* f : forms) {
    AkmComponent c;
    c.name = f->name;
    c.pi = plugin_estimate(*f, fit.beta);
    c.ho = theta_homosc(y, fit, lev, *f, k);
    c.kss = theta_leave_out(y, fit, lev, *f);
    if (f->name == "coefficient_of_determination") {
      if (!(total_variance > 0.0)) fail_validation("DegenerateOutcome", "outcome variance is zero");
      for (auto* e : {&c.pi, &c.ho, &c.kss}) {
        e->theta /= total_variance;
        e->plugin /= total_variance;
        e->correction /= total_variance;
      }
    }
    d.components.push_back(std::move(c));
  }
  return d;
}

Mat vcov_beta(const DesignMatrix& design, const GramSolver& solver, const Vec& sigma2) {
  const int k = design.k();
  Mat meat = Mat::Zero(k, k);
  for (int i = 0; i < design.n(); ++i) {
    const Vec x = Vec(design.X.row(i).transpose());
    meat.noalias() += sigma2(i) * x * x.transpose();
  }
  const Mat left = solver.solve(meat);
  Mat V = solver.solve(Mat(left.transpose()));
  return 0.5 * (V + V.transpose());
}

double lincom_se(const DesignMatrix& design, const GramSolver& solver, const Vec& sigma2, const Vec& v) {
  const Vec u = solver.solve(v);
  const Vec xu = design.X * u;
  const double var = xu.cwiseAbs2().dot(sigma2);
  return std::sqrt(std::max(0.0, var));
}

}  // namespace kss
