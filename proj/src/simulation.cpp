#include "kss/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>

#include <json.hpp>

#include "kss/error.hpp"
#include "kss/stats.hpp"

namespace kss {

void validate(const SbmConfig& cfg) {
  if (cfg.J < 4) fail_validation("InvalidConfig", "SBM needs J >= 4");
  if (cfg.N < cfg.J) fail_validation("InvalidConfig", "SBM needs N >= J");
  if (!(cfg.p_b > 0.0 && cfg.p_b <= 0.5)) fail_validation("InvalidConfig", "p_b must lie in (0, 0.5]");
  if (cfg.blocks < 2 || cfg.J < 2 * cfg.blocks) fail_validation("InvalidConfig", "need at least two firms per block");
}

Panel panel_from_graph(const MobilityGraph& g) {
  Panel p;
  for (std::size_t w = 0; w < g.workers.size(); ++w) {
    const auto& e = g.workers[w];
    const std::string id = std::to_string(w);
    p.rows.push_back({id, std::to_string(e.from), 1, 0.0, {}});
    p.rows.push_back({id, std::to_string(e.to), 2, 0.0, {}});
  }
  p.index();
  return p;
}

SbmDraw gen_sbm(const SbmConfig& cfg) {
  validate(cfg);
  const int m = cfg.blocks;
  std::vector<int> block(cfg.J);
  std::vector<std::vector<int>> members(m);
  for (int j = 0; j < cfg.J; ++j) {
    block[j] = static_cast<int>(static_cast<long>(j) * m / cfg.J);
    members[block[j]].push_back(j);
  }
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Rng rng = make_rng(cfg.seed, 0x5b3, static_cast<std::uint64_t>(attempt));
    std::uniform_real_distribution<double> unif;
    std::vector<std::pair<int, int>> edges;
    int between = 0;
    for (int g = 0; g < cfg.N; ++g) {
      const bool cross = unif(rng) < cfg.p_b;
      int from, to;
      if (cross) {
        const int b1 = std::uniform_int_distribution<int>(0, m - 1)(rng);
        int b2 = std::uniform_int_distribution<int>(0, m - 2)(rng);
        if (b2 >= b1) ++b2;
        from = members[b1][std::uniform_int_distribution<int>(0, static_cast<int>(members[b1].size()) - 1)(rng)];
        to = members[b2][std::uniform_int_distribution<int>(0, static_cast<int>(members[b2].size()) - 1)(rng)];
        ++between;
      } else {
        const int b = std::uniform_int_distribution<int>(0, m - 1)(rng);
        const int sz = static_cast<int>(members[b].size());
        from = members[b][std::uniform_int_distribution<int>(0, sz - 1)(rng)];
        do {
          to = members[b][std::uniform_int_distribution<int>(0, sz - 1)(rng)];
        } while (to == from);
      }
      edges.emplace_back(from, to);
    }
    MobilityGraph g = make_mobility_graph(cfg.J, edges);
    if (static_cast<int>(g.firms.size()) != cfg.J || !is_connected(g)) continue;
    SbmDraw d;
    d.graph = std::move(g);
    d.panel = panel_from_graph(d.graph);
    d.block = block;
    d.between_moves = between;
    d.attempts = attempt + 1;
    return d;
  }
  fail_numerical("DisconnectedDraw", "no connected SBM draw within the retry cap");
}

Vec block_firm_effects(const SbmDraw& draw, const std::vector<double>& block_means, double within_sd,
                       std::uint64_t seed) {
  const int J = static_cast<int>(draw.block.size());
  Rng rng = make_rng(seed, 0xf1e);
  std::normal_distribution<double> nd;
  Vec psi(J);
  for (int j = 0; j < J; ++j) {
    const int b = draw.block[j];
    psi(j) = (b < static_cast<int>(block_means.size()) ? block_means[b] : 0.0) + within_sd * nd(rng);
  }
  return psi;
}

Vec fd_coefficients(const DesignMatrix& design, const Vec& firm_effects) {
  Vec beta = Vec::Zero(design.k());
  const double base = design.normalized_firm >= 0 ? firm_effects(design.normalized_firm) : 0.0;
  for (std::size_t j = 0; j < design.firm_col.size(); ++j) {
    if (design.firm_col[j] >= 0) beta(design.firm_col[j]) = firm_effects(static_cast<int>(j)) - base;
  }
  return beta;
}

HeteroModel HeteroModel::estimated() { return {-3.3441, 1.3951, -0.0037, -0.0012, -0.0086}; }

HeteroModel HeteroModel::homoscedastic(double variance) {
  if (!(variance > 0.0)) fail_validation("InvalidConfig", "variance must be positive");
  return {std::log(variance), 0.0, 0.0, 0.0, 0.0};
}

Vec HeteroModel::variances(const Vec& B, const Vec& P, const Vec& L2, const Vec& L1) const {
  Vec v(B.size());
  for (int i = 0; i < B.size(); ++i) {
    v(i) = std::exp(a0 + a1 * B(i) + a2 * P(i) + a3 * std::log(L2(i)) + a4 * std::log(L1(i)));
  }
  return v;
}

Vec fd_variances(const DesignMatrix& design, const LeverageSet& lev, const std::string& form, const HeteroModel& het) {
  if (design.kind != ModelKind::FirstDifference) fail_validation("InvalidConfig", "first-difference design required");
  const int n = design.n();
  int J = 0;
  for (int i = 0; i < n; ++i) J = std::max({J, design.row_from[i] + 1, design.row_to[i] + 1});
  std::vector<double> deg(J, 0.0);
  for (int i = 0; i < n; ++i) {
    deg[design.row_from[i]] += 1.0;
    if (design.row_to[i] != design.row_from[i]) deg[design.row_to[i]] += 1.0;
  }
  Vec L1(n), L2(n);
  for (int i = 0; i < n; ++i) {
    L1(i) = deg[design.row_from[i]];
    L2(i) = deg[design.row_to[i]];
  }
  return het.variances(lev.B_of(form), lev.P, L2, L1);
}

Vec gen_errors(const Vec& variances, const ErrorSpec& spec, std::uint64_t seed, std::uint64_t rep) {
  Rng rng = make_rng(seed, 0xe77, rep);
  const int n = static_cast<int>(variances.size());
  Vec e(n);
  if (spec.law == ErrorLaw::Normal) {
    std::normal_distribution<double> nd;
    for (int i = 0; i < n; ++i) e(i) = std::sqrt(variances(i)) * nd(rng);
  } else {
    if (!(spec.df > 4.0)) fail_validation("InvalidConfig", "scaled t needs df > 4");
    std::student_t_distribution<double> td(spec.df);
    const double scale = std::sqrt((spec.df - 2.0) / spec.df);
    for (int i = 0; i < n; ++i) e(i) = std::sqrt(variances(i)) * scale * td(rng);
  }
  return e;
}

Vec gen_wages(const DesignMatrix& design, const Vec& beta, const Vec& variances, const ErrorSpec& spec,
              std::uint64_t seed, std::uint64_t rep) {
  if (variances.size() != design.n() || beta.size() != design.k()) {
    fail_validation("DimensionMismatch", "beta or variances do not match the design");
  }
  return design.X * beta + gen_errors(variances, spec, seed, rep);
}

std::vector<double> weighted_chi2_draws(const Vec& lambdas, double sigma2, long draws, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xc21);
  std::normal_distribution<double> nd;
  std::vector<double> out(draws);
  for (long d = 0; d < draws; ++d) {
    double s = 0.0;
    for (int l = 0; l < lambdas.size(); ++l) {
      const double u = nd(rng);
      s += lambdas(l) * (u * u - 1.0);
    }
    out[d] = sigma2 * s;
  }
  return out;
}

namespace {

McMethodSummary summarize(const std::vector<double>& x, double truth) {
  McMethodSummary s;
  s.mean = mean(x);
  s.bias = s.mean - truth;
  s.sd = std::sqrt(variance(x));
  s.bias_se = s.sd / std::sqrt(static_cast<double>(x.size()));
  return s;
}

}  // namespace

McReport monte_carlo(const McScenario& sc, long reps) {
  if (reps < 100) fail_validation("InvalidConfig", "Monte Carlo needs at least 100 replications");
  if (!sc.design || !sc.solver || !sc.form || !sc.plan) fail_validation("InvalidConfig", "incomplete scenario");
  const DesignMatrix& d = *sc.design;
  const int n = d.n(), k = d.k();
  int qmax = 0;
  for (int q : sc.qs) qmax = std::max(qmax, q);
  const InferenceModel model(d, *sc.solver, *sc.form, *sc.plan, qmax);
  const DenseKernel& K = model.kernel();
  std::vector<int> qs;
  for (int q : sc.qs) {
    if (q <= model.eig().q_max()) qs.push_back(q);
  }
  std::vector<std::unique_ptr<CriticalValueTable>> tables;
  for (int q : qs) {
    tables.push_back(q > 0 ? std::make_unique<CriticalValueTable>(sc.alpha, q, sc.cv_draws, sc.seed) : nullptr);
  }
  const double z0 = normal_quantile(1.0 - sc.alpha / 2.0);
  const double trB = K.B.trace();

  McReport r;
  r.name = sc.name;
  r.reps = reps;
  r.theta = sc.form->quad(sc.beta);
  r.pi_bias_theory = K.B.diagonal().dot(sc.variances);
  r.qs = qs;
  r.shares.assign(model.eig().shares.data(), model.eig().shares.data() + model.eig().shares.size());
  std::vector<double> kss(reps), pi(reps), ho(reps), vh(reps), sqv(reps);
  std::vector<long> covered(qs.size(), 0);
  for (long rep = 0; rep < reps; ++rep) {
    const Vec y = gen_wages(d, sc.beta, sc.variances, sc.errors, sc.seed, static_cast<std::uint64_t>(rep));
    McReplication m;
    const Vec By = K.B * y;
    m.theta_pi = y.dot(By);
    const double rss = y.dot(y - K.P * y);
    m.theta_ho = m.theta_pi - trB * rss / (n - k);
    m.theta_kss = model.theta(y);
    for (std::size_t j = 0; j < qs.size(); ++j) {
      const int q = qs[j];
      const WeakIdVariance w = model.sigma_q(y, q);
      if (q == 0) m.vhat = w.Sigma(0, 0);
      double kappa = 0.0, z = z0;
      if (q > 0) {
        try {
          kappa = curvature(model.eig().lambdas.head(q), w.Sigma);
        } catch (const Error&) {
          kappa = std::numeric_limits<double>::infinity();
        }
        z = tables[j]->z(kappa);
      }
      ConfidenceInterval ci;
      try {
        ci = confidence_interval(m.theta_kss, model.eig().lambdas, w, z, sc.alpha);
      } catch (const Error&) {
        ci = ci_normal(m.theta_kss, model.vhat(y).value, sc.alpha, std::sqrt(chi2_quantile(1.0 - sc.alpha, q + 1.0)));
      }
      m.lower.push_back(ci.lower);
      m.upper.push_back(ci.upper);
      m.kappa.push_back(kappa);
      if (ci.contains(r.theta)) ++covered[j];
    }
    if (std::find(qs.begin(), qs.end(), 0) == qs.end()) m.vhat = model.vhat(y).value;
    kss[rep] = m.theta_kss;
    pi[rep] = m.theta_pi;
    ho[rep] = m.theta_ho;
    vh[rep] = m.vhat;
    sqv[rep] = std::sqrt(m.vhat);
    r.draws.push_back(std::move(m));
  }
  r.kss = summarize(kss, r.theta);
  r.pi = summarize(pi, r.theta);
  r.ho = summarize(ho, r.theta);
  r.mean_vhat = mean(vh);
  r.var_theta = variance(kss);
  r.variance_ratio = r.mean_vhat / r.var_theta;
  r.se_ratio = mean(sqv) / std::sqrt(r.var_theta);
  for (long c : covered) r.coverage.push_back(static_cast<double>(c) / static_cast<double>(reps));
  r.skewness = skewness(kss);
  const KsResult ks = ks_normal(kss, r.kss.mean, r.kss.sd);
  r.ks_stat = ks.statistic;
  r.ks_p = ks.p_value;
  return r;
}

void write_mc_csv(const McReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail_validation("IoError", "cannot write " + path);
  out.precision(17);
  out << "rep,theta_kss,theta_pi,theta_ho,vhat";
  for (int q : r.qs) out << ",lower_q" << q << ",upper_q" << q << ",kappa_q" << q;
  out << "\n";
  for (std::size_t i = 0; i < r.draws.size(); ++i) {
    const auto& m = r.draws[i];
    out << i << ',' << m.theta_kss << ',' << m.theta_pi << ',' << m.theta_ho << ',' << m.vhat;
    for (std::size_t j = 0; j < r.qs.size(); ++j) out << ',' << m.lower[j] << ',' << m.upper[j] << ',' << m.kappa[j];
    out << "\n";
  }
}

void write_mc_json(const McReport& r, const std::string& path) {
  auto method = [](const McMethodSummary& s) {
    return nlohmann::ordered_json{{"mean", s.mean}, {"bias", s.bias}, {"bias_se", s.bias_se}, {"sd", s.sd}};
  };
  nlohmann::ordered_json j;
  j["schema_version"] = "1.0";
  j["scenario"] = r.name;
  j["reps"] = r.reps;
  j["theta"] = r.theta;
  j["methods"] = {{"PI", method(r.pi)}, {"HO", method(r.ho)}, {"KSS", method(r.kss)}};
  j["pi_bias_theory"] = r.pi_bias_theory;
  j["mean_vhat"] = r.mean_vhat;
  j["var_theta"] = r.var_theta;
  j["variance_ratio"] = r.variance_ratio;
  j["se_ratio"] = r.se_ratio;
  nlohmann::ordered_json cov = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < r.qs.size(); ++i) cov["q" + std::to_string(r.qs[i])] = r.coverage[i];
  j["coverage"] = cov;
  j["eigen_shares"] = r.shares;
  j["shape"] = {{"skewness", r.skewness}, {"ks_stat", r.ks_stat}, {"ks_p", r.ks_p}};
  std::ofstream out(path);
  if (!out) fail_validation("IoError", "cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace kss
