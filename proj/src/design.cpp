#include "kss/design.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <numeric>

#include "kss/error.hpp"

namespace kss {

namespace {

std::optional<long long> parse_integer(const std::string& s) {
  long long v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

}  // namespace

bool id_less(const std::string& a, const std::string& b) {
  const auto ia = parse_integer(a), ib = parse_integer(b);
  if (ia && ib) return *ia < *ib;
  if (ia != ib && (ia || ib)) return ia.has_value();  // numeric ids sort first
  return a < b;
}

void Panel::index() {
  worker.assign(rows.size(), -1);
  firm.assign(rows.size(), -1);
  worker_ids.clear();
  firm_ids.clear();
  std::map<std::string, int> wmap;
  std::vector<std::string> fids;
  for (const auto& r : rows) fids.push_back(r.firm_id);
  std::sort(fids.begin(), fids.end(), id_less);
  fids.erase(std::unique(fids.begin(), fids.end()), fids.end());
  firm_ids = fids;
  std::map<std::string, int> fmap;
  for (int j = 0; j < static_cast<int>(firm_ids.size()); ++j) fmap[firm_ids[j]] = j;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto it = wmap.find(rows[i].worker_id);
    if (it == wmap.end()) {
      it = wmap.emplace(rows[i].worker_id, static_cast<int>(worker_ids.size())).first;
      worker_ids.push_back(rows[i].worker_id);
    }
    worker[i] = it->second;
    firm[i] = fmap[rows[i].firm_id];
  }
  group_index.assign(worker_ids.size(), {});
  for (std::size_t i = 0; i < rows.size(); ++i) group_index[worker[i]].push_back(static_cast<int>(i));
  for (auto& g : group_index) {
    std::stable_sort(g.begin(), g.end(), [&](int a, int b) { return rows[a].period < rows[b].period; });
    for (std::size_t t = 1; t < g.size(); ++t) {
      if (rows[g[t]].period == rows[g[t - 1]].period) {
        fail_validation("DuplicateObservation", "worker " + rows[g[t]].worker_id + " has two rows for period " +
                                                    std::to_string(rows[g[t]].period));
      }
    }
  }
}

Vec Panel::outcomes() const {
  Vec y(n());
  for (int i = 0; i < n(); ++i) y(i) = rows[i].outcome;
  return y;
}

std::vector<int> Panel::firm_sizes() const {
  std::vector<int> sizes(firm_ids.size(), 0);
  for (int f : firm) ++sizes[f];
  return sizes;
}

Panel Panel::subset(const std::vector<int>& keep_rows) const {
  Panel out;
  out.covariate_names = covariate_names;
  out.rows.reserve(keep_rows.size());
  for (int i : keep_rows) out.rows.push_back(rows[i]);
  out.index();
  return out;
}

SpMatCol DesignMatrix::gram() const {
  SpMatCol Xc = X;
  SpMatCol S = Xc.transpose() * Xc;
  S.makeCompressed();
  return S;
}

Vec DesignMatrix::xty(const Vec& y) const { return X.transpose() * y; }

DesignMatrix build_design(const Panel& panel, const ModelSpec& spec) {
  if (panel.n() == 0) fail_validation("EmptyPanel", "panel has no observations");
  if (panel.worker.size() != panel.rows.size()) fail_validation("PanelNotIndexed", "call Panel::index() first");
  const int N = panel.num_workers(), J = panel.num_firms();
  const bool akm = spec.kind == ModelKind::FirstDifference || spec.person_effects;
  for (int g = 0; g < N; ++g) {
    const int T = static_cast<int>(panel.group_index[g].size());
    if (akm && T < 2) fail_validation("SingletonWorker", "worker " + panel.worker_ids[g] + " has one observation");
    if (spec.kind == ModelKind::FirstDifference && T != 2) {
      fail_validation("NotTwoPeriods", "first differences need exactly two periods; worker " +
                                           panel.worker_ids[g] + " has " + std::to_string(T));
    }
  }

  DesignMatrix d;
  d.kind = spec.kind;
  if (spec.normalized_firm) {
    auto it = std::find(panel.firm_ids.begin(), panel.firm_ids.end(), *spec.normalized_firm);
    if (it == panel.firm_ids.end()) fail_validation("UnknownFirm", "normalized firm " + *spec.normalized_firm);
    d.normalized_firm = static_cast<int>(it - panel.firm_ids.begin());
  } else {
    const auto sizes = panel.firm_sizes();
    d.normalized_firm = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  }

  const int ncov = spec.include_covariates ? static_cast<int>(panel.covariate_names.size()) : 0;
  d.worker_col.assign(N, -1);
  d.firm_col.assign(J, -1);
  d.slope_col.assign(N, -1);
  int col = 0;
  if (spec.kind == ModelKind::Levels && spec.person_effects) {
    for (int g = 0; g < N; ++g) {
      d.worker_col[g] = col++;
      d.roles.push_back(Role::Person);
      d.labels.push_back("person:" + panel.worker_ids[g]);
    }
  }
  for (int j = 0; j < J; ++j) {
    if (j == d.normalized_firm) continue;
    d.firm_col[j] = col++;
    d.roles.push_back(Role::Firm);
    d.labels.push_back("firm:" + panel.firm_ids[j]);
  }
  const int cov0 = col;
  for (int c = 0; c < ncov; ++c) {
    d.roles.push_back(Role::Covariate);
    d.labels.push_back("covariate:" + panel.covariate_names[c]);
    ++col;
  }
  const int k = col;

  d.py_worker = panel.worker;
  d.py_firm = panel.firm;
  d.py_weight = Vec::Ones(panel.n());

  std::vector<Triplet> trips;
  if (spec.kind == ModelKind::Levels) {
    for (int i = 0; i < panel.n(); ++i) {
      const int g = panel.worker[i], j = panel.firm[i];
      if (d.worker_col[g] >= 0) trips.emplace_back(i, d.worker_col[g], 1.0);
      if (d.firm_col[j] >= 0) trips.emplace_back(i, d.firm_col[j], 1.0);
      for (int c = 0; c < ncov; ++c) {
        const double v = panel.rows[i].covariates.at(c);
        if (v != 0.0) trips.emplace_back(i, cov0 + c, v);
      }
      d.row_worker.push_back(g);
      d.row_period.push_back(panel.rows[i].period);
    }
    d.X.resize(panel.n(), k);
  } else {
    for (int g = 0; g < N; ++g) {
      const int r1 = panel.group_index[g][0], r2 = panel.group_index[g][1];
      const int j1 = panel.firm[r1], j2 = panel.firm[r2];
      if (j1 != j2) {
        if (d.firm_col[j2] >= 0) trips.emplace_back(g, d.firm_col[j2], 1.0);
        if (d.firm_col[j1] >= 0) trips.emplace_back(g, d.firm_col[j1], -1.0);
      }
      for (int c = 0; c < ncov; ++c) {
        const double v = panel.rows[r2].covariates.at(c) - panel.rows[r1].covariates.at(c);
        if (v != 0.0) trips.emplace_back(g, cov0 + c, v);
      }
      d.row_worker.push_back(g);
      d.row_period.push_back(panel.rows[r2].period);
      d.row_from.push_back(j1);
      d.row_to.push_back(j2);
    }
    d.X.resize(N, k);
  }
  d.X.setFromTriplets(trips.begin(), trips.end());
  d.X.makeCompressed();
  return d;
}

Vec design_outcome(const Panel& panel, const DesignMatrix& design) {
  if (design.kind != ModelKind::FirstDifference) return panel.outcomes();
  Vec dy(design.n());
  for (int g = 0; g < design.n(); ++g) {
    const auto& idx = panel.group_index[design.row_worker[g]];
    dy(g) = panel.rows[idx[1]].outcome - panel.rows[idx[0]].outcome;
  }
  return dy;
}

DesignMatrix make_generic_design(const SpMat& X) {
  DesignMatrix d;
  d.kind = ModelKind::Generic;
  d.X = X;
  d.X.makeCompressed();
  d.roles.assign(X.cols(), Role::Common);
  for (int c = 0; c < X.cols(); ++c) d.labels.push_back("x" + std::to_string(c));
  d.row_worker.resize(X.rows());
  std::iota(d.row_worker.begin(), d.row_worker.end(), 0);
  d.row_period.assign(X.rows(), 0);
  return d;
}

DesignMatrix make_generic_design(const Mat& X) {
  SpMat S = X.sparseView();
  return make_generic_design(S);
}

DesignMatrix make_group_design(const std::vector<int>& group) {
  const int n = static_cast<int>(group.size());
  const int N = n == 0 ? 0 : *std::max_element(group.begin(), group.end()) + 1;
  std::vector<Triplet> trips;
  for (int i = 0; i < n; ++i) trips.emplace_back(i, group[i], 1.0);
  SpMat X(n, N);
  X.setFromTriplets(trips.begin(), trips.end());
  DesignMatrix d = make_generic_design(X);
  d.roles.assign(N, Role::Person);
  d.worker_col.resize(N);
  std::iota(d.worker_col.begin(), d.worker_col.end(), 0);
  d.py_worker = group;
  d.py_firm.assign(n, -1);
  d.py_weight = Vec::Ones(n);
  d.row_worker = group;
  return d;
}

DesignMatrix make_random_coefficient_design(const std::vector<int>& group, const Vec& z) {
  const int n = static_cast<int>(group.size());
  const int N = n == 0 ? 0 : *std::max_element(group.begin(), group.end()) + 1;
  std::vector<Triplet> trips;
  for (int i = 0; i < n; ++i) {
    trips.emplace_back(i, group[i], 1.0);
    if (z(i) != 0.0) trips.emplace_back(i, N + group[i], z(i));
  }
  SpMat X(n, 2 * N);
  X.setFromTriplets(trips.begin(), trips.end());
  DesignMatrix d = make_generic_design(X);
  d.worker_col.resize(N);
  d.slope_col.resize(N);
  for (int g = 0; g < N; ++g) {
    d.roles[g] = Role::Person;
    d.roles[N + g] = Role::Slope;
    d.worker_col[g] = g;
    d.slope_col[g] = N + g;
  }
  d.py_worker = group;
  d.py_firm.assign(n, -1);
  d.py_weight = Vec::Ones(n);
  d.row_worker = group;
  return d;
}

Vec Factor::apply(const Vec& v) const {
  Vec r = E * v;
  if (center.size() > 0) r.array() -= center.dot(v);
  return r.cwiseProduct(row_scale);
}

Vec Factor::apply_t(const Vec& u) const {
  const Vec s = u.cwiseProduct(row_scale);
  Vec r = E.transpose() * s;
  if (center.size() > 0) r -= center * s.sum();
  return r;
}

Vec QuadraticForm::apply(const Vec& v) const {
  Vec r = G * v;
  for (const auto& t : terms) r += 0.5 * t.coef * (t.u * t.v.dot(v) + t.v * t.u.dot(v));
  return r;
}

double QuadraticForm::quad(const Vec& z) const {
  double r = z.dot(G * z);
  for (const auto& t : terms) r += t.coef * t.u.dot(z) * t.v.dot(z);
  return r;
}

double QuadraticForm::bilinear(const Vec& a, const Vec& b) const {
  double r = a.dot(G * b);
  for (const auto& t : terms) r += 0.5 * t.coef * (t.u.dot(a) * t.v.dot(b) + t.v.dot(a) * t.u.dot(b));
  return r;
}

double QuadraticForm::quad_via_factors(const Vec& z) const { return f1.apply(z).dot(f2.apply(z)); }

Mat QuadraticForm::dense() const {
  Mat A = Mat(G);
  for (const auto& t : terms) A += 0.5 * t.coef * (t.u * t.v.transpose() + t.v * t.u.transpose());
  return A;
}

QuadraticForm make_factor_form(std::string name, Factor f1, Factor f2, bool psd) {
  QuadraticForm q;
  q.name = std::move(name);
  q.k = f1.cols();
  q.psd = psd;
  const Vec W = f1.row_scale.cwiseProduct(f2.row_scale);
  SpMatCol E1 = f1.E, E2 = f2.E;
  SpMatCol G0 = E1.transpose() * W.asDiagonal() * E2;
  SpMatCol G0t = G0.transpose();
  q.G = 0.5 * (G0 + G0t);
  q.G.prune(0.0);
  q.G.makeCompressed();
  const bool c1 = f1.center.size() > 0 && f1.center.squaredNorm() > 0.0;
  const bool c2 = f2.center.size() > 0 && f2.center.squaredNorm() > 0.0;
  const Vec a1 = E1.transpose() * W, a2 = E2.transpose() * W;
  if (c2) q.terms.push_back({-1.0, a1, f2.center});
  if (c1) q.terms.push_back({-1.0, f1.center, a2});
  if (c1 && c2) q.terms.push_back({W.sum(), f1.center, f2.center});
  q.rank_hint = q.k;
  q.f1 = std::move(f1);
  q.f2 = std::move(f2);
  return q;
}

QuadraticForm make_custom_form(std::string name, const SpMatCol& A) {
  const int k = static_cast<int>(A.rows());
  Factor f1{"custom_A", SpMat(A), Vec(), Vec::Ones(k)};
  SpMat I(k, k);
  I.setIdentity();
  Factor f2{"identity", I, Vec(), Vec::Ones(k)};
  return make_factor_form(std::move(name), std::move(f1), std::move(f2), false);
}

QuadraticForm make_custom_form(std::string name, const Mat& A) {
  SpMatCol S = A.sparseView();
  return make_custom_form(std::move(name), S);
}

std::string estimand_name(EstimandKind kind) {
  switch (kind) {
    case EstimandKind::VarFirm: return "var_firm";
    case EstimandKind::CovPersonFirm: return "cov_person_firm";
    case EstimandKind::VarPerson: return "var_person";
    case EstimandKind::CoefficientOfDetermination: return "coefficient_of_determination";
    case EstimandKind::AnovaGroupVariance: return "anova_group_variance";
    case EstimandKind::RandomCoefficientVariance: return "random_coefficient_variance";
    case EstimandKind::Custom: return "custom";
  }
  return "unknown";
}

namespace {

// Person-year weighted indicator factor over the columns given by col_of(record).
template <class ColOf>
Factor indicator_factor(const DesignMatrix& d, const std::string& id, ColOf col_of, bool centered) {
  const int np = static_cast<int>(d.py_worker.size());
  if (np == 0) fail_validation("LabelMismatch", "design carries no person-year records");
  std::vector<Triplet> trips;
  for (int i = 0; i < np; ++i) {
    const int c = col_of(i);
    if (c >= 0) trips.emplace_back(i, c, 1.0);
  }
  Factor f;
  f.id = id;
  f.E.resize(np, d.k());
  f.E.setFromTriplets(trips.begin(), trips.end());
  f.E.makeCompressed();
  const Vec w = d.py_weight.size() == np ? d.py_weight : Vec::Ones(np);
  const double W = w.sum();
  f.row_scale = (w / W).cwiseSqrt();
  if (centered) {
    f.center = (SpMatCol(f.E).transpose() * w) / W;
  }
  return f;
}

bool has_role(const DesignMatrix& d, Role r) { return std::find(d.roles.begin(), d.roles.end(), r) != d.roles.end(); }

}  // namespace

QuadraticForm build_quadratic_form(const DesignMatrix& d, const EstimandSpec& est) {
  const std::string name = estimand_name(est.kind);
  auto firm_factor = [&] {
    if (!has_role(d, Role::Firm)) fail_validation("LabelMismatch", name + " needs firm columns");
    return indicator_factor(
        d, "firm", [&](int i) { return d.py_firm[i] >= 0 ? d.firm_col[d.py_firm[i]] : -1; }, true);
  };
  auto person_factor = [&] {
    if (!has_role(d, Role::Person)) fail_validation("LabelMismatch", name + " needs person columns");
    return indicator_factor(
        d, "person", [&](int i) { return d.worker_col[d.py_worker[i]]; }, true);
  };
  switch (est.kind) {
    case EstimandKind::VarFirm: {
      Factor f = firm_factor();
      QuadraticForm q = make_factor_form(name, f, f, true);
      return q;
    }
    case EstimandKind::VarPerson:
    case EstimandKind::AnovaGroupVariance: {
      Factor f = person_factor();
      return make_factor_form(name, f, f, true);
    }
    case EstimandKind::CovPersonFirm: {
      return make_factor_form(name, person_factor(), firm_factor(), false);
    }
    case EstimandKind::CoefficientOfDetermination: {
      Factor f;
      f.id = "design";
      f.E = d.X;
      const int n = d.n();
      f.center = (SpMatCol(d.X).transpose() * Vec::Ones(n)) / n;
      f.row_scale = Vec::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
      return make_factor_form(name, f, f, true);
    }
    case EstimandKind::RandomCoefficientVariance: {
      if (!has_role(d, Role::Slope)) fail_validation("LabelMismatch", name + " needs slope columns");
      Factor f = indicator_factor(
          d, est.centered ? "slope_centered" : "slope", [&](int i) { return d.slope_col[d.py_worker[i]]; },
          est.centered);
      return make_factor_form(name, f, f, true);
    }
    case EstimandKind::Custom: {
      if (est.custom_A.rows() != d.k() || est.custom_A.cols() != d.k()) {
        fail_validation("LabelMismatch", "custom A must be k x k");
      }
      return make_custom_form(name, est.custom_A);
    }
  }
  fail_validation("LabelMismatch", "unknown estimand");
}

}  // namespace kss
