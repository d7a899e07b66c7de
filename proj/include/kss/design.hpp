#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kss/types.hpp"

namespace kss {

struct Observation {
  std::string worker_id;
  std::string firm_id;
  int period = 0;
  double outcome = 0.0;
  std::vector<double> covariates;
};

// Orders ids numerically when both parse as integers, else lexicographically.
bool id_less(const std::string& a, const std::string& b);

struct Panel {
  std::vector<Observation> rows;
  std::vector<std::string> covariate_names;

  // Filled by index(). Worker codes follow first appearance; firm codes follow id_less.
  std::vector<int> worker;
  std::vector<int> firm;
  std::vector<std::string> worker_ids;
  std::vector<std::string> firm_ids;
  std::vector<std::vector<int>> group_index;  // worker code -> row indices sorted by period

  // Validates (worker, period) uniqueness and builds the codes above.
  void index();

  int n() const { return static_cast<int>(rows.size()); }
  int num_workers() const { return static_cast<int>(worker_ids.size()); }
  int num_firms() const { return static_cast<int>(firm_ids.size()); }
  Vec outcomes() const;
  // Person-years per firm code.
  std::vector<int> firm_sizes() const;
  // Subset of rows (keeps order), re-indexed.
  Panel subset(const std::vector<int>& keep_rows) const;
};

enum class ModelKind { Levels, FirstDifference, Generic };
enum class Role { Person, Firm, Slope, Covariate, Common };

struct ModelSpec {
  ModelKind kind = ModelKind::Levels;
  bool include_covariates = true;
  bool person_effects = true;                   // levels only
  std::optional<std::string> normalized_firm;  // default: largest firm by person-years
};

struct DesignMatrix {
  SpMat X;  // n x k
  std::vector<Role> roles;
  std::vector<std::string> labels;
  ModelKind kind = ModelKind::Generic;
  int normalized_firm = -1;

  // Column lookup by worker / firm code (-1 when absent or normalized away).
  std::vector<int> worker_col;
  std::vector<int> firm_col;
  std::vector<int> slope_col;

  // Person-year records behind the design, used by estimand builders.
  std::vector<int> py_worker;
  std::vector<int> py_firm;
  Vec py_weight;

  // Design row bookkeeping.
  std::vector<int> row_worker;
  std::vector<int> row_period;
  // For first-difference rows: origin and destination firm codes.
  std::vector<int> row_from;
  std::vector<int> row_to;

  int n() const { return static_cast<int>(X.rows()); }
  int k() const { return static_cast<int>(X.cols()); }
  SpMatCol gram() const;
  Vec xty(const Vec& y) const;
};

DesignMatrix build_design(const Panel& panel, const ModelSpec& spec);
// Outcome vector aligned to design rows (first differences for FD).
Vec design_outcome(const Panel& panel, const DesignMatrix& design);

DesignMatrix make_generic_design(const SpMat& X);
DesignMatrix make_generic_design(const Mat& X);
// One dummy per group (role Person); person-year records are the rows.
DesignMatrix make_group_design(const std::vector<int>& group);
// Group intercepts followed by group slopes on z (roles Person and Slope).
DesignMatrix make_random_coefficient_design(const std::vector<int>& group, const Vec& z);

// F = diag(row_scale) * (E - 1 center'), an n' x k operator.
struct Factor {
  std::string id;
  SpMat E;
  Vec center;
  Vec row_scale;

  int rows() const { return static_cast<int>(E.rows()); }
  int cols() const { return static_cast<int>(E.cols()); }
  Vec apply(const Vec& v) const;
  Vec apply_t(const Vec& u) const;
};

// Symmetric rank-two correction coef * (u v' + v u') / 2.
struct LowRankTerm {
  double coef;
  Vec u;
  Vec v;
};

// A = (F1'F2 + F2'F1) / 2, stored as a sparse symmetric part plus low-rank terms.
struct QuadraticForm {
  std::string name;
  int k = 0;
  bool psd = false;
  int rank_hint = 0;
  Factor f1;
  Factor f2;
  SpMatCol G;
  std::vector<LowRankTerm> terms;

  Vec apply(const Vec& v) const;
  double quad(const Vec& z) const;
  double bilinear(const Vec& a, const Vec& b) const;
  // z'Az evaluated through the factors: (F1 z)'(F2 z).
  double quad_via_factors(const Vec& z) const;
  Mat dense() const;
};

QuadraticForm make_factor_form(std::string name, Factor f1, Factor f2, bool psd);
QuadraticForm make_custom_form(std::string name, const SpMatCol& A);
QuadraticForm make_custom_form(std::string name, const Mat& A);

enum class EstimandKind {
  VarFirm,
  CovPersonFirm,
  VarPerson,
  CoefficientOfDetermination,
  AnovaGroupVariance,
  RandomCoefficientVariance,
  Custom
};

struct EstimandSpec {
  EstimandKind kind = EstimandKind::VarFirm;
  bool centered = true;  // random-coefficient variance only
  Mat custom_A;          // Custom only
};

std::string estimand_name(EstimandKind kind);
QuadraticForm build_quadratic_form(const DesignMatrix& design, const EstimandSpec& estimand);

}  // namespace kss
