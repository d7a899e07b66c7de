#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kss/solver.hpp"

namespace kss {

struct VarianceComponentEstimate {
  std::string method;  // PI, HO, KSS, KSS_JLA, KSS_cluster, JK, PJK, SPJK
  std::string form;
  double theta = 0.0;
  double plugin = 0.0;      // beta' A beta
  double correction = 0.0;  // subtracted bias correction
  int negative_sigma2 = 0;
};

// sigma2_i = y_i (y_i - x_i' beta_{-i}).
Vec sigma2_leave_out(const Vec& y, const FitResult& fit, const LeverageSet& lev, double delta = kDefaultDelta);
// HC2 variances e_i^2 / M_ii.
Vec sigma2_hc2(const FitResult& fit, const LeverageSet& lev, double delta = kDefaultDelta);

double theta_plugin(const QuadraticForm& form, const Vec& beta);
VarianceComponentEstimate plugin_estimate(const QuadraticForm& form, const Vec& beta);

// beta'A beta - sum_i B_ii sigma2_i using the leverage set's B for this form.
VarianceComponentEstimate theta_leave_out(const Vec& y, const FitResult& fit, const LeverageSet& lev,
                                          const QuadraticForm& form, double delta = kDefaultDelta);
// Sketched variant with the corrected variances.
VarianceComponentEstimate theta_leave_out_jla(const Vec& y, const FitResult& fit, const LeverageSet& sketched,
                                              const QuadraticForm& form);
// sum_i y_i x_tilde_i' beta_{-i} with x_tilde_i = A S^{-1} x_i.
double theta_leave_out_covariance(const Vec& y, const DesignMatrix& design, const GramSolver& solver,
                                  const QuadraticForm& form, const FitResult& fit, const LeverageSet& lev);

VarianceComponentEstimate theta_homosc(const Vec& y, const FitResult& fit, const LeverageSet& lev,
                                       const QuadraticForm& form, int k);

// Leave-cluster-out estimator; clusters[i] labels row i.
VarianceComponentEstimate theta_cluster(const Vec& y, const DesignMatrix& design, const GramSolver& solver,
                                        const QuadraticForm& form, const std::vector<int>& clusters,
                                        double delta = kDefaultDelta);

// Removes person columns and demeans rows and outcome within row_worker groups.
DesignMatrix within_worker(const DesignMatrix& design, Vec& y);

enum class JackknifeVariant { JK, PJK, SPJK };
std::string jackknife_name(JackknifeVariant v);

// Jackknife-family estimators for a fixed design; subsample solvers are built once.
class JackknifeFamily {
 public:
  JackknifeFamily(const DesignMatrix& design, const QuadraticForm& form, std::vector<int> periods);
  ~JackknifeFamily();
  JackknifeFamily(JackknifeFamily&&) noexcept;
  JackknifeFamily& operator=(JackknifeFamily&&) noexcept;

  VarianceComponentEstimate estimate(JackknifeVariant v, const Vec& y) const;
  int num_periods() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

VarianceComponentEstimate theta_jackknife(const Vec& y, const DesignMatrix& design, const QuadraticForm& form,
                                          JackknifeVariant v, const std::vector<int>& periods);

struct AkmComponent {
  std::string name;
  VarianceComponentEstimate pi, ho, kss;
};

struct AkmDecomposition {
  std::vector<AkmComponent> components;
  double total_variance = 0.0;
  const AkmComponent& get(const std::string& name) const;
};

// PI / HO / KSS triples for each form; the R^2 component (if present) is divided by total_variance.
AkmDecomposition decompose_akm(const Vec& y, const FitResult& fit, const LeverageSet& lev,
                               const std::vector<const QuadraticForm*>& forms, int k, double total_variance);

// V_hat[beta] = S^{-1} (sum x_i x_i' sigma2_i) S^{-1}; dense k x k.
Mat vcov_beta(const DesignMatrix& design, const GramSolver& solver, const Vec& sigma2);
// sqrt(v' V_hat[beta] v) without forming V_hat.
double lincom_se(const DesignMatrix& design, const GramSolver& solver, const Vec& sigma2, const Vec& v);

}  // namespace kss
