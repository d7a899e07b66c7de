#include "kss/error.hpp"
#include "kss/inference.hpp"

namespace kss {

DenseKernel dense_kernel(const DesignMatrix& design, const GramSolver& solver, const QuadraticForm& form,
                         double delta) {
  DenseKernel K;
  K.Z = solve_rows(design, solver);
  K.P = design.X * K.Z.transpose();
  K.P = 0.5 * (K.P + K.P.transpose()).eval();
  const Mat A = form.dense();
  const Mat ZA = K.Z * A;
  K.B = ZA * K.Z.transpose();
  K.B = 0.5 * (K.B + K.B.transpose()).eval();
  K.M = Vec::Ones(design.n()) - K.P.diagonal();
  for (int i = 0; i < K.M.size(); ++i) {
    if (K.M(i) < delta) fail_numerical("LeverageOne", "observation " + std::to_string(i) + " has leverage one");
  }
  K.C = kernel_from(K.P, K.B, K.M);
  return K;
}

Mat kernel_from(const Mat& P, const Mat& B, const Vec& Mdiag) {
  const int n = static_cast<int>(P.rows());
  const Vec b = B.diagonal().cwiseQuotient(Mdiag);
  Mat C(n, n);
  for (int l = 0; l < n; ++l) {
    for (int i = 0; i < n; ++i) {
      const double Mil = (i == l ? 1.0 : 0.0) - P(i, l);
      C(i, l) = B(i, l) - 0.5 * Mil * (b(i) + b(l));
    }
    C(l, l) = 0.0;
  }
  return C;
}

double theta_ustat(const Mat& C, const Vec& y) { return y.dot(C * y); }

}  // namespace kss
