#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace kss {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IVec = Eigen::VectorXi;
// Observation-major sparse storage: row i is x_i'.
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using SpMatCol = Eigen::SparseMatrix<double, Eigen::ColMajor>;
using Triplet = Eigen::Triplet<double>;

}  // namespace kss
