#pragma once

#include <Eigen/Core>

namespace causnvs {

/// Token-major matrices: one row per token, one column per feature.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

}  // namespace causnvs
