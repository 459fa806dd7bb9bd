#pragma once

#include <Eigen/Dense>

namespace hembed {

// Row-major so that token rows are contiguous.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

}  // namespace hembed
