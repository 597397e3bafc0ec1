#pragma once

#include <Eigen/Dense>

namespace nestcal {

// Numeric type for network parameters and activations. Builds that need tight
// finite-difference checks compile the engine with NESTCAL_DOUBLE.
#ifdef NESTCAL_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

}  // namespace nestcal
