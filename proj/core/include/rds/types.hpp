#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace rds {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
// Sample matrices are row-major with one sample per row so that per-sample
// access is contiguous.
using SampleMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Caller passed a value outside the documented domain.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A numeric procedure failed to converge or produced non-finite values.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The requested combination is not defined (e.g. score of a piecewise
/// constant density, EI coefficients for a scheme without them).
struct Unsupported : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kNegInf = -1e300;  // off-support sentinel, keeps Metropolis ratios finite

double logsumexp(const Vec& v);

inline std::string version_string() { return "rds 0.1.0"; }

}  // namespace rds
