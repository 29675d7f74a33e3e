#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace naronet {

/// Row-major dense matrix. Rows are samples (patches, patients), columns are features.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

inline constexpr const char* kToolVersion = NARONET_VERSION;

/// Invalid user input: bad arguments, malformed config, missing pipeline stage.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while running an otherwise valid request (I/O, divergence, simulation limits).
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace naronet
