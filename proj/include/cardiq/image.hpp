#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace cardiq {

using Image = Eigen::MatrixXd;  // (row, col)
using LabelImage = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

}  // namespace cardiq
