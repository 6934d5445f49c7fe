#ifndef AAI_SRC_EIGEN_MAP_HPP
#define AAI_SRC_EIGEN_MAP_HPP

#include <Eigen/Core>

#include "aai/tensor.hpp"

namespace aai::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap mat(double* p, int rows, int cols) { return MatMap(p, rows, cols); }
inline ConstMatMap mat(const double* p, int rows, int cols) { return ConstMatMap(p, rows, cols); }

inline MatMap mat(Tensor& t) { return MatMap(t.data(), t.dim(0), static_cast<int>(t.size() / t.dim(0))); }
inline ConstMatMap mat(const Tensor& t) {
    return ConstMatMap(t.data(), t.dim(0), static_cast<int>(t.size() / t.dim(0)));
}

}  // namespace aai::detail

#endif  // AAI_SRC_EIGEN_MAP_HPP
