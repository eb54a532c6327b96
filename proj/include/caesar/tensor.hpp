#pragma once

#include <Eigen/Core>

namespace caesar {

using Index = Eigen::Index;

/// Row-major dense matrix. Batches are stored one item per row.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

}  // namespace caesar
