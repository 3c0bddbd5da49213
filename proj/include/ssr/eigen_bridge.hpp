#pragma once

#include <Eigen/Dense>

#include "ssr/tensor.hpp"

namespace ssr {

inline Tensor tensor_from(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
  return t;
}

inline Tensor tensor_from(const Eigen::VectorXd& v) {
  Tensor t({static_cast<std::size_t>(v.size())});
  for (Eigen::Index i = 0; i < v.size(); ++i) t.at(static_cast<std::size_t>(i)) = v(i);
  return t;
}

inline Eigen::MatrixXd eigen_from(const Tensor& t) {
  if (t.rank() != 2) throw DataError("eigen_from: expects a rank-2 tensor");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  for (std::size_t r = 0; r < t.shape[0]; ++r)
    for (std::size_t c = 0; c < t.shape[1]; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
  return m;
}

}  // namespace ssr
