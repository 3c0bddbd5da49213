#pragma once

#include <cstddef>
#include <vector>

#include "ssr/error.hpp"

namespace ssr {

/// Symmetric sparse matrix in CSR form. Column indices within each row are
/// strictly increasing; (i,j) present iff (j,i) present with equal value.
class SparseSymmetricMatrix {
 public:
  SparseSymmetricMatrix() = default;
  SparseSymmetricMatrix(std::size_t n, std::vector<std::size_t> row_offsets,
                        std::vector<std::size_t> col_indices, std::vector<double> values);

  /// Builds from unordered (i, j, v) triplets; both of (i,j) and (j,i) must be
  /// supplied (diagonal entries once).
  static SparseSymmetricMatrix from_triplets(
      std::size_t n, const std::vector<std::tuple<std::size_t, std::size_t, double>>& entries);

  std::size_t n() const { return n_; }
  std::size_t nnz() const { return col_indices_.size(); }

  const std::vector<std::size_t>& row_offsets() const { return row_offsets_; }
  const std::vector<std::size_t>& col_indices() const { return col_indices_; }
  const std::vector<double>& values() const { return values_; }

  /// y = A x
  void multiply(const double* x, double* y) const;
  std::vector<double> multiply(const std::vector<double>& x) const;

  double row_sum(std::size_t i) const;

  /// Checks index ordering and structural symmetry (tolerance 1e-12 on values).
  void validate() const;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> row_offsets_{0};
  std::vector<std::size_t> col_indices_;
  std::vector<double> values_;
};

}  // namespace ssr
