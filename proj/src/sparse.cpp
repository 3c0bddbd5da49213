#include "ssr/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <tuple>

namespace ssr {

SparseSymmetricMatrix::SparseSymmetricMatrix(std::size_t n, std::vector<std::size_t> row_offsets,
                                             std::vector<std::size_t> col_indices,
                                             std::vector<double> values)
    : n_(n),
      row_offsets_(std::move(row_offsets)),
      col_indices_(std::move(col_indices)),
      values_(std::move(values)) {
  if (row_offsets_.size() != n_ + 1 || col_indices_.size() != values_.size())
    throw DataError("sparse: inconsistent CSR arrays");
  validate();
}

SparseSymmetricMatrix SparseSymmetricMatrix::from_triplets(
    std::size_t n, const std::vector<std::tuple<std::size_t, std::size_t, double>>& entries) {
  std::vector<std::tuple<std::size_t, std::size_t, double>> sorted = entries;
  std::sort(sorted.begin(), sorted.end());
  SparseSymmetricMatrix m;
  m.n_ = n;
  m.row_offsets_.assign(n + 1, 0);
  m.col_indices_.reserve(sorted.size());
  m.values_.reserve(sorted.size());
  for (const auto& [i, j, v] : sorted) {
    if (i >= n || j >= n) throw DataError("sparse: triplet index out of range");
    if (!m.col_indices_.empty() && m.row_offsets_[i + 1] > m.row_offsets_[i] &&
        m.col_indices_.back() == j && std::get<0>(sorted[m.col_indices_.size() - 1]) == i)
      throw DataError("sparse: duplicate triplet");
    m.row_offsets_[i + 1]++;
    m.col_indices_.push_back(j);
    m.values_.push_back(v);
  }
  for (std::size_t i = 0; i < n; ++i) m.row_offsets_[i + 1] += m.row_offsets_[i];
  m.validate();
  return m;
}

void SparseSymmetricMatrix::multiply(const double* x, double* y) const {
  for (std::size_t i = 0; i < n_; ++i) {
    double acc = 0.0;
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k)
      acc += values_[k] * x[col_indices_[k]];
    y[i] = acc;
  }
}

std::vector<double> SparseSymmetricMatrix::multiply(const std::vector<double>& x) const {
  if (x.size() != n_) throw DataError("sparse: multiply dimension mismatch");
  std::vector<double> y(n_);
  multiply(x.data(), y.data());
  return y;
}

double SparseSymmetricMatrix::row_sum(std::size_t i) const {
  double acc = 0.0;
  for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) acc += values_[k];
  return acc;
}

void SparseSymmetricMatrix::validate() const {
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      if (col_indices_[k] >= n_) throw DataError("sparse: column index out of range");
      if (k + 1 < row_offsets_[i + 1] && col_indices_[k] >= col_indices_[k + 1])
        throw DataError("sparse: row " + std::to_string(i) + " columns not strictly increasing");
    }
  }
  // structural symmetry via binary search into the transposed position
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      std::size_t j = col_indices_[k];
      auto lo = col_indices_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[j]);
      auto hi = col_indices_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[j + 1]);
      auto it = std::lower_bound(lo, hi, i);
      if (it == hi || *it != i)
        throw DataError("sparse: entry (" + std::to_string(i) + "," + std::to_string(j) +
                        ") has no symmetric counterpart");
      double vt = values_[static_cast<std::size_t>(it - col_indices_.begin())];
      if (std::abs(vt - values_[k]) > 1e-12)
        throw DataError("sparse: asymmetric values at (" + std::to_string(i) + "," +
                        std::to_string(j) + ")");
    }
  }
}

}  // namespace ssr
