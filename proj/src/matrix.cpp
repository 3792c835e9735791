#include "tabcl/matrix.hpp"

#include <stdexcept>

namespace tabcl {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Matrix: value count " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string());
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  Matrix m;
  for (const auto& r : rows) m.append_row(r);
  return m;
}

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

void Matrix::append_row(std::span<const double> values) {
  if (rows_ == 0 && data_.empty()) cols_ = values.size();
  if (values.size() != cols_) {
    throw std::invalid_argument("Matrix::append_row: row length " + std::to_string(values.size()) +
                                " != " + std::to_string(cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

}  // namespace tabcl
