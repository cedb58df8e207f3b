#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace latdyn {

// Dense row-major array of 64-bit floats. Rank 0 (shape {}) is a scalar with
// one element. Immutable by convention once handed to a Graph.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  // Rejects non-finite entries (checked construction for external inputs).
  static Tensor checked(std::vector<std::size_t> shape, std::vector<double> data);

  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t rows() const;  // rank-1 => n, rank-2 => shape[0], rank-0 => 1
  std::size_t cols() const;  // rank-1 => 1, rank-2 => shape[1], rank-0 => 1

  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }
  const std::vector<double>& vec() const { return data_; }
  std::vector<double>& vec() { return data_; }

  double item() const;  // requires numel()==1
  double at(std::size_t i) const { return data_[i]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i) { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const;
  static std::string shape_str(const std::vector<std::size_t>& s);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

}  // namespace latdyn
