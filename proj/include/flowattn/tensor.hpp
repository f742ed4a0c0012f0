#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowattn/errors.hpp"

namespace flowattn {

// Dense row-major matrix of 64-bit reals. Scalars are 1x1, column vectors
// n x 1. All model math runs in double precision; the conservation checks
// and finite-difference gradient checks need the headroom.
class Tensor {
 public:
  Tensor() : rows_(0), cols_(0) {}
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor from_data(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<const double> data() const { return {data_.data(), data_.size()}; }
  std::span<double> data() { return {data_.data(), data_.size()}; }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool is_scalar() const { return rows_ == 1 && cols_ == 1; }
  std::string shape_str() const;

  // Value of a 1x1 tensor; ContractError otherwise.
  double item() const;

  bool all_finite() const;

 private:
  std::size_t rows_, cols_;
  std::vector<double> data_;
};

// ---- eager kernels ------------------------------------------------------
// These are the single source of arithmetic truth; the autodiff layer
// records them and their adjoint rules on a tape.

// Elementwise binary ops. Broadcasting is restricted to the patterns the
// model actually needs: same shape, scalar against anything, a 1 x n row
// against m x n, or an m x 1 column against m x n (either operand order).
// Anything else is a ShapeError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // DomainError on zero divisor

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // DomainError on non-positive input
Tensor sqrt(const Tensor& a);  // DomainError on negative input
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor sum_all(const Tensor& a);   // 1x1
Tensor sum_rows(const Tensor& a);  // m x n -> m x 1
Tensor sum_cols(const Tensor& a);  // m x n -> 1 x n

// Row-wise softmax with max-subtraction for stability.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

Tensor slice(const Tensor& a, std::size_t row_off, std::size_t n_rows,
             std::size_t col_off, std::size_t n_cols);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor scatter_add_rows(const Tensor& a, const std::vector<int>& idx, std::size_t n_out);

// Sums g down to the given shape, inverting one of the allowed broadcasts.
Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols);

double sigmoid_scalar(double x);
double softplus_scalar(double x);

Tensor gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                double stddev = 1.0);
Tensor uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
               double lo, double hi);
Tensor xavier_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

}  // namespace flowattn
