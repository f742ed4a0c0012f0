#include "flowattn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace flowattn {

namespace {

std::string shape_of(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() +
                   " and " + b.shape_str());
}

}  // namespace

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Tensor t(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged row lengths");
    std::size_t j = 0;
    for (double v : row) t(i, j++) = v;
    ++i;
  }
  return t;
}

Tensor Tensor::from_data(std::size_t rows, std::size_t cols, std::vector<double> data) {
  if (data.size() != rows * cols) {
    throw ShapeError("from_data: " + std::to_string(data.size()) +
                     " values for shape " + shape_of(rows, cols));
  }
  Tensor t;
  t.rows_ = rows;
  t.cols_ = cols;
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::string Tensor::shape_str() const { return shape_of(rows_, cols_); }

double Tensor::item() const {
  if (!is_scalar()) throw ContractError("item: tensor is " + shape_str() + ", not 1x1");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- broadcasting -------------------------------------------------------

namespace {

enum class Bcast { Same, AScalar, BScalar, ARow, BRow, ACol, BCol };

Bcast classify(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Bcast::Same;
  if (a.is_scalar()) return Bcast::AScalar;
  if (b.is_scalar()) return Bcast::BScalar;
  if (a.rows() == 1 && a.cols() == b.cols()) return Bcast::ARow;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::BRow;
  if (a.cols() == 1 && a.rows() == b.rows()) return Bcast::ACol;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::BCol;
  shape_fail(op, a, b);
}

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  const Bcast k = classify(a, b, op);
  const bool a_big = (k == Bcast::Same || k == Bcast::BScalar || k == Bcast::BRow || k == Bcast::BCol);
  const Tensor& big = a_big ? a : b;
  Tensor out(big.rows(), big.cols());
  const std::size_t R = big.rows(), C = big.cols();
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      double av = 0.0, bv = 0.0;
      switch (k) {
        case Bcast::Same:    av = a(i, j); bv = b(i, j); break;
        case Bcast::AScalar: av = a[0];    bv = b(i, j); break;
        case Bcast::BScalar: av = a(i, j); bv = b[0];    break;
        case Bcast::ARow:    av = a(0, j); bv = b(i, j); break;
        case Bcast::BRow:    av = a(i, j); bv = b(0, j); break;
        case Bcast::ACol:    av = a(i, 0); bv = b(i, j); break;
        case Bcast::BCol:    av = a(i, j); bv = b(i, 0); break;
      }
      out(i, j) = f(av, bv);
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw DomainError("div: zero divisor");
  }
  return broadcast_binary(a, b, "div", [](double x, double y) { return x / y; });
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.data()) v *= c;
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.data()) v += c;
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a, b);
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  Tensor out(M, N);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = ap[i * K + k];
      const double* brow = bp + k * N;
      double* orow = op + i * N;
      for (std::size_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size()) {
    throw ShapeError("reshape: cannot view " + a.shape_str() + " as " +
                     shape_of(rows, cols));
  }
  return Tensor::from_data(rows, cols, std::vector<double>(a.data().begin(), a.data().end()));
}

namespace {
template <typename F>
Tensor unary(const Tensor& a, F f) {
  Tensor out = a;
  for (double& v : out.data()) v = f(v);
  return out;
}
}  // namespace

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (v <= 0.0) throw DomainError("log: non-positive input");
  }
  return unary(a, [](double x) { return std::log(x); });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("sqrt: negative input");
  }
  return unary(a, [](double x) { return std::sqrt(x); });
}

double sigmoid_scalar(double x) {
  // Evaluate through exp of a non-positive argument so neither branch overflows.
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Tensor sigmoid(const Tensor& a) { return unary(a, sigmoid_scalar); }

Tensor softplus(const Tensor& a) { return unary(a, softplus_scalar); }

Tensor gelu(const Tensor& a) {
  return unary(a, [](double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::scalar(s);
}

Tensor sum_rows(const Tensor& a) {
  Tensor out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    out(i, 0) = s;
  }
  return out;
}

Tensor sum_cols(const Tensor& a) {
  Tensor out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double m = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) m = std::max(m, a(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(a(i, j) - m);
      s += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= s;
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& a) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double m = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) m = std::max(m, a(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += std::exp(a(i, j) - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) - lse;
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t row_off, std::size_t n_rows,
             std::size_t col_off, std::size_t n_cols) {
  if (row_off + n_rows > a.rows() || col_off + n_cols > a.cols()) {
    throw ShapeError("slice: window " + shape_of(n_rows, n_cols) + " at (" +
                     std::to_string(row_off) + "," + std::to_string(col_off) +
                     ") exceeds " + a.shape_str());
  }
  Tensor out(n_rows, n_cols);
  for (std::size_t i = 0; i < n_rows; ++i)
    for (std::size_t j = 0; j < n_cols; ++j) out(i, j) = a(row_off + i, col_off + j);
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_fail("concat_rows", a, b);
  Tensor out(a.rows() + b.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) out(a.rows() + i, j) = b(i, j);
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) shape_fail("concat_cols", a, b);
  Tensor out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  Tensor out(idx.size(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= a.rows()) {
      throw ContractError("gather_rows: index " + std::to_string(idx[i]) +
                          " out of range for " + a.shape_str());
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(idx[i], j);
  }
  return out;
}

Tensor scatter_add_rows(const Tensor& a, const std::vector<int>& idx, std::size_t n_out) {
  if (idx.size() != a.rows()) {
    throw ShapeError("scatter_add_rows: " + std::to_string(idx.size()) +
                     " indices for " + a.shape_str());
  }
  Tensor out(n_out, a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n_out) {
      throw ContractError("scatter_add_rows: index " + std::to_string(idx[i]) +
                          " out of range for " + std::to_string(n_out) + " rows");
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(idx[i], j) += a(i, j);
  }
  return out;
}

Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return sum_all(g);
  if (rows == 1 && cols == g.cols()) return sum_cols(g);
  if (cols == 1 && rows == g.rows()) return sum_rows(g);
  throw ShapeError("reduce_to: cannot reduce " + g.shape_str() + " to " +
                   shape_of(rows, cols));
}

Tensor gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
               double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor xavier_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform(rows, cols, rng, -limit, limit);
}

}  // namespace flowattn
