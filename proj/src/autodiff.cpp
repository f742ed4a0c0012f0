#include "flowattn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace flowattn {

namespace {

Tensor expand_col(const Tensor& col, std::size_t cols) {
  Tensor out(col.rows(), cols);
  for (std::size_t i = 0; i < col.rows(); ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = col(i, 0);
  return out;
}

Tensor expand_row(const Tensor& row, std::size_t rows) {
  Tensor out(rows, row.cols());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < row.cols(); ++j) out(i, j) = row(0, j);
  return out;
}

}  // namespace

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, "leaf"});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Tensor value, std::vector<int> inputs, BackwardFn fn, const char* name) {
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), name});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ContractError("tape: invalid node id " + std::to_string(id));
  }
  return nodes_[static_cast<std::size_t>(id)].value;
}

void Tape::check_mine(Var v, const char* op) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError(std::string(op) + ": variable does not belong to this tape");
  }
}

void Tape::accumulate_grad(int id, const Tensor& delta) {
  Tensor& slot = adjoints_[static_cast<std::size_t>(id)];
  if (slot.empty() && !slot.same_shape(delta)) {
    slot = delta;
    return;
  }
  if (!slot.same_shape(delta)) {
    throw ShapeError("adjoint shape mismatch: " + slot.shape_str() + " vs " +
                     delta.shape_str());
  }
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += delta[i];
}

void Tape::backward(Var loss) {
  check_mine(loss, "backward");
  if (!value(loss).is_scalar()) {
    throw ContractError("backward: loss node is " + value(loss).shape_str() +
                        ", expected scalar 1x1");
  }
  adjoints_.assign(nodes_.size(), Tensor());

  // Reachability from the loss through input edges.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{loss.id};
  reachable[static_cast<std::size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    for (int in : nodes_[static_cast<std::size_t>(id)].inputs) {
      if (!reachable[static_cast<std::size_t>(in)]) {
        reachable[static_cast<std::size_t>(in)] = 1;
        stack.push_back(in);
      }
    }
  }

  adjoints_[static_cast<std::size_t>(loss.id)] = Tensor::scalar(1.0);
  for (int id = loss.id; id >= 0; --id) {
    const std::size_t u = static_cast<std::size_t>(id);
    if (!reachable[u] || adjoints_[u].empty() || !nodes_[u].backward) continue;
    nodes_[u].backward(*this, id, adjoints_[u]);
  }

  // Every leaf reports an adjoint, zeros when the loss never touched it.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].inputs.empty() && adjoints_[i].empty()) {
      adjoints_[i] = Tensor(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
  }
}

Tensor Tape::grad(Var v) const {
  check_mine(v, "grad");
  if (adjoints_.size() != nodes_.size()) {
    throw ContractError("grad: backward() has not been run on this tape");
  }
  const Tensor& a = adjoints_[static_cast<std::size_t>(v.id)];
  if (a.empty()) return Tensor(value(v).rows(), value(v).cols());
  return a;
}

Var check_binary(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
  a.tape->check_mine(a, op);
  a.tape->check_mine(b, op);
  return a;
}

namespace ad {

namespace {

// Shared recorder for the four broadcasting binary ops.
template <typename Fwd, typename BwdA, typename BwdB>
Var binary(Var a, Var b, const char* name, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  check_binary(a, b, name);
  Tape& t = *a.tape;
  Tensor out = fwd(t.value(a), t.value(b));
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib},
                [ia, ib, bwd_a, bwd_b](Tape& tp, int, const Tensor& g) {
                  const Tensor& va = tp.value(ia);
                  const Tensor& vb = tp.value(ib);
                  tp.accumulate_grad(ia, reduce_to(bwd_a(g, va, vb), va.rows(), va.cols()));
                  tp.accumulate_grad(ib, reduce_to(bwd_b(g, va, vb), vb.rows(), vb.cols()));
                },
                name);
}

template <typename Fwd, typename Bwd>
Var unary(Var a, const char* name, Fwd fwd, Bwd bwd) {
  a.tape->check_mine(a, name);
  Tape& t = *a.tape;
  Tensor out = fwd(t.value(a));
  const int ia = a.id;
  return t.push(std::move(out), {ia},
                [ia, bwd](Tape& tp, int self, const Tensor& g) {
                  tp.accumulate_grad(ia, bwd(g, tp.value(ia), tp.value(self)));
                },
                name);
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](const Tensor& x, const Tensor& y) { return flowattn::add(x, y); },
      [](const Tensor& g, const Tensor&, const Tensor&) { return g; },
      [](const Tensor& g, const Tensor&, const Tensor&) { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](const Tensor& x, const Tensor& y) { return flowattn::sub(x, y); },
      [](const Tensor& g, const Tensor&, const Tensor&) { return g; },
      [](const Tensor& g, const Tensor&, const Tensor&) { return flowattn::scale(g, -1.0); });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](const Tensor& x, const Tensor& y) { return flowattn::mul(x, y); },
      [](const Tensor& g, const Tensor&, const Tensor& vb) { return flowattn::mul(g, vb); },
      [](const Tensor& g, const Tensor& va, const Tensor&) { return flowattn::mul(g, va); });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](const Tensor& x, const Tensor& y) { return flowattn::div(x, y); },
      [](const Tensor& g, const Tensor&, const Tensor& vb) { return flowattn::div(g, vb); },
      [](const Tensor& g, const Tensor& va, const Tensor& vb) {
        return flowattn::scale(
            flowattn::div(flowattn::mul(g, va), flowattn::mul(vb, vb)), -1.0);
      });
}

Var scale(Var a, double c) {
  return unary(
      a, "scale", [c](const Tensor& x) { return flowattn::scale(x, c); },
      [c](const Tensor& g, const Tensor&, const Tensor&) { return flowattn::scale(g, c); });
}

Var add_scalar(Var a, double c) {
  return unary(
      a, "add_scalar", [c](const Tensor& x) { return flowattn::add_scalar(x, c); },
      [](const Tensor& g, const Tensor&, const Tensor&) { return g; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var matmul(Var a, Var b) {
  check_binary(a, b, "matmul");
  Tape& t = *a.tape;
  Tensor out = flowattn::matmul(t.value(a), t.value(b));
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib},
                [ia, ib](Tape& tp, int, const Tensor& g) {
                  tp.accumulate_grad(ia, flowattn::matmul(g, flowattn::transpose(tp.value(ib))));
                  tp.accumulate_grad(ib, flowattn::matmul(flowattn::transpose(tp.value(ia)), g));
                },
                "matmul");
}

Var transpose(Var a) {
  return unary(
      a, "transpose", [](const Tensor& x) { return flowattn::transpose(x); },
      [](const Tensor& g, const Tensor&, const Tensor&) { return flowattn::transpose(g); });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  return unary(
      a, "reshape", [rows, cols](const Tensor& x) { return flowattn::reshape(x, rows, cols); },
      [](const Tensor& g, const Tensor& va, const Tensor&) {
        return flowattn::reshape(g, va.rows(), va.cols());
      });
}

Var exp(Var a) {
  return unary(
      a, "exp", [](const Tensor& x) { return flowattn::exp(x); },
      [](const Tensor& g, const Tensor&, const Tensor& y) { return flowattn::mul(g, y); });
}

Var log(Var a) {
  return unary(
      a, "log", [](const Tensor& x) { return flowattn::log(x); },
      [](const Tensor& g, const Tensor& va, const Tensor&) { return flowattn::div(g, va); });
}

Var sqrt(Var a) {
  return unary(
      a, "sqrt", [](const Tensor& x) { return flowattn::sqrt(x); },
      [](const Tensor& g, const Tensor&, const Tensor& y) {
        return flowattn::div(g, flowattn::scale(y, 2.0));
      });
}

Var sigmoid(Var a) {
  return unary(
      a, "sigmoid", [](const Tensor& x) { return flowattn::sigmoid(x); },
      [](const Tensor& g, const Tensor&, const Tensor& y) {
        Tensor d = y;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = y[i] * (1.0 - y[i]);
        return flowattn::mul(g, d);
      });
}

Var softplus(Var a) {
  return unary(
      a, "softplus", [](const Tensor& x) { return flowattn::softplus(x); },
      [](const Tensor& g, const Tensor& va, const Tensor&) {
        return flowattn::mul(g, flowattn::sigmoid(va));
      });
}

Var gelu(Var a) {
  return unary(
      a, "gelu", [](const Tensor& x) { return flowattn::gelu(x); },
      [](const Tensor& g, const Tensor& va, const Tensor&) {
        static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
        static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
        Tensor d = va;
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double x = va[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          d[i] = cdf + x * pdf;
        }
        return flowattn::mul(g, d);
      });
}

Var sum_all(Var a) {
  return unary(
      a, "sum_all", [](const Tensor& x) { return flowattn::sum_all(x); },
      [](const Tensor& g, const Tensor& va, const Tensor&) {
        return Tensor(va.rows(), va.cols(), g.item());
      });
}

Var sum_rows(Var a) {
  return unary(
      a, "sum_rows", [](const Tensor& x) { return flowattn::sum_rows(x); },
      [](const Tensor& g, const Tensor& va, const Tensor&) {
        return expand_col(g, va.cols());
      });
}

Var sum_cols(Var a) {
  return unary(
      a, "sum_cols", [](const Tensor& x) { return flowattn::sum_cols(x); },
      [](const Tensor& g, const Tensor& va, const Tensor&) {
        return expand_row(g, va.rows());
      });
}

Var softmax_rows(Var a) {
  return unary(
      a, "softmax_rows", [](const Tensor& x) { return flowattn::softmax_rows(x); },
      [](const Tensor& g, const Tensor&, const Tensor& y) {
        Tensor d(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            d(i, j) = y(i, j) * (g(i, j) - dot);
        }
        return d;
      });
}

Var log_softmax_rows(Var a) {
  return unary(
      a, "log_softmax_rows",
      [](const Tensor& x) { return flowattn::log_softmax_rows(x); },
      [](const Tensor& g, const Tensor&, const Tensor& y) {
        Tensor d(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) gsum += g(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            d(i, j) = g(i, j) - std::exp(y(i, j)) * gsum;
        }
        return d;
      });
}

Var slice(Var a, std::size_t row_off, std::size_t n_rows, std::size_t col_off,
          std::size_t n_cols) {
  return unary(
      a, "slice",
      [=](const Tensor& x) { return flowattn::slice(x, row_off, n_rows, col_off, n_cols); },
      [=](const Tensor& g, const Tensor& va, const Tensor&) {
        Tensor d(va.rows(), va.cols());
        for (std::size_t i = 0; i < n_rows; ++i)
          for (std::size_t j = 0; j < n_cols; ++j)
            d(row_off + i, col_off + j) = g(i, j);
        return d;
      });
}

Var concat_rows(Var a, Var b) {
  check_binary(a, b, "concat_rows");
  Tape& t = *a.tape;
  Tensor out = flowattn::concat_rows(t.value(a), t.value(b));
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib},
                [ia, ib](Tape& tp, int, const Tensor& g) {
                  const Tensor& va = tp.value(ia);
                  const Tensor& vb = tp.value(ib);
                  tp.accumulate_grad(ia, flowattn::slice(g, 0, va.rows(), 0, va.cols()));
                  tp.accumulate_grad(ib, flowattn::slice(g, va.rows(), vb.rows(), 0, vb.cols()));
                },
                "concat_rows");
}

Var concat_cols(Var a, Var b) {
  check_binary(a, b, "concat_cols");
  Tape& t = *a.tape;
  Tensor out = flowattn::concat_cols(t.value(a), t.value(b));
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib},
                [ia, ib](Tape& tp, int, const Tensor& g) {
                  const Tensor& va = tp.value(ia);
                  const Tensor& vb = tp.value(ib);
                  tp.accumulate_grad(ia, flowattn::slice(g, 0, va.rows(), 0, va.cols()));
                  tp.accumulate_grad(ib, flowattn::slice(g, 0, vb.rows(), va.cols(), vb.cols()));
                },
                "concat_cols");
}

Var gather_rows(Var a, std::vector<int> idx) {
  a.tape->check_mine(a, "gather_rows");
  Tape& t = *a.tape;
  Tensor out = flowattn::gather_rows(t.value(a), idx);
  const int ia = a.id;
  return t.push(std::move(out), {ia},
                [ia, idx = std::move(idx)](Tape& tp, int, const Tensor& g) {
                  tp.accumulate_grad(
                      ia, flowattn::scatter_add_rows(g, idx, tp.value(ia).rows()));
                },
                "gather_rows");
}

Var scatter_add_rows(Var a, std::vector<int> idx, std::size_t n_out) {
  a.tape->check_mine(a, "scatter_add_rows");
  Tape& t = *a.tape;
  Tensor out = flowattn::scatter_add_rows(t.value(a), idx, n_out);
  const int ia = a.id;
  return t.push(std::move(out), {ia},
                [ia, idx = std::move(idx)](Tape& tp, int, const Tensor& g) {
                  tp.accumulate_grad(ia, flowattn::gather_rows(g, idx));
                },
                "scatter_add_rows");
}

Var softmax_vec(Var a) {
  const Tensor& v = a.tape->value(a);
  if (v.cols() != 1) {
    throw ShapeError("softmax_vec: expected a column vector, got " + v.shape_str());
  }
  const std::size_t n = v.rows();
  return reshape(softmax_rows(reshape(a, 1, n)), n, 1);
}

Var span_product_mask(Var a) {
  a.tape->check_mine(a, "span_product_mask");
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.cols() != 1) {
    throw ShapeError("span_product_mask: expected (len-1) x 1 affinities, got " +
                     av.shape_str());
  }
  const std::size_t len = av.rows() + 1;
  Tensor c(len, len);
  for (std::size_t i = 0; i < len; ++i) {
    c(i, i) = 1.0;
    double run = 1.0;
    for (std::size_t j = i + 1; j < len; ++j) {
      run *= av(j - 1, 0);
      c(i, j) = run;
      c(j, i) = run;
    }
  }
  const int ia = a.id;
  return t.push(std::move(c), {ia},
                [ia, len](Tape& tp, int, const Tensor& g) {
                  const Tensor& av = tp.value(ia);
                  Tensor d(av.rows(), 1);
                  std::vector<double> pre(len), suf(len);
                  for (std::size_t i = 0; i < len; ++i) {
                    for (std::size_t j = i + 1; j < len; ++j) {
                      const double gsum = g(i, j) + g(j, i);
                      if (gsum == 0.0) continue;
                      // prefix/suffix products of a over the span [i, j)
                      pre[0] = 1.0;
                      const std::size_t w = j - i;
                      for (std::size_t k = 1; k < w; ++k) pre[k] = pre[k - 1] * av(i + k - 1, 0);
                      suf[w - 1] = 1.0;
                      for (std::size_t k = w - 1; k-- > 0;) suf[k] = suf[k + 1] * av(i + k + 1, 0);
                      for (std::size_t k = 0; k < w; ++k)
                        d(i + k, 0) += gsum * pre[k] * suf[k];
                    }
                  }
                  tp.accumulate_grad(ia, d);
                },
                "span_product_mask");
}

namespace {

struct GridSpan {
  // Horizontal factors a_h[row, c] for c in [c_lo, c_hi), then vertical
  // factors a_v[r, col] for r in [r_lo, r_hi).
  std::size_t row, c_lo, c_hi;
  std::size_t col, r_lo, r_hi;
};

GridSpan grid_span(std::size_t p, std::size_t q, std::size_t cols) {
  // p < q in row-major order; walk along p's row, then down q's column.
  const std::size_t r1 = p / cols, c1 = p % cols;
  const std::size_t r2 = q / cols, c2 = q % cols;
  GridSpan s;
  s.row = r1;
  s.c_lo = std::min(c1, c2);
  s.c_hi = std::max(c1, c2);
  s.col = c2;
  s.r_lo = std::min(r1, r2);
  s.r_hi = std::max(r1, r2);
  return s;
}

}  // namespace

Var grid_mask(Var a_h, Var a_v, std::size_t grid_rows, std::size_t grid_cols) {
  check_binary(a_h, a_v, "grid_mask");
  Tape& t = *a_h.tape;
  const Tensor& h = t.value(a_h);
  const Tensor& v = t.value(a_v);
  const bool has_h = grid_cols > 1;
  const bool has_v = grid_rows > 1;
  if (has_h && (h.rows() != grid_rows || h.cols() != grid_cols - 1)) {
    throw ShapeError("grid_mask: horizontal affinities " + h.shape_str() +
                     " for a " + std::to_string(grid_rows) + "x" +
                     std::to_string(grid_cols) + " grid");
  }
  if (has_v && (v.rows() != grid_rows - 1 || v.cols() != grid_cols)) {
    throw ShapeError("grid_mask: vertical affinities " + v.shape_str() +
                     " for a " + std::to_string(grid_rows) + "x" +
                     std::to_string(grid_cols) + " grid");
  }
  const std::size_t n = grid_rows * grid_cols;
  Tensor c(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    c(p, p) = 1.0;
    for (std::size_t q = p + 1; q < n; ++q) {
      const GridSpan s = grid_span(p, q, grid_cols);
      double prod = 1.0;
      for (std::size_t k = s.c_lo; k < s.c_hi; ++k) prod *= h(s.row, k);
      for (std::size_t k = s.r_lo; k < s.r_hi; ++k) prod *= v(k, s.col);
      c(p, q) = prod;
      c(q, p) = prod;
    }
  }
  const int ih = a_h.id, iv = a_v.id;
  return t.push(
      std::move(c), {ih, iv},
      [ih, iv, grid_rows, grid_cols, n](Tape& tp, int, const Tensor& g) {
        const Tensor& h = tp.value(ih);
        const Tensor& v = tp.value(iv);
        Tensor dh(h.rows(), h.cols());
        Tensor dv(v.rows(), v.cols());
        for (std::size_t p = 0; p < n; ++p) {
          for (std::size_t q = p + 1; q < n; ++q) {
            const double gsum = g(p, q) + g(q, p);
            if (gsum == 0.0) continue;
            const GridSpan s = grid_span(p, q, grid_cols);
            // Adjoint of a product: recompute the product leaving one factor out.
            for (std::size_t k = s.c_lo; k < s.c_hi; ++k) {
              double rest = 1.0;
              for (std::size_t m = s.c_lo; m < s.c_hi; ++m)
                if (m != k) rest *= h(s.row, m);
              for (std::size_t m = s.r_lo; m < s.r_hi; ++m) rest *= v(m, s.col);
              dh(s.row, k) += gsum * rest;
            }
            for (std::size_t k = s.r_lo; k < s.r_hi; ++k) {
              double rest = 1.0;
              for (std::size_t m = s.c_lo; m < s.c_hi; ++m) rest *= h(s.row, m);
              for (std::size_t m = s.r_lo; m < s.r_hi; ++m)
                if (m != k) rest *= v(m, s.col);
              dv(k, s.col) += gsum * rest;
            }
          }
        }
        tp.accumulate_grad(ih, dh);
        tp.accumulate_grad(iv, dv);
      },
      "grid_mask");
}

}  // namespace ad

double gradcheck(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  if (eps <= 0.0) throw ContractError("gradcheck: eps must be positive");
  return gradcheck_multi(
      [&f](Tape& t, const std::vector<Var>& vs) { return f(t, vs[0]); }, {x}, eps);
}

double gradcheck_multi(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                       const std::vector<Tensor>& xs, double eps) {
  if (eps <= 0.0) throw ContractError("gradcheck: eps must be positive");

  auto eval = [&](const std::vector<Tensor>& inputs) {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(inputs.size());
    for (const Tensor& in : inputs) vs.push_back(t.leaf(in));
    Var out = f(t, vs);
    if (!t.value(out).is_scalar()) {
      throw ContractError("gradcheck: function output is " +
                          t.value(out).shape_str() + ", expected scalar");
    }
    return t.value(out).item();
  };

  // Analytic gradients in one reverse pass.
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const Tensor& in : xs) vs.push_back(t.leaf(in));
    Var out = f(t, vs);
    if (!t.value(out).is_scalar()) {
      throw ContractError("gradcheck: function output is " +
                          t.value(out).shape_str() + ", expected scalar");
    }
    t.backward(out);
    for (Var v : vs) analytic.push_back(t.grad(v));
  }

  double worst = 0.0;
  std::vector<Tensor> probe = xs;
  for (std::size_t n = 0; n < xs.size(); ++n) {
    for (std::size_t i = 0; i < xs[n].size(); ++i) {
      const double orig = probe[n][i];
      probe[n][i] = orig + eps;
      const double fp = eval(probe);
      probe[n][i] = orig - eps;
      const double fm = eval(probe);
      probe[n][i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double an = analytic[n][i];
      const double denom = std::max({1.0, std::abs(an), std::abs(numeric)});
      worst = std::max(worst, std::abs(an - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace flowattn
