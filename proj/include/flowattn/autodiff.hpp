#pragma once

#include <functional>
#include <vector>

#include "flowattn/tensor.hpp"

namespace flowattn {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape over a closed set of primitive operations. Records each
// primitive eagerly (the forward value is computed on the spot) together with
// a closure that pushes its adjoint back to its inputs. Nodes are stored in
// topological order by construction. A tape has a single writer: one training
// step owns one tape. Tensors handed out are values and safe to share.
class Tape {
 public:
  // Receives the node's own id and adjoint; accumulates into input adjoints
  // via accumulate_grad.
  using BackwardFn = std::function<void(Tape&, int self, const Tensor& adj)>;

  // A leaf holds an externally supplied value (parameter or input).
  Var leaf(Tensor value);
  // Same mechanics as a leaf; named differently to flag intent at call sites.
  Var constant(Tensor value) { return leaf(std::move(value)); }

  Var push(Tensor value, std::vector<int> inputs, BackwardFn fn, const char* name);

  const Tensor& value(Var v) const { return value(v.id); }
  const Tensor& value(int id) const;

  // Runs reverse accumulation from a scalar loss node. Populates adjoints for
  // every node reachable from the loss; every leaf ends up with an adjoint of
  // matching shape (zeros when unreachable). Repeatable: calling twice gives
  // identical results.
  void backward(Var loss);

  // Adjoint of v from the last backward() call (zeros if v was unreachable).
  Tensor grad(Var v) const;

  void accumulate_grad(int id, const Tensor& delta);

  std::size_t node_count() const { return nodes_.size(); }

  // ContractError unless v belongs to this tape.
  void check_mine(Var v, const char* op) const;

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    const char* name;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> adjoints_;
};

// ContractError unless both live on the same tape; returns a.
Var check_binary(Var a, Var b, const char* op);

namespace ad {

// Elementwise with restricted broadcasting (see tensor.hpp).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var gelu(Var a);

Var sum_all(Var a);
Var sum_rows(Var a);
Var sum_cols(Var a);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);

Var slice(Var a, std::size_t row_off, std::size_t n_rows, std::size_t col_off,
          std::size_t n_cols);
Var concat_rows(Var a, Var b);
Var concat_cols(Var a, Var b);

Var gather_rows(Var a, std::vector<int> idx);
Var scatter_add_rows(Var a, std::vector<int> idx, std::size_t n_out);

// Softmax over all entries of a column vector (n x 1 -> n x 1).
Var softmax_vec(Var a);

// Mask from adjacent-pair affinities: input a is (len-1) x 1 with entries in
// [0,1]; output C is len x len, C[i][j] the product of a over the span
// between i and j, diagonal one. Symmetric by construction.
Var span_product_mask(Var a);

// Two-dimensional variant over a rows x cols patch grid. a_h holds horizontal
// affinities (rows x cols-1), a_v vertical ones (rows-1 x cols). The entry for
// a patch pair is the product along the row-then-column lattice path between
// them, walked from the lower row-major patch index to the higher so the mask
// stays symmetric. Degenerate grids (one row or one column) reduce to the 1D
// rule; the unused affinity tensor may be empty.
Var grid_mask(Var a_h, Var a_v, std::size_t grid_rows, std::size_t grid_cols);

}  // namespace ad

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
// where numeric is the central difference (f(x+eps e_i) - f(x-eps e_i)) / 2eps.
// f must build a scalar-valued expression from its input leaf.
double gradcheck(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps);

// Multi-input variant: perturbs every coordinate of every input in turn and
// returns the worst relative error across all of them.
double gradcheck_multi(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                       const std::vector<Tensor>& xs, double eps);

}  // namespace flowattn
