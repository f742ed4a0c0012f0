#include "flowattn/hierarchy.hpp"

namespace flowattn {

namespace ad {

Var neighbor_scores(Var tokens, Var wq, Var wk, double sigma_t) {
  check_binary(tokens, wq, "neighbor_scores");
  check_binary(tokens, wk, "neighbor_scores");
  if (sigma_t <= 0.0) throw ContractError("neighbor_scores: sigma_t must be positive");
  const Tensor& tv = tokens.tape->value(tokens);
  const std::size_t len = tv.rows();
  if (len < 2) {
    throw ContractError("neighbor_scores: sequence of length " +
                        std::to_string(len) + " has no neighbors");
  }
  Var qp = matmul(tokens, wq);
  Var kp = matmul(tokens, wk);
  const std::size_t d = tokens.tape->value(qp).cols();
  Var head = slice(qp, 0, len - 1, 0, d);
  Var tail = slice(kp, 1, len - 1, 0, d);
  return scale(sum_rows(mul(head, tail)), 1.0 / sigma_t);
}

Var neighbor_probs(Var scores) {
  Tape& t = *scores.tape;
  t.check_mine(scores, "neighbor_probs");
  const Tensor& sv = t.value(scores);
  if (sv.cols() != 1 || sv.rows() < 1) {
    throw ShapeError("neighbor_probs: expected (len-1) x 1 scores, got " + sv.shape_str());
  }
  const std::size_t len = sv.rows() + 1;
  Var one = t.constant(Tensor::scalar(1.0));
  Var zero = t.constant(Tensor::scalar(0.0));
  if (len == 2) {
    // Each token has a single neighbor: probability one on it.
    return concat_rows(concat_cols(one, zero), concat_cols(zero, one));
  }
  // For an interior token the two-way softmax collapses to a sigmoid of the
  // score difference: p_{i,i+1} = sigma(s_i - s_{i-1}).
  Var diff = sub(slice(scores, 1, len - 2, 0, 1), slice(scores, 0, len - 2, 0, 1));
  Var fwd = concat_rows(concat_rows(one, sigmoid(diff)), zero);
  Var bwd = concat_rows(concat_rows(zero, sigmoid(neg(diff))), one);
  return concat_cols(fwd, bwd);
}

Var affinity(Var probs) {
  Tape& t = *probs.tape;
  t.check_mine(probs, "affinity");
  const Tensor& pv = t.value(probs);
  if (pv.cols() != 2 || pv.rows() < 2) {
    throw ShapeError("affinity: expected len x 2 probabilities, got " + pv.shape_str());
  }
  for (double v : pv.data()) {
    if (v < 0.0 || v > 1.0) throw DomainError("affinity: probabilities must lie in [0,1]");
  }
  const std::size_t len = pv.rows();
  Var fwd = slice(probs, 0, len - 1, 0, 1);  // p_{i,i+1}
  Var bwd = slice(probs, 1, len - 1, 1, 1);  // p_{i+1,i}
  return sqrt(mul(fwd, bwd));
}

Var affinity_update(Var prev, Var fresh) {
  check_binary(prev, fresh, "affinity_update");
  Tape& t = *prev.tape;
  const Tensor& pv = t.value(prev);
  const Tensor& fv = t.value(fresh);
  if (!pv.same_shape(fv)) {
    throw ShapeError("affinity_update: " + pv.shape_str() + " vs " + fv.shape_str());
  }
  for (double v : pv.data()) {
    if (v < 0.0 || v > 1.0) throw DomainError("affinity_update: previous affinities outside [0,1]");
  }
  for (double v : fv.data()) {
    if (v < 0.0 || v > 1.0) throw DomainError("affinity_update: fresh affinities outside [0,1]");
  }
  return add(prev, mul(add_scalar(neg(prev), 1.0), fresh));
}

Var build_mask_1d(Var affinities) { return span_product_mask(affinities); }

Var build_mask_2d(Var a_h, Var a_v, std::size_t grid_rows, std::size_t grid_cols) {
  return grid_mask(a_h, a_v, grid_rows, grid_cols);
}

}  // namespace ad

Tensor neighbor_scores(const Tensor& tokens, const Tensor& wq, const Tensor& wk,
                       double sigma_t) {
  Tape t;
  return t.value(ad::neighbor_scores(t.leaf(tokens), t.leaf(wq), t.leaf(wk), sigma_t));
}

Tensor neighbor_probs(const Tensor& scores) {
  Tape t;
  return t.value(ad::neighbor_probs(t.leaf(scores)));
}

Tensor affinity(const Tensor& probs) {
  Tape t;
  return t.value(ad::affinity(t.leaf(probs)));
}

Tensor affinity_update(const Tensor& prev, const Tensor& fresh) {
  Tape t;
  return t.value(ad::affinity_update(t.leaf(prev), t.leaf(fresh)));
}

HierarchyMask build_mask_1d(const Tensor& affinities) {
  Tape t;
  return {t.value(ad::build_mask_1d(t.leaf(affinities)))};
}

HierarchyMask build_mask_2d(const Tensor& a_h, const Tensor& a_v,
                            std::size_t grid_rows, std::size_t grid_cols) {
  Tape t;
  return {t.value(ad::build_mask_2d(t.leaf(a_h), t.leaf(a_v), grid_rows, grid_cols))};
}

}  // namespace flowattn
