#pragma once

#include "flowattn/autodiff.hpp"
#include "flowattn/tensor.hpp"

namespace flowattn {

// Soft merge mask over a token sequence or patch grid. Entries lie in [0,1],
// the diagonal is one and the matrix is symmetric. For 1D sequences the mask
// additionally satisfies the monotone span property: widening the span
// between two positions can only shrink their entry.
struct HierarchyMask {
  Tensor C;
};

// Per-layer affinity snapshot for one modality branch.
struct HierarchyState {
  Tensor affinities;    // 1D: (len-1) x 1
  Tensor affinities_h;  // 2D: rows x (cols-1)
  Tensor affinities_v;  // 2D: (rows-1) x cols
  int layer_index = -1;
  double sigma_t = 1.0;
  bool is_2d = false;
};

namespace ad {

// Merge scores of adjacent tokens: s[i] = (t_i Wq') . (t_{i+1} Wk') / sigma_t.
// tokens is len x d with len >= 2; result is (len-1) x 1.
Var neighbor_scores(Var tokens, Var wq, Var wk, double sigma_t);

// Two-neighbor softmax of the scores. Row i of the result holds
// (p_{i,i+1}, p_{i,i-1}); boundary tokens put probability one on their single
// neighbor and zero on the missing side, so every row sums to one.
Var neighbor_probs(Var scores);

// Geometric mean of the two directed merge probabilities across each
// adjacent pair: a_hat[i] = sqrt(p_{i,i+1} * p_{i+1,i}).
Var affinity(Var probs);

// Monotone accumulation across layers: a_new = a_prev + (1 - a_prev) * a_hat.
// Once a pair reaches affinity one it stays merged in every later layer.
Var affinity_update(Var prev, Var fresh);

Var build_mask_1d(Var affinities);
Var build_mask_2d(Var a_h, Var a_v, std::size_t grid_rows, std::size_t grid_cols);

}  // namespace ad

Tensor neighbor_scores(const Tensor& tokens, const Tensor& wq, const Tensor& wk,
                       double sigma_t);
Tensor neighbor_probs(const Tensor& scores);
Tensor affinity(const Tensor& probs);
Tensor affinity_update(const Tensor& prev, const Tensor& fresh);
HierarchyMask build_mask_1d(const Tensor& affinities);
HierarchyMask build_mask_2d(const Tensor& a_h, const Tensor& a_v,
                            std::size_t grid_rows, std::size_t grid_cols);

}  // namespace flowattn
