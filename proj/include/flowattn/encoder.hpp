#pragma once

#include <span>
#include <vector>

#include "flowattn/autodiff.hpp"
#include "flowattn/hierarchy.hpp"

namespace flowattn {

// One pre-norm transformer block with hierarchy-masked attention and the
// neighbor projections that drive the per-layer affinity update.
struct EncoderLayerParams {
  Tensor wq, wk, wv, wo;          // d x d, multi-head fused, no biases
  Tensor ln1_gamma, ln1_beta;     // 1 x d
  Tensor ln2_gamma, ln2_beta;     // 1 x d
  Tensor ffn_w1, ffn_b1;          // d x d_ff, 1 x d_ff
  Tensor ffn_w2, ffn_b2;          // d_ff x d, 1 x d
  Tensor nb_wq, nb_wk;            // d x d neighbor score projections
  int head_count = 1;
  double sigma_t = 1.0;

  void validate() const;
};

enum class MaskMode {
  Hierarchy,  // mask from the learned affinities
  ForceOnes,  // multiply by an all-ones mask (for equivalence checks)
  None,       // plain attention, no mask multiply
};

// Sequence layout fed to the encoder: a flat 1D token sequence, or a patch
// grid flattened row-major with affinities induced per row and per column.
struct SequenceLayout {
  bool is_2d = false;
  std::size_t grid_rows = 0, grid_cols = 0;

  static SequenceLayout seq() { return {}; }
  static SequenceLayout grid(std::size_t rows, std::size_t cols) {
    return {true, rows, cols};
  }
};

struct EncoderLayerState {
  HierarchyState hierarchy;
  Tensor mask;  // the C actually applied at this layer
};

// Accumulated affinity state threaded through split encoder runs, so a stack
// interrupted by cross-branch exchange keeps its monotone accumulation.
struct AffinityCarry {
  Var seq;          // 1D accumulator
  Var horizontal;   // 2D accumulators
  Var vertical;
  bool has_seq = false, has_h = false, has_v = false;
  int next_layer_index = 0;
};

struct EncoderResult {
  Var output;
  std::vector<EncoderLayerState> layers;  // empty when MaskMode != Hierarchy
};

namespace ad {

// Masked scaled dot-product attention: (C .* softmax(Q K^T / sqrt(d_h))) V.
// The masked rows are not renormalized, and the same C serves every head.
Var hierarchy_attention(Var q, Var k, Var v, Var mask);

// Standard scaled dot-product attention (the mask-free reference path).
Var plain_attention(Var q, Var k, Var v);

Var layer_norm(Var x, Var gamma, Var beta);

}  // namespace ad

// Binds one tensor to a tape at most once so a parameter reused across calls
// accumulates its gradient on a single leaf.
class Binder {
 public:
  explicit Binder(Tape& tape) : tape_(&tape) {}
  Var operator()(Tensor& t);
  const std::vector<std::pair<Tensor*, Var>>& bound() const { return bound_; }
  Tape& tape() { return *tape_; }

 private:
  Tape* tape_;
  std::vector<std::pair<Tensor*, Var>> bound_;
};

// Runs the layer stack over x (len x d). Per layer, in Hierarchy mode:
// neighbor affinities are computed from the layer's input representations,
// accumulated monotonically, turned into the mask and applied inside the
// block. Affinity state starts at zero, so the first layer's mask is exactly
// its fresh affinities. When carry is given, accumulation resumes from (and
// is written back to) it.
EncoderResult encoder_forward(Binder& bind, Var x,
                              std::span<EncoderLayerParams> layers,
                              const SequenceLayout& layout,
                              MaskMode mode = MaskMode::Hierarchy,
                              AffinityCarry* carry = nullptr);

// Convenience: plain-tensor forward on a scratch tape.
std::pair<Tensor, std::vector<EncoderLayerState>> encoder_forward(
    const Tensor& x, std::span<EncoderLayerParams> layers,
    const SequenceLayout& layout, MaskMode mode = MaskMode::Hierarchy);

Tensor hierarchy_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const HierarchyMask& mask);

// Deterministic parameter initialization for one layer.
EncoderLayerParams make_encoder_layer(std::size_t d, std::size_t d_ff,
                                      int head_count, double sigma_t,
                                      std::uint64_t seed);

}  // namespace flowattn
