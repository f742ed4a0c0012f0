#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "flowattn/autodiff.hpp"
#include "flowattn/encoder.hpp"

namespace flowattn {

// One input graph: node features, optional edge features (the text branch
// carries them, the vision branch does not), a directed edge list and
// pre-computed spectral positional encodings.
struct GraphBatch {
  Tensor node_feats;                      // N x d_n
  std::optional<Tensor> edge_feats;       // E x d_e
  std::vector<std::pair<int, int>> edges; // (src, dst), indices in [0, N)
  Tensor pe;                              // N x k

  std::size_t node_count() const { return node_feats.rows(); }
  std::size_t edge_count() const { return edges.size(); }
  void validate() const;
};

// Input projection parameters. Shapes follow the d x d_n convention of the
// projection matrices acting on column features; features are stored row-wise
// so the forward applies the transpose.
struct EmbedParams {
  Tensor a0;      // d x d_n node projection
  Tensor a0_bias; // 1 x d
  Tensor b0;      // d x d_e edge projection (unused without edge features)
  Tensor b0_bias; // 1 x d
  Tensor c0;      // d x k positional projection
  Tensor c0_bias; // 1 x d
};

// One graph transformer layer. The attention is dot-product over each node's
// incoming edges; when edge features are present they gate the per-dimension
// scores and are themselves updated through an output projection, keeping
// their width constant across layers.
struct GTLayerParams {
  Tensor wq, wk, wv, wo;       // d x d
  Tensor ln1_gamma, ln1_beta;  // 1 x d node pre-norm
  Tensor ln2_gamma, ln2_beta;  // 1 x d pre-FFN norm
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  bool with_edges = false;
  Tensor we, woe;              // d x d edge projections
  Tensor lne_gamma, lne_beta;  // 1 x d edge pre-norm

  void validate(std::size_t d) const;
};

namespace ad {

struct EmbeddedGraph {
  Var nodes;                 // N x d
  std::optional<Var> edges;  // E x d
};

// h0 = A0 alpha + a0 (+ projected positional encoding, added here and never
// again); e0 = B0 beta + b0 when edge features are present.
EmbeddedGraph embed_inputs(Binder& bind, const GraphBatch& g, EmbedParams& p);

struct GTLayerOut {
  Var nodes;
  std::optional<Var> edges;
};

GTLayerOut gt_layer_forward(Binder& bind, Var h, std::optional<Var> e,
                            const std::vector<std::pair<int, int>>& edges,
                            GTLayerParams& p);

}  // namespace ad

std::pair<Tensor, std::optional<Tensor>> embed_inputs(const GraphBatch& g,
                                                      EmbedParams& p);
std::pair<Tensor, std::optional<Tensor>> gt_layer_forward(
    const Tensor& h, const std::optional<Tensor>& e,
    const std::vector<std::pair<int, int>>& edges, GTLayerParams& p);

// k eigenvectors of the symmetric-normalized graph Laplacian with the
// smallest non-zero eigenvalues (falling back onto the zero eigenspace when
// the graph has too few non-trivial modes). The graph is treated as
// undirected; duplicate edges and self-loops are ignored. Columns are
// orthonormal with the first non-negligible entry made positive, so the
// result is deterministic up to eigenvalue degeneracy.
Tensor laplacian_pe(const std::vector<std::pair<int, int>>& edges, std::size_t n,
                    std::size_t k);

EmbedParams make_embed_params(std::size_t d, std::size_t d_n, std::size_t d_e,
                              std::size_t k, std::uint64_t seed);
GTLayerParams make_gt_layer(std::size_t d, std::size_t d_ff, bool with_edges,
                            std::uint64_t seed);

}  // namespace flowattn
