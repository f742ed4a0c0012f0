#include "flowattn/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

namespace flowattn {

using namespace ad;

void GraphBatch::validate() const {
  const std::size_t n = node_count();
  for (const auto& [s, t] : edges) {
    if (s < 0 || t < 0 || static_cast<std::size_t>(s) >= n ||
        static_cast<std::size_t>(t) >= n) {
      throw ContractError("graph: edge (" + std::to_string(s) + "," +
                          std::to_string(t) + ") out of range for " +
                          std::to_string(n) + " nodes");
    }
  }
  if (edge_feats && edge_feats->rows() != edges.size()) {
    throw ShapeError("graph: " + std::to_string(edges.size()) + " edges but " +
                     std::to_string(edge_feats->rows()) + " edge feature rows");
  }
  if (!pe.empty() && pe.rows() != n) {
    throw ShapeError("graph: positional encodings " + pe.shape_str() + " for " +
                     std::to_string(n) + " nodes");
  }
}

void GTLayerParams::validate(std::size_t d) const {
  if (wq.rows() != d || wq.cols() != d || !wk.same_shape(wq) ||
      !wv.same_shape(wq) || !wo.same_shape(wq)) {
    throw ShapeError("gt layer: projections must be " + std::to_string(d) + "x" +
                     std::to_string(d));
  }
  if (with_edges && (we.rows() != d || woe.rows() != d)) {
    throw ShapeError("gt layer: edge projections must be " + std::to_string(d) +
                     "x" + std::to_string(d));
  }
}

namespace ad {

EmbeddedGraph embed_inputs(Binder& bind, const GraphBatch& g, EmbedParams& p) {
  g.validate();
  Tape& t = bind.tape();
  const std::size_t d = p.a0.rows();
  if (p.a0.cols() != g.node_feats.cols()) {
    throw ShapeError("embed_inputs: node projection " + p.a0.shape_str() +
                     " against features " + g.node_feats.shape_str());
  }
  Var alpha = t.constant(g.node_feats);
  Var h = add(matmul(alpha, transpose(bind(p.a0))), bind(p.a0_bias));

  if (!g.pe.empty()) {
    if (p.c0.cols() != g.pe.cols()) {
      throw ShapeError("embed_inputs: positional projection " + p.c0.shape_str() +
                       " against encodings " + g.pe.shape_str());
    }
    Var lambda = t.constant(g.pe);
    Var lam = add(matmul(lambda, transpose(bind(p.c0))), bind(p.c0_bias));
    h = add(h, lam);
  }

  EmbeddedGraph out{h, std::nullopt};
  if (g.edge_feats) {
    if (p.b0.cols() != g.edge_feats->cols()) {
      throw ShapeError("embed_inputs: edge projection " + p.b0.shape_str() +
                       " against features " + g.edge_feats->shape_str());
    }
    if (p.b0.rows() != d) {
      throw ShapeError("embed_inputs: edge projection output width " +
                       p.b0.shape_str() + " differs from node width " +
                       std::to_string(d));
    }
    Var beta = t.constant(*g.edge_feats);
    out.edges = add(matmul(beta, transpose(bind(p.b0))), bind(p.b0_bias));
  }
  return out;
}

// Numerically stable softmax over each destination node's incoming edges,
// built from gather/scatter primitives. The per-node max is a constant shift,
// so gradients stay exact.
static Var segment_softmax(Var logits, const std::vector<int>& dst, std::size_t n) {
  Tape& t = *logits.tape;
  const Tensor& lv = t.value(logits);
  Tensor mx(n, 1, 0.0);
  std::vector<char> seen(n, 0);
  for (std::size_t e = 0; e < dst.size(); ++e) {
    const std::size_t u = static_cast<std::size_t>(dst[e]);
    if (!seen[u] || lv(e, 0) > mx(u, 0)) {
      mx(u, 0) = lv(e, 0);
      seen[u] = 1;
    }
  }
  Var shifted = exp(sub(logits, gather_rows(t.constant(mx), dst)));
  Var denom = gather_rows(scatter_add_rows(shifted, dst, n), dst);
  return div(shifted, denom);
}

GTLayerOut gt_layer_forward(Binder& bind, Var h, std::optional<Var> e,
                            const std::vector<std::pair<int, int>>& edges,
                            GTLayerParams& p) {
  Tape& t = bind.tape();
  const std::size_t n = t.value(h).rows();
  const std::size_t d = t.value(h).cols();
  p.validate(d);
  if (p.with_edges != e.has_value()) {
    throw ContractError("gt_layer_forward: edge features " +
                        std::string(e ? "supplied" : "missing") +
                        " for a layer configured the other way");
  }

  Var h_attn;
  std::optional<Var> e_out;
  if (edges.empty()) {
    // No incoming information anywhere; the attention sub-layer contributes
    // nothing and the block reduces to its feed-forward residual.
    h_attn = t.constant(Tensor(n, d, 0.0));
    e_out = e;
  } else {
    std::vector<int> src(edges.size()), dst(edges.size());
    for (std::size_t i = 0; i < edges.size(); ++i) {
      src[i] = edges[i].first;
      dst[i] = edges[i].second;
    }
    Var u = layer_norm(h, bind(p.ln1_gamma), bind(p.ln1_beta));
    Var q = matmul(u, bind(p.wq));
    Var k = matmul(u, bind(p.wk));
    Var v = matmul(u, bind(p.wv));

    // Per-dimension scores on each edge; edge features gate them when present.
    Var w = mul(gather_rows(q, dst), gather_rows(k, src));
    if (e) {
      Var eu = layer_norm(*e, bind(p.lne_gamma), bind(p.lne_beta));
      w = mul(w, matmul(eu, bind(p.we)));
    }
    w = scale(w, 1.0 / std::sqrt(static_cast<double>(d)));

    Var alpha = segment_softmax(sum_rows(w), dst, n);
    Var messages = mul(alpha, gather_rows(v, src));
    h_attn = matmul(scatter_add_rows(messages, dst, n), bind(p.wo));
    if (e) e_out = add(*e, matmul(w, bind(p.woe)));
  }

  Var h1 = add(h, h_attn);
  Var w2 = layer_norm(h1, bind(p.ln2_gamma), bind(p.ln2_beta));
  Var f = add(matmul(gelu(add(matmul(w2, bind(p.ffn_w1)), bind(p.ffn_b1))),
                     bind(p.ffn_w2)),
              bind(p.ffn_b2));
  return {add(h1, f), e_out};
}

}  // namespace ad

std::pair<Tensor, std::optional<Tensor>> embed_inputs(const GraphBatch& g,
                                                      EmbedParams& p) {
  Tape t;
  Binder bind(t);
  EmbeddedGraph out = embed_inputs(bind, g, p);
  std::optional<Tensor> e;
  if (out.edges) e = t.value(*out.edges);
  return {t.value(out.nodes), std::move(e)};
}

std::pair<Tensor, std::optional<Tensor>> gt_layer_forward(
    const Tensor& h, const std::optional<Tensor>& e,
    const std::vector<std::pair<int, int>>& edges, GTLayerParams& p) {
  Tape t;
  Binder bind(t);
  std::optional<Var> ev;
  if (e) ev = t.leaf(*e);
  GTLayerOut out = gt_layer_forward(bind, t.leaf(h), ev, edges, p);
  std::optional<Tensor> eo;
  if (out.edges) eo = t.value(*out.edges);
  return {t.value(out.nodes), std::move(eo)};
}

Tensor laplacian_pe(const std::vector<std::pair<int, int>>& edges, std::size_t n,
                    std::size_t k) {
  if (n == 0) throw ContractError("laplacian_pe: empty graph");
  if (k >= n) {
    throw ContractError("laplacian_pe: requested " + std::to_string(k) +
                        " modes for " + std::to_string(n) + " nodes");
  }

  std::set<std::pair<int, int>> undirected;
  for (const auto& [s, t] : edges) {
    if (s < 0 || t < 0 || static_cast<std::size_t>(s) >= n ||
        static_cast<std::size_t>(t) >= n) {
      throw ContractError("laplacian_pe: edge endpoint out of range");
    }
    if (s == t) continue;
    undirected.insert({std::min(s, t), std::max(s, t)});
  }

  std::vector<double> degree(n, 0.0);
  for (const auto& [a, b] : undirected) {
    degree[static_cast<std::size_t>(a)] += 1.0;
    degree[static_cast<std::size_t>(b)] += 1.0;
  }

  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(static_cast<int>(n), static_cast<int>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (degree[i] > 0.0) lap(static_cast<int>(i), static_cast<int>(i)) = 1.0;
  }
  for (const auto& [a, b] : undirected) {
    const double w = -1.0 / std::sqrt(degree[static_cast<std::size_t>(a)] *
                                      degree[static_cast<std::size_t>(b)]);
    lap(a, b) = w;
    lap(b, a) = w;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap);
  if (solver.info() != Eigen::Success) {
    throw DomainError("laplacian_pe: eigendecomposition failed");
  }
  const auto& vals = solver.eigenvalues();   // ascending
  const auto& vecs = solver.eigenvectors();

  // Skip the (near-)zero eigenvalues, keeping enough columns to fill k.
  constexpr double kZeroTol = 1e-10;
  std::size_t zeros = 0;
  while (zeros < n && vals(static_cast<int>(zeros)) < kZeroTol) ++zeros;
  const std::size_t start = std::min(zeros, n - k);

  Tensor pe(n, k);
  for (std::size_t c = 0; c < k; ++c) {
    const int col = static_cast<int>(start + c);
    double sign = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = vecs(static_cast<int>(i), col);
      if (std::abs(v) > 1e-12) {
        sign = v > 0.0 ? 1.0 : -1.0;
        break;
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      pe(i, c) = sign * vecs(static_cast<int>(i), col);
  }
  return pe;
}

EmbedParams make_embed_params(std::size_t d, std::size_t d_n, std::size_t d_e,
                              std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EmbedParams p;
  p.a0 = xavier_uniform(d, d_n, rng);
  p.a0_bias = Tensor(1, d, 0.0);
  p.b0 = xavier_uniform(d, d_e, rng);
  p.b0_bias = Tensor(1, d, 0.0);
  p.c0 = xavier_uniform(d, k, rng);
  p.c0_bias = Tensor(1, d, 0.0);
  return p;
}

GTLayerParams make_gt_layer(std::size_t d, std::size_t d_ff, bool with_edges,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GTLayerParams p;
  p.wq = xavier_uniform(d, d, rng);
  p.wk = xavier_uniform(d, d, rng);
  p.wv = xavier_uniform(d, d, rng);
  p.wo = xavier_uniform(d, d, rng);
  p.ln1_gamma = Tensor(1, d, 1.0);
  p.ln1_beta = Tensor(1, d, 0.0);
  p.ln2_gamma = Tensor(1, d, 1.0);
  p.ln2_beta = Tensor(1, d, 0.0);
  p.ffn_w1 = xavier_uniform(d, d_ff, rng);
  p.ffn_b1 = Tensor(1, d_ff, 0.0);
  p.ffn_w2 = xavier_uniform(d_ff, d, rng);
  p.ffn_b2 = Tensor(1, d, 0.0);
  p.with_edges = with_edges;
  if (with_edges) {
    p.we = xavier_uniform(d, d, rng);
    p.woe = xavier_uniform(d, d, rng);
    p.lne_gamma = Tensor(1, d, 1.0);
    p.lne_beta = Tensor(1, d, 0.0);
  }
  return p;
}

}  // namespace flowattn
