#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowattn/graph.hpp"
#include "oracles.hpp"

using namespace flowattn;

namespace {

GraphBatch tiny_graph(std::mt19937_64& rng, int n, int d_n, int k,
                      std::vector<std::pair<int, int>> edges,
                      std::optional<int> d_e = std::nullopt) {
  GraphBatch g;
  g.node_feats = oracle::random_tensor(n, d_n, rng);
  g.edges = std::move(edges);
  if (d_e) g.edge_feats = oracle::random_tensor(g.edges.size(), *d_e, rng);
  g.pe = oracle::random_tensor(n, k, rng);
  return g;
}

}  // namespace

TEST_CASE("embed: identity projection with zero positional weights") {
  GraphBatch g;
  g.node_feats = Tensor::from_rows({{1, 2}, {3, 4}});
  g.pe = Tensor::from_rows({{0.5}, {-0.5}});
  EmbedParams p = make_embed_params(2, 2, 1, 1, 1);
  p.a0 = Tensor::identity(2);
  p.a0_bias = Tensor(1, 2, 0.0);
  p.c0 = Tensor(2, 1, 0.0);
  p.c0_bias = Tensor(1, 2, 0.0);
  auto [h, e] = embed_inputs(g, p);
  CHECK(!e.has_value());
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i] == g.node_feats[i]);
}

TEST_CASE("embed: zero features land on the bias plus projected encodings") {
  std::mt19937_64 rng(137);
  GraphBatch g;
  g.node_feats = Tensor(3, 2, 0.0);
  g.pe = oracle::random_tensor(3, 1, rng);
  EmbedParams p = make_embed_params(2, 2, 1, 1, 2);
  auto [h, e] = embed_inputs(g, p);
  (void)e;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      const double lam = p.c0(c, 0) * g.pe(i, 0) + p.c0_bias(0, c);
      CHECK(h(i, c) == doctest::Approx(p.a0_bias(0, c) + lam).epsilon(1e-14));
    }
  }
}

TEST_CASE("embed matches a loop transcription on random inputs") {
  std::mt19937_64 rng(139);
  const int n = 4, d_n = 3, d_e = 2, k = 2, d = 5;
  GraphBatch g = tiny_graph(rng, n, d_n, k, {{0, 1}, {1, 2}, {3, 0}}, d_e);
  EmbedParams p = make_embed_params(d, d_n, d_e, k, 3);
  auto [h, e] = embed_inputs(g, p);
  REQUIRE(e.has_value());

  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < d; ++c) {
      double acc = p.a0_bias(0, c) + p.c0_bias(0, c);
      for (int a = 0; a < d_n; ++a) acc += p.a0(c, a) * g.node_feats(i, a);
      for (int a = 0; a < k; ++a) acc += p.c0(c, a) * g.pe(i, a);
      CHECK(h(i, c) == doctest::Approx(acc).epsilon(1e-13));
    }
  }
  for (std::size_t ei = 0; ei < g.edges.size(); ++ei) {
    for (int c = 0; c < d; ++c) {
      double acc = p.b0_bias(0, c);
      for (int a = 0; a < d_e; ++a) acc += p.b0(c, a) * (*g.edge_feats)(ei, a);
      CHECK((*e)(ei, c) == doctest::Approx(acc).epsilon(1e-13));
    }
  }
}

TEST_CASE("embed is affine in the node features") {
  std::mt19937_64 rng(149);
  const int n = 3, d_n = 4, k = 1, d = 4;
  GraphBatch g = tiny_graph(rng, n, d_n, k, {});
  EmbedParams p = make_embed_params(d, d_n, 1, k, 5);
  const double alpha = 0.7, beta = -1.3;

  GraphBatch gx = g, gy = g, gmix = g, g0 = g;
  gy.node_feats = oracle::random_tensor(n, d_n, rng);
  g0.node_feats = Tensor(n, d_n, 0.0);
  gmix.node_feats = add(scale(gx.node_feats, alpha), scale(gy.node_feats, beta));

  Tensor hx = embed_inputs(gx, p).first;
  Tensor hy = embed_inputs(gy, p).first;
  Tensor h0 = embed_inputs(g0, p).first;
  Tensor hmix = embed_inputs(gmix, p).first;
  for (std::size_t i = 0; i < hmix.size(); ++i) {
    const double want = alpha * hx[i] + beta * hy[i] - (alpha + beta - 1.0) * h0[i];
    CHECK(hmix[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("embed names the offending parameter on dimension mismatch") {
  GraphBatch g;
  g.node_feats = Tensor(2, 3, 0.1);
  g.pe = Tensor(2, 1, 0.1);
  EmbedParams p = make_embed_params(4, 2, 1, 1, 7);  // projection expects d_n = 2
  CHECK_THROWS_WITH_AS(embed_inputs(g, p), doctest::Contains("node projection"), ShapeError);
}

TEST_CASE("laplacian pe: path graph on three nodes") {
  // Normalized Laplacian eigenvalues are 0, 1, 2; the first non-zero mode is
  // (1, 0, -1)/sqrt(2) after sign fixing.
  Tensor pe = laplacian_pe({{0, 1}, {1, 2}}, 3, 1);
  const double r = 1.0 / std::sqrt(2.0);
  CHECK(pe(0, 0) == doctest::Approx(r).epsilon(1e-10));
  CHECK(pe(1, 0) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(pe(2, 0) == doctest::Approx(-r).epsilon(1e-10));
}

TEST_CASE("laplacian pe columns are orthonormal") {
  auto check_orthonormal = [](const Tensor& pe) {
    for (std::size_t a = 0; a < pe.cols(); ++a) {
      for (std::size_t b = a; b < pe.cols(); ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < pe.rows(); ++i) dot += pe(i, a) * pe(i, b);
        CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) < 1e-8);
      }
    }
  };
  // Complete graph: fully degenerate non-zero spectrum.
  std::vector<std::pair<int, int>> k4;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) k4.emplace_back(i, j);
  check_orthonormal(laplacian_pe(k4, 4, 2));

  // Two isolated nodes: only the zero eigenspace exists.
  check_orthonormal(laplacian_pe({}, 2, 1));

  // A ring.
  std::vector<std::pair<int, int>> ring;
  for (int i = 0; i < 6; ++i) ring.emplace_back(i, (i + 1) % 6);
  check_orthonormal(laplacian_pe(ring, 6, 3));
}

TEST_CASE("laplacian pe rejects k >= n") {
  CHECK_THROWS_AS(laplacian_pe({{0, 1}}, 2, 2), ContractError);
}

TEST_CASE("gt layer: single node without edges reduces to the feed-forward residual") {
  const std::size_t d = 4;
  GTLayerParams p = make_gt_layer(d, 8, false, 11);
  Tensor h = Tensor::from_rows({{0.3, -0.2, 0.9, 0.0}});
  auto [h2, e2] = gt_layer_forward(h, std::nullopt, {}, p);
  CHECK(!e2.has_value());

  // Loop transcription of LN -> FFN -> residual, with no attention term.
  double mean = 0.0;
  for (std::size_t c = 0; c < d; ++c) mean += h(0, c) / d;
  double var = 0.0;
  for (std::size_t c = 0; c < d; ++c) var += (h(0, c) - mean) * (h(0, c) - mean) / d;
  std::vector<double> ln(d);
  for (std::size_t c = 0; c < d; ++c)
    ln[c] = (h(0, c) - mean) / std::sqrt(var + 1e-6) * p.ln2_gamma(0, c) + p.ln2_beta(0, c);
  std::vector<double> mid(p.ffn_w1.cols());
  for (std::size_t a = 0; a < mid.size(); ++a) {
    double acc = p.ffn_b1(0, a);
    for (std::size_t c = 0; c < d; ++c) acc += ln[c] * p.ffn_w1(c, a);
    mid[a] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
  }
  for (std::size_t c = 0; c < d; ++c) {
    double acc = p.ffn_b2(0, c);
    for (std::size_t a = 0; a < mid.size(); ++a) acc += mid[a] * p.ffn_w2(a, c);
    CHECK(h2(0, c) == doctest::Approx(h(0, c) + acc).epsilon(1e-12));
  }
}

TEST_CASE("gt layer matches a loop transcription of its attention rule") {
  // Two nodes, one edge 0 -> 1, with edge features.
  const std::size_t d = 3;
  std::mt19937_64 rng(151);
  GTLayerParams p = make_gt_layer(d, 4, true, 13);
  Tensor h = oracle::random_tensor(2, d, rng);
  Tensor e = oracle::random_tensor(1, d, rng);
  auto [h2, e2] = gt_layer_forward(h, e, {{0, 1}}, p);
  REQUIRE(e2.has_value());

  auto layer_norm_row = [&](const Tensor& x, std::size_t row, const Tensor& gamma,
                            const Tensor& beta) {
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) mean += x(row, c) / x.cols();
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c)
      var += (x(row, c) - mean) * (x(row, c) - mean) / x.cols();
    std::vector<double> out(x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c)
      out[c] = (x(row, c) - mean) / std::sqrt(var + 1e-6) * gamma(0, c) + beta(0, c);
    return out;
  };
  auto project = [&](const std::vector<double>& row, const Tensor& w) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t c = 0; c < w.cols(); ++c)
      for (std::size_t a = 0; a < w.rows(); ++a) out[c] += row[a] * w(a, c);
    return out;
  };

  const auto u0 = layer_norm_row(h, 0, p.ln1_gamma, p.ln1_beta);
  const auto u1 = layer_norm_row(h, 1, p.ln1_gamma, p.ln1_beta);
  const auto q1 = project(u1, p.wq);   // destination
  const auto k0 = project(u0, p.wk);   // source
  const auto v0 = project(u0, p.wv);
  const auto eu = layer_norm_row(e, 0, p.lne_gamma, p.lne_beta);
  const auto ep = project(eu, p.we);

  // Per-dimension gated scores; a single incoming edge softmaxes to one.
  std::vector<double> w_vec(d);
  for (std::size_t c = 0; c < d; ++c) w_vec[c] = q1[c] * k0[c] * ep[c] / std::sqrt(3.0);
  const auto attn_out = project(v0, p.wo);

  // Node 1 takes the message; node 0 has no incoming edge.
  Tensor h_mid = h;
  for (std::size_t c = 0; c < d; ++c) h_mid(1, c) += attn_out[c];
  for (std::size_t row = 0; row < 2; ++row) {
    const auto ln2 = layer_norm_row(h_mid, row, p.ln2_gamma, p.ln2_beta);
    auto mid = project(ln2, p.ffn_w1);
    for (std::size_t a = 0; a < mid.size(); ++a) {
      const double z = mid[a] + p.ffn_b1(0, a);
      mid[a] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
    }
    const auto f = project(mid, p.ffn_w2);
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(h2(row, c) ==
            doctest::Approx(h_mid(row, c) + f[c] + p.ffn_b2(0, c)).epsilon(1e-11));
    }
  }
  // Edge update: residual of the projected gated scores.
  const auto eo = project(w_vec, p.woe);
  for (std::size_t c = 0; c < d; ++c)
    CHECK((*e2)(0, c) == doctest::Approx(e(0, c) + eo[c]).epsilon(1e-11));
}

TEST_CASE("gt layer is permutation equivariant") {
  const std::size_t d = 6;
  std::mt19937_64 rng(157);
  GTLayerParams p = make_gt_layer(d, 12, true, 17);
  const int n = 5;
  Tensor h = oracle::random_tensor(n, d, rng);
  std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 0}, {3, 4}, {4, 0}, {1, 4}};
  Tensor e = oracle::random_tensor(edges.size(), d, rng);
  auto [h_base, e_base] = gt_layer_forward(h, e, edges, p);

  const std::vector<int> perm{2, 4, 0, 1, 3};  // node i -> perm[i]
  Tensor hp(n, d);
  for (int i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) hp(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]), c) = h(i, c);
  std::vector<std::pair<int, int>> edges_p;
  for (auto [s, t] : edges)
    edges_p.emplace_back(perm[static_cast<std::size_t>(s)], perm[static_cast<std::size_t>(t)]);
  auto [h_perm, e_perm] = gt_layer_forward(hp, e, edges_p, p);
  REQUIRE(e_perm.has_value());

  for (int i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      CHECK(h_perm(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]), c) ==
            doctest::Approx(h_base(i, c)).epsilon(1e-11));
  for (std::size_t ei = 0; ei < edges.size(); ++ei)
    for (std::size_t c = 0; c < d; ++c)
      CHECK((*e_perm)(ei, c) == doctest::Approx((*e_base)(ei, c)).epsilon(1e-11));
}

TEST_CASE("gt layer keeps edge width constant") {
  const std::size_t d = 4;
  GTLayerParams p = make_gt_layer(d, 8, true, 19);
  std::mt19937_64 rng(163);
  Tensor h = oracle::random_tensor(3, d, rng);
  Tensor e = oracle::random_tensor(2, d, rng);
  auto [h2, e2] = gt_layer_forward(h, e, {{0, 1}, {2, 1}}, p);
  (void)h2;
  REQUIRE(e2.has_value());
  CHECK(e2->rows() == 2);
  CHECK(e2->cols() == d);
}

TEST_CASE("gt layer rejects mismatched edge configuration") {
  const std::size_t d = 4;
  GTLayerParams p = make_gt_layer(d, 8, false, 23);
  std::mt19937_64 rng(167);
  Tensor h = oracle::random_tensor(2, d, rng);
  Tensor e = oracle::random_tensor(1, d, rng);
  CHECK_THROWS_AS(gt_layer_forward(h, e, {{0, 1}}, p), ContractError);
}

TEST_CASE("gradcheck through one graph transformer layer") {
  const std::size_t d = 3;
  GTLayerParams p = make_gt_layer(d, 4, true, 29);
  std::mt19937_64 rng(173);
  Tensor h = oracle::random_tensor(3, d, rng);
  Tensor e = oracle::random_tensor(3, d, rng);
  const std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 0}};
  std::mt19937_64 wrng(174);
  Tensor w = oracle::random_tensor(3, d, wrng);
  const double err = gradcheck_multi(
      [&](Tape& t, const std::vector<Var>& vs) {
        Binder bind(t);
        auto out = ad::gt_layer_forward(bind, vs[0], vs[1], edges, p);
        Var score = ad::sum_all(ad::mul(out.nodes, t.constant(w)));
        return ad::add(score, ad::sum_all(*out.edges));
      },
      {h, e}, 1e-5);
  CHECK(err < 1e-4);
}
