#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flowattn/flow.hpp"
#include "oracles.hpp"

using namespace flowattn;

namespace {
const FlowConfig kSigmoid{};
}

TEST_CASE("capacities: single token with zero inputs") {
  // phi = sigmoid, so each capacity is sigma(0)^2 = 0.25.
  auto [in, out] = flow_capacities(Tensor::from_rows({{0.0}}), Tensor::from_rows({{0.0}}), kSigmoid);
  CHECK(in.item() == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(out.item() == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("capacities match the quadratic double-loop oracle") {
  std::mt19937_64 rng(23);
  for (const Phi phi : {Phi::Sigmoid, Phi::SoftplusEps}) {
    FlowConfig cfg{phi, 1e-6};
    Tensor q = oracle::random_tensor(6, 5, rng, -2.0, 2.0);
    Tensor k = oracle::random_tensor(9, 5, rng, -2.0, 2.0);
    auto [in, out] = flow_capacities(q, k, cfg);
    auto [oin, oout] = oracle::naive_capacities(q, k, cfg);
    for (std::size_t i = 0; i < in.rows(); ++i)
      CHECK(std::abs(in(i, 0) - oin[i]) < 1e-12);
    for (std::size_t j = 0; j < out.rows(); ++j)
      CHECK(std::abs(out(j, 0) - oout[j]) < 1e-12);
  }
}

TEST_CASE("capacities: identical query rows get identical inflow") {
  Tensor q = Tensor::from_rows({{0.3, -0.7}, {0.3, -0.7}, {1.0, 0.1}});
  std::mt19937_64 rng(29);
  Tensor k = oracle::random_tensor(4, 2, rng);
  auto [in, out] = flow_capacities(q, k, kSigmoid);
  (void)out;
  CHECK(in(0, 0) == in(1, 0));
  CHECK(in(0, 0) != in(2, 0));
}

TEST_CASE("capacity shape mismatch is a dimension error") {
  CHECK_THROWS_AS(flow_capacities(Tensor(2, 3, 0.1), Tensor(2, 4, 0.1), kSigmoid), ShapeError);
}

TEST_CASE("conserve: single source and sink forces both conserved flows to one") {
  FlowState fs = conserve(Tensor::from_rows({{0.4}}), Tensor::from_rows({{-1.2}}), kSigmoid);
  CHECK(fs.conserved_incoming.item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(fs.conserved_outgoing.item() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("conservation identities hold for random draws") {
  std::mt19937_64 rng(31);
  Tensor q = oracle::random_tensor(5, 4, rng, -3.0, 3.0);
  Tensor k = oracle::random_tensor(7, 4, rng, -3.0, 3.0);
  FlowState fs = conserve(q, k, kSigmoid);

  // Direct evaluation: after normalization every source emits exactly one
  // unit and every sink receives exactly one unit.
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  for (std::size_t j = 0; j < m; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c)
        total += oracle::phi(q(i, c), kSigmoid) * oracle::phi(k(j, c), kSigmoid);
    CHECK(std::abs(total / fs.outgoing(j, 0) - 1.0) < 1e-9);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t c = 0; c < d; ++c)
        total += oracle::phi(q(i, c), kSigmoid) * oracle::phi(k(j, c), kSigmoid);
    CHECK(std::abs(total / fs.incoming(i, 0) - 1.0) < 1e-9);
  }
}

TEST_CASE("conserve: duplicating a key row duplicates its conserved entry") {
  std::mt19937_64 rng(37);
  Tensor q = oracle::random_tensor(3, 4, rng);
  Tensor k = oracle::random_tensor(4, 4, rng);
  for (std::size_t c = 0; c < 4; ++c) k(3, c) = k(1, c);
  FlowState fs = conserve(q, k, kSigmoid);
  CHECK(fs.outgoing(3, 0) == fs.outgoing(1, 0));
  CHECK(fs.conserved_outgoing(3, 0) == fs.conserved_outgoing(1, 0));
}

TEST_CASE("flow attention: single-token case collapses to sigmoid(1) * V") {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor q = oracle::random_tensor(1, 3, rng, -2.0, 2.0);
    Tensor k = oracle::random_tensor(1, 3, rng, -2.0, 2.0);
    Tensor v = oracle::random_tensor(1, 4, rng, -2.0, 2.0);
    Tensor r = flow_attention(q, k, v, kSigmoid);
    const double gate = 0.7310585786300049;  // sigmoid(1)
    for (std::size_t e = 0; e < 4; ++e)
      CHECK(r(0, e) == doctest::Approx(gate * v(0, e)).epsilon(1e-12));
  }
}

TEST_CASE("flow attention matches the straight-line transcription") {
  std::mt19937_64 rng(43);
  Tensor q = oracle::random_tensor(2, 2, rng, -2.0, 2.0);
  Tensor k = oracle::random_tensor(3, 2, rng, -2.0, 2.0);
  Tensor v = oracle::random_tensor(3, 2, rng, -2.0, 2.0);
  Tensor got = flow_attention(q, k, v, kSigmoid);
  Tensor want = oracle::flow_attention_transcription(q, k, v, kSigmoid);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("flow attention: jointly permuting sources leaves the result unchanged") {
  std::mt19937_64 rng(47);
  Tensor q = oracle::random_tensor(4, 3, rng);
  Tensor k = oracle::random_tensor(5, 3, rng);
  Tensor v = oracle::random_tensor(5, 2, rng);
  Tensor base = flow_attention(q, k, v, kSigmoid);

  const std::vector<int> perm{3, 0, 4, 2, 1};
  Tensor kp = gather_rows(k, perm);
  Tensor vp = gather_rows(v, perm);
  Tensor permuted = flow_attention(q, kp, vp, kSigmoid);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(permuted[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("flow attention: permuting queries permutes the rows identically") {
  std::mt19937_64 rng(53);
  Tensor q = oracle::random_tensor(4, 3, rng);
  Tensor k = oracle::random_tensor(5, 3, rng);
  Tensor v = oracle::random_tensor(5, 2, rng);
  Tensor base = flow_attention(q, k, v, kSigmoid);
  const std::vector<int> perm{2, 0, 3, 1};
  Tensor rp = flow_attention(gather_rows(q, perm), k, v, kSigmoid);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t e = 0; e < 2; ++e)
      CHECK(rp(i, e) == doctest::Approx(base(static_cast<std::size_t>(perm[i]), e)).epsilon(1e-14));
}

TEST_CASE("flow attention output stays finite on wild inputs") {
  std::mt19937_64 rng(59);
  Tensor q = oracle::random_tensor(6, 4, rng, -50.0, 50.0);
  Tensor k = oracle::random_tensor(7, 4, rng, -50.0, 50.0);
  Tensor v = oracle::random_tensor(7, 3, rng, -50.0, 50.0);
  for (const Phi phi : {Phi::Sigmoid, Phi::SoftplusEps}) {
    Tensor r = flow_attention(q, k, v, FlowConfig{phi, 1e-6});
    CHECK(r.all_finite());
  }
}

TEST_CASE("benchmark kernels agree with the tape pipeline") {
  std::mt19937_64 rng(61);
  Tensor q = oracle::random_tensor(8, 6, rng);
  Tensor k = oracle::random_tensor(10, 6, rng);
  Tensor v = oracle::random_tensor(10, 5, rng);
  Tensor fast = flow_attention_eval(q, k, v, kSigmoid);
  Tensor slow = flow_attention(q, k, v, kSigmoid);
  for (std::size_t i = 0; i < fast.size(); ++i)
    CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-12));

  Tensor std_attn = softmax_attention_eval(q, k, v);
  Tensor std_oracle = oracle::standard_attention(q, k, v);
  for (std::size_t i = 0; i < std_attn.size(); ++i)
    CHECK(std_attn[i] == doctest::Approx(std_oracle[i]).epsilon(1e-12));
}

TEST_CASE("gradcheck through flow attention") {
  std::mt19937_64 rng(67);
  std::vector<Tensor> inputs{oracle::random_tensor(3, 2, rng),
                             oracle::random_tensor(4, 2, rng),
                             oracle::random_tensor(4, 3, rng)};
  std::mt19937_64 wrng(68);
  Tensor w = oracle::random_tensor(3, 3, wrng);
  const double err = gradcheck_multi(
      [&w](Tape& t, const std::vector<Var>& vs) {
        Var r = ad::flow_attention(vs[0], vs[1], vs[2], FlowConfig{});
        return ad::sum_all(ad::mul(r, t.constant(w)));
      },
      inputs, 1e-5);
  CHECK(err < 1e-4);
  CHECK(err < 1e-6);  // comfortably below the acceptance bound
}

TEST_CASE("flow config validation") {
  CHECK_THROWS_AS(flow_attention(Tensor(1, 1, 0.0), Tensor(1, 1, 0.0), Tensor(1, 1, 0.0),
                                 FlowConfig{Phi::SoftplusEps, 0.0}),
                  ContractError);
  CHECK_THROWS_AS(flow_attention(Tensor(2, 2, 0.1), Tensor(3, 2, 0.1), Tensor(2, 2, 0.1), kSigmoid),
                  ShapeError);
}
