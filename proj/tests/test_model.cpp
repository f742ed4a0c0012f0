#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowattn/commands.hpp"
#include "flowattn/model.hpp"
#include "oracles.hpp"

using namespace flowattn;

namespace {

SynthSpec tiny_spec(std::uint64_t seed = 5001) {
  SynthSpec s;
  s.num_predicates = 3;
  s.num_entities = 2;
  s.entity_classes = 2;
  s.grid_rows = 3;
  s.grid_cols = 3;
  s.feat_dim = 6;
  s.edge_dim = 6;
  s.pe_dim = 2;
  s.frame_count = 6;
  s.clutter_cells = 2;
  s.noise = 0.05;
  s.seed = seed;
  return s;
}

ModelConfig tiny_cfg(FlowDirection dir, std::uint64_t seed = 5002) {
  ModelConfig c;
  c.width = 6;
  c.head_count = 2;
  c.pe_dim = 2;
  c.gt_layers = 1;
  c.enc_layers = 2;
  c.d_ff = 8;
  c.flow_direction = dir;
  c.seed = seed;
  c.text_feat_dim = 6;
  c.text_edge_dim = 6;
  c.vision_feat_dim = 6;
  c.grid_rows = 3;
  c.grid_cols = 3;
  return c;
}

Tensor unit_rows_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Tensor t = oracle::random_tensor(r, c, rng);
  for (std::size_t i = 0; i < r; ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < c; ++j) n += t(i, j) * t(i, j);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < c; ++j) t(i, j) /= n;
  }
  return t;
}

}  // namespace

TEST_CASE("clip loss: single pair is exactly zero") {
  Tensor u = Tensor::from_rows({{1, 0}});
  Tensor v = Tensor::from_rows({{0, 1}});
  CHECK(clip_loss(u, v, 0.5) == 0.0);
}

TEST_CASE("clip loss: identity rows at tau 1") {
  Tensor eye = Tensor::identity(2);
  const double want = 2.0 * std::log(1.0 + std::exp(-1.0));
  CHECK(std::abs(clip_loss(eye, eye, 1.0) - want) < 1e-12);
}

TEST_CASE("clip loss is symmetric in its arguments") {
  std::mt19937_64 rng(211);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t m = 1 + rep % 5, d = 4;
    Tensor u = unit_rows_tensor(m, d, rng);
    Tensor v = unit_rows_tensor(m, d, rng);
    const double tau = 0.2 + 0.1 * (rep % 7);
    CHECK(std::abs(clip_loss(u, v, tau) - clip_loss(v, u, tau)) < 1e-12);
  }
}

TEST_CASE("clip loss decreases as off-diagonal similarity falls") {
  auto build_v = [](double off) {
    return Tensor::from_rows({{1.0, 0.0}, {off, std::sqrt(1.0 - off * off)}});
  };
  Tensor u = Tensor::identity(2);
  double prev = 1e300;
  for (double off : {0.9, 0.6, 0.3, 0.0}) {
    const double loss = clip_loss(u, build_v(off), 1.0);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("clip loss is invariant under a joint rotation") {
  std::mt19937_64 rng(223);
  Tensor u = unit_rows_tensor(3, 2, rng);
  Tensor v = unit_rows_tensor(3, 2, rng);
  const double theta = 0.77;
  Tensor rot = Tensor::from_rows({{std::cos(theta), -std::sin(theta)},
                                  {std::sin(theta), std::cos(theta)}});
  const double base = clip_loss(u, v, 0.7);
  const double rotated = clip_loss(matmul(u, rot), matmul(v, rot), 0.7);
  CHECK(std::abs(base - rotated) < 1e-12);
}

TEST_CASE("clip loss contract errors") {
  Tensor u = Tensor::identity(2);
  CHECK_THROWS_AS(clip_loss(u, Tensor::identity(3), 1.0), ShapeError);
  CHECK_THROWS_AS(clip_loss(u, u, -1.0), DomainError);
}

TEST_CASE("forward is deterministic for a fixed seed") {
  const SynthSpec spec = tiny_spec();
  Scene scene = generate_scene(spec, 0);
  Model a(tiny_cfg(FlowDirection::TextToVision));
  Model b(tiny_cfg(FlowDirection::TextToVision));
  auto [u1, v1] = a.forward(scene.text, scene.vision);
  auto [u2, v2] = b.forward(scene.text, scene.vision);
  for (std::size_t i = 0; i < u1.size(); ++i) CHECK(u1[i] == u2[i]);
  for (std::size_t i = 0; i < v1.size(); ++i) CHECK(v1[i] == v2[i]);
}

TEST_CASE("pooled embeddings are unit length") {
  const SynthSpec spec = tiny_spec();
  Scene scene = generate_scene(spec, 1);
  Model m(tiny_cfg(FlowDirection::TextToVision));
  auto [u, v] = m.forward(scene.text, scene.vision);
  double nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) nu += u[i] * u[i];
  for (std::size_t i = 0; i < v.size(); ++i) nv += v[i] * v[i];
  CHECK(std::abs(nu - 1.0) < 1e-9);
  CHECK(std::abs(nv - 1.0) < 1e-9);
}

TEST_CASE("flow direction controls which branch sees the other") {
  const SynthSpec spec = tiny_spec();
  Scene scene = generate_scene(spec, 2);
  GraphBatch text_perturbed = scene.text;
  text_perturbed.node_feats(0, 0) += 0.25;
  GraphBatch vision_perturbed = scene.vision;
  vision_perturbed.node_feats(0, 0) += 0.25;

  auto changed = [](const Tensor& a, const Tensor& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i]) return true;
    return false;
  };

  SUBCASE("none: branches are fully independent") {
    Model m(tiny_cfg(FlowDirection::None));
    auto [u0, v0] = m.forward(scene.text, scene.vision);
    auto [u1, v1] = m.forward(text_perturbed, scene.vision);
    CHECK(changed(u0, u1));
    CHECK(!changed(v0, v1));
    auto [u2, v2] = m.forward(scene.text, vision_perturbed);
    CHECK(!changed(u0, u2));
    CHECK(changed(v0, v2));
  }
  SUBCASE("text_to_vision: text reaches the vision embedding only") {
    Model m(tiny_cfg(FlowDirection::TextToVision));
    auto [u0, v0] = m.forward(scene.text, scene.vision);
    auto [u1, v1] = m.forward(text_perturbed, scene.vision);
    CHECK(changed(u1, u0));
    CHECK(changed(v1, v0));  // text flows into vision
    auto [u2, v2] = m.forward(scene.text, vision_perturbed);
    CHECK(!changed(u2, u0));  // vision never reaches the text branch
    CHECK(changed(v2, v0));
  }
  SUBCASE("vision_to_text: the mirror image") {
    Model m(tiny_cfg(FlowDirection::VisionToText));
    auto [u0, v0] = m.forward(scene.text, scene.vision);
    auto [u1, v1] = m.forward(text_perturbed, scene.vision);
    CHECK(changed(u1, u0));
    CHECK(!changed(v1, v0));
    auto [u2, v2] = m.forward(scene.text, vision_perturbed);
    CHECK(changed(u2, u0));
    CHECK(changed(v2, v0));
  }
}

TEST_CASE("train step decreases the loss on the same batch") {
  const SynthSpec spec = tiny_spec();
  std::vector<Scene> scenes{generate_scene(spec, 0), generate_scene(spec, 1),
                            generate_scene(spec, 2), generate_scene(spec, 3)};
  std::vector<const Scene*> batch;
  for (const Scene& s : scenes) batch.push_back(&s);

  Model model(tiny_cfg(FlowDirection::TextToVision));
  auto loss_now = [&] {
    Tape t;
    Binder bind(t);
    return t.value(batch_clip_loss(model, bind, batch)).item();
  };
  const double before = loss_now();
  Adam opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});
  const double step_loss = train_step(model, batch, opt);
  CHECK(step_loss == doctest::Approx(before));
  CHECK(loss_now() < before);
}

TEST_CASE("zero learning rate leaves every parameter unchanged") {
  const SynthSpec spec = tiny_spec();
  std::vector<Scene> scenes{generate_scene(spec, 0), generate_scene(spec, 1)};
  std::vector<const Scene*> batch{&scenes[0], &scenes[1]};
  Model model(tiny_cfg(FlowDirection::TextToVision));

  std::vector<Tensor> before;
  model.visit_params([&](const std::string&, Tensor& t) { before.push_back(t); });
  Adam opt(AdamConfig{0.0, 0.9, 0.999, 1e-8});
  train_step(model, batch, opt);
  std::size_t idx = 0;
  model.visit_params([&](const std::string&, Tensor& t) {
    const Tensor& b = before[idx++];
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == b[i]);
  });
}

TEST_CASE("fixed seed gives an identical training trajectory") {
  const SynthSpec spec = tiny_spec();
  std::vector<Scene> scenes;
  for (int i = 0; i < 8; ++i) scenes.push_back(generate_scene(spec, i));

  auto run = [&] {
    Model model(tiny_cfg(FlowDirection::TextToVision));
    Adam opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});
    std::vector<double> losses;
    for (const EpochLog& e : train_model(model, scenes, 5, 4, opt))
      losses.push_back(e.mean_loss);
    losses.push_back(model.tau());
    return losses;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("temperature stays positive and is learnable") {
  const SynthSpec spec = tiny_spec();
  std::vector<Scene> scenes{generate_scene(spec, 0), generate_scene(spec, 1)};
  std::vector<const Scene*> batch{&scenes[0], &scenes[1]};
  Model model(tiny_cfg(FlowDirection::TextToVision));
  const double tau0 = model.tau();
  CHECK(tau0 > 0.0);
  Adam opt(AdamConfig{1e-2, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 3; ++i) train_step(model, batch, opt);
  CHECK(model.tau() > 0.0);
  CHECK(model.tau() != tau0);
}

TEST_CASE("rank_by_cosine: exact prototype ranks first, signs decide orthogonal pairs") {
  Tensor query = Tensor::from_rows({{0.6, 0.8}});
  Tensor protos = Tensor::from_rows({{0.0, 1.0}, {0.6, 0.8}, {1.0, 0.0}});
  RankedPredicates r = rank_by_cosine(query, protos);
  CHECK(r.order[0] == 1);
  CHECK(r.scores[0] == doctest::Approx(1.0).epsilon(1e-12));

  Tensor two = Tensor::from_rows({{1.0, 0.0}, {-1.0, 0.0}});
  RankedPredicates s = rank_by_cosine(Tensor::from_rows({{0.9, 0.1}}), two);
  CHECK(s.order[0] == 0);
  CHECK(s.scores[0] > 0.0);
  CHECK(s.scores[1] < 0.0);

  CHECK_THROWS_AS(rank_by_cosine(Tensor::from_rows({{0.0, 0.0}}), two), DomainError);
  CHECK_THROWS_AS(rank_by_cosine(query, Tensor(0, 2, 0.0)), ContractError);
}

TEST_CASE("predict_predicates matches a brute-force recomputation") {
  const SynthSpec spec = tiny_spec();
  Scene scene = generate_scene(spec, 4);
  Model model(tiny_cfg(FlowDirection::TextToVision));
  std::vector<GraphBatch> protos;
  for (int c = 0; c < spec.num_predicates; ++c)
    protos.push_back(predicate_prototype_text(spec, c));
  std::vector<std::vector<int>> patches{pair_patches(scene, scene.pairs[0])};

  const auto got = predict_predicates(model, scene.vision, patches, protos);
  REQUIRE(got.size() == 1);

  // Brute force: recompute each candidate's score with explicit loops.
  std::vector<double> scores(protos.size());
  for (std::size_t c = 0; c < protos.size(); ++c) {
    Tape t;
    Binder bind(t);
    auto feats = model.forward_branches(bind, protos[c], scene.vision);
    Tensor uc = t.value(model.pooled_text(bind, feats.text));
    Tensor pe = t.value(model.pooled_vision(bind, feats.vision, &patches[0]));
    double dot = 0.0;
    for (std::size_t j = 0; j < pe.cols(); ++j) dot += pe(0, j) * uc(0, j);
    scores[c] = dot;
  }
  std::vector<int> order(protos.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  CHECK(got[0].order == order);
  for (std::size_t i = 0; i < order.size(); ++i)
    CHECK(got[0].scores[i] == doctest::Approx(scores[order[i]]).epsilon(1e-12));

  CHECK_THROWS_AS(predict_predicates(model, scene.vision, patches, {}), ContractError);
}

TEST_CASE("end-to-end parameter gradients match central differences") {
  SynthSpec spec = tiny_spec();
  spec.feat_dim = 2;
  spec.edge_dim = 2;
  spec.pe_dim = 1;
  spec.grid_rows = 2;
  spec.grid_cols = 2;
  ModelConfig cfg = tiny_cfg(FlowDirection::TextToVision);
  cfg.width = 2;
  cfg.head_count = 1;
  cfg.pe_dim = 1;
  cfg.enc_layers = 1;
  cfg.d_ff = 2;
  cfg.text_feat_dim = 2;
  cfg.text_edge_dim = 2;
  cfg.vision_feat_dim = 2;
  cfg.grid_rows = 2;
  cfg.grid_cols = 2;
  Model model(cfg);
  std::vector<Scene> scenes{generate_scene(spec, 0), generate_scene(spec, 1)};
  std::vector<const Scene*> batch{&scenes[0], &scenes[1]};
  CHECK(model_param_gradcheck(model, batch, 1e-5) < 1e-4);
}

TEST_CASE("model config validation") {
  ModelConfig bad = tiny_cfg(FlowDirection::None);
  bad.width = 5;  // not divisible by 2 heads
  CHECK_THROWS_AS(Model{bad}, ContractError);
  bad = tiny_cfg(FlowDirection::None);
  bad.tau_init = 0.0;
  CHECK_THROWS_AS(Model{bad}, ContractError);
}

TEST_CASE("flow direction strings round-trip") {
  for (FlowDirection d : {FlowDirection::None, FlowDirection::TextToVision,
                          FlowDirection::VisionToText}) {
    CHECK(flow_direction_from_string(to_string(d)) == d);
  }
  CHECK_THROWS_AS(flow_direction_from_string("sideways"), ContractError);
}
