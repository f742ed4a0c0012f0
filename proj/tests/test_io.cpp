#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flowattn/commands.hpp"
#include "flowattn/io.hpp"
#include "flowattn/synth.hpp"

using namespace flowattn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("flowattn-test-" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

SynthSpec io_spec() {
  SynthSpec s;
  s.num_predicates = 3;
  s.grid_rows = 3;
  s.grid_cols = 3;
  s.feat_dim = 6;
  s.edge_dim = 6;
  s.pe_dim = 2;
  s.seed = 99;
  return s;
}

ModelConfig io_cfg() {
  ModelConfig c;
  c.width = 6;
  c.head_count = 2;
  c.pe_dim = 2;
  c.gt_layers = 1;
  c.enc_layers = 1;
  c.d_ff = 8;
  c.seed = 100;
  c.text_feat_dim = 6;
  c.text_edge_dim = 6;
  c.vision_feat_dim = 6;
  c.grid_rows = 3;
  c.grid_cols = 3;
  return c;
}

}  // namespace

TEST_CASE("graph jsonl round-trips bit-exactly") {
  Scene scene = generate_scene(io_spec(), 3);
  const std::string line = graph_to_jsonl(scene.text);
  GraphBatch back = graph_from_jsonl(line);
  CHECK(graph_to_jsonl(back) == line);
  REQUIRE(back.edge_feats.has_value());
  for (std::size_t i = 0; i < back.node_feats.size(); ++i)
    CHECK(back.node_feats[i] == scene.text.node_feats[i]);
  for (std::size_t i = 0; i < back.pe.size(); ++i)
    CHECK(back.pe[i] == scene.text.pe[i]);
  CHECK(back.edges == scene.text.edges);
}

TEST_CASE("graph jsonl files persist a whole dataset") {
  TempDir tmp;
  std::vector<GraphBatch> graphs;
  for (int i = 0; i < 3; ++i) graphs.push_back(generate_scene(io_spec(), i).vision);
  const fs::path p = tmp.path / "graphs.jsonl";
  write_graphs_jsonl(p, graphs);
  const auto back = read_graphs_jsonl(p);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(graph_to_jsonl(back[i]) == graph_to_jsonl(graphs[i]));
}

TEST_CASE("triplet jsonl groups by video and preserves values") {
  TempDir tmp;
  Scene a = generate_scene(io_spec(), 0);
  Scene b = generate_scene(io_spec(), 1);
  const fs::path p = tmp.path / "triplets.jsonl";
  write_triplets_jsonl(p, {a.gt, b.gt});
  const auto sets = read_triplets_jsonl(p);
  REQUIRE(sets.size() == 2);
  CHECK(sets[0].video == a.gt.video);
  CHECK(sets[1].video == b.gt.video);
  REQUIRE(sets[0].triplets.size() == a.gt.triplets.size());
  CHECK(triplet_to_jsonl(sets[0].video, sets[0].triplets[0]) ==
        triplet_to_jsonl(a.gt.video, a.gt.triplets[0]));
}

TEST_CASE("bad triplet lines carry the file position") {
  TempDir tmp;
  const fs::path p = tmp.path / "bad.jsonl";
  std::ofstream(p) << "{\"v\":1,\"video\":\"x\"\n";
  CHECK_THROWS_WITH_AS(read_triplets_jsonl(p), doctest::Contains("bad.jsonl:1"),
                       ContractError);
}

TEST_CASE("checkpoint round-trips parameters and behaviour") {
  TempDir tmp;
  Model model(io_cfg());
  Scene scene = generate_scene(io_spec(), 5);
  auto [u0, v0] = model.forward(scene.text, scene.vision);

  const fs::path p = tmp.path / "model.ckpt";
  save_checkpoint(p, model);
  Model back = load_checkpoint(p);
  CHECK(back.config().width == model.config().width);
  CHECK(to_string(back.config().flow_direction) == to_string(model.config().flow_direction));

  std::vector<Tensor> orig, loaded;
  model.visit_params([&](const std::string&, Tensor& t) { orig.push_back(t); });
  back.visit_params([&](const std::string&, Tensor& t) { loaded.push_back(t); });
  REQUIRE(orig.size() == loaded.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    REQUIRE(orig[i].same_shape(loaded[i]));
    for (std::size_t j = 0; j < orig[i].size(); ++j) CHECK(orig[i][j] == loaded[i][j]);
  }
  auto [u1, v1] = back.forward(scene.text, scene.vision);
  for (std::size_t i = 0; i < u0.size(); ++i) CHECK(u0[i] == u1[i]);
  for (std::size_t i = 0; i < v0.size(); ++i) CHECK(v0[i] == v1[i]);
}

TEST_CASE("corrupt checkpoints are rejected with a description") {
  TempDir tmp;
  const fs::path p = tmp.path / "trash.ckpt";
  std::ofstream(p) << "not a checkpoint\n";
  CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("manifest"), ContractError);

  Model model(io_cfg());
  const fs::path q = tmp.path / "short.ckpt";
  save_checkpoint(q, model);
  // Truncate the payload.
  fs::resize_file(q, fs::file_size(q) - 64);
  CHECK_THROWS_WITH_AS(load_checkpoint(q), doctest::Contains("truncated"), ContractError);

  CHECK_THROWS_AS(load_checkpoint(tmp.path / "missing.ckpt"), ContractError);
}

TEST_CASE("config text parses, rejects unknown keys, and round-trips") {
  const std::string text =
      "# comment\n"
      "width = 8\n"
      "flow_direction = vision_to_text\n"
      "noise = 0.25\n"
      "epochs = 17\n";
  auto kv = parse_config_text(text);
  CHECK(kv.at("width") == "8");
  RunSettings s = settings_from_config(kv);
  CHECK(s.model.width == 8);
  CHECK(s.model.flow_direction == FlowDirection::VisionToText);
  CHECK(s.synth.noise == 0.25);
  CHECK(s.epochs == 17);

  RunSettings back = settings_from_config(parse_config_text(settings_to_config_text(s)));
  CHECK(back.model.width == s.model.width);
  CHECK(back.synth.noise == s.synth.noise);
  CHECK(back.epochs == s.epochs);

  CHECK_THROWS_WITH_AS(settings_from_config(parse_config_text("who = knows\n")),
                       doctest::Contains("unknown key"), ContractError);
  CHECK_THROWS_AS(settings_from_config(parse_config_text("width = abc\n")), ContractError);
  CHECK_THROWS_AS(parse_config_text("just words\n"), ContractError);
}
