#include "flowattn/io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace flowattn {

using json = nlohmann::json;

namespace {

json tensor_to_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor tensor_from_json(const json& rows) {
  if (!rows.is_array() || rows.empty()) throw ContractError("jsonl: expected a non-empty array of rows");
  const std::size_t r = rows.size();
  const std::size_t c = rows[0].size();
  Tensor t(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    if (rows[i].size() != c) throw ContractError("jsonl: ragged rows");
    for (std::size_t j = 0; j < c; ++j) t(i, j) = rows[i][j].get<double>();
  }
  return t;
}

json tube_to_json(const Tube& tube) {
  json boxes = json::array();
  for (const Box& b : tube.boxes) boxes.push_back(json::array({b.x1, b.y1, b.x2, b.y2}));
  return boxes;
}

Tube tube_from_json(const json& boxes, int t1, int t2) {
  Tube tube{t1, t2, {}};
  for (const json& b : boxes) {
    if (!b.is_array() || b.size() != 4) throw ContractError("jsonl: box must be [x1,y1,x2,y2]");
    tube.boxes.push_back({b[0].get<double>(), b[1].get<double>(),
                          b[2].get<double>(), b[3].get<double>()});
  }
  tube.validate();
  return tube;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open '" + path.string() + "' for reading");
  return in;
}

}  // namespace

std::string graph_to_jsonl(const GraphBatch& g) {
  g.validate();
  json j;
  j["v"] = 1;
  j["nodes"] = tensor_to_json(g.node_feats);
  json edges = json::array();
  for (const auto& [s, t] : g.edges) edges.push_back(json::array({s, t}));
  j["edges"] = std::move(edges);
  j["edge_feats"] = g.edge_feats ? tensor_to_json(*g.edge_feats) : json(nullptr);
  j["pe"] = tensor_to_json(g.pe);
  return j.dump();
}

GraphBatch graph_from_jsonl(const std::string& line) {
  json j = json::parse(line);
  if (j.value("v", 0) != 1) throw ContractError("graph jsonl: unsupported version");
  GraphBatch g;
  g.node_feats = tensor_from_json(j.at("nodes"));
  for (const json& e : j.at("edges")) {
    g.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  }
  if (!j.at("edge_feats").is_null()) g.edge_feats = tensor_from_json(j.at("edge_feats"));
  g.pe = tensor_from_json(j.at("pe"));
  g.validate();
  return g;
}

void write_graphs_jsonl(const std::filesystem::path& path,
                        const std::vector<GraphBatch>& graphs) {
  auto out = open_out(path);
  for (const GraphBatch& g : graphs) out << graph_to_jsonl(g) << '\n';
}

std::vector<GraphBatch> read_graphs_jsonl(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<GraphBatch> graphs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    graphs.push_back(graph_from_jsonl(line));
  }
  return graphs;
}

std::string triplet_to_jsonl(const std::string& video, const Triplet& t) {
  t.validate();
  json j;
  j["v"] = 1;
  j["video"] = video;
  j["r"] = t.relation;
  j["t1"] = t.t1;
  j["t2"] = t.t2;
  j["s_cat"] = t.subject_cat;
  j["o_cat"] = t.object_cat;
  j["s_tube"] = tube_to_json(t.subject_tube);
  j["o_tube"] = tube_to_json(t.object_tube);
  j["score"] = t.score;
  return j.dump();
}

void write_triplets_jsonl(const std::filesystem::path& path,
                          const std::vector<TripletSet>& sets) {
  auto out = open_out(path);
  for (const TripletSet& s : sets) {
    for (const Triplet& t : s.triplets) out << triplet_to_jsonl(s.video, t) << '\n';
  }
}

std::vector<TripletSet> read_triplets_jsonl(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<TripletSet> sets;
  std::map<std::string, std::size_t> by_video;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ContractError(path.string() + ":" + std::to_string(line_no) +
                          ": bad triplet record: " + e.what());
    }
    if (j.value("v", 0) != 1) {
      throw ContractError(path.string() + ":" + std::to_string(line_no) +
                          ": unsupported triplet record version");
    }
    Triplet t;
    t.relation = j.at("r").get<int>();
    t.t1 = j.at("t1").get<int>();
    t.t2 = j.at("t2").get<int>();
    t.subject_cat = j.at("s_cat").get<int>();
    t.object_cat = j.at("o_cat").get<int>();
    t.subject_tube = tube_from_json(j.at("s_tube"), t.t1, t.t2);
    t.object_tube = tube_from_json(j.at("o_tube"), t.t1, t.t2);
    t.score = j.at("score").get<double>();
    t.validate();
    const std::string video = j.at("video").get<std::string>();
    auto it = by_video.find(video);
    if (it == by_video.end()) {
      by_video.emplace(video, sets.size());
      sets.push_back(TripletSet{video, 0, {}});
      it = by_video.find(video);
    }
    sets[it->second].triplets.push_back(std::move(t));
  }
  return sets;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
  json j;
  j["width"] = c.width;
  j["head_count"] = c.head_count;
  j["pe_dim"] = c.pe_dim;
  j["gt_layers"] = c.gt_layers;
  j["enc_layers"] = c.enc_layers;
  j["d_ff"] = c.d_ff;
  j["sigma_t"] = c.sigma_t;
  j["flow_direction"] = to_string(c.flow_direction);
  j["tau_init"] = c.tau_init;
  j["phi"] = to_string(c.phi);
  j["phi_eps"] = c.phi_eps;
  j["seed"] = c.seed;
  j["text_feat_dim"] = c.text_feat_dim;
  j["text_edge_dim"] = c.text_edge_dim;
  j["vision_feat_dim"] = c.vision_feat_dim;
  j["grid_rows"] = c.grid_rows;
  j["grid_cols"] = c.grid_cols;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.width = j.at("width").get<std::size_t>();
  c.head_count = j.at("head_count").get<int>();
  c.pe_dim = j.at("pe_dim").get<std::size_t>();
  c.gt_layers = j.at("gt_layers").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.sigma_t = j.at("sigma_t").get<double>();
  c.flow_direction = flow_direction_from_string(j.at("flow_direction").get<std::string>());
  c.tau_init = j.at("tau_init").get<double>();
  c.phi = phi_from_string(j.at("phi").get<std::string>());
  c.phi_eps = j.at("phi_eps").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.text_feat_dim = j.at("text_feat_dim").get<std::size_t>();
  c.text_edge_dim = j.at("text_edge_dim").get<std::size_t>();
  c.vision_feat_dim = j.at("vision_feat_dim").get<std::size_t>();
  c.grid_rows = j.at("grid_rows").get<std::size_t>();
  c.grid_cols = j.at("grid_cols").get<std::size_t>();
  return c;
}

void write_le_doubles(std::ostream& out, const Tensor& t) {
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

void read_le_doubles(std::istream& in, Tensor& t, const std::string& name) {
  for (double& v : t.data()) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
      throw ContractError("checkpoint: truncated data while reading '" + name + "'");
    }
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    std::memcpy(&v, &bits, sizeof v);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model) {
  json manifest;
  manifest["format"] = "flowattn-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(model.config());
  json params = json::array();
  std::vector<Tensor*> order;
  model.visit_params([&](const std::string& name, Tensor& t) {
    params.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    order.push_back(&t);
  });
  manifest["params"] = std::move(params);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open '" + path.string() + "' for writing");
  out << manifest.dump() << '\n';
  for (Tensor* t : order) write_le_doubles(out, *t);
  if (!out) throw ContractError("checkpoint: write to '" + path.string() + "' failed");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open checkpoint '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header)) throw ContractError("checkpoint: missing manifest line");
  json manifest;
  try {
    manifest = json::parse(header);
  } catch (const json::exception& e) {
    throw ContractError("checkpoint: corrupt manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "flowattn-checkpoint" ||
      manifest.value("version", 0) != 1) {
    throw ContractError("checkpoint: unrecognized format");
  }

  Model model(config_from_json(manifest.at("config")));
  std::vector<std::pair<std::string, Tensor*>> order;
  model.visit_params([&](const std::string& name, Tensor& t) {
    order.emplace_back(name, &t);
  });
  const json& params = manifest.at("params");
  if (params.size() != order.size()) {
    throw ContractError("checkpoint: manifest lists " + std::to_string(params.size()) +
                        " parameters, model has " + std::to_string(order.size()));
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    const json& p = params[i];
    if (p.at("name").get<std::string>() != order[i].first ||
        p.at("rows").get<std::size_t>() != order[i].second->rows() ||
        p.at("cols").get<std::size_t>() != order[i].second->cols()) {
      throw ContractError("checkpoint: parameter '" + order[i].first +
                          "' does not match the manifest entry");
    }
    read_le_doubles(in, *order[i].second, order[i].first);
  }
  return model;
}

// ---- key=value config --------------------------------------------------------

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config line " + std::to_string(line_no) +
                          ": expected key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value);

template <>
double parse_number<double>(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ContractError("config: bad number for '" + key + "': " + value);
  }
}

template <>
long long parse_number<long long>(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ContractError("config: bad integer for '" + key + "': " + value);
  }
}

}  // namespace

RunSettings settings_from_config(const std::map<std::string, std::string>& kv) {
  RunSettings s;
  for (const auto& [key, value] : kv) {
    auto as_int = [&] { return parse_number<long long>(key, value); };
    auto as_double = [&] { return parse_number<double>(key, value); };
    if (key == "width") s.model.width = static_cast<std::size_t>(as_int());
    else if (key == "head_count") s.model.head_count = static_cast<int>(as_int());
    else if (key == "pe_dim") {
      s.model.pe_dim = static_cast<std::size_t>(as_int());
      s.synth.pe_dim = static_cast<int>(s.model.pe_dim);
    } else if (key == "gt_layers") s.model.gt_layers = static_cast<int>(as_int());
    else if (key == "enc_layers") s.model.enc_layers = static_cast<int>(as_int());
    else if (key == "d_ff") s.model.d_ff = static_cast<std::size_t>(as_int());
    else if (key == "sigma_t") s.model.sigma_t = as_double();
    else if (key == "flow_direction") s.model.flow_direction = flow_direction_from_string(value);
    else if (key == "tau_init") s.model.tau_init = as_double();
    else if (key == "phi") s.model.phi = phi_from_string(value);
    else if (key == "phi_eps") s.model.phi_eps = as_double();
    else if (key == "seed") {
      s.model.seed = static_cast<std::uint64_t>(as_int());
      s.synth.seed = s.model.seed;
    } else if (key == "feat_dim") {
      s.synth.feat_dim = static_cast<int>(as_int());
      s.model.text_feat_dim = static_cast<std::size_t>(s.synth.feat_dim);
      s.model.vision_feat_dim = static_cast<std::size_t>(s.synth.feat_dim);
    } else if (key == "edge_dim") {
      s.synth.edge_dim = static_cast<int>(as_int());
      s.model.text_edge_dim = static_cast<std::size_t>(s.synth.edge_dim);
    } else if (key == "grid_rows") {
      s.synth.grid_rows = static_cast<int>(as_int());
      s.model.grid_rows = static_cast<std::size_t>(s.synth.grid_rows);
    } else if (key == "grid_cols") {
      s.synth.grid_cols = static_cast<int>(as_int());
      s.model.grid_cols = static_cast<std::size_t>(s.synth.grid_cols);
    } else if (key == "num_predicates") s.synth.num_predicates = static_cast<int>(as_int());
    else if (key == "num_entities") s.synth.num_entities = static_cast<int>(as_int());
    else if (key == "entity_classes") s.synth.entity_classes = static_cast<int>(as_int());
    else if (key == "frame_count") s.synth.frame_count = static_cast<int>(as_int());
    else if (key == "clutter_cells") s.synth.clutter_cells = static_cast<int>(as_int());
    else if (key == "noise") s.synth.noise = as_double();
    else if (key == "epochs") s.epochs = static_cast<int>(as_int());
    else if (key == "batch_size") s.batch_size = static_cast<int>(as_int());
    else if (key == "lr") s.lr = as_double();
    else if (key == "train_scenes") s.train_scenes = static_cast<int>(as_int());
    else if (key == "val_scenes") s.val_scenes = static_cast<int>(as_int());
    else throw ContractError("config: unknown key '" + key + "'");
  }
  s.model.validate();
  s.synth.validate();
  return s;
}

std::string settings_to_config_text(const RunSettings& s) {
  std::ostringstream out;
  out << "# model\n";
  out << "width = " << s.model.width << "\n";
  out << "head_count = " << s.model.head_count << "\n";
  out << "pe_dim = " << s.model.pe_dim << "\n";
  out << "gt_layers = " << s.model.gt_layers << "\n";
  out << "enc_layers = " << s.model.enc_layers << "\n";
  out << "d_ff = " << s.model.d_ff << "\n";
  out << "sigma_t = " << s.model.sigma_t << "\n";
  out << "flow_direction = " << to_string(s.model.flow_direction) << "\n";
  out << "tau_init = " << s.model.tau_init << "\n";
  out << "phi = " << to_string(s.model.phi) << "\n";
  out << "seed = " << s.model.seed << "\n";
  out << "# data\n";
  out << "feat_dim = " << s.synth.feat_dim << "\n";
  out << "edge_dim = " << s.synth.edge_dim << "\n";
  out << "grid_rows = " << s.synth.grid_rows << "\n";
  out << "grid_cols = " << s.synth.grid_cols << "\n";
  out << "num_predicates = " << s.synth.num_predicates << "\n";
  out << "num_entities = " << s.synth.num_entities << "\n";
  out << "entity_classes = " << s.synth.entity_classes << "\n";
  out << "frame_count = " << s.synth.frame_count << "\n";
  out << "clutter_cells = " << s.synth.clutter_cells << "\n";
  out << "noise = " << s.synth.noise << "\n";
  out << "# training\n";
  out << "epochs = " << s.epochs << "\n";
  out << "batch_size = " << s.batch_size << "\n";
  out << "lr = " << s.lr << "\n";
  out << "train_scenes = " << s.train_scenes << "\n";
  out << "val_scenes = " << s.val_scenes << "\n";
  return out.str();
}

}  // namespace flowattn
