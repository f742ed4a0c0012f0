#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flowattn/metrics.hpp"
#include "flowattn/model.hpp"

namespace flowattn {

// ---- JSON-lines formats ---------------------------------------------------
// Graph record (one graph per line, version 1):
//   {"v":1,"nodes":[[..],..],"edges":[[s,t],..],"edge_feats":[[..],..]|null,
//    "pe":[[..],..]}
// Triplet record (one triplet per line, version 1):
//   {"v":1,"video":"id","r":0,"t1":0,"t2":3,"s_cat":0,"o_cat":1,
//    "s_tube":[[x1,y1,x2,y2],..],"o_tube":[..],"score":0.5}
// Tubes list one box per frame of [t1, t2].

std::string graph_to_jsonl(const GraphBatch& g);
GraphBatch graph_from_jsonl(const std::string& line);
void write_graphs_jsonl(const std::filesystem::path& path,
                        const std::vector<GraphBatch>& graphs);
std::vector<GraphBatch> read_graphs_jsonl(const std::filesystem::path& path);

std::string triplet_to_jsonl(const std::string& video, const Triplet& t);
void write_triplets_jsonl(const std::filesystem::path& path,
                          const std::vector<TripletSet>& sets);
// Groups lines by video id, preserving first-seen order.
std::vector<TripletSet> read_triplets_jsonl(const std::filesystem::path& path);

// ---- checkpoint ------------------------------------------------------------
// Single file: one JSON manifest line (format tag, version, the model config
// and the ordered parameter name/shape list) followed by the raw
// little-endian 64-bit parameter values in manifest order.
void save_checkpoint(const std::filesystem::path& path, Model& model);
Model load_checkpoint(const std::filesystem::path& path);

// ---- key=value config -------------------------------------------------------
// Lines of `key = value`; '#' starts a comment. Unknown keys are errors so
// typos surface immediately.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

struct RunSettings {
  ModelConfig model;
  SynthSpec synth;
  int epochs = 100;
  int batch_size = 8;
  double lr = 1e-4;
  int train_scenes = 200;
  int val_scenes = 48;
};

RunSettings settings_from_config(const std::map<std::string, std::string>& kv);
std::string settings_to_config_text(const RunSettings& s);

}  // namespace flowattn
