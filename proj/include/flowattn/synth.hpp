#pragma once

#include <cstdint>

#include "flowattn/graph.hpp"
#include "flowattn/metrics.hpp"

namespace flowattn {

// Seeded generator of synthetic cross-modal scenes. Each scene places a few
// entities on a patch grid, assigns every entity pair a predicate, and emits:
//   - a text graph whose tokens carry class/predicate prototype vectors,
//     fully connected, with the subject->object edge carrying the predicate
//     prototype (positional encodings from the token chain);
//   - a vision graph over the patch grid whose entity cells carry class and
//     predicate prototype content on top of clutter and noise (positional
//     encodings from the grid adjacency);
//   - ground-truth triplets with static per-frame box tubes at the entity
//     cells over a sampled interval.
// At zero noise the text features are exactly the prototypes, so the
// retrieval task has a known ceiling. Vision stays harder: its signal shares
// cells with clutter that is present at every noise level.
struct SynthSpec {
  int num_predicates = 8;
  int num_entities = 2;      // per scene
  int entity_classes = 4;
  int grid_rows = 5;
  int grid_cols = 5;
  int feat_dim = 16;         // d_n, node features in both branches
  int edge_dim = 16;         // d_e, text edge features
  int pe_dim = 4;            // k
  int frame_count = 8;
  int clutter_cells = 4;
  double noise = 0.1;
  std::uint64_t seed = 1234;

  void validate() const;
};

// Dataset-level prototype dictionary; a pure function of the spec seed.
struct SynthPrototypes {
  Tensor text_predicate;    // P x d_n unit rows
  Tensor vision_predicate;  // P x d_n unit rows
  Tensor entity_class;      // C x d_n unit rows
  Tensor clutter;           // 8 x d_n unit rows
  Tensor edge_predicate;    // P x d_e unit rows
  Tensor mean_entity;       // 1 x d_n
};

SynthPrototypes make_prototypes(const SynthSpec& spec);

struct ScenePair {
  int subject_entity = 0;
  int object_entity = 0;
  int predicate = 0;
};

struct Scene {
  GraphBatch text;
  GraphBatch vision;
  TripletSet gt;
  std::vector<ScenePair> pairs;
  std::vector<int> entity_cell;   // flat row-major patch index per entity
  std::vector<int> entity_class;
};

// Deterministic in (spec.seed, scene_index).
Scene generate_scene(const SynthSpec& spec, std::uint64_t scene_index);

// Noise-free text graph representing one predicate; the query side of
// prototype ranking.
GraphBatch predicate_prototype_text(const SynthSpec& spec, int predicate);

// Patch indices covered by a pair (subject cell and object cell).
std::vector<int> pair_patches(const Scene& scene, const ScenePair& pair);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace flowattn
