#include "flowattn/synth.hpp"

#include <algorithm>
#include <cmath>

namespace flowattn {

void SynthSpec::validate() const {
  if (num_predicates < 2) throw ContractError("synth: need at least 2 predicates");
  if (num_entities < 2) throw ContractError("synth: need at least 2 entities");
  if (entity_classes < 1) throw ContractError("synth: need at least 1 entity class");
  if (noise < 0.0) throw ContractError("synth: noise must be >= 0");
  if (grid_rows < 1 || grid_cols < 1) throw ContractError("synth: empty grid");
  if (grid_rows * grid_cols < num_entities) {
    throw ContractError("synth: grid too small for the entities");
  }
  if (frame_count < 1) throw ContractError("synth: need at least one frame");
  if (pe_dim >= grid_rows * grid_cols) {
    throw ContractError("synth: pe_dim must be below the patch count");
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 over the combined word
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

Tensor unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Tensor t = gaussian(rows, cols, rng);
  for (std::size_t i = 0; i < rows; ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < cols; ++j) n += t(i, j) * t(i, j);
    n = std::sqrt(n);
    if (n == 0.0) n = 1.0;
    for (std::size_t j = 0; j < cols; ++j) t(i, j) /= n;
  }
  return t;
}

void add_row(Tensor& dst, std::size_t row, const Tensor& src, std::size_t src_row,
             double scale = 1.0) {
  for (std::size_t j = 0; j < dst.cols(); ++j) dst(row, j) += scale * src(src_row, j);
}

std::vector<std::pair<int, int>> grid_edges(int rows, int cols) {
  std::vector<std::pair<int, int>> edges;
  auto at = [cols](int r, int c) { return r * cols + c; };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (c + 1 < cols) {
        edges.emplace_back(at(r, c), at(r, c + 1));
        edges.emplace_back(at(r, c + 1), at(r, c));
      }
      if (r + 1 < rows) {
        edges.emplace_back(at(r, c), at(r + 1, c));
        edges.emplace_back(at(r + 1, c), at(r, c));
      }
    }
  }
  return edges;
}

std::vector<std::pair<int, int>> chain_edges(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i + 1 < n; ++i) {
    edges.emplace_back(i, i + 1);
    edges.emplace_back(i + 1, i);
  }
  return edges;
}

std::vector<std::pair<int, int>> complete_edges(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) edges.emplace_back(i, j);
  return edges;
}

// Copies the first min(d_e, d_n) components; the rest stays zero.
void fit_width(Tensor& dst, std::size_t row, const Tensor& src, std::size_t src_row) {
  const std::size_t w = std::min(dst.cols(), src.cols());
  for (std::size_t j = 0; j < w; ++j) dst(row, j) += src(src_row, j);
}

Box cell_box(int cell, int rows, int cols) {
  const int r = cell / cols, c = cell % cols;
  return Box{static_cast<double>(c) / cols, static_cast<double>(r) / rows,
             static_cast<double>(c + 1) / cols, static_cast<double>(r + 1) / rows};
}

// Spectral encodings capped by the node count, zero-padded to the requested
// width so every graph in a dataset shares one PE dimension.
Tensor padded_pe(const std::vector<std::pair<int, int>>& edges, int n, int k) {
  const int usable = std::min(k, n - 1);
  Tensor pe = laplacian_pe(edges, static_cast<std::size_t>(n),
                           static_cast<std::size_t>(usable));
  if (usable == k) return pe;
  Tensor out(static_cast<std::size_t>(n), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < pe.rows(); ++i)
    for (std::size_t j = 0; j < pe.cols(); ++j) out(i, j) = pe(i, j);
  return out;
}

}  // namespace

SynthPrototypes make_prototypes(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, 0xbeef));
  SynthPrototypes p;
  // Predicate content is deliberately louder than entity content so the
  // cross-modal alignment cannot be solved from entity identity alone.
  p.text_predicate = scale(unit_rows(spec.num_predicates, spec.feat_dim, rng), 1.5);
  p.vision_predicate = scale(unit_rows(spec.num_predicates, spec.feat_dim, rng), 1.5);
  p.entity_class = scale(unit_rows(spec.entity_classes, spec.feat_dim, rng), 0.6);
  p.clutter = unit_rows(8, spec.feat_dim, rng);
  p.edge_predicate = unit_rows(spec.num_predicates, spec.edge_dim, rng);
  p.mean_entity = Tensor(1, spec.feat_dim);
  for (int c = 0; c < spec.entity_classes; ++c)
    add_row(p.mean_entity, 0, p.entity_class, c, 1.0 / spec.entity_classes);
  return p;
}

Scene generate_scene(const SynthSpec& spec, std::uint64_t scene_index) {
  spec.validate();
  const SynthPrototypes proto = make_prototypes(spec);
  std::mt19937_64 rng(mix_seed(spec.seed, scene_index));

  Scene scene;

  // Entities: distinct cells, random classes.
  const int n_cells = spec.grid_rows * spec.grid_cols;
  std::vector<int> cells(n_cells);
  for (int i = 0; i < n_cells; ++i) cells[i] = i;
  for (int i = 0; i < spec.num_entities; ++i) {
    std::uniform_int_distribution<int> pick(i, n_cells - 1);
    std::swap(cells[i], cells[pick(rng)]);
    scene.entity_cell.push_back(cells[i]);
    std::uniform_int_distribution<int> cls(0, spec.entity_classes - 1);
    scene.entity_class.push_back(cls(rng));
  }

  // Every unordered entity pair gets a predicate.
  std::uniform_int_distribution<int> pred(0, spec.num_predicates - 1);
  for (int i = 0; i < spec.num_entities; ++i) {
    for (int j = i + 1; j < spec.num_entities; ++j) {
      scene.pairs.push_back({i, j, pred(rng)});
    }
  }

  // Text graph: per pair, tokens [subject, predicate, object].
  const int tokens = static_cast<int>(scene.pairs.size()) * 3;
  Tensor tfeat(tokens, spec.feat_dim);
  std::vector<int> token_pred(tokens, -1);
  for (std::size_t p = 0; p < scene.pairs.size(); ++p) {
    const ScenePair& sp = scene.pairs[p];
    const int base = static_cast<int>(p) * 3;
    add_row(tfeat, base + 0, proto.entity_class, scene.entity_class[sp.subject_entity]);
    add_row(tfeat, base + 1, proto.text_predicate, sp.predicate);
    add_row(tfeat, base + 2, proto.entity_class, scene.entity_class[sp.object_entity]);
    token_pred[base + 1] = sp.predicate;
  }
  if (spec.noise > 0.0) {
    Tensor noise = gaussian(tfeat.rows(), tfeat.cols(), rng, spec.noise);
    for (std::size_t i = 0; i < tfeat.size(); ++i) tfeat[i] += noise[i];
  }

  scene.text.node_feats = tfeat;
  scene.text.edges = complete_edges(tokens);
  Tensor efeat(scene.text.edges.size(), spec.edge_dim);
  for (std::size_t e = 0; e < scene.text.edges.size(); ++e) {
    const auto [s, t] = scene.text.edges[e];
    // Subject->object edges within a pair carry that pair's predicate; the
    // rest carry the mean of their endpoints' prototype content.
    if (s / 3 == t / 3 && s % 3 == 0 && t % 3 == 2) {
      fit_width(efeat, e, proto.edge_predicate, scene.pairs[static_cast<std::size_t>(s / 3)].predicate);
    } else {
      Tensor avg(1, spec.feat_dim);
      add_row(avg, 0, tfeat, s, 0.5);
      add_row(avg, 0, tfeat, t, 0.5);
      fit_width(efeat, e, avg, 0);
    }
  }
  if (spec.noise > 0.0) {
    Tensor noise = gaussian(efeat.rows(), efeat.cols(), rng, spec.noise);
    for (std::size_t i = 0; i < efeat.size(); ++i) efeat[i] += noise[i];
  }
  scene.text.edge_feats = efeat;
  scene.text.pe = padded_pe(chain_edges(tokens), tokens, spec.pe_dim);
  scene.text.validate();

  // Vision graph: clutter everywhere it lands, prototypes at entity cells.
  Tensor vfeat(n_cells, spec.feat_dim);
  std::uniform_int_distribution<int> any_cell(0, n_cells - 1);
  std::uniform_int_distribution<int> any_clutter(0, static_cast<int>(proto.clutter.rows()) - 1);
  for (int i = 0; i < spec.clutter_cells; ++i) {
    add_row(vfeat, any_cell(rng), proto.clutter, any_clutter(rng), 0.6);
  }
  for (int i = 0; i < spec.num_entities; ++i) {
    add_row(vfeat, scene.entity_cell[i], proto.entity_class, scene.entity_class[i]);
  }
  for (const ScenePair& sp : scene.pairs) {
    add_row(vfeat, scene.entity_cell[sp.subject_entity], proto.vision_predicate, sp.predicate);
    add_row(vfeat, scene.entity_cell[sp.object_entity], proto.vision_predicate, sp.predicate);
  }
  if (spec.noise > 0.0) {
    Tensor noise = gaussian(vfeat.rows(), vfeat.cols(), rng, spec.noise);
    for (std::size_t i = 0; i < vfeat.size(); ++i) vfeat[i] += noise[i];
  }
  scene.vision.node_feats = vfeat;
  scene.vision.edges = grid_edges(spec.grid_rows, spec.grid_cols);
  scene.vision.pe = padded_pe(scene.vision.edges, n_cells, spec.pe_dim);
  scene.vision.validate();

  // Ground truth: one triplet per pair, static boxes over a sampled interval.
  scene.gt.video = "scene-" + std::to_string(scene_index);
  scene.gt.frame_count = spec.frame_count;
  for (const ScenePair& sp : scene.pairs) {
    std::uniform_int_distribution<int> start(0, spec.frame_count - 2);
    const int t1 = start(rng);
    std::uniform_int_distribution<int> stop(t1 + 1, spec.frame_count - 1);
    const int t2 = stop(rng);
    Triplet trip;
    trip.relation = sp.predicate;
    trip.t1 = t1;
    trip.t2 = t2;
    trip.subject_cat = scene.entity_class[sp.subject_entity];
    trip.object_cat = scene.entity_class[sp.object_entity];
    const Box sb = cell_box(scene.entity_cell[sp.subject_entity], spec.grid_rows, spec.grid_cols);
    const Box ob = cell_box(scene.entity_cell[sp.object_entity], spec.grid_rows, spec.grid_cols);
    trip.subject_tube = Tube{t1, t2, std::vector<Box>(static_cast<std::size_t>(t2 - t1 + 1), sb)};
    trip.object_tube = Tube{t1, t2, std::vector<Box>(static_cast<std::size_t>(t2 - t1 + 1), ob)};
    scene.gt.triplets.push_back(std::move(trip));
  }
  scene.gt.validate();
  return scene;
}

GraphBatch predicate_prototype_text(const SynthSpec& spec, int predicate) {
  spec.validate();
  if (predicate < 0 || predicate >= spec.num_predicates) {
    throw ContractError("predicate_prototype_text: predicate out of range");
  }
  const SynthPrototypes proto = make_prototypes(spec);
  GraphBatch g;
  Tensor feat(3, spec.feat_dim);
  add_row(feat, 0, proto.mean_entity, 0);
  add_row(feat, 1, proto.text_predicate, predicate);
  add_row(feat, 2, proto.mean_entity, 0);
  g.node_feats = feat;
  g.edges = complete_edges(3);
  Tensor efeat(g.edges.size(), spec.edge_dim);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto [s, t] = g.edges[e];
    if (s == 0 && t == 2) {
      fit_width(efeat, e, proto.edge_predicate, predicate);
    } else {
      Tensor avg(1, spec.feat_dim);
      add_row(avg, 0, feat, s, 0.5);
      add_row(avg, 0, feat, t, 0.5);
      fit_width(efeat, e, avg, 0);
    }
  }
  g.edge_feats = efeat;
  g.pe = padded_pe(chain_edges(3), 3, spec.pe_dim);
  g.validate();
  return g;
}

std::vector<int> pair_patches(const Scene& scene, const ScenePair& pair) {
  return {scene.entity_cell[pair.subject_entity], scene.entity_cell[pair.object_entity]};
}

}  // namespace flowattn
