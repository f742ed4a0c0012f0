#pragma once

#include <functional>
#include <string>
#include <unordered_map>

#include "flowattn/flow.hpp"
#include "flowattn/graph.hpp"
#include "flowattn/synth.hpp"

namespace flowattn {

enum class FlowDirection { None, TextToVision, VisionToText };

std::string to_string(FlowDirection d);
FlowDirection flow_direction_from_string(const std::string& s);
std::string to_string(Phi p);
Phi phi_from_string(const std::string& s);

struct ModelConfig {
  std::size_t width = 16;  // d
  int head_count = 2;
  std::size_t pe_dim = 4;  // k
  int gt_layers = 1;
  int enc_layers = 4;      // one per hierarchy level
  std::size_t d_ff = 32;
  double sigma_t = 1.0;
  FlowDirection flow_direction = FlowDirection::TextToVision;
  double tau_init = 0.07;
  Phi phi = Phi::Sigmoid;
  double phi_eps = 1e-6;
  std::uint64_t seed = 42;
  std::size_t text_feat_dim = 16;
  std::size_t text_edge_dim = 16;
  std::size_t vision_feat_dim = 16;
  std::size_t grid_rows = 5;
  std::size_t grid_cols = 5;

  void validate() const;
};

struct ProjectionParams {
  Tensor w;  // d x d
  Tensor b;  // 1 x d
};

// Dual-branch architecture: each branch embeds its graph, runs the graph
// transformer stack, then the hierarchy-aware encoder; the configured flow
// direction transfers information across branches after the final encoder
// layers (queries from the receiving branch, keys and values from the
// sending one) as a residual. Each branch is mean-pooled, projected and
// L2-normalized into the two contrastive embeddings.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  struct BranchFeatures {
    Var text;    // tokens x d
    Var vision;  // patches x d
  };
  BranchFeatures forward_branches(Binder& bind, const GraphBatch& text,
                                  const GraphBatch& vision);

  struct Embeddings {
    Var text;    // 1 x d, unit norm
    Var vision;  // 1 x d, unit norm
  };
  Embeddings forward(Binder& bind, const GraphBatch& text, const GraphBatch& vision);

  // Plain-tensor forward: (text embedding u, vision embedding v).
  std::pair<Tensor, Tensor> forward(const GraphBatch& text, const GraphBatch& vision);

  // Pooled, projected, normalized embeddings of branch features (optionally
  // of a patch subset on the vision side, for pair-level predicate ranking).
  Var pooled_text(Binder& bind, Var text_feats);
  Var pooled_vision(Binder& bind, Var vision_feats,
                    const std::vector<int>* patches = nullptr);

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);

  Tensor& log_tau() { return log_tau_; }
  double tau() const { return std::exp(log_tau_[0]); }

 private:
  Var pooled(Binder& bind, Var feats, ProjectionParams& proj,
             const std::vector<int>* subset);

  ModelConfig cfg_;
  FlowConfig flow_cfg_;
  EmbedParams text_embed_, vision_embed_;
  std::vector<GTLayerParams> text_gt_, vision_gt_;
  std::vector<EncoderLayerParams> text_enc_, vision_enc_;
  ProjectionParams text_proj_, vision_proj_;
  Tensor log_tau_;  // 1 x 1
};

namespace ad {

// Symmetric InfoNCE over the M x M similarity matrix of unit-normalized
// rows: mean negative log-likelihood of the diagonal under row softmax, in
// both directions. tau is the (positive) temperature.
Var clip_loss(Var u_rows, Var v_rows, Var tau);

}  // namespace ad

double clip_loss(const Tensor& u_rows, const Tensor& v_rows, double tau);

struct AdamConfig {
  double lr = 1e-4;  // default initial learning rate
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  void update(Tensor& param, const Tensor& grad);
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  struct State {
    Tensor m, v;
    long step = 0;
  };
  AdamConfig cfg_;
  std::unordered_map<const Tensor*, State> states_;
};

// Contrastive loss of a batch of scenes under the model's current
// parameters and temperature.
Var batch_clip_loss(Model& model, Binder& bind, const std::vector<const Scene*>& batch);

// One optimization step on a batch of scenes; returns the loss value.
// Throws TrainingError when the loss or a gradient is non-finite.
double train_step(Model& model, const std::vector<const Scene*>& batch, Adam& opt);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
};

// Shuffled mini-batch training, deterministic in the model seed.
std::vector<EpochLog> train_model(
    Model& model, const std::vector<Scene>& scenes, int epochs, int batch_size,
    Adam& opt, const std::function<void(const EpochLog&)>& on_epoch = nullptr);

struct RankedPredicates {
  std::vector<int> order;      // predicate ids, best first
  std::vector<double> scores;  // aligned with order
};

// Cosine ranking of a query embedding against prototype rows; ties keep the
// lower index first.
RankedPredicates rank_by_cosine(const Tensor& query, const Tensor& prototypes);

// Ranks every candidate predicate for each entity pair of a scene: the pair
// embedding (vision subset pooled under the candidate's prototype text) is
// scored against that candidate's text embedding.
std::vector<RankedPredicates> predict_predicates(
    Model& model, const GraphBatch& vision,
    const std::vector<std::vector<int>>& pairs_patches,
    const std::vector<GraphBatch>& prototype_texts);

// Fraction of pairs across scenes whose top-ranked predicate is the true one.
double predicate_top1_accuracy(Model& model, const std::vector<Scene>& scenes,
                               const std::vector<GraphBatch>& prototype_texts);

// PredCls-style predictions: ground-truth tubes and categories with every
// candidate predicate scored by the ranker.
TripletSet predict_triplets(Model& model, const Scene& scene,
                            const std::vector<GraphBatch>& prototype_texts);

}  // namespace flowattn
