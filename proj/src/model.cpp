#include "flowattn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowattn {

using namespace ad;

std::string to_string(FlowDirection d) {
  switch (d) {
    case FlowDirection::None: return "none";
    case FlowDirection::TextToVision: return "text_to_vision";
    case FlowDirection::VisionToText: return "vision_to_text";
  }
  return "none";
}

FlowDirection flow_direction_from_string(const std::string& s) {
  if (s == "none") return FlowDirection::None;
  if (s == "text_to_vision") return FlowDirection::TextToVision;
  if (s == "vision_to_text") return FlowDirection::VisionToText;
  throw ContractError("unknown flow direction '" + s + "'");
}

std::string to_string(Phi p) {
  return p == Phi::Sigmoid ? "sigmoid" : "softplus_eps";
}

Phi phi_from_string(const std::string& s) {
  if (s == "sigmoid") return Phi::Sigmoid;
  if (s == "softplus_eps") return Phi::SoftplusEps;
  throw ContractError("unknown phi '" + s + "'");
}

void ModelConfig::validate() const {
  if (width == 0 || head_count < 1 || width % static_cast<std::size_t>(head_count) != 0) {
    throw ContractError("model config: width must be a positive multiple of head_count");
  }
  if (tau_init <= 0.0) throw ContractError("model config: tau_init must be positive");
  if (gt_layers < 0 || enc_layers < 0) {
    throw ContractError("model config: negative layer count");
  }
  if (grid_rows < 1 || grid_cols < 1) throw ContractError("model config: empty grid");
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  flow_cfg_ = FlowConfig{cfg_.phi, cfg_.phi_eps};
  const std::size_t d = cfg_.width;
  auto sub_seed = [&](std::uint64_t tag) { return mix_seed(cfg_.seed, tag); };

  text_embed_ = make_embed_params(d, cfg_.text_feat_dim, cfg_.text_edge_dim,
                                  cfg_.pe_dim, sub_seed(1));
  vision_embed_ = make_embed_params(d, cfg_.vision_feat_dim, 1, cfg_.pe_dim, sub_seed(2));
  for (int i = 0; i < cfg_.gt_layers; ++i) {
    text_gt_.push_back(make_gt_layer(d, cfg_.d_ff, true, sub_seed(10 + i)));
    vision_gt_.push_back(make_gt_layer(d, cfg_.d_ff, false, sub_seed(40 + i)));
  }
  for (int i = 0; i < cfg_.enc_layers; ++i) {
    text_enc_.push_back(
        make_encoder_layer(d, cfg_.d_ff, cfg_.head_count, cfg_.sigma_t, sub_seed(70 + i)));
    vision_enc_.push_back(
        make_encoder_layer(d, cfg_.d_ff, cfg_.head_count, cfg_.sigma_t, sub_seed(100 + i)));
  }
  std::mt19937_64 rng(sub_seed(130));
  text_proj_ = {xavier_uniform(d, d, rng), Tensor(1, d)};
  vision_proj_ = {xavier_uniform(d, d, rng), Tensor(1, d)};
  log_tau_ = Tensor::scalar(std::log(cfg_.tau_init));
}

Model::BranchFeatures Model::forward_branches(Binder& bind, const GraphBatch& text,
                                              const GraphBatch& vision) {
  if (vision.node_count() != cfg_.grid_rows * cfg_.grid_cols) {
    throw ShapeError("model: vision graph has " + std::to_string(vision.node_count()) +
                     " patches for a " + std::to_string(cfg_.grid_rows) + "x" +
                     std::to_string(cfg_.grid_cols) + " grid");
  }

  EmbeddedGraph te = embed_inputs(bind, text, text_embed_);
  Var th = te.nodes;
  std::optional<Var> tedge = te.edges;
  for (GTLayerParams& layer : text_gt_) {
    GTLayerOut out = gt_layer_forward(bind, th, tedge, text.edges, layer);
    th = out.nodes;
    tedge = out.edges;
  }

  EmbeddedGraph ve = embed_inputs(bind, vision, vision_embed_);
  Var vh = ve.nodes;
  for (GTLayerParams& layer : vision_gt_) {
    vh = gt_layer_forward(bind, vh, std::nullopt, vision.edges, layer).nodes;
  }

  // The encoder stacks run up to their final layer, the configured flow
  // direction exchanges information between the branches at that depth, and
  // the final layers then process the fused streams. The affinity carry keeps
  // the merge accumulation monotone across the split.
  const SequenceLayout vision_layout = SequenceLayout::grid(cfg_.grid_rows, cfg_.grid_cols);
  std::span<EncoderLayerParams> text_layers(text_enc_);
  std::span<EncoderLayerParams> vis_layers(vision_enc_);
  const std::size_t t_body = text_layers.empty() ? 0 : text_layers.size() - 1;
  const std::size_t v_body = vis_layers.empty() ? 0 : vis_layers.size() - 1;

  AffinityCarry tcarry, vcarry;
  Var t_feats = encoder_forward(bind, th, text_layers.first(t_body),
                                SequenceLayout::seq(), MaskMode::Hierarchy, &tcarry)
                    .output;
  Var v_feats = encoder_forward(bind, vh, vis_layers.first(v_body), vision_layout,
                                MaskMode::Hierarchy, &vcarry)
                    .output;

  if (cfg_.flow_direction == FlowDirection::TextToVision) {
    v_feats = add(v_feats, flow_attention(v_feats, t_feats, t_feats, flow_cfg_));
  } else if (cfg_.flow_direction == FlowDirection::VisionToText) {
    t_feats = add(t_feats, flow_attention(t_feats, v_feats, v_feats, flow_cfg_));
  }

  if (!text_layers.empty()) {
    t_feats = encoder_forward(bind, t_feats, text_layers.last(1),
                              SequenceLayout::seq(), MaskMode::Hierarchy, &tcarry)
                  .output;
  }
  if (!vis_layers.empty()) {
    v_feats = encoder_forward(bind, v_feats, vis_layers.last(1), vision_layout,
                              MaskMode::Hierarchy, &vcarry)
                  .output;
  }
  return {t_feats, v_feats};
}

Var Model::pooled(Binder& bind, Var feats, ProjectionParams& proj,
                  const std::vector<int>* subset) {
  Tape& t = bind.tape();
  Var x = feats;
  if (subset) {
    if (subset->empty()) throw ContractError("model: empty patch subset");
    x = gather_rows(feats, *subset);
  }
  const double inv_n = 1.0 / static_cast<double>(t.value(x).rows());
  Var mean = scale(sum_cols(x), inv_n);  // 1 x d
  Var z = add(matmul(mean, bind(proj.w)), bind(proj.b));
  Var norm = sqrt(sum_rows(mul(z, z)));  // 1 x 1
  return div(z, norm);
}

Model::Embeddings Model::forward(Binder& bind, const GraphBatch& text,
                                 const GraphBatch& vision) {
  BranchFeatures f = forward_branches(bind, text, vision);
  return {pooled(bind, f.text, text_proj_, nullptr),
          pooled(bind, f.vision, vision_proj_, nullptr)};
}

std::pair<Tensor, Tensor> Model::forward(const GraphBatch& text,
                                         const GraphBatch& vision) {
  Tape t;
  Binder bind(t);
  Embeddings e = forward(bind, text, vision);
  return {t.value(e.text), t.value(e.vision)};
}

Var Model::pooled_text(Binder& bind, Var text_feats) {
  return pooled(bind, text_feats, text_proj_, nullptr);
}

Var Model::pooled_vision(Binder& bind, Var vision_feats,
                         const std::vector<int>* patches) {
  return pooled(bind, vision_feats, vision_proj_, patches);
}

void Model::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  auto embed = [&](const std::string& p, EmbedParams& e, bool with_edges) {
    fn(p + ".a0", e.a0);
    fn(p + ".a0_bias", e.a0_bias);
    if (with_edges) {
      fn(p + ".b0", e.b0);
      fn(p + ".b0_bias", e.b0_bias);
    }
    fn(p + ".c0", e.c0);
    fn(p + ".c0_bias", e.c0_bias);
  };
  auto gt = [&](const std::string& p, GTLayerParams& g) {
    fn(p + ".wq", g.wq);
    fn(p + ".wk", g.wk);
    fn(p + ".wv", g.wv);
    fn(p + ".wo", g.wo);
    fn(p + ".ln1_gamma", g.ln1_gamma);
    fn(p + ".ln1_beta", g.ln1_beta);
    fn(p + ".ln2_gamma", g.ln2_gamma);
    fn(p + ".ln2_beta", g.ln2_beta);
    fn(p + ".ffn_w1", g.ffn_w1);
    fn(p + ".ffn_b1", g.ffn_b1);
    fn(p + ".ffn_w2", g.ffn_w2);
    fn(p + ".ffn_b2", g.ffn_b2);
    if (g.with_edges) {
      fn(p + ".we", g.we);
      fn(p + ".woe", g.woe);
      fn(p + ".lne_gamma", g.lne_gamma);
      fn(p + ".lne_beta", g.lne_beta);
    }
  };
  auto enc = [&](const std::string& p, EncoderLayerParams& e) {
    fn(p + ".wq", e.wq);
    fn(p + ".wk", e.wk);
    fn(p + ".wv", e.wv);
    fn(p + ".wo", e.wo);
    fn(p + ".ln1_gamma", e.ln1_gamma);
    fn(p + ".ln1_beta", e.ln1_beta);
    fn(p + ".ln2_gamma", e.ln2_gamma);
    fn(p + ".ln2_beta", e.ln2_beta);
    fn(p + ".ffn_w1", e.ffn_w1);
    fn(p + ".ffn_b1", e.ffn_b1);
    fn(p + ".ffn_w2", e.ffn_w2);
    fn(p + ".ffn_b2", e.ffn_b2);
    fn(p + ".nb_wq", e.nb_wq);
    fn(p + ".nb_wk", e.nb_wk);
  };

  embed("text.embed", text_embed_, true);
  for (std::size_t i = 0; i < text_gt_.size(); ++i)
    gt("text.gt" + std::to_string(i), text_gt_[i]);
  for (std::size_t i = 0; i < text_enc_.size(); ++i)
    enc("text.enc" + std::to_string(i), text_enc_[i]);
  embed("vision.embed", vision_embed_, false);
  for (std::size_t i = 0; i < vision_gt_.size(); ++i)
    gt("vision.gt" + std::to_string(i), vision_gt_[i]);
  for (std::size_t i = 0; i < vision_enc_.size(); ++i)
    enc("vision.enc" + std::to_string(i), vision_enc_[i]);
  fn("proj.text.w", text_proj_.w);
  fn("proj.text.b", text_proj_.b);
  fn("proj.vision.w", vision_proj_.w);
  fn("proj.vision.b", vision_proj_.b);
  fn("log_tau", log_tau_);
}

namespace ad {

Var clip_loss(Var u_rows, Var v_rows, Var tau) {
  check_binary(u_rows, v_rows, "clip_loss");
  check_binary(u_rows, tau, "clip_loss");
  Tape& t = *u_rows.tape;
  const Tensor& uv = t.value(u_rows);
  const Tensor& vv = t.value(v_rows);
  if (!uv.same_shape(vv)) {
    throw ShapeError("clip_loss: " + uv.shape_str() + " vs " + vv.shape_str());
  }
  if (uv.rows() < 1) throw ContractError("clip_loss: empty batch");
  if (!(t.value(tau).item() > 0.0)) throw DomainError("clip_loss: tau must be positive");
  const std::size_t m = uv.rows();
  Var sim = div(matmul(u_rows, transpose(v_rows)), tau);
  Var eye = t.constant(Tensor::identity(m));
  Var fwd = sum_all(mul(log_softmax_rows(sim), eye));
  Var bwd = sum_all(mul(log_softmax_rows(transpose(sim)), eye));
  return scale(add(fwd, bwd), -1.0 / static_cast<double>(m));
}

}  // namespace ad

double clip_loss(const Tensor& u_rows, const Tensor& v_rows, double tau) {
  Tape t;
  return t
      .value(ad::clip_loss(t.leaf(u_rows), t.leaf(v_rows),
                           t.constant(Tensor::scalar(tau))))
      .item();
}

void Adam::update(Tensor& param, const Tensor& grad) {
  if (!param.same_shape(grad)) {
    throw ShapeError("adam: gradient " + grad.shape_str() + " for parameter " +
                     param.shape_str());
  }
  State& s = states_[&param];
  if (s.step == 0) {
    s.m = Tensor(param.rows(), param.cols());
    s.v = Tensor(param.rows(), param.cols());
  }
  s.step += 1;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * grad[i];
    s.v[i] = b2 * s.v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = s.m[i] / bc1;
    const double vhat = s.v[i] / bc2;
    param[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

Var batch_clip_loss(Model& model, Binder& bind, const std::vector<const Scene*>& batch) {
  if (batch.empty()) throw ContractError("batch_clip_loss: empty batch");
  Var u_rows, v_rows;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Model::Embeddings e = model.forward(bind, batch[i]->text, batch[i]->vision);
    u_rows = i == 0 ? e.text : concat_rows(u_rows, e.text);
    v_rows = i == 0 ? e.vision : concat_rows(v_rows, e.vision);
  }
  Var tau = ad::exp(bind(model.log_tau()));
  return ad::clip_loss(u_rows, v_rows, tau);
}

double train_step(Model& model, const std::vector<const Scene*>& batch, Adam& opt) {
  Tape tape;
  Binder bind(tape);
  Var loss = batch_clip_loss(model, bind, batch);
  const double loss_value = tape.value(loss).item();
  if (!std::isfinite(loss_value)) {
    throw TrainingError("train_step: non-finite loss " + std::to_string(loss_value) +
                        " on a batch of " + std::to_string(batch.size()) +
                        " scenes (tau=" + std::to_string(model.tau()) + ")");
  }
  tape.backward(loss);
  std::vector<std::pair<Tensor*, Tensor>> grads;
  double sq_norm = 0.0;
  for (const auto& [param, var] : bind.bound()) {
    Tensor g = tape.grad(var);
    if (!g.all_finite()) {
      throw TrainingError("train_step: non-finite gradient for a parameter of shape " +
                          g.shape_str());
    }
    for (double v : g.data()) sq_norm += v * v;
    grads.emplace_back(param, std::move(g));
  }
  // Global-norm clipping keeps the residual streams from blowing up into
  // saturated activations.
  constexpr double kClipNorm = 5.0;
  const double norm = std::sqrt(sq_norm);
  const double factor = norm > kClipNorm ? kClipNorm / norm : 1.0;
  for (auto& [param, g] : grads) {
    if (factor != 1.0) {
      for (double& v : g.data()) v *= factor;
    }
    opt.update(*param, g);
  }
  // Keep the learnable temperature in a sane range; unbounded sharpening
  // would underflow tau to zero.
  const double lo = std::log(5e-3), hi = std::log(100.0);
  double& log_tau = model.log_tau()[0];
  log_tau = std::clamp(log_tau, lo, hi);
  return loss_value;
}

std::vector<EpochLog> train_model(Model& model, const std::vector<Scene>& scenes,
                                  int epochs, int batch_size, Adam& opt,
                                  const std::function<void(const EpochLog&)>& on_epoch) {
  if (scenes.empty()) throw ContractError("train_model: no scenes");
  if (batch_size < 1) throw ContractError("train_model: batch_size must be >= 1");
  std::vector<EpochLog> logs;
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(model.config().seed, 0x5e5e + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(batch_size)) {
      std::vector<const Scene*> batch;
      const std::size_t end = std::min(order.size(), off + static_cast<std::size_t>(batch_size));
      for (std::size_t i = off; i < end; ++i) batch.push_back(&scenes[order[i]]);
      total += train_step(model, batch, opt);
      ++steps;
    }
    EpochLog log{epoch, total / static_cast<double>(steps)};
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

RankedPredicates rank_by_cosine(const Tensor& query, const Tensor& prototypes) {
  if (prototypes.rows() == 0) throw ContractError("rank_by_cosine: empty prototype set");
  if (query.cols() != prototypes.cols() || query.rows() != 1) {
    throw ShapeError("rank_by_cosine: query " + query.shape_str() +
                     " against prototypes " + prototypes.shape_str());
  }
  double qn = 0.0;
  for (double v : query.data()) qn += v * v;
  qn = std::sqrt(qn);
  if (qn == 0.0) throw DomainError("rank_by_cosine: zero query vector");

  RankedPredicates out;
  std::vector<double> score(prototypes.rows());
  for (std::size_t i = 0; i < prototypes.rows(); ++i) {
    double dot = 0.0, pn = 0.0;
    for (std::size_t j = 0; j < prototypes.cols(); ++j) {
      dot += query(0, j) * prototypes(i, j);
      pn += prototypes(i, j) * prototypes(i, j);
    }
    pn = std::sqrt(pn);
    if (pn == 0.0) throw DomainError("rank_by_cosine: zero prototype row");
    score[i] = dot / (qn * pn);
  }
  out.order.resize(prototypes.rows());
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](int a, int b) { return score[static_cast<std::size_t>(a)] >
                                              score[static_cast<std::size_t>(b)]; });
  for (int i : out.order) out.scores.push_back(score[static_cast<std::size_t>(i)]);
  return out;
}

namespace {

RankedPredicates ranked_from_scores(const std::vector<double>& score) {
  RankedPredicates r;
  r.order.resize(score.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  for (int i : r.order) r.scores.push_back(score[static_cast<std::size_t>(i)]);
  return r;
}

}  // namespace

std::vector<RankedPredicates> predict_predicates(
    Model& model, const GraphBatch& vision,
    const std::vector<std::vector<int>>& pairs_patches,
    const std::vector<GraphBatch>& prototype_texts) {
  if (prototype_texts.empty()) {
    throw ContractError("predict_predicates: empty prototype set");
  }
  const std::size_t n_proto = prototype_texts.size();
  std::vector<std::vector<double>> score(pairs_patches.size(),
                                         std::vector<double>(n_proto));
  // One forward per candidate; with a flow direction into the vision branch
  // this conditions the pair embeddings on the candidate's text.
  for (std::size_t c = 0; c < n_proto; ++c) {
    Tape t;
    Binder bind(t);
    Model::BranchFeatures f = model.forward_branches(bind, prototype_texts[c], vision);
    const Tensor u_c = t.value(model.pooled_text(bind, f.text));
    for (std::size_t pi = 0; pi < pairs_patches.size(); ++pi) {
      const Tensor pe = t.value(model.pooled_vision(bind, f.vision, &pairs_patches[pi]));
      double dot = 0.0;
      for (std::size_t j = 0; j < pe.cols(); ++j) dot += pe(0, j) * u_c(0, j);
      score[pi][c] = dot;  // both rows are unit-normalized
    }
  }
  std::vector<RankedPredicates> out;
  out.reserve(pairs_patches.size());
  for (const auto& s : score) out.push_back(ranked_from_scores(s));
  return out;
}

double predicate_top1_accuracy(Model& model, const std::vector<Scene>& scenes,
                               const std::vector<GraphBatch>& prototype_texts) {
  std::size_t correct = 0, total = 0;
  for (const Scene& scene : scenes) {
    std::vector<std::vector<int>> patches;
    for (const ScenePair& p : scene.pairs) patches.push_back(pair_patches(scene, p));
    const auto rankings = predict_predicates(model, scene.vision, patches, prototype_texts);
    for (std::size_t i = 0; i < scene.pairs.size(); ++i) {
      if (!rankings[i].order.empty() && rankings[i].order[0] == scene.pairs[i].predicate) {
        ++correct;
      }
      ++total;
    }
  }
  if (total == 0) throw ContractError("predicate_top1_accuracy: no pairs");
  return static_cast<double>(correct) / static_cast<double>(total);
}

TripletSet predict_triplets(Model& model, const Scene& scene,
                            const std::vector<GraphBatch>& prototype_texts) {
  std::vector<std::vector<int>> patches;
  for (const ScenePair& p : scene.pairs) patches.push_back(pair_patches(scene, p));
  const auto rankings = predict_predicates(model, scene.vision, patches, prototype_texts);

  TripletSet pred;
  pred.video = scene.gt.video;
  pred.frame_count = scene.gt.frame_count;
  for (std::size_t i = 0; i < scene.pairs.size(); ++i) {
    const Triplet& gt = scene.gt.triplets[i];
    for (std::size_t r = 0; r < rankings[i].order.size(); ++r) {
      Triplet t = gt;  // PredCls: tubes, interval and categories are given
      t.relation = rankings[i].order[r];
      t.score = rankings[i].scores[r];
      pred.triplets.push_back(std::move(t));
    }
  }
  return pred;
}

}  // namespace flowattn
