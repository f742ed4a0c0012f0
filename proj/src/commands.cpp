#include "flowattn/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "flowattn/encoder.hpp"

namespace flowattn {

using namespace ad;

namespace {

double time_ms(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

BenchRow summarize(const std::string& mechanism, std::size_t n,
                   const std::vector<double>& times) {
  double mean = 0.0;
  for (double t : times) mean += t;
  mean /= static_cast<double>(times.size());
  double var = 0.0;
  for (double t : times) var += (t - mean) * (t - mean);
  var /= static_cast<double>(times.size());
  return {mechanism, n, mean, std::sqrt(var)};
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchOptions& opt) {
  if (opt.trials < 1) throw ContractError("bench: trials must be >= 1");
  if (opt.lengths.empty()) throw ContractError("bench: no lengths given");
  if (!std::is_sorted(opt.lengths.begin(), opt.lengths.end())) {
    throw ContractError("bench: lengths must be ascending");
  }
  if (opt.d < 1 || opt.d_v < 1) throw ContractError("bench: feature dims must be >= 1");

  const FlowConfig flow_cfg{};
  std::vector<BenchRow> rows;
  for (const std::size_t n : opt.lengths) {
    std::mt19937_64 rng(opt.seed + n);
    const Tensor q = uniform(n, opt.d, rng, -1.0, 1.0);
    const Tensor k = uniform(n, opt.d, rng, -1.0, 1.0);
    const Tensor v = uniform(n, opt.d_v, rng, -1.0, 1.0);

    std::vector<double> flow_times;
    for (int t = 0; t < opt.warmup; ++t) flow_attention_eval(q, k, v, flow_cfg);
    for (int t = 0; t < opt.trials; ++t) {
      flow_times.push_back(time_ms([&] {
        Tensor r = flow_attention_eval(q, k, v, flow_cfg);
        if (!std::isfinite(r(0, 0))) throw DomainError("bench: non-finite output");
      }));
    }
    rows.push_back(summarize("flow", n, flow_times));

    if (n * n * sizeof(double) > opt.quadratic_bytes_cap) {
      std::cerr << "bench: skipping the quadratic baseline at n=" << n
                << " (score matrix would exceed the memory cap)\n";
      continue;
    }
    std::vector<double> quad_times;
    for (int t = 0; t < opt.warmup; ++t) softmax_attention_eval(q, k, v);
    for (int t = 0; t < opt.trials; ++t) {
      quad_times.push_back(time_ms([&] {
        Tensor r = softmax_attention_eval(q, k, v);
        if (!std::isfinite(r(0, 0))) throw DomainError("bench: non-finite output");
      }));
    }
    rows.push_back(summarize("softmax", n, quad_times));
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "mechanism,n,mean_ms,std_ms\n";
  for (const BenchRow& r : rows) {
    out << r.mechanism << "," << r.n << "," << std::fixed << std::setprecision(6)
        << r.mean_ms << "," << r.std_ms << "\n";
  }
  return out.str();
}

// ---- gradcheck -----------------------------------------------------------------

namespace {

double primitive_ops_worst() {
  std::mt19937_64 rng(977);
  double worst = 0.0;
  auto up = [&](double e) { worst = std::max(worst, e); };
  const double eps = 1e-5;

  auto rnd = [&rng](std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 local(rng());
    return uniform(r, c, local, lo, hi);
  };
  Tensor m = rnd(4, 5), m2 = rnd(4, 5), col = rnd(4, 1), row = rnd(1, 5);
  Tensor pos = rnd(4, 5, 0.5, 2.0), posc = rnd(4, 1, 0.5, 2.0);
  Tensor b53 = rnd(5, 3), scalar = rnd(1, 1);

  auto chk2 = [&](auto fn, const Tensor& a, const Tensor& b) {
    up(gradcheck_multi(
        [&fn](Tape& t, const std::vector<Var>& vs) {
          return sum_all(fn(t, vs[0], vs[1]));
        },
        {a, b}, eps));
  };
  auto chk1 = [&](auto fn, const Tensor& x) {
    up(gradcheck([&fn](Tape& t, Var v) { return sum_all(fn(t, v)); }, x, eps));
  };

  chk2([](Tape&, Var a, Var b) { return add(a, b); }, m, m2);
  chk2([](Tape&, Var a, Var b) { return add(a, b); }, m, col);
  chk2([](Tape&, Var a, Var b) { return add(a, b); }, row, m);
  chk2([](Tape&, Var a, Var b) { return add(a, b); }, m, scalar);
  chk2([](Tape&, Var a, Var b) { return sub(a, b); }, m, m2);
  chk2([](Tape&, Var a, Var b) { return mul(a, b); }, m, m2);
  chk2([](Tape&, Var a, Var b) { return mul(a, b); }, m, col);
  chk2([](Tape&, Var a, Var b) { return div(a, b); }, m, pos);
  chk2([](Tape&, Var a, Var b) { return div(a, b); }, m, posc);
  chk2([](Tape&, Var a, Var b) { return matmul(a, b); }, m, b53);
  chk2([](Tape&, Var a, Var b) { return concat_rows(a, b); }, m, m2);
  chk2([](Tape&, Var a, Var b) { return concat_cols(a, b); }, m, col);
  chk1([](Tape&, Var a) { return scale(a, -1.75); }, m);
  chk1([](Tape&, Var a) { return add_scalar(a, 0.5); }, m);
  chk1([](Tape&, Var a) { return transpose(a); }, m);
  chk1([](Tape&, Var a) { return reshape(a, 10, 2); }, m);
  chk1([](Tape&, Var a) { return exp(a); }, m);
  chk1([](Tape&, Var a) { return log(a); }, pos);
  chk1([](Tape&, Var a) { return sqrt(a); }, pos);
  chk1([](Tape&, Var a) { return sigmoid(a); }, m);
  chk1([](Tape&, Var a) { return softplus(a); }, m);
  chk1([](Tape&, Var a) { return gelu(a); }, m);
  chk1([](Tape&, Var a) { return sum_rows(a); }, m);
  chk1([](Tape&, Var a) { return sum_cols(a); }, m);
  chk1([](Tape&, Var a) { return slice(a, 1, 2, 1, 3); }, m);
  chk1([](Tape&, Var a) { return gather_rows(a, {2, 0, 3, 2}); }, m);
  chk1([](Tape&, Var a) { return scatter_add_rows(a, {1, 0, 1, 4}, 5); }, m);

  Tensor w45 = rnd(4, 5);
  up(gradcheck(
      [&w45](Tape& t, Var a) {
        return sum_all(mul(softmax_rows(a), t.constant(w45)));
      },
      m, eps));
  up(gradcheck(
      [&w45](Tape& t, Var a) {
        return sum_all(mul(log_softmax_rows(a), t.constant(w45)));
      },
      m, eps));
  Tensor w41 = rnd(4, 1);
  up(gradcheck(
      [&w41](Tape& t, Var a) { return sum_all(mul(softmax_vec(a), t.constant(w41))); },
      col, eps));
  Tensor aff = rnd(4, 1, 0.05, 0.95);
  Tensor w55 = rnd(5, 5);
  up(gradcheck(
      [&w55](Tape& t, Var a) {
        return sum_all(mul(span_product_mask(a), t.constant(w55)));
      },
      aff, eps));
  Tensor ah = rnd(2, 2, 0.05, 0.95), av = rnd(1, 3, 0.05, 0.95);
  Tensor w66 = rnd(6, 6);
  up(gradcheck_multi(
      [&w66](Tape& t, const std::vector<Var>& vs) {
        return sum_all(mul(grid_mask(vs[0], vs[1], 2, 3), t.constant(w66)));
      },
      {ah, av}, eps));
  return worst;
}

double flow_attention_worst() {
  std::mt19937_64 rng(983);
  Tensor q = uniform(3, 2, rng, -1.0, 1.0);
  Tensor k = uniform(4, 2, rng, -1.0, 1.0);
  Tensor v = uniform(4, 3, rng, -1.0, 1.0);
  Tensor w = uniform(3, 3, rng, -1.0, 1.0);
  return gradcheck_multi(
      [&w](Tape& t, const std::vector<Var>& vs) {
        return sum_all(mul(flow_attention(vs[0], vs[1], vs[2], FlowConfig{}),
                           t.constant(w)));
      },
      {q, k, v}, 1e-5);
}

double encoder_layer_worst() {
  std::vector<EncoderLayerParams> layers{make_encoder_layer(4, 6, 2, 1.0, 991)};
  std::mt19937_64 rng(992);
  Tensor x = uniform(3, 4, rng, -1.0, 1.0);
  Tensor w = uniform(3, 4, rng, -1.0, 1.0);
  return gradcheck(
      [&](Tape& t, Var v) {
        Binder bind(t);
        return sum_all(mul(
            encoder_forward(bind, v, layers, SequenceLayout::seq()).output,
            t.constant(w)));
      },
      x, 1e-5);
}

double gt_layer_worst() {
  GTLayerParams p = make_gt_layer(3, 4, true, 997);
  std::mt19937_64 rng(998);
  Tensor h = uniform(3, 3, rng, -1.0, 1.0);
  Tensor e = uniform(3, 3, rng, -1.0, 1.0);
  Tensor w = uniform(3, 3, rng, -1.0, 1.0);
  const std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 0}};
  return gradcheck_multi(
      [&](Tape& t, const std::vector<Var>& vs) {
        Binder bind(t);
        auto out = gt_layer_forward(bind, vs[0], vs[1], edges, p);
        return add(sum_all(mul(out.nodes, t.constant(w))), sum_all(*out.edges));
      },
      {h, e}, 1e-5);
}

std::pair<SynthSpec, ModelConfig> minimal_setup() {
  SynthSpec spec;
  spec.num_predicates = 2;
  spec.num_entities = 2;
  spec.entity_classes = 2;
  spec.grid_rows = 2;
  spec.grid_cols = 2;
  spec.feat_dim = 2;
  spec.edge_dim = 2;
  spec.pe_dim = 1;
  spec.frame_count = 4;
  spec.clutter_cells = 1;
  spec.noise = 0.1;
  spec.seed = 71;

  ModelConfig cfg;
  cfg.width = 2;
  cfg.head_count = 1;
  cfg.pe_dim = 1;
  cfg.gt_layers = 1;
  cfg.enc_layers = 1;
  cfg.d_ff = 2;
  cfg.flow_direction = FlowDirection::TextToVision;
  cfg.seed = 72;
  cfg.text_feat_dim = 2;
  cfg.text_edge_dim = 2;
  cfg.vision_feat_dim = 2;
  cfg.grid_rows = 2;
  cfg.grid_cols = 2;
  return {spec, cfg};
}

}  // namespace

double model_param_gradcheck(Model& model, const std::vector<const Scene*>& batch,
                             double eps) {
  auto loss_value = [&] {
    Tape tape;
    Binder bind(tape);
    return tape.value(batch_clip_loss(model, bind, batch)).item();
  };

  // Analytic gradients, one reverse pass.
  std::vector<std::pair<Tensor*, Tensor>> grads;
  {
    Tape tape;
    Binder bind(tape);
    Var loss = batch_clip_loss(model, bind, batch);
    tape.backward(loss);
    for (const auto& [param, var] : bind.bound()) grads.emplace_back(param, tape.grad(var));
  }

  double worst = 0.0;
  model.visit_params([&](const std::string&, Tensor& p) {
    Tensor analytic(p.rows(), p.cols());
    for (const auto& [param, g] : grads) {
      if (param == &p) analytic = g;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + eps;
      const double fp = loss_value();
      p[i] = orig - eps;
      const double fm = loss_value();
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  });
  return worst;
}

std::vector<GradCheckEntry> run_gradcheck_suite() {
  std::vector<GradCheckEntry> entries;
  auto push = [&entries](const std::string& name, double err, double bound) {
    entries.push_back({name, err, bound, err < bound});
  };
  push("primitive ops", primitive_ops_worst(), 1e-4);
  push("flow_attention", flow_attention_worst(), 1e-4);
  push("hierarchy encoder layer", encoder_layer_worst(), 1e-4);
  push("graph transformer layer", gt_layer_worst(), 1e-4);

  auto [spec, cfg] = minimal_setup();
  Model model(cfg);
  std::vector<Scene> scenes{generate_scene(spec, 0), generate_scene(spec, 1)};
  std::vector<const Scene*> batch{&scenes[0], &scenes[1]};
  push("end-to-end model", model_param_gradcheck(model, batch, 1e-5), 1e-4);
  return entries;
}

// ---- train / eval -----------------------------------------------------------

namespace {

void refuse_overwrite(const std::filesystem::path& p, bool force) {
  if (!force && std::filesystem::exists(p)) {
    throw ContractError("output '" + p.string() + "' exists; pass --force to overwrite");
  }
}

std::vector<GraphBatch> prototype_texts(const SynthSpec& spec) {
  std::vector<GraphBatch> protos;
  for (int c = 0; c < spec.num_predicates; ++c)
    protos.push_back(predicate_prototype_text(spec, c));
  return protos;
}

}  // namespace

TrainResult run_train(const RunSettings& settings,
                      const std::filesystem::path& out_dir, bool force, bool quiet) {
  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.bin";
  result.log = out_dir / "train_log.jsonl";
  result.config = out_dir / "config.txt";
  refuse_overwrite(result.checkpoint, force);
  refuse_overwrite(result.log, force);
  refuse_overwrite(result.config, force);

  std::vector<Scene> train, val;
  for (int i = 0; i < settings.train_scenes; ++i)
    train.push_back(generate_scene(settings.synth, static_cast<std::uint64_t>(i)));
  for (int i = 0; i < settings.val_scenes; ++i)
    val.push_back(generate_scene(
        settings.synth, static_cast<std::uint64_t>(settings.train_scenes + i)));

  Model model(settings.model);
  Adam opt(AdamConfig{settings.lr, 0.9, 0.999, 1e-8});

  std::ofstream log(result.log);
  if (!log) throw ContractError("cannot open '" + result.log.string() + "'");
  const std::string direction = to_string(settings.model.flow_direction);
  double last_loss = 0.0;
  train_model(model, train, settings.epochs, settings.batch_size, opt,
              [&](const EpochLog& e) {
                log << "{\"epoch\":" << e.epoch << ",\"loss\":" << e.mean_loss
                    << ",\"flow_direction\":\"" << direction << "\"}\n";
                last_loss = e.mean_loss;
                if (!quiet && (e.epoch % 10 == 0 || e.epoch + 1 == settings.epochs)) {
                  std::cout << "epoch " << e.epoch << "  loss " << e.mean_loss
                            << "  flow_direction " << direction << "\n";
                }
              });
  result.final_loss = last_loss;

  if (!val.empty()) {
    result.val_top1 = predicate_top1_accuracy(model, val, prototype_texts(settings.synth));
    log << "{\"val_top1\":" << result.val_top1 << ",\"flow_direction\":\"" << direction
        << "\"}\n";
    if (!quiet) std::cout << "held-out predicate top-1: " << result.val_top1 << "\n";
  }

  save_checkpoint(result.checkpoint, model);
  std::ofstream cfg(result.config);
  cfg << settings_to_config_text(settings);
  return result;
}

namespace {

EvalTable table_over_sets(const std::vector<TripletSet>& preds,
                          const std::vector<TripletSet>& gts,
                          const std::vector<std::size_t>& ks) {
  if (gts.empty()) throw ContractError("eval: no ground-truth videos");
  if (ks.empty()) throw ContractError("eval: no K values");
  EvalTable table;
  table.ks = ks;
  table.recall.assign(ks.size(), 0.0);
  table.mean_recall.assign(ks.size(), 0.0);
  table.videos = gts.size();
  for (const TripletSet& gt : gts) {
    const TripletSet* pred = nullptr;
    for (const TripletSet& p : preds) {
      if (p.video == gt.video) {
        pred = &p;
        break;
      }
    }
    TripletSet empty{gt.video, gt.frame_count, {}};
    const TripletSet& p = pred ? *pred : empty;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      table.recall[i] += recall_at_k(p, gt, ks[i]);
      table.mean_recall[i] += mean_recall_at_k(p, gt, ks[i]);
    }
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    table.recall[i] /= static_cast<double>(table.videos);
    table.mean_recall[i] /= static_cast<double>(table.videos);
  }
  return table;
}

}  // namespace

EvalTable eval_files(const std::filesystem::path& pred_path,
                     const std::filesystem::path& gt_path,
                     const std::vector<std::size_t>& ks) {
  return table_over_sets(read_triplets_jsonl(pred_path), read_triplets_jsonl(gt_path), ks);
}

EvalTable eval_model(const std::filesystem::path& checkpoint,
                     const RunSettings& settings, const std::vector<std::size_t>& ks,
                     const std::filesystem::path* dump_dir) {
  Model model = load_checkpoint(checkpoint);
  const auto protos = prototype_texts(settings.synth);

  std::vector<Scene> scenes;
  for (int i = 0; i < settings.val_scenes; ++i)
    scenes.push_back(generate_scene(
        settings.synth, static_cast<std::uint64_t>(settings.train_scenes + i)));
  if (scenes.empty()) throw ContractError("eval: no held-out scenes configured");

  std::vector<TripletSet> preds, gts;
  std::size_t correct = 0, total = 0;
  for (const Scene& scene : scenes) {
    preds.push_back(predict_triplets(model, scene, protos));
    gts.push_back(scene.gt);
    std::vector<std::vector<int>> patches;
    for (const ScenePair& p : scene.pairs) patches.push_back(pair_patches(scene, p));
    const auto rankings = predict_predicates(model, scene.vision, patches, protos);
    for (std::size_t i = 0; i < scene.pairs.size(); ++i) {
      if (rankings[i].order[0] == scene.pairs[i].predicate) ++correct;
      ++total;
    }
  }
  if (dump_dir) {
    std::filesystem::create_directories(*dump_dir);
    write_triplets_jsonl(*dump_dir / "predictions.jsonl", preds);
    write_triplets_jsonl(*dump_dir / "ground_truth.jsonl", gts);
  }
  EvalTable table = table_over_sets(preds, gts, ks);
  table.top1 = total ? static_cast<double>(correct) / static_cast<double>(total) : -1.0;
  return table;
}

std::string format_eval_table(const EvalTable& table) {
  std::ostringstream out;
  out << "videos: " << table.videos << "\n";
  out << std::left << std::setw(8) << "K" << std::setw(12) << "R@K"
      << std::setw(12) << "mR@K" << "\n";
  for (std::size_t i = 0; i < table.ks.size(); ++i) {
    out << std::left << std::setw(8) << table.ks[i] << std::setw(12) << std::fixed
        << std::setprecision(4) << table.recall[i] << std::setw(12)
        << table.mean_recall[i] << "\n";
  }
  if (table.top1 >= 0.0) out << "predicate top-1: " << table.top1 << "\n";
  return out.str();
}

}  // namespace flowattn
