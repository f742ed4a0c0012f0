#pragma once

#include <filesystem>

#include "flowattn/io.hpp"

namespace flowattn {

// ---- bench ------------------------------------------------------------------

struct BenchOptions {
  std::vector<std::size_t> lengths{512, 1024, 2048, 4096};
  std::size_t d = 64;
  std::size_t d_v = 64;
  int trials = 3;
  int warmup = 1;
  std::uint64_t seed = 42;
  // The quadratic baseline is skipped (with a notice) when its score matrix
  // would exceed this many bytes.
  std::size_t quadratic_bytes_cap = std::size_t(4) << 30;
};

struct BenchRow {
  std::string mechanism;  // "flow" or "softmax"
  std::size_t n = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
};

// Times only the attention calls; input generation happens outside the
// clock. Trials run sequentially.
std::vector<BenchRow> run_bench(const BenchOptions& opt);
std::string bench_csv(const std::vector<BenchRow>& rows);

// ---- gradcheck ----------------------------------------------------------------

struct GradCheckEntry {
  std::string component;
  double max_rel_err = 0.0;
  double bound = 1e-4;
  bool pass = false;
};

// Central-difference checks over the primitive op set, flow attention, one
// hierarchy encoder layer, one graph transformer layer and a minimal
// end-to-end model.
std::vector<GradCheckEntry> run_gradcheck_suite();

// Worst relative error of the batch-loss gradient over every model
// parameter, against central differences.
double model_param_gradcheck(Model& model, const std::vector<const Scene*>& batch,
                             double eps);

// ---- train / eval --------------------------------------------------------------

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::filesystem::path config;
  double final_loss = 0.0;
  double val_top1 = 0.0;
};

// Trains on scenes [0, train_scenes) and reports predicate top-1 accuracy on
// the held-out scenes [train_scenes, train_scenes + val_scenes). Existing
// outputs are never overwritten unless force is set.
TrainResult run_train(const RunSettings& settings,
                      const std::filesystem::path& out_dir, bool force,
                      bool quiet = false);

struct EvalTable {
  std::vector<std::size_t> ks;
  std::vector<double> recall;       // mean per-video R@K
  std::vector<double> mean_recall;  // mean per-video mR@K
  std::size_t videos = 0;
  double top1 = -1.0;  // only for model evaluation
};

EvalTable eval_files(const std::filesystem::path& pred_path,
                     const std::filesystem::path& gt_path,
                     const std::vector<std::size_t>& ks);

// Evaluates a trained checkpoint on the held-out scenes of the settings,
// optionally dumping the prediction and ground-truth triplet files.
EvalTable eval_model(const std::filesystem::path& checkpoint,
                     const RunSettings& settings, const std::vector<std::size_t>& ks,
                     const std::filesystem::path* dump_dir);

std::string format_eval_table(const EvalTable& table);

}  // namespace flowattn
