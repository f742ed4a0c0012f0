// Command-line front end: benchmarking, training, evaluation and gradient
// checking over the library.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "flowattn/commands.hpp"

namespace fs = std::filesystem;
using namespace flowattn;

namespace {

int cmd_bench(const BenchOptions& opt, const std::string& out_path) {
  const auto rows = run_bench(opt);
  const std::string csv = bench_csv(rows);
  if (!out_path.empty()) {
    fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw ContractError("cannot open '" + out_path + "' for writing");
    out << csv;
  }
  std::cout << std::left << std::setw(10) << "mechanism" << std::setw(8) << "n"
            << std::setw(14) << "mean_ms" << std::setw(14) << "std_ms" << "\n";
  for (const BenchRow& r : rows) {
    std::cout << std::left << std::setw(10) << r.mechanism << std::setw(8) << r.n
              << std::setw(14) << std::fixed << std::setprecision(3) << r.mean_ms
              << std::setw(14) << r.std_ms << "\n";
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::uint64_t seed, bool has_seed, bool force) {
  RunSettings settings = settings_from_config(read_config_file(config_path));
  if (has_seed) {
    settings.model.seed = seed;
    settings.synth.seed = seed;
  }
  TrainResult r = run_train(settings, out_dir, force);
  std::cout << "checkpoint: " << r.checkpoint.string() << "\n";
  std::cout << "log: " << r.log.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt,
             const std::string& checkpoint, const std::string& config_path,
             const std::vector<std::size_t>& ks, const std::string& dump) {
  EvalTable table;
  if (!pred.empty() || !gt.empty()) {
    if (pred.empty() || gt.empty()) {
      throw ContractError("eval: --pred and --gt must be given together");
    }
    table = eval_files(pred, gt, ks);
  } else if (!checkpoint.empty()) {
    if (config_path.empty()) {
      throw ContractError("eval: --config is required with --checkpoint");
    }
    RunSettings settings = settings_from_config(read_config_file(config_path));
    fs::path dump_path(dump);
    table = eval_model(checkpoint, settings, ks, dump.empty() ? nullptr : &dump_path);
  } else {
    throw ContractError("eval: give either --pred/--gt files or --checkpoint/--config");
  }
  std::cout << format_eval_table(table);
  return 0;
}

int cmd_gradcheck() {
  const auto entries = run_gradcheck_suite();
  bool all_pass = true;
  std::cout << std::left << std::setw(28) << "component" << std::setw(14)
            << "max_rel_err" << std::setw(12) << "bound" << "status\n";
  for (const auto& e : entries) {
    std::cout << std::left << std::setw(28) << e.component << std::setw(14)
              << std::scientific << std::setprecision(3) << e.max_rel_err
              << std::setw(12) << e.bound << (e.pass ? "PASS" : "FAIL") << "\n";
    all_pass = all_pass && e.pass;
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conservation-based flow attention with hierarchy-aware encoders: "
               "benchmarks, synthetic training and scene-graph metrics"};
  app.require_subcommand(1);

  auto* bench = app.add_subcommand(
      "bench", "Time flow attention against the quadratic softmax baseline");
  BenchOptions bench_opt;
  std::string bench_out;
  double mem_cap_gb = 4.0;
  bench->add_option("--lengths", bench_opt.lengths, "Ascending sequence lengths (n = m)")
      ->delimiter(',');
  bench->add_option("--d", bench_opt.d, "Query/key width");
  bench->add_option("--dv", bench_opt.d_v, "Value width");
  bench->add_option("--trials", bench_opt.trials, "Timed trials per point");
  bench->add_option("--warmup", bench_opt.warmup, "Untimed warmup runs per point");
  bench->add_option("--seed", bench_opt.seed, "Input generator seed");
  bench->add_option("--out", bench_out, "CSV output path");
  bench->add_option("--mem-cap-gb", mem_cap_gb,
                    "Skip the quadratic baseline above this score-matrix size");

  auto* train = app.add_subcommand("train", "Train on the synthetic cross-modal task");
  std::string train_config, train_out;
  std::uint64_t train_seed = 0;
  bool train_force = false;
  train->add_option("--config", train_config, "key=value settings file")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  auto* seed_opt = train->add_option("--seed", train_seed, "Override the config seed");
  train->add_flag("--force", train_force, "Overwrite existing outputs");

  auto* eval = app.add_subcommand(
      "eval", "Recall metrics from triplet files or a trained checkpoint");
  std::string eval_pred, eval_gt, eval_ckpt, eval_config, eval_dump;
  std::vector<std::size_t> eval_ks{20, 50, 100};
  eval->add_option("--pred", eval_pred, "Predicted triplets (JSONL)");
  eval->add_option("--gt", eval_gt, "Ground-truth triplets (JSONL)");
  eval->add_option("--checkpoint", eval_ckpt, "Trained checkpoint to evaluate");
  eval->add_option("--config", eval_config, "Settings file matching the checkpoint");
  eval->add_option("--k", eval_ks, "Recall cutoffs")->delimiter(',');
  eval->add_option("--dump", eval_dump, "Directory for prediction/ground-truth dumps");

  app.add_subcommand("gradcheck", "Run the central-difference gradient check suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (bench->parsed()) {
      bench_opt.quadratic_bytes_cap =
          static_cast<std::size_t>(mem_cap_gb * 1024.0 * 1024.0 * 1024.0);
      return cmd_bench(bench_opt, bench_out);
    }
    if (train->parsed()) {
      return cmd_train(train_config, train_out, train_seed, seed_opt->count() > 0,
                       train_force);
    }
    if (eval->parsed()) {
      return cmd_eval(eval_pred, eval_gt, eval_ckpt, eval_config, eval_ks, eval_dump);
    }
    return cmd_gradcheck();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
