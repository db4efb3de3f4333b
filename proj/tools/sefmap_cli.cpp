// SPDX-License-Identifier: Apache-2.0
//
// sefmap: scenario generation, training, evaluation, ablation and gradient
// checking from the command line.
//
// Exit codes: 0 ok, 2 configuration error, 3 numerical divergence,
// 4 gradient check failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "sefmap/checkpoint.hpp"
#include "sefmap/harness.hpp"

namespace fs = std::filesystem;
using namespace sefmap;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitGradcheck = 4;

TrainConfig config_or_default(const std::string& path) {
  return path.empty() ? parse_train_config(nlohmann::json::object()) : load_train_config(path);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

// Inline JSON or a path to a JSON file.
nlohmann::json json_arg(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad inline JSON: ") + e.what());
    }
  }
  return read_json_file(text);
}

int cmd_gen(const std::string& config_path, const fs::path& out_dir, std::size_t count, std::uint64_t seed) {
  const TrainConfig cfg = config_or_default(config_path);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < count; ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "scenario_%06zu.sefs", i);
    save_scenario(out_dir / name, generate(cfg.synth, seed + i));
  }
  std::cout << "wrote " << count << " scenarios to " << out_dir.string() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const fs::path& data, const fs::path& out, const std::string& log_path) {
  const TrainConfig cfg = config_or_default(config_path);
  std::vector<Scenario> pool = load_scenario_dir(data);
  const Scenario& s0 = pool.front();
  if (s0.lidar.height != cfg.synth.height || s0.lidar.width != cfg.synth.width ||
      s0.lidar.channels != cfg.synth.channels) {
    throw ConfigError("scenarios in " + data.string() + " are " + shape_str(s0.lidar.data.shape()) +
                      " but the config describes " + std::to_string(cfg.synth.height) + "x" +
                      std::to_string(cfg.synth.width) + "x" + std::to_string(cfg.synth.channels));
  }
  PoolSource source(std::move(pool), cfg.seed);
  Trainer trainer(cfg);

  std::ofstream log;
  if (!log_path.empty()) {
    log = open_out(log_path);
    log << std::setprecision(8);
    write_log_header(log);
  }
  TrainOptions options;
  options.last_good_checkpoint = out;
  options.on_step = [&](const StepLog& row) {
    if (log.is_open()) write_log_row(log, row);
    if (row.val_mean_f1) {
      std::cout << "step " << row.step + 1 << "/" << cfg.steps << "  loss " << row.loss_total << "  val meanF1 "
                << *row.val_mean_f1 << std::endl;
    }
  };
  train(trainer, source, options);
  save_checkpoint(out, trainer);
  std::cout << "checkpoint written to " << out.string() << '\n';
  return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, const std::string& degradation, const fs::path& out) {
  std::unique_ptr<Trainer> trainer = load_checkpoint(ckpt);
  std::vector<Scenario> scenarios = load_scenario_dir(data);
  if (!degradation.empty()) {
    DegradationSpec spec;
    try {
      spec = json_arg(degradation).get<DegradationSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("degradation: ") + e.what());
    }
    for (Scenario& s : scenarios) degrade(s, spec);
  }
  const MetricReport r = evaluate<float>(trainer->model(), scenarios);
  std::ofstream csv = open_out(out);
  csv << std::setprecision(6) << "class,tp,fp,fn,tn,precision,recall,f1,accuracy\n";
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    const ClassScores& c = r.per_class[k];
    csv << kClassNames[k] << ',' << c.tp << ',' << c.fp << ',' << c.fn << ',' << c.tn << ',' << c.precision << ','
        << c.recall << ',' << c.f1 << ',' << c.accuracy << '\n';
  }
  csv << "meanF1,,,,,,," << r.mean_f1 << ',' << r.accuracy << '\n';
  std::cout << "meanF1 " << r.mean_f1 << " over " << scenarios.size() << " scenarios\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& matrix_path, const fs::path& out) {
  const TrainConfig base = config_or_default(config_path);
  const AblationMatrix matrix = parse_ablation_matrix(json_arg(matrix_path));
  std::cout << matrix.rows.size() << " configurations x " << matrix.seeds.size() << " seeds on "
            << std::min(worker_threads(), matrix.rows.size() * matrix.seeds.size()) << " threads\n";
  const auto results = run_ablation(base, matrix, [&](std::size_t row, std::size_t seed, Trainer&) {
    std::cout << "  done " << matrix.rows[row].name << " seed " << matrix.seeds[seed] << std::endl;
  });
  std::ofstream csv = open_out(out);
  write_ablation_csv(csv, matrix, results);
  write_ablation_csv(std::cout, matrix, results);
  return 0;
}

int cmd_gradcheck(const std::string& config_path) {
  const GradcheckReport report = run_gradcheck(config_or_default(config_path));
  write_gradcheck_report(std::cout, report);
  return report.passed() ? 0 : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subspace-expert BEV map fusion"};
  app.require_subcommand(1);

  std::string config, data, out, log, ckpt, degradation, matrix;
  std::size_t count = 1;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen", "write synthetic scenario files");
  gen->add_option("--config", config, "training config (its synth block is used)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--count", count, "number of scenarios")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "seed of the first scenario");

  auto* tr = app.add_subcommand("train", "train on a directory of scenarios");
  tr->add_option("--config", config, "training config");
  tr->add_option("--data", data, "scenario directory")->required();
  tr->add_option("--out", out, "checkpoint path")->required();
  tr->add_option("--log", log, "per-step metric CSV");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ev->add_option("--data", data, "scenario directory")->required();
  ev->add_option("--degradation", degradation, "degradation as inline JSON or a JSON file");
  ev->add_option("--out", out, "metric CSV")->required();

  auto* ab = app.add_subcommand("ablate", "train and evaluate an ablation matrix");
  ab->add_option("--config", config, "base training config");
  ab->add_option("--matrix", matrix, "ablation matrix as inline JSON or a JSON file")->required();
  ab->add_option("--out", out, "result CSV")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  gc->add_option("--config", config, "training config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen(config, out, count, seed);
    if (*tr) return cmd_train(config, data, out, log);
    if (*ev) return cmd_eval(ckpt, data, degradation, out);
    if (*ab) return cmd_ablate(config, matrix, out);
    if (*gc) return cmd_gradcheck(config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
