// SPDX-License-Identifier: Apache-2.0
//
// Training configuration and its strict JSON form (unknown keys are errors).
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sefmap/losses_space.hpp"
#include "sefmap/losses_spec.hpp"
#include "sefmap/synth.hpp"

namespace sefmap {

enum class OptimizerKind { AdamW, Sgd };

struct GradcheckSettings {
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 8;
  double step = 1e-6;
  double tolerance = 1e-3;
};

struct TrainConfig {
  double lr = 6e-4;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double momentum = 0.9;
  double lr_decay_fraction = 0.75;
  double lr_decay_factor = 0.1;

  LossWeights weights;
  double gate_beta = 1.0;
  SpecConfig spec;
  SpaceLossConfig space;
  double ema_decay = 0.99;
  double ema_var_floor = 1e-6;
  std::size_t warmup_steps = 10;
  std::size_t interaction_rank = 4;
  SubspaceWiring wiring = SubspaceWiring::AsWritten;

  bool enable_sd = true;
  bool enable_dam = true;
  bool enable_uag = true;
  ExpertGroup expert_group = ExpertGroup::Full;
  bool task_loss_on_masked = false;
  bool stochastic_passes = false;
  std::vector<double> class_weights;

  std::uint64_t seed = 0;
  std::size_t eval_every = 250;
  std::size_t val_scenarios = 16;
  SynthConfig synth;
  GradcheckSettings gradcheck;

  void validate() const;
  ModelConfig model_config() const;
  EmaStats empty_stats() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Parses and validates; every failure surfaces as ConfigError.
TrainConfig parse_train_config(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

const char* expert_group_name(ExpertGroup g);
ExpertGroup parse_expert_group(const std::string& s);

/// Number of worker threads allowed by SEF_THREADS (default: hardware concurrency).
std::size_t worker_threads();

}  // namespace sefmap
