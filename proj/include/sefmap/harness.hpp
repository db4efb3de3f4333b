// SPDX-License-Identifier: Apache-2.0
//
// Ablation matrices and the full-objective gradient check.
#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "sefmap/train.hpp"

namespace sefmap {

struct AblationRow {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();  // TrainConfig keys
};

struct AblationCondition {
  std::string name;
  DegradationSpec degradation;
};

struct AblationMatrix {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t test_scenarios = 100;
  std::vector<AblationCondition> conditions;
  std::vector<AblationRow> rows;
};

/// {"seeds": [...], "test_scenarios": n, "conditions": {name: degradation},
///  "rows": [{"name": ..., <TrainConfig overrides>}]}. Conditions default to
/// intact, image_gain 0.2 and lidar_keep_prob 0.3.
AblationMatrix parse_ablation_matrix(const nlohmann::json& j);
std::vector<AblationCondition> default_conditions();

/// Rows of the SD / DAM / UAG table (all 8 switch combinations).
std::vector<AblationRow> switch_rows();
/// Rows of the expert-group table.
std::vector<AblationRow> expert_group_rows();

TrainConfig apply_overrides(const TrainConfig& base, const nlohmann::json& overrides);

struct AblationResult {
  AblationRow row;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<MetricReport>> reports;  // [seed][condition]
  std::vector<double> seed_seconds;  // training plus evaluation, per seed
  double seconds = 0;

  double mean_f1(std::size_t condition) const;
  double mean_class_f1(std::size_t condition, std::size_t cls) const;
};

/// Called once per trained (row, seed) with the finished trainer.
using TrainedHook = std::function<void(std::size_t row, std::size_t seed_index, Trainer& trainer)>;

/// Trains every (row, seed) pair from scratch on the same scenario stream per
/// seed and evaluates on shared test sets. Jobs run on worker_threads() threads.
std::vector<AblationResult> run_ablation(const TrainConfig& base, const AblationMatrix& matrix,
                                         const TrainedHook& hook = {});

void write_ablation_csv(std::ostream& out, const AblationMatrix& matrix, const std::vector<AblationResult>& results);

struct GradcheckGroup {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0;
  bool skipped = false;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  double tolerance = 0;
  double seconds = 0;
  bool passed() const;
};

struct GradcheckHooks {
  bool corrupt_gradient = false;  // scales the loss gradient on the way back
};

/// Finite-difference check of the full objective (intact and masked passes,
/// every loss term) in double precision on a small random batch.
GradcheckReport run_gradcheck(const TrainConfig& config, const GradcheckHooks& hooks = {});

void write_gradcheck_report(std::ostream& out, const GradcheckReport& report);

}  // namespace sefmap
