// SPDX-License-Identifier: Apache-2.0
//
// The training step (intact pass, optional masked passes, weighted objective,
// update, statistics refresh), inference, evaluation and the metric log.
#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "sefmap/config.hpp"
#include "sefmap/optim.hpp"

namespace sefmap {

/// Seed bases keeping validation and test scenarios disjoint from training draws.
inline constexpr std::uint64_t kValidationSeedBase = 1'000'000'000ull;
inline constexpr std::uint64_t kTestSeedBase = 2'000'000'000ull;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Several scenarios stacked cell-major into [grids * H * W, C] tensors.
template <typename Real>
struct Batch {
  Tensor<Real> lidar;
  Tensor<Real> image;
  std::vector<std::uint16_t> labels;
  std::size_t grids = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

template <typename Real>
Batch<Real> make_batch(std::span<const Scenario> scenarios);

/// Training scenarios addressed by a draw index, so a step's batch depends
/// only on (step, position) and not on any mutable state.
class ScenarioSource {
 public:
  virtual ~ScenarioSource() = default;
  virtual Scenario draw(std::uint64_t index) const = 0;
};

class GeneratedSource final : public ScenarioSource {
 public:
  GeneratedSource(SynthConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {}
  Scenario draw(std::uint64_t index) const override;

 private:
  SynthConfig config_;
  std::uint64_t seed_;
};

class PoolSource final : public ScenarioSource {
 public:
  PoolSource(std::vector<Scenario> pool, std::uint64_t seed);
  Scenario draw(std::uint64_t index) const override;
  std::size_t size() const { return pool_.size(); }

 private:
  std::vector<Scenario> pool_;
  std::uint64_t seed_;
};

std::vector<Scenario> scenario_set(const SynthConfig& config, std::uint64_t seed_base, std::size_t count,
                                   const DegradationSpec& degradation);
std::vector<Scenario> validation_set(const TrainConfig& config);
std::vector<Scenario> load_scenario_dir(const std::filesystem::path& dir);

/// The objective of one step, left on the tape for backward.
template <typename Real>
struct StepGraph {
  PassOutputs<Real> passes;
  LossComponents<Real> parts;
  Var<Real> total;
};

/// Builds the training objective honoring the ablation switches. `masked`
/// asks for the two masked passes (ignored unless DAM is on and the
/// statistics are ready); `warm` is false during warm-up, when only the task
/// loss is formed.
template <typename Real>
StepGraph<Real> build_objective(Model<Real>& model, Tape<Real>& tape, const TrainConfig& config,
                                const Batch<Real>& batch, const EmaStats& stats, bool masked, bool warm,
                                std::mt19937_64& rng, const SurrogateOverride<Real>& override_surrogate = {});

struct StepLog {
  std::size_t step = 0;
  double loss_total = 0;
  double loss_task = 0;
  double loss_space = 0;
  double loss_spec = 0;
  double omega_bal = 0;
  std::array<std::optional<double>, 4> w_bar;  // indexed by ExpertId
  std::optional<double> val_mean_f1;
  bool masked = false;
};

void write_log_header(std::ostream& out);
void write_log_row(std::ostream& out, const StepLog& row);

/// All mutable training state. Not copyable: the optimizer points into the model.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return config_; }
  Model<float>& model() { return *model_; }
  Optimizer<float>& optimizer() { return *optimizer_; }
  EmaStats& stats() { return stats_; }
  std::mt19937_64& rng() { return rng_; }
  std::size_t step_index() const { return step_; }
  void set_step_index(std::size_t s) { step_ = s; }

  /// One training step on the given batch.
  StepLog step(const Batch<float>& batch);

  /// Batch for the current step from a source.
  Batch<float> next_batch(const ScenarioSource& source) const;

 private:
  TrainConfig config_;
  std::unique_ptr<Model<float>> model_;
  std::unique_ptr<Optimizer<float>> optimizer_;
  EmaStats stats_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
};

/// [H, W, D] logits from a single intact pass; touches no random state.
template <typename Real>
Tensor<Real> infer(Model<Real>& model, const BevGrid<float>& lidar, const BevGrid<float>& image);

template <typename Real>
MetricReport evaluate(Model<Real>& model, std::span<const Scenario> scenarios);

struct TrainOptions {
  std::function<void(const StepLog&)> on_step;
  std::optional<std::filesystem::path> last_good_checkpoint;  // written on divergence
  const std::vector<Scenario>* validation = nullptr;          // defaults to validation_set(config)
};

/// Runs the remaining steps of the trainer's schedule. On a non-finite loss
/// the pre-step state is checkpointed (if requested) and NumericalError rethrown.
std::vector<StepLog> train(Trainer& trainer, const ScenarioSource& source, const TrainOptions& options = {});

}  // namespace sefmap
