// SPDX-License-Identifier: Apache-2.0
#include "sefmap/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "sefmap/checkpoint.hpp"

namespace sefmap {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename Real>
Batch<Real> make_batch(std::span<const Scenario> scenarios) {
  if (scenarios.empty()) throw ConfigError("empty batch");
  const Scenario& first = scenarios.front();
  const std::size_t h = first.lidar.height, w = first.lidar.width, c = first.lidar.channels;
  Batch<Real> b;
  b.grids = scenarios.size();
  b.height = h;
  b.width = w;
  b.lidar = Tensor<Real>(Shape{b.grids * h * w, c});
  b.image = Tensor<Real>(Shape{b.grids * h * w, c});
  b.labels.reserve(b.grids * h * w);
  std::size_t offset = 0;
  for (const Scenario& s : scenarios) {
    if (s.lidar.height != h || s.lidar.width != w || s.lidar.channels != c || s.image.height != h ||
        s.image.width != w || s.image.channels != c || s.gt.cells() != h * w) {
      throw ConfigError("batch scenarios must share grid extent and channel count");
    }
    const auto lv = s.lidar.data.values();
    const auto iv = s.image.data.values();
    std::transform(lv.begin(), lv.end(), b.lidar.data() + offset, [](float v) { return static_cast<Real>(v); });
    std::transform(iv.begin(), iv.end(), b.image.data() + offset, [](float v) { return static_cast<Real>(v); });
    offset += lv.size();
    b.labels.insert(b.labels.end(), s.gt.labels.begin(), s.gt.labels.end());
  }
  return b;
}

Scenario GeneratedSource::draw(std::uint64_t index) const { return generate(config_, mix_seed(seed_, index)); }

PoolSource::PoolSource(std::vector<Scenario> pool, std::uint64_t seed) : pool_(std::move(pool)), seed_(seed) {
  if (pool_.empty()) throw ConfigError("training pool is empty");
}

Scenario PoolSource::draw(std::uint64_t index) const { return pool_[mix_seed(seed_, index) % pool_.size()]; }

std::vector<Scenario> scenario_set(const SynthConfig& config, std::uint64_t seed_base, std::size_t count,
                                   const DegradationSpec& degradation) {
  std::vector<Scenario> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(config, seed_base + i, degradation));
  return out;
}

std::vector<Scenario> validation_set(const TrainConfig& config) {
  return scenario_set(config.synth, kValidationSeedBase, config.val_scenarios, config.synth.degradation);
}

std::vector<Scenario> load_scenario_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".sefs") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .sefs scenario files in " + dir.string());
  std::vector<Scenario> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_scenario(f));
  return out;
}

template <typename Real>
StepGraph<Real> build_objective(Model<Real>& model, Tape<Real>& tape, const TrainConfig& config,
                                const Batch<Real>& batch, const EmaStats& stats, bool masked, bool warm,
                                std::mt19937_64& rng, const SurrogateOverride<Real>& override_surrogate) {
  const bool dam = config.enable_dam && masked && warm && stats.ready();
  StepGraph<Real> g;
  if (dam) {
    g.passes = tri_pass(model, tape, batch.lidar, batch.image, stats, rng, override_surrogate);
  } else {
    g.passes.intact = model.forward(tape, batch.lidar, batch.image, true);
  }
  std::vector<Real> cw(config.class_weights.begin(), config.class_weights.end());
  Var<Real> task = task_loss<Real>(g.passes.intact.prediction, batch.labels, cw);
  if (dam && config.task_loss_on_masked) {
    std::array<Var<Real>, 3> terms{task, task_loss<Real>(g.passes.image_masked->prediction, batch.labels, cw),
                                   task_loss<Real>(g.passes.lidar_masked->prediction, batch.labels, cw)};
    std::array<Real, 3> third{Real(1) / 3, Real(1) / 3, Real(1) / 3};
    task = ops::weighted_sum<Real>(terms, third);
  }
  g.parts.task = task;
  if (warm) {
    if (config.enable_sd) {
      g.parts.space = space_loss(g.passes.intact, *model.subspace(), batch.grids, config.space, rng).total;
    }
    if (dam) g.parts.spec = spec_loss(g.passes, config.spec);
    g.parts.bal = balance_regularizer(g.passes.intact.gate);
    if (config.weights.nll > 0) g.parts.nll = variance_nll(g.passes.intact, batch.labels);
  }
  g.total = total_loss(g.parts, config.weights);
  return g;
}

void write_log_header(std::ostream& out) {
  out << "step,loss_total,loss_task,loss_space,loss_spec,omega_bal,w_bar_L,w_bar_I,w_bar_S,w_bar_Int,val_meanF1\n";
}

void write_log_row(std::ostream& out, const StepLog& r) {
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  out << r.step << ',' << r.loss_total << ',' << r.loss_task << ',' << r.loss_space << ',' << r.loss_spec << ','
      << r.omega_bal;
  for (const auto& w : r.w_bar) {
    out << ',';
    opt(w);
  }
  out << ',';
  opt(r.val_mean_f1);
  out << '\n';
}

Trainer::Trainer(const TrainConfig& config) : config_(config), stats_(config.empty_stats()), rng_(mix_seed(config.seed, 2)) {
  config_.validate();
  model_ = std::make_unique<Model<float>>(config_.model_config(), config_.seed);
  optimizer_ = std::make_unique<Optimizer<float>>(config_, model_->params());
}

Batch<float> Trainer::next_batch(const ScenarioSource& source) const {
  std::vector<Scenario> s;
  s.reserve(config_.batch_size);
  for (std::size_t b = 0; b < config_.batch_size; ++b) s.push_back(source.draw(step_ * config_.batch_size + b));
  return make_batch<float>(s);
}

StepLog Trainer::step(const Batch<float>& batch) {
  const bool warm = step_ >= config_.warmup_steps;
  bool masked = config_.enable_dam && warm;
  if (masked && config_.stochastic_passes) masked = std::bernoulli_distribution(0.5)(rng_);

  model_->zero_grad();
  Tape<float> tape;
  StepGraph<float> g = build_objective<float>(*model_, tape, config_, batch, stats_, masked, warm, rng_);
  tape.backward(g.total);
  model_->for_each_param([](Param<float>& p) {
    if (!p.grad.all_finite()) throw NumericalError("gradient of " + p.id + " is non-finite");
  });
  optimizer_->step(scheduled_lr(config_, step_));
  model_->for_each_param([](Param<float>& p) {
    if (!p.value.all_finite()) throw NumericalError("parameter " + p.id + " became non-finite");
  });
  ema_update(stats_, Modality::Lidar, batch.lidar);
  ema_update(stats_, Modality::Image, batch.image);

  StepLog log;
  log.step = step_;
  log.masked = g.passes.complete();
  log.loss_total = g.total.value().item();
  log.loss_task = g.parts.task.value().item();
  if (g.parts.space) log.loss_space = g.parts.space->value().item();
  if (g.parts.spec) log.loss_spec = g.parts.spec->value().item();
  if (g.parts.bal) log.omega_bal = g.parts.bal->value().item();
  const auto& intact = g.passes.intact;
  for (std::size_t i = 0; i < intact.experts.size(); ++i) {
    log.w_bar[static_cast<std::size_t>(intact.experts[i])] = intact.gate.usage.value()[i];
  }
  ++step_;
  return log;
}

template <typename Real>
Tensor<Real> infer(Model<Real>& model, const BevGrid<float>& lidar, const BevGrid<float>& image) {
  const std::size_t c = model.config().channels;
  if (lidar.channels != c || image.channels != c || lidar.height != image.height || lidar.width != image.width) {
    throw ConfigError("infer: grids " + shape_str(lidar.data.shape()) + " / " + shape_str(image.data.shape()) +
                      " do not match a model with " + std::to_string(c) + " channels");
  }
  Tape<Real> tape;
  auto fr = model.forward(tape, lidar.as_cells().template cast<Real>(), image.as_cells().template cast<Real>(), false);
  return fr.prediction.value().reshaped(Shape{lidar.height, lidar.width, model.config().classes});
}

template <typename Real>
MetricReport evaluate(Model<Real>& model, std::span<const Scenario> scenarios) {
  ConfusionMatrix cm;
  for (const Scenario& s : scenarios) {
    const Tensor<Real> y = infer(model, s.lidar, s.image);
    cm.add(y.reshaped(Shape{s.gt.cells(), model.config().classes}), s.gt);
  }
  return cm.report();
}

std::vector<StepLog> train(Trainer& trainer, const ScenarioSource& source, const TrainOptions& options) {
  const TrainConfig& cfg = trainer.config();
  std::vector<Scenario> own_validation;
  const std::vector<Scenario>* val = options.validation;
  if (!val) {
    own_validation = validation_set(cfg);
    val = &own_validation;
  }
  std::vector<StepLog> logs;
  while (trainer.step_index() < cfg.steps) {
    Batch<float> batch = trainer.next_batch(source);
    StepLog log;
    try {
      log = trainer.step(batch);
    } catch (const NumericalError&) {
      if (options.last_good_checkpoint) save_checkpoint(*options.last_good_checkpoint, trainer);
      throw;
    }
    const std::size_t done = log.step + 1;
    if (!val->empty() && ((cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps)) {
      log.val_mean_f1 = evaluate<float>(trainer.model(), *val).mean_f1;
    }
    if (options.on_step) options.on_step(log);
    logs.push_back(log);
  }
  return logs;
}

#define SEFMAP_INSTANTIATE_TRAIN(R)                                                                        \
  template Batch<R> make_batch(std::span<const Scenario>);                                                 \
  template StepGraph<R> build_objective(Model<R>&, Tape<R>&, const TrainConfig&, const Batch<R>&,          \
                                        const EmaStats&, bool, bool, std::mt19937_64&,                     \
                                        const SurrogateOverride<R>&);                                      \
  template Tensor<R> infer(Model<R>&, const BevGrid<float>&, const BevGrid<float>&);                       \
  template MetricReport evaluate(Model<R>&, std::span<const Scenario>);

SEFMAP_INSTANTIATE_TRAIN(float)
SEFMAP_INSTANTIATE_TRAIN(double)

}  // namespace sefmap
