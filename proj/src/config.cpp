// SPDX-License-Identifier: Apache-2.0
#include "sefmap/config.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

#include "sefmap/json_util.hpp"

namespace sefmap {

using jsonutil::read_opt;
using jsonutil::reject_unknown;

const char* expert_group_name(ExpertGroup g) {
  switch (g) {
    case ExpertGroup::Full: return "full";
    case ExpertGroup::PrivateOnly: return "private_only";
    case ExpertGroup::CrossModalOnly: return "cross_modal_only";
    case ExpertGroup::OnlyLidar: return "only_lidar";
    case ExpertGroup::OnlyImage: return "only_image";
    case ExpertGroup::OnlyShared: return "only_shared";
    case ExpertGroup::OnlyInteraction: return "only_interaction";
  }
  return "full";
}

ExpertGroup parse_expert_group(const std::string& s) {
  for (ExpertGroup g : {ExpertGroup::Full, ExpertGroup::PrivateOnly, ExpertGroup::CrossModalOnly, ExpertGroup::OnlyLidar,
                        ExpertGroup::OnlyImage, ExpertGroup::OnlyShared, ExpertGroup::OnlyInteraction}) {
    if (s == expert_group_name(g)) return g;
  }
  throw ConfigError("unknown expert_group '" + s + "'");
}

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<OptimizerKind> kOptimizers[] = {{OptimizerKind::AdamW, "adamw"}, {OptimizerKind::Sgd, "sgd"}};
constexpr EnumName<Dissimilarity> kDissims[] = {{Dissimilarity::SquaredL2OnProbs, "squared_l2_probs"},
                                                {Dissimilarity::SquaredL2OnLogits, "squared_l2_logits"},
                                                {Dissimilarity::SymmetricKL, "symmetric_kl"}};
constexpr EnumName<HsicKernel> kKernels[] = {{HsicKernel::Linear, "linear"}, {HsicKernel::Rbf, "rbf"}};
constexpr EnumName<SubspaceWiring> kWirings[] = {{SubspaceWiring::AsWritten, "as_written"},
                                                 {SubspaceWiring::SameModality, "same_modality"}};

template <typename E, std::size_t N>
const char* name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return table[0].name;
}

template <typename E, std::size_t N>
void read_enum(const nlohmann::json& j, const char* key, const EnumName<E> (&table)[N], E& out) {
  std::string s;
  read_opt(j, key, s);
  if (s.empty()) return;
  for (const auto& e : table) {
    if (s == e.name) {
      out = e.value;
      return;
    }
  }
  throw ConfigError(std::string("bad value '") + s + "' for " + key);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be nonnegative");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(lr_decay_fraction > 0 && lr_decay_fraction <= 1)) throw ConfigError("lr_decay_fraction must lie in (0, 1]");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) throw ConfigError("lr_decay_factor must lie in (0, 1]");
  weights.validate();
  spec.validate();
  space.validate();
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("ema_decay must lie in (0, 1)");
  if (!(ema_var_floor > 0)) throw ConfigError("ema_var_floor must be positive");
  synth.validate();
  model_config().validate();
  if (!class_weights.empty()) {
    if (class_weights.size() != kNumClasses) throw ConfigError("class_weights needs one entry per class");
    for (double w : class_weights) {
      if (!(w > 0) || !std::isfinite(w)) throw ConfigError("class_weights must be positive");
    }
  }
  if (gradcheck.height == 0 || gradcheck.width == 0 || gradcheck.height > 8 || gradcheck.width > 8) {
    throw ConfigError("gradcheck grids are limited to 8x8");
  }
  if (!(gradcheck.step > 0) || !(gradcheck.tolerance > 0)) throw ConfigError("gradcheck step and tolerance must be positive");
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.channels = synth.channels;
  m.classes = kNumClasses;
  m.interaction_rank = interaction_rank;
  m.wiring = wiring;
  m.enable_sd = enable_sd;
  m.enable_uag = enable_uag;
  m.group = expert_group;
  m.gate_beta = gate_beta;
  return m;
}

EmaStats TrainConfig::empty_stats() const {
  EmaStats s;
  s.decay = ema_decay;
  s.var_floor = ema_var_floor;
  return s;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"lr", c.lr},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"optimizer", name_of(kOptimizers, c.optimizer)},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"weight_decay", c.weight_decay},
      {"momentum", c.momentum},
      {"lr_decay_fraction", c.lr_decay_fraction},
      {"lr_decay_factor", c.lr_decay_factor},
      {"lambda_task", c.weights.task},
      {"lambda_space", c.weights.space},
      {"lambda_spec", c.weights.spec},
      {"lambda_bal", c.weights.bal},
      {"lambda_nll", c.weights.nll},
      {"gate_beta", c.gate_beta},
      {"gamma", c.spec.gamma},
      {"margin", c.spec.margin},
      {"dissimilarity", name_of(kDissims, c.spec.kind)},
      {"hsic_kernel", name_of(kKernels, c.space.hsic_kernel)},
      {"sample_cells", c.space.sample_cells},
      {"infonce_temperature", c.space.infonce_temperature},
      {"infonce_negatives", c.space.infonce_negatives},
      {"ema_decay", c.ema_decay},
      {"ema_var_floor", c.ema_var_floor},
      {"warmup_steps", c.warmup_steps},
      {"interaction_rank", c.interaction_rank},
      {"wiring", name_of(kWirings, c.wiring)},
      {"enable_sd", c.enable_sd},
      {"enable_dam", c.enable_dam},
      {"enable_uag", c.enable_uag},
      {"expert_group", expert_group_name(c.expert_group)},
      {"task_loss_on_masked", c.task_loss_on_masked},
      {"stochastic_passes", c.stochastic_passes},
      {"class_weights", c.class_weights},
      {"seed", c.seed},
      {"eval_every", c.eval_every},
      {"val_scenarios", c.val_scenarios},
      {"synth", c.synth},
      {"gradcheck",
       {{"height", c.gradcheck.height},
        {"width", c.gradcheck.width},
        {"channels", c.gradcheck.channels},
        {"step", c.gradcheck.step},
        {"tolerance", c.gradcheck.tolerance}}},
  };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"lr",
                  "batch_size",
                  "steps",
                  "optimizer",
                  "beta1",
                  "beta2",
                  "adam_eps",
                  "weight_decay",
                  "momentum",
                  "lr_decay_fraction",
                  "lr_decay_factor",
                  "lambda_task",
                  "lambda_space",
                  "lambda_spec",
                  "lambda_bal",
                  "lambda_nll",
                  "gate_beta",
                  "gamma",
                  "margin",
                  "dissimilarity",
                  "hsic_kernel",
                  "sample_cells",
                  "infonce_temperature",
                  "infonce_negatives",
                  "ema_decay",
                  "ema_var_floor",
                  "warmup_steps",
                  "interaction_rank",
                  "wiring",
                  "enable_sd",
                  "enable_dam",
                  "enable_uag",
                  "expert_group",
                  "task_loss_on_masked",
                  "stochastic_passes",
                  "class_weights",
                  "seed",
                  "eval_every",
                  "val_scenarios",
                  "synth",
                  "gradcheck"},
                 "train config");
  read_opt(j, "lr", c.lr);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "steps", c.steps);
  read_enum(j, "optimizer", kOptimizers, c.optimizer);
  read_opt(j, "beta1", c.beta1);
  read_opt(j, "beta2", c.beta2);
  read_opt(j, "adam_eps", c.adam_eps);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "lr_decay_fraction", c.lr_decay_fraction);
  read_opt(j, "lr_decay_factor", c.lr_decay_factor);
  read_opt(j, "lambda_task", c.weights.task);
  read_opt(j, "lambda_space", c.weights.space);
  read_opt(j, "lambda_spec", c.weights.spec);
  read_opt(j, "lambda_bal", c.weights.bal);
  read_opt(j, "lambda_nll", c.weights.nll);
  read_opt(j, "gate_beta", c.gate_beta);
  read_opt(j, "gamma", c.spec.gamma);
  read_opt(j, "margin", c.spec.margin);
  read_enum(j, "dissimilarity", kDissims, c.spec.kind);
  read_enum(j, "hsic_kernel", kKernels, c.space.hsic_kernel);
  read_opt(j, "sample_cells", c.space.sample_cells);
  read_opt(j, "infonce_temperature", c.space.infonce_temperature);
  read_opt(j, "infonce_negatives", c.space.infonce_negatives);
  read_opt(j, "ema_decay", c.ema_decay);
  read_opt(j, "ema_var_floor", c.ema_var_floor);
  read_opt(j, "warmup_steps", c.warmup_steps);
  read_opt(j, "interaction_rank", c.interaction_rank);
  read_enum(j, "wiring", kWirings, c.wiring);
  read_opt(j, "enable_sd", c.enable_sd);
  read_opt(j, "enable_dam", c.enable_dam);
  read_opt(j, "enable_uag", c.enable_uag);
  if (j.contains("expert_group")) {
    std::string g;
    read_opt(j, "expert_group", g);
    c.expert_group = parse_expert_group(g);
  }
  read_opt(j, "task_loss_on_masked", c.task_loss_on_masked);
  read_opt(j, "stochastic_passes", c.stochastic_passes);
  read_opt(j, "class_weights", c.class_weights);
  read_opt(j, "seed", c.seed);
  read_opt(j, "eval_every", c.eval_every);
  read_opt(j, "val_scenarios", c.val_scenarios);
  if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
  if (j.contains("gradcheck")) {
    const auto& g = j.at("gradcheck");
    reject_unknown(g, {"height", "width", "channels", "step", "tolerance"}, "gradcheck settings");
    read_opt(g, "height", c.gradcheck.height);
    read_opt(g, "width", c.gradcheck.width);
    read_opt(g, "channels", c.gradcheck.channels);
    read_opt(g, "step", c.gradcheck.step);
    read_opt(g, "tolerance", c.gradcheck.tolerance);
  }
}

TrainConfig parse_train_config(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c = j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

TrainConfig load_train_config(const std::filesystem::path& path) { return parse_train_config(read_json_file(path)); }

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SEF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError(std::string("SEF_THREADS must be a positive integer, got '") + env + "'");
    n = static_cast<std::size_t>(v);
  }
  return n;
}

}  // namespace sefmap
