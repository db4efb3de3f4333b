// SPDX-License-Identifier: Apache-2.0
#include "sefmap/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "sefmap/binio.hpp"

namespace sefmap {

namespace {

void put_tensor(std::ostream& out, const Shape& shape, std::span<const double> values) {
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) binio::put<std::uint64_t>(out, d);
  for (double v : values) binio::put<double>(out, v);
}

std::vector<double> get_tensor(std::istream& in, const Shape& expected, const std::string& what) {
  const auto rank = binio::get<std::uint32_t>(in, "tensor rank");
  Shape shape(rank);
  for (auto& d : shape) d = binio::get<std::uint64_t>(in, "tensor extent");
  if (shape != expected) {
    throw ConfigError("checkpoint: " + what + " has shape " + shape_str(shape) + ", expected " + shape_str(expected));
  }
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = binio::get<double>(in, what.c_str());
  return v;
}

void put_stats(std::ostream& out, const ChannelStats& s) {
  binio::put<std::uint8_t>(out, s.initialized ? 1 : 0);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.mu.size()));
  for (double v : s.mu) binio::put<double>(out, v);
  for (double v : s.var) binio::put<double>(out, v);
}

ChannelStats get_stats(std::istream& in) {
  ChannelStats s;
  s.initialized = binio::get<std::uint8_t>(in, "stats flag") != 0;
  const auto c = binio::get<std::uint32_t>(in, "stats channels");
  if (c > (1u << 20)) throw ConfigError("checkpoint: implausible statistics size");
  s.mu.resize(c);
  s.var.resize(c);
  for (double& v : s.mu) v = binio::get<double>(in, "stats mean");
  for (double& v : s.var) v = binio::get<double>(in, "stats variance");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Trainer& trainer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write("SEFC", 4);
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put_bytes(out, nlohmann::json(trainer.config()).dump());
  binio::put<std::uint64_t>(out, trainer.step_index());

  auto params = trainer.model().params();
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (Param<float>* p : params) {
    binio::put_bytes(out, p->id);
    std::vector<double> v(p->value.values().begin(), p->value.values().end());
    put_tensor(out, p->value.shape(), v);
  }

  Optimizer<float>& opt = trainer.optimizer();
  binio::put<std::uint64_t>(out, opt.steps_taken());
  for (std::size_t k = 0; k < params.size(); ++k) {
    put_tensor(out, opt.first_moments()[k].shape(), opt.first_moments()[k].values());
    put_tensor(out, opt.second_moments()[k].shape(), opt.second_moments()[k].values());
  }

  const EmaStats& st = trainer.stats();
  binio::put<double>(out, st.decay);
  binio::put<double>(out, st.var_floor);
  put_stats(out, st.lidar);
  put_stats(out, st.image);

  std::ostringstream rng;
  rng << trainer.rng();
  binio::put_bytes(out, rng.str());
  if (!out) throw ConfigError("write failed for " + path.string());
}

std::unique_ptr<Trainer> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  binio::expect_magic(in, "SEFC", path.string());
  const auto version = binio::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw ConfigError(path.string() + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  TrainConfig config;
  try {
    config = parse_train_config(nlohmann::json::parse(binio::get_bytes(in, "config")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": bad embedded config: " + e.what());
  }
  auto trainer = std::make_unique<Trainer>(config);
  trainer->set_step_index(binio::get<std::uint64_t>(in, "step"));

  auto params = trainer->model().params();
  const auto count = binio::get<std::uint32_t>(in, "parameter count");
  if (count != params.size()) {
    throw ConfigError("checkpoint: " + std::to_string(count) + " parameters, model has " + std::to_string(params.size()));
  }
  for (Param<float>* p : params) {
    const std::string name = binio::get_bytes(in, "parameter name", 4096);
    if (name != p->id) throw ConfigError("checkpoint: parameter '" + name + "' where '" + p->id + "' was expected");
    const auto v = get_tensor(in, p->value.shape(), name);
    for (std::size_t i = 0; i < v.size(); ++i) p->value[i] = static_cast<float>(v[i]);
  }

  Optimizer<float>& opt = trainer->optimizer();
  opt.set_steps_taken(binio::get<std::uint64_t>(in, "optimizer step"));
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Tensor<double>* t : {&opt.first_moments()[k], &opt.second_moments()[k]}) {
      const auto v = get_tensor(in, t->shape(), "optimizer state of " + params[k]->id);
      std::copy(v.begin(), v.end(), t->data());
    }
  }

  EmaStats& st = trainer->stats();
  st.decay = binio::get<double>(in, "ema decay");
  st.var_floor = binio::get<double>(in, "ema floor");
  st.lidar = get_stats(in);
  st.image = get_stats(in);

  std::istringstream rng(binio::get_bytes(in, "rng state"));
  rng >> trainer->rng();
  if (!rng) throw ConfigError("checkpoint: bad rng state");
  return trainer;
}

}  // namespace sefmap
