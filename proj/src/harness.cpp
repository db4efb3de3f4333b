// SPDX-License-Identifier: Apache-2.0
#include "sefmap/harness.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <thread>

#include "sefmap/gradcheck.hpp"
#include "sefmap/json_util.hpp"

namespace sefmap {

std::vector<AblationCondition> default_conditions() {
  return {{"intact", DegradationSpec{}},
          {"image_gain_0.2", DegradationSpec::image_gain_only(0.2)},
          {"lidar_keep_0.3", DegradationSpec::lidar_keep_only(0.3)}};
}

AblationMatrix parse_ablation_matrix(const nlohmann::json& j) {
  jsonutil::reject_unknown(j, {"seeds", "test_scenarios", "conditions", "rows"}, "ablation matrix");
  AblationMatrix m;
  jsonutil::read_opt(j, "seeds", m.seeds);
  jsonutil::read_opt(j, "test_scenarios", m.test_scenarios);
  if (j.contains("conditions")) {
    const auto& c = j.at("conditions");
    if (!c.is_object()) throw ConfigError("ablation conditions must be an object of degradations");
    for (const auto& [name, spec] : c.items()) {
      try {
        m.conditions.push_back({name, spec.get<DegradationSpec>()});
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("condition '" + name + "': " + e.what());
      }
    }
  } else {
    m.conditions = default_conditions();
  }
  if (!j.contains("rows") || !j.at("rows").is_array()) throw ConfigError("ablation matrix needs a 'rows' array");
  for (const auto& r : j.at("rows")) {
    if (!r.is_object() || !r.contains("name") || !r.at("name").is_string()) {
      throw ConfigError("every ablation row needs a string 'name'");
    }
    AblationRow row{r.at("name").get<std::string>(), r};
    row.overrides.erase("name");
    m.rows.push_back(std::move(row));
  }
  if (m.seeds.empty()) throw ConfigError("ablation matrix needs at least one seed");
  if (m.rows.empty()) throw ConfigError("ablation matrix has no rows");
  if (m.conditions.empty()) throw ConfigError("ablation matrix has no test conditions");
  if (m.test_scenarios == 0) throw ConfigError("test_scenarios must be positive");
  return m;
}

std::vector<AblationRow> switch_rows() {
  std::vector<AblationRow> rows;
  for (int mask = 0; mask < 8; ++mask) {
    const bool sd = mask & 1, dam = mask & 2, uag = mask & 4;
    std::string name;
    if (sd) name += "SD";
    if (dam) name += name.empty() ? "DAM" : "+DAM";
    if (uag) name += name.empty() ? "UAG" : "+UAG";
    if (name.empty()) name = "baseline";
    if (mask == 7) name = "full";
    rows.push_back({name, {{"enable_sd", sd}, {"enable_dam", dam}, {"enable_uag", uag}}});
  }
  return rows;
}

std::vector<AblationRow> expert_group_rows() {
  return {{"full", {{"expert_group", "full"}}},
          {"private_only", {{"expert_group", "private_only"}}},
          {"cross_modal_only", {{"expert_group", "cross_modal_only"}}}};
}

TrainConfig apply_overrides(const TrainConfig& base, const nlohmann::json& overrides) {
  nlohmann::json j = base;
  j.merge_patch(overrides);
  return parse_train_config(j);
}

double AblationResult::mean_f1(std::size_t condition) const {
  double s = 0;
  for (const auto& r : reports) s += r.at(condition).mean_f1;
  return reports.empty() ? 0 : s / static_cast<double>(reports.size());
}

double AblationResult::mean_class_f1(std::size_t condition, std::size_t cls) const {
  double s = 0;
  for (const auto& r : reports) s += r.at(condition).per_class.at(cls).f1;
  return reports.empty() ? 0 : s / static_cast<double>(reports.size());
}

std::vector<AblationResult> run_ablation(const TrainConfig& base, const AblationMatrix& matrix, const TrainedHook& hook) {
  std::vector<TrainConfig> configs;
  for (const auto& row : matrix.rows) configs.push_back(apply_overrides(base, row.overrides));
  std::vector<std::vector<Scenario>> tests;
  for (const auto& c : matrix.conditions) {
    tests.push_back(scenario_set(base.synth, kTestSeedBase, matrix.test_scenarios, c.degradation));
  }

  std::vector<AblationResult> results(matrix.rows.size());
  for (std::size_t r = 0; r < results.size(); ++r) {
    results[r].row = matrix.rows[r];
    results[r].seeds = matrix.seeds;
    results[r].reports.assign(matrix.seeds.size(), std::vector<MetricReport>(matrix.conditions.size()));
  }
  const std::size_t jobs = matrix.rows.size() * matrix.seeds.size();
  std::vector<double> job_seconds(jobs, 0.0);
  std::atomic<std::size_t> next{0};
  std::mutex hook_mutex;
  std::exception_ptr failure;

  auto worker = [&] {
    for (std::size_t job; (job = next.fetch_add(1)) < jobs;) {
      const std::size_t r = job / matrix.seeds.size(), s = job % matrix.seeds.size();
      try {
        const auto t0 = std::chrono::steady_clock::now();
        TrainConfig cfg = configs[r];
        cfg.seed = matrix.seeds[s];
        Trainer trainer(cfg);
        GeneratedSource source(cfg.synth, cfg.seed);
        train(trainer, source);
        for (std::size_t c = 0; c < tests.size(); ++c) {
          results[r].reports[s][c] = evaluate<float>(trainer.model(), tests[c]);
        }
        job_seconds[job] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (hook) {
          std::lock_guard lock(hook_mutex);
          hook(r, s, trainer);
        }
      } catch (...) {
        std::lock_guard lock(hook_mutex);
        if (!failure) failure = std::current_exception();
        next.store(jobs);
      }
    }
  };
  const std::size_t threads = std::min(worker_threads(), jobs);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (std::size_t job = 0; job < jobs; ++job) {
    auto& r = results[job / matrix.seeds.size()];
    r.seed_seconds.push_back(job_seconds[job]);
    r.seconds += job_seconds[job];
  }
  return results;
}

void write_ablation_csv(std::ostream& out, const AblationMatrix& matrix, const std::vector<AblationResult>& results) {
  out << "config,seeds";
  for (const auto& c : matrix.conditions) {
    for (std::size_t k = 1; k < kNumClasses; ++k) out << ',' << c.name << "_F1_" << kClassNames[k];
    out << ',' << c.name << "_meanF1";
  }
  out << '\n';
  out << std::setprecision(6);
  for (const auto& r : results) {
    out << r.row.name << ',' << r.seeds.size();
    for (std::size_t c = 0; c < matrix.conditions.size(); ++c) {
      for (std::size_t k = 1; k < kNumClasses; ++k) out << ',' << r.mean_class_f1(c, k);
      out << ',' << r.mean_f1(c);
    }
    out << '\n';
  }
}

bool GradcheckReport::passed() const {
  for (const auto& g : groups) {
    if (!g.skipped && !(g.max_rel_error < tolerance)) return false;
  }
  return true;
}

namespace {

const std::vector<std::string>& gradcheck_groups() {
  static const std::vector<std::string> names{"proj",   "inter",  "fusion.L", "fusion.I", "fusion.S", "fusion.plain",
                                              "head.L", "head.I", "head.S",   "head.Int", "gate"};
  return names;
}

std::string group_of(const std::string& id) {
  const auto first = id.find('.');
  const std::string head = id.substr(0, first);
  if (head == "gate" || head == "gate_mlp") return "gate";
  if (head == "fusion" || head == "head") return id.substr(0, id.find('.', first + 1));
  return head;
}

// Identity on the way forward, doubled gradient on the way back.
Var<double> corrupt(Var<double> x) {
  Tape<double>& t = *x.tape;
  const std::size_t xi = x.id;
  return t.record("corrupt", x.value(), t.requires_grad(x), [xi](Tape<double>& tp, std::size_t self) {
    const auto& g = tp.out_grad(self);
    auto& d = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * g[i];
  });
}

}  // namespace

GradcheckReport run_gradcheck(const TrainConfig& base, const GradcheckHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig config = base;
  const GradcheckSettings& gc = config.gradcheck;
  if (gc.height > 8 || gc.width > 8) throw ConfigError("gradcheck grids are limited to 8x8");
  ModelConfig mc = config.model_config();
  mc.channels = gc.channels;
  mc.interaction_rank = std::min(config.interaction_rank, std::max<std::size_t>(1, gc.channels / 2));
  mc.validate();
  Model<double> model(mc, config.seed);

  // Random features and labels for one small grid.
  std::mt19937_64 rng(mix_seed(config.seed, 7));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t cells = gc.height * gc.width;
  Batch<double> batch;
  batch.grids = 1;
  batch.height = gc.height;
  batch.width = gc.width;
  batch.lidar = Tensor<double>(Shape{cells, gc.channels});
  batch.image = Tensor<double>(Shape{cells, gc.channels});
  for (auto& v : batch.lidar.storage()) v = normal(rng);
  for (auto& v : batch.image.storage()) v = normal(rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(kNumClasses) - 1);
  for (std::size_t p = 0; p < cells; ++p) batch.labels.push_back(static_cast<std::uint16_t>(label(rng)));
  EmaStats stats = config.empty_stats();
  ema_update(stats, Modality::Lidar, batch.lidar);
  ema_update(stats, Modality::Image, batch.image);
  config.space.sample_cells = std::min(config.space.sample_cells, cells);
  // Give the gate something to differentiate: break the zero init.
  std::mt19937_64 init(mix_seed(config.seed, 11));
  model.gate_net().for_each_param([&](Param<double>& p) {
    for (auto& v : p.value.storage()) v += 0.1 * normal(init);
  });
  for (ExpertId k : mc.experts()) {
    if (!mc.enable_uag) break;
    model.head(k).logvar_net.for_each_param([&](Param<double>& p) {
      for (auto& v : p.value.storage()) v += 0.1 * normal(init);
    });
  }

  const std::uint64_t pass_seed = mix_seed(config.seed, 13);
  Tape<double>::DetachLog detached;
  LossBuilder<double> build = [&](Tape<double>& tape) {
    detached.next = 0;
    tape.set_detach_log(&detached);
    std::mt19937_64 step_rng(pass_seed);
    auto g = build_objective<double>(model, tape, config, batch, stats, true, true, step_rng);
    return hooks.corrupt_gradient ? corrupt(g.total) : g.total;
  };

  {
    Tape<double> tape;
    build(tape);
    detached.replay = true;
  }

  GradcheckReport report;
  report.tolerance = gc.tolerance;
  std::vector<Param<double>*> params = model.params();
  for (const std::string& name : gradcheck_groups()) {
    GradcheckGroup group{name};
    for (Param<double>* p : params) {
      if (group_of(p->id) != name) continue;
      group.coordinates += p->value.size();
      group.max_rel_error = std::max(group.max_rel_error, finite_diff_check<double>(build, *p, gc.step));
    }
    group.skipped = group.coordinates == 0;
    report.groups.push_back(group);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_gradcheck_report(std::ostream& out, const GradcheckReport& report) {
  out << std::scientific << std::setprecision(3);
  for (const auto& g : report.groups) {
    out << std::left << std::setw(14) << g.name;
    if (g.skipped) {
      out << "skipped (no parameters in this configuration)\n";
      continue;
    }
    out << "coords " << std::setw(6) << g.coordinates << " max_rel_err " << g.max_rel_error
        << (g.max_rel_error < report.tolerance ? "  ok" : "  FAIL") << '\n';
  }
  out << (report.passed() ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << report.tolerance << ", "
      << std::fixed << std::setprecision(1) << report.seconds << " s)\n";
  out.unsetf(std::ios::floatfield);
}

}  // namespace sefmap
