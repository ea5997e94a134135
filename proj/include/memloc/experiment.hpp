#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/analysis.hpp"
#include "memloc/checkpoint.hpp"
#include "memloc/heatmap.hpp"
#include "memloc/jobs.hpp"
#include "memloc/localisation.hpp"
#include "memloc/trainer.hpp"

namespace memloc {

inline constexpr const char* kMemlocVersion = "1.0.0";

inline const std::vector<std::string>& technique_names() {
  static const std::vector<std::string> names{"swap", "retrain", "gradients", "probe"};
  return names;
}

inline void require_technique(const std::string& t) {
  const auto& names = technique_names();
  if (std::find(names.begin(), names.end(), t) == names.end())
    throw ConfigError("unknown technique '" + t + "'; valid: swap, retrain, gradients, probe");
}

struct ControlSettings {
  /// Task trained through every layer alongside the noisy task.
  TaskSpec main_task;
  /// Noisy tasks; empty means the experiment's task list.
  std::vector<TaskSpec> tasks;
  /// Designated layer pairs; empty means {1,2}, {L/2, L/2+1}, {L-1, L}.
  std::vector<std::array<int, 2>> layer_pairs;
  TrainConfig train;
  /// Main-task epochs applied to theta_P before the multitask phase.
  int pretrain_epochs = 0;
  std::uint64_t seed = 3;

  ControlSettings() {
    main_task.name = "control-main";
    main_task.kind = TaskKind::OrderSensitive;
    main_task.seed = 99;
  }
};

struct GenscoreSettings {
  int seeds = 30;
  /// 0 means the experiment's training epochs.
  int epochs = 0;
};

struct ExperimentConfig {
  std::vector<TaskSpec> tasks;
  ModelConfig model;
  TrainConfig train;
  double noise_rate = 0.15;
  std::vector<std::string> techniques = technique_names();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  ControlSettings control;
  int retrain_epochs = 5;
  GradientConfig gradients;
  ProbeConfig probe;
  GenscoreSettings genscore;
  /// Excluded from the config hash.
  std::string output_dir = "runs";
  int parallelism = 1;

  void validate() const {
    if (tasks.empty()) throw ConfigError("config lists no tasks");
    std::set<std::string> names;
    for (const auto& t : tasks) {
      if (t.name.empty() || t.name.find_first_of("/\\ ") != std::string::npos)
        throw ConfigError("task name '" + t.name + "' must be non-empty without slashes or spaces");
      if (!names.insert(t.name).second) throw ConfigError("duplicate task name '" + t.name + "'");
    }
    model.validate();
    train.validate();
    control.train.validate();
    if (seeds.empty()) throw ConfigError("config needs at least one seed");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("noise_rate must lie in [0, 1)");
    for (const auto& t : techniques) require_technique(t);
    if (retrain_epochs < 0) throw ConfigError("retrain_epochs must be >= 0");
    if (genscore.seeds < 1) throw ConfigError("genscore.seeds must be >= 1");
    if (parallelism < 1) throw ConfigError("parallelism must be >= 1");
    if (control.pretrain_epochs < 0) throw ConfigError("control.pretrain_epochs must be >= 0");
    for (const auto& p : control_pairs())
      if (p[0] < 1 || p[1] > model.n_layers || p[0] >= p[1])
        throw ConfigError("control layer pair {" + std::to_string(p[0]) + "," + std::to_string(p[1]) +
                          "} invalid for " + std::to_string(model.n_layers) + " layers");
  }

  std::vector<std::array<int, 2>> control_pairs() const {
    if (!control.layer_pairs.empty()) return control.layer_pairs;
    const int L = model.n_layers;
    std::vector<std::array<int, 2>> out{{1, 2}, {L / 2, L / 2 + 1}, {L - 1, L}};
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
  const std::vector<TaskSpec>& control_tasks() const { return control.tasks.empty() ? tasks : control.tasks; }

  const TaskSpec& task(const std::string& name) const {
    for (const auto& t : tasks)
      if (t.name == name) return t;
    throw ConfigError("no task named '" + name + "'");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ConfigError("unknown key '" + key + "' in " + where);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ControlSettings& c) {
  j = nlohmann::json{{"main_task", c.main_task},
                     {"tasks", c.tasks},
                     {"layer_pairs", c.layer_pairs},
                     {"train", c.train},
                     {"pretrain_epochs", c.pretrain_epochs},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ControlSettings& c) {
  detail::reject_unknown_keys(j, {"main_task", "tasks", "layer_pairs", "train", "pretrain_epochs", "seed"}, "control");
  ControlSettings d;
  c.main_task = j.value("main_task", d.main_task);
  c.tasks = j.value("tasks", d.tasks);
  c.layer_pairs = j.value("layer_pairs", d.layer_pairs);
  c.train = j.value("train", d.train);
  c.pretrain_epochs = j.value("pretrain_epochs", d.pretrain_epochs);
  c.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const GenscoreSettings& g) {
  j = nlohmann::json{{"seeds", g.seeds}, {"epochs", g.epochs}};
}

inline void from_json(const nlohmann::json& j, GenscoreSettings& g) {
  detail::reject_unknown_keys(j, {"seeds", "epochs"}, "genscore");
  GenscoreSettings d;
  g.seeds = j.value("seeds", d.seeds);
  g.epochs = j.value("epochs", d.epochs);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"tasks", c.tasks},
                     {"model", c.model},
                     {"train", c.train},
                     {"noise_rate", c.noise_rate},
                     {"techniques", c.techniques},
                     {"seeds", c.seeds},
                     {"control", c.control},
                     {"retrain_epochs", c.retrain_epochs},
                     {"gradients", c.gradients},
                     {"probe", c.probe},
                     {"genscore", c.genscore},
                     {"output_dir", c.output_dir},
                     {"parallelism", c.parallelism}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::reject_unknown_keys(j,
                              {"tasks", "model", "train", "noise_rate", "techniques", "seeds", "control",
                               "retrain_epochs", "gradients", "probe", "genscore", "output_dir", "parallelism"},
                              "experiment config");
  ExperimentConfig d;
  c.tasks = j.value("tasks", d.tasks);
  c.model = j.value("model", d.model);
  c.train = j.value("train", d.train);
  c.noise_rate = j.value("noise_rate", d.noise_rate);
  c.techniques = j.value("techniques", d.techniques);
  c.seeds = j.value("seeds", d.seeds);
  c.control = j.value("control", d.control);
  c.retrain_epochs = j.value("retrain_epochs", d.retrain_epochs);
  c.gradients = j.value("gradients", d.gradients);
  c.probe = j.value("probe", d.probe);
  c.genscore = j.value("genscore", d.genscore);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.parallelism = j.value("parallelism", d.parallelism);
}

/// Parses and validates a config document. JSON syntax and type errors
/// become ConfigError.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(text).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_file(path));
}

/// MEMLOC_OUTPUT_DIR and MEMLOC_PARALLELISM override the file; nothing else does.
inline void apply_env_overrides(ExperimentConfig& c) {
  if (const char* dir = std::getenv("MEMLOC_OUTPUT_DIR"); dir && *dir) c.output_dir = dir;
  if (const char* par = std::getenv("MEMLOC_PARALLELISM"); par && *par) {
    char* end = nullptr;
    const long v = std::strtol(par, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("MEMLOC_PARALLELISM must be a positive integer, got '") + par + "'");
    c.parallelism = static_cast<int>(v);
  }
}

/// Canonical JSON (sorted keys) without the output location and parallelism.
inline std::string canonical_config(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  j.erase("parallelism");
  return j.dump();
}

/// 16 hex digits of FNV-1a over the canonical config.
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical_config(c))));
  return buf;
}

/// Model configuration for one task: architecture from the experiment,
/// vocabulary, sequence length and class count from the data.
inline ModelConfig model_for(const ModelConfig& base, const Dataset& data, std::uint64_t seed) {
  ModelConfig m = base;
  m.n_classes = data.n_classes;
  m.vocab_size = std::max(m.vocab_size, data.vocab_size);
  m.max_seq_len = std::max(m.max_seq_len, static_cast<int>(data.max_length()));
  m.seed = seed;
  return m;
}

inline std::uint64_t perturbation_seed(std::uint64_t seed) { return derive_seed(seed, 0x9e15); }

/// Clean task data plus the seed's noisy training set.
struct RunData {
  TaskData task;
  Dataset noisy;
};

inline RunData run_data(const ExperimentConfig& c, const TaskSpec& spec, std::uint64_t seed) {
  RunData r;
  r.task = load_task(spec);
  r.noisy = perturb_labels(r.task.train, c.noise_rate, perturbation_seed(seed));
  return r;
}

struct RunOptions {
  /// Stop after this many new jobs (simulated interruption).
  std::size_t max_jobs = std::numeric_limits<std::size_t>::max();
  std::ostream* log = nullptr;
};

struct CommandResult {
  std::string command;
  /// Paths relative to the run root.
  std::vector<std::string> artifacts;
  std::size_t ran = 0;
  std::size_t skipped = 0;
  bool interrupted = false;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string optional_csv(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::optional<double> json_optional(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

inline std::optional<double> mean_of(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) s += *x, ++n;
  if (!n) return std::nullopt;
  return s / n;
}

/// One experiment rooted at <output_dir>/<config hash>/. Every job writes its
/// files atomically and then a `.done` marker holding the config hash and
/// artifact list, so an interrupted command resumes where it stopped.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, RunOptions opt = {})
      : cfg_(std::move(cfg)), opt_(opt), hash_(config_hash(cfg_)),
        root_(std::filesystem::path(cfg_.output_dir) / hash_) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const std::filesystem::path& root() const { return root_; }

  CommandResult gen_data() {
    return command("gen-data", [&](CommandResult& res) {
      std::vector<Job> jobs;
      for (const auto& t : cfg_.tasks)
        jobs.push_back({"data/" + t.name, [this, t](const std::filesystem::path& dir) {
                          std::vector<std::string> out;
                          const auto td = load_task(t);
                          write(dir / "train.jsonl", jsonl(td.train), out);
                          write(dir / "val.jsonl", jsonl(td.val), out);
                          for (auto s : cfg_.seeds)
                            write(dir / ("train_noisy_s" + std::to_string(s) + ".jsonl"),
                                  jsonl(perturb_labels(td.train, cfg_.noise_rate, perturbation_seed(s))), out);
                          write(dir / "labels.json", nlohmann::json(td.label_names).dump(2) + "\n", out);
                          return out;
                        }});
      run_jobs(jobs, res);
    });
  }

  CommandResult train() {
    return command("train", [&](CommandResult& res) {
      run_jobs(train_jobs(), res);
      if (res.interrupted) return;
      std::string csv = "task,seed,m1_epoch,m1_accuracy,train_accuracy,memorisation_error,val_accuracy,original_val_accuracy\n";
      for (const auto& t : cfg_.tasks)
        for (auto s : cfg_.seeds) {
          const auto j = read_json(run_dir(t.name, s) / "train.json");
          csv += t.name + "," + std::to_string(s) + "," + std::to_string(j.at("m1_epoch").get<int>()) + "," +
                 format_double(j.at("m1_accuracy")) + "," + format_double(j.at("train_accuracy")) + "," +
                 optional_csv(json_optional(j, "memorisation_error")) + "," +
                 optional_csv(json_optional(j, "val_accuracy")) + "," +
                 optional_csv(json_optional(j, "original_val_accuracy")) + "\n";
        }
      write(root_ / "train" / "summary.csv", csv, res.artifacts);
    });
  }

  CommandResult localise(const std::string& technique) {
    require_technique(technique);
    return command("localise-" + technique, [&](CommandResult& res) {
      require_trained();
      std::vector<Job> jobs;
      for (const auto& t : cfg_.tasks)
        for (auto s : cfg_.seeds)
          jobs.push_back({"localise/" + technique + "/" + t.name + "/s" + std::to_string(s),
                          [this, t, s, technique](const std::filesystem::path& dir) {
                            return localise_job(technique, t, s, dir);
                          }});
      run_jobs(jobs, res);
      localise_summary(technique, res);
    });
  }

  CommandResult control() {
    return command("control", [&](CommandResult& res) {
      std::vector<Job> jobs;
      for (const auto& t : cfg_.control_tasks())
        for (const auto& p : cfg_.control_pairs())
          jobs.push_back({pair_dir(t.name, p), [this, t, p](const std::filesystem::path& dir) {
                            return control_job(t, p, dir);
                          }});
      run_jobs(jobs, res);
      control_summary(res);
    });
  }

  CommandResult genscore() {
    return command("genscore", [&](CommandResult& res) { run_jobs(genscore_jobs(), res); });
  }

  CommandResult events() {
    return command("events", [&](CommandResult& res) {
      require_trained();
      std::vector<Job> jobs = genscore_jobs();
      for (const auto& t : cfg_.tasks)
        for (auto s : cfg_.seeds)
          jobs.push_back({"events/" + t.name + "/s" + std::to_string(s), [this, t, s](const std::filesystem::path& dir) {
                            return events_job(t, s, dir);
                          }});
      run_jobs(jobs, res);
      if (!res.interrupted) events_summary(res);
    });
  }

  CommandResult correlate() {
    return command("correlate", [&](CommandResult& res) {
      std::vector<ScoredRun> runs;
      for (const auto& tech : cfg_.techniques)
        for (const auto& t : cfg_.tasks)
          for (auto s : cfg_.seeds) {
            const auto dir = root_ / "localise" / tech / t.name / ("s" + std::to_string(s));
            if (!std::filesystem::exists(dir / ".done")) continue;
            runs.push_back({tech, t.name, "s" + std::to_string(s),
                            read_json(dir / "scores.json").get<LayerScores>()});
          }
      if (runs.empty()) throw DataError("correlate: no localisation results; run `memloc localise <technique>` first");
      const auto ms = cross_compare(runs);
      write(root_ / "correlate" / "correlations.csv", correlation_csv(ms), res.artifacts);
      write(root_ / "correlate" / "correlations.json", nlohmann::json(ms).dump(2) + "\n", res.artifacts);
    });
  }

  CommandResult report() {
    return command("report", [&](CommandResult& res) { write_report(res); });
  }

  /// Runs every command in pipeline order.
  std::vector<CommandResult> run_all() {
    std::vector<CommandResult> out;
    out.push_back(gen_data());
    out.push_back(train());
    for (const auto& t : cfg_.techniques) out.push_back(localise(t));
    out.push_back(control());
    out.push_back(events());
    out.push_back(correlate());
    out.push_back(report());
    return out;
  }

  std::filesystem::path run_dir(const std::string& task, std::uint64_t seed) const {
    return root_ / "checkpoints" / task / ("s" + std::to_string(seed));
  }

 private:
  using JobFn = std::function<std::vector<std::string>(const std::filesystem::path&)>;
  struct Job {
    std::string dir;  // relative to root
    JobFn fn;
  };

  ExperimentConfig cfg_;
  RunOptions opt_;
  std::string hash_;
  std::filesystem::path root_;
  std::size_t budget_used_ = 0;

  void log(const std::string& msg) const {
    if (opt_.log) *opt_.log << msg << '\n' << std::flush;
  }

  static std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  std::string rel(const std::filesystem::path& p) const { return std::filesystem::relative(p, root_).generic_string(); }

  void write(const std::filesystem::path& path, const std::string& bytes, std::vector<std::string>& artifacts) const {
    write_file_atomic(path, bytes);
    artifacts.push_back(rel(path));
  }

  static nlohmann::json read_json(const std::filesystem::path& path) {
    try {
      return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), 0);
    }
  }

  static std::string jsonl(const Dataset& d) {
    std::string s;
    for (const auto& e : d.examples)
      s += nlohmann::json{{"id", e.example_id},
                          {"tokens", e.tokens},
                          {"original_label", e.original_label},
                          {"assigned_label", e.assigned_label},
                          {"noisy", e.noisy}}
               .dump() +
           "\n";
    return s;
  }

  /// Creates the root and pins config.json; a different config under the
  /// same hash directory is refused.
  void prepare_root() const {
    std::filesystem::create_directories(root_);
    nlohmann::json pinned = nlohmann::json::parse(canonical_config(cfg_));
    const auto path = root_ / "config.json";
    const std::string text = pinned.dump(2) + "\n";
    if (std::filesystem::exists(path)) {
      if (read_file(path) != text)
        throw ConfigError(path.string() + " holds a different configuration than hash " + hash_ +
                          "; refusing to mix results");
    } else {
      write_file_atomic(path, text);
    }
  }

  CommandResult command(const std::string& name, const std::function<void(CommandResult&)>& body) {
    prepare_root();
    CommandResult res;
    res.command = name;
    const std::string started = now_iso();
    log(name + ": " + root_.string());
    body(res);
    if (!res.interrupted) record_manifest(res, started);
    log(name + ": " + std::to_string(res.ran) + " jobs run, " + std::to_string(res.skipped) + " reused" +
        (res.interrupted ? " (interrupted)" : ""));
    return res;
  }

  void record_manifest(const CommandResult& res, const std::string& started) const {
    for (const auto& a : res.artifacts)
      if (!std::filesystem::exists(root_ / a)) throw Error("manifest: artifact missing after " + res.command + ": " + a);
    const auto path = root_ / "manifest.json";
    nlohmann::json m = std::filesystem::exists(path) ? read_json(path) : nlohmann::json::object();
    m["config_hash"] = hash_;
    m["versions"] = {{"memloc", kMemlocVersion}, {"checkpoint_format", kCheckpointVersion}};
    m["commands"][res.command] = {{"started", started}, {"finished", now_iso()}, {"artifacts", res.artifacts}};
    write_file_atomic(path, m.dump(2) + "\n");
  }

  /// Reused jobs are checked: every listed artifact must exist and
  /// checkpoints must parse, otherwise the error names the file.
  std::optional<std::vector<std::string>> finished(const std::filesystem::path& dir) const {
    const auto marker = dir / ".done";
    if (!std::filesystem::exists(marker)) return std::nullopt;
    const auto j = read_json(marker);
    if (j.value("config_hash", "") != hash_)
      throw ConfigError(marker.string() + " was written by config " + j.value("config_hash", "?") +
                        ", not " + hash_ + "; refusing to resume");
    auto artifacts = j.at("artifacts").get<std::vector<std::string>>();
    for (const auto& a : artifacts) {
      const auto p = root_ / a;
      if (!std::filesystem::exists(p)) throw DataError("resume: " + p.string() + " is missing");
      if (p.extension() == ".ckpt") (void)load_checkpoint(p);
    }
    return artifacts;
  }

  void run_jobs(const std::vector<Job>& jobs, CommandResult& res) {
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (auto done = finished(root_ / jobs[i].dir)) {
        res.artifacts.insert(res.artifacts.end(), done->begin(), done->end());
        ++res.skipped;
      } else {
        todo.push_back(i);
      }
    }
    const std::size_t budget = opt_.max_jobs - std::min(opt_.max_jobs, budget_used_);
    if (todo.size() > budget) {
      todo.resize(budget);
      res.interrupted = true;
    }
    budget_used_ += todo.size();
    auto produced = parallel_map(todo.size(), static_cast<std::size_t>(cfg_.parallelism), [&](std::size_t k) {
      const auto& job = jobs[todo[k]];
      const auto dir = root_ / job.dir;
      log("  job " + job.dir);
      auto artifacts = job.fn(dir);
      write_file_atomic(dir / ".done", nlohmann::json{{"config_hash", hash_}, {"artifacts", artifacts}}.dump(2) + "\n");
      return artifacts;
    });
    for (auto& a : produced) res.artifacts.insert(res.artifacts.end(), a.begin(), a.end());
    res.ran += todo.size();
  }

  void require_trained() const {
    for (const auto& t : cfg_.tasks)
      for (auto s : cfg_.seeds)
        if (!std::filesystem::exists(run_dir(t.name, s) / ".done"))
          throw DataError("missing checkpoints for task " + t.name + " seed " + std::to_string(s) + " under " +
                          run_dir(t.name, s).string() + "; run `memloc train` first");
  }

  ModelState checkpoint(const std::string& task, std::uint64_t seed, const std::string& kind) const {
    const auto path = run_dir(task, seed) / (kind + ".ckpt");
    if (!std::filesystem::exists(path)) throw DataError("missing checkpoint " + path.string() + "; run `memloc train` first");
    return load_checkpoint(path).model;
  }

  std::vector<Job> train_jobs() {
    std::vector<Job> jobs;
    for (const auto& t : cfg_.tasks)
      for (auto s : cfg_.seeds)
        jobs.push_back({rel(run_dir(t.name, s)), [this, t, s](const std::filesystem::path& dir) {
                          return train_job(t, s, dir);
                        }});
    return jobs;
  }

  std::vector<std::string> train_job(const TaskSpec& t, std::uint64_t seed, const std::filesystem::path& dir) const {
    std::vector<std::string> out;
    const auto rd = run_data(cfg_, t, seed);
    const auto p = build_model(model_for(cfg_.model, rd.noisy, seed));
    TrainConfig tc = cfg_.train;
    tc.seed = seed;
    const Dataset* val = rd.task.val.size() ? &rd.task.val : nullptr;
    const auto m = finetune(p, rd.noisy, tc, val);
    const auto o = train_original(p, rd.noisy, tc, val);
    auto save = [&](const ModelState& model, const std::string& kind, nlohmann::json extra) {
      const auto path = dir / (kind + ".ckpt");
      save_checkpoint(model, path, {kind, t.name, seed, hash_, std::move(extra)});
      out.push_back(rel(path));
    };
    save(p, "theta_P", nlohmann::json::object());
    // Without an epoch above the threshold theta_M1 falls back to theta_M2.
    save(m.theta_m1 ? *m.theta_m1 : m.theta_m2, "theta_M1",
         {{"epoch", m.m1_epoch}, {"fallback_to_final", !m.theta_m1.has_value()}});
    save(m.theta_m2, "theta_M2", nlohmann::json::object());
    save(o.theta_m2, "theta_O", nlohmann::json::object());
    write(dir / "curves_M.csv", curves_csv(m), out);
    write(dir / "curves_O.csv", curves_csv(o), out);
    const auto ev = evaluate(m.theta_m2, rd.noisy);
    nlohmann::json j{{"task", t.name},
                     {"seed", seed},
                     {"m1_epoch", m.m1_epoch},
                     {"m1_accuracy", m.m1_accuracy},
                     {"train_accuracy", ev.accuracy},
                     {"memorisation_error", ev.memorisation_error ? nlohmann::json(*ev.memorisation_error) : nlohmann::json(nullptr)},
                     {"val_accuracy", m.final_val_accuracy ? nlohmann::json(*m.final_val_accuracy) : nlohmann::json(nullptr)},
                     {"original_val_accuracy", o.final_val_accuracy ? nlohmann::json(*o.final_val_accuracy) : nlohmann::json(nullptr)},
                     {"noisy_examples", rd.noisy.noisy_count()}};
    write(dir / "train.json", j.dump(2) + "\n", out);
    return out;
  }

  std::vector<std::string> localise_job(const std::string& technique, const TaskSpec& t, std::uint64_t seed,
                                        const std::filesystem::path& dir) const {
    std::vector<std::string> out;
    const auto rd = run_data(cfg_, t, seed);
    const auto m2 = checkpoint(t.name, seed, "theta_M2");
    const auto p = checkpoint(t.name, seed, "theta_P");
    TrainConfig tc = cfg_.train;
    tc.seed = seed;
    LayerScores scores;
    nlohmann::json extra = nlohmann::json::object();
    try {
      if (technique == "swap" || technique == "retrain") {
        const auto m = technique == "swap" ? swap_sweep(m2, checkpoint(t.name, seed, "theta_O"), rd.noisy)
                                           : retrain_sweep(m2, p, rd.noisy, tc, cfg_.retrain_epochs);
        write(dir / "matrix.csv", matrix_csv(m), out);
        write(dir / "windows.csv", windows_csv(m), out);
        scores = matrix_to_scores(m);
        extra = {{"full_window_error", m.full_window_error},
                 {"mean_clean_error", m.mean_clean_error},
                 {"max_single_window_error", m.max_window_error(1)}};
      } else if (technique == "gradients") {
        const auto g = forgetting_gradients(checkpoint(t.name, seed, "theta_M1"), p, rd.noisy, cfg_.gradients);
        scores = g.scores;
        extra = {{"noisy_norms", g.noisy_norms}, {"clean_norms", g.clean_norms},
                 {"frozen_norms", g.frozen_norms}, {"processed", g.processed}};
      } else {
        const auto r = noise_probe_sweep(m2, p, rd.noisy, cfg_.probe);
        write(dir / "probe.json", nlohmann::json(r.result).dump(2) + "\n", out);
        scores = r.scores;
      }
    } catch (const DegenerateRunError& e) {
      scores = normalise_scores(std::vector<double>(static_cast<std::size_t>(m2.config.n_layers), 0.0), technique);
      extra = {{"degenerate_run", e.what()}};
    }
    scores.technique = technique;
    scores.provenance["task"] = t.name;
    scores.provenance["seed"] = seed;
    scores.provenance["config_hash"] = hash_;
    nlohmann::json j = scores;
    j["mcog"] = mcog(scores);
    j["details"] = extra;
    if (technique == "gradients") j["details"]["config"] = cfg_.gradients;
    if (technique == "probe") j["details"]["config"] = cfg_.probe;
    write(dir / "scores.json", j.dump(2) + "\n", out);
    return out;
  }

  void localise_summary(const std::string& technique, CommandResult& res) const {
    if (res.interrupted) return;
    const auto base = root_ / "localise" / technique;
    const int L = cfg_.model.n_layers;
    std::string csv = "task,seed,mcog,degenerate";
    for (int l = 1; l <= L; ++l) csv += ",alpha_" + std::to_string(l);
    csv += "\n";
    for (const auto& t : cfg_.tasks) {
      std::vector<double> mean_alpha(static_cast<std::size_t>(L), 0.0);
      std::vector<std::vector<double>> mean_matrix;
      int matrices = 0;
      for (auto s : cfg_.seeds) {
        const auto dir = base / t.name / ("s" + std::to_string(s));
        const auto sc = read_json(dir / "scores.json").get<LayerScores>();
        csv += t.name + "," + std::to_string(s) + "," + format_double(mcog(sc)) + "," + (sc.degenerate ? "1" : "0");
        for (std::size_t l = 0; l < sc.alpha.size(); ++l) {
          csv += "," + format_double(sc.alpha[l]);
          mean_alpha[l] += sc.alpha[l] / static_cast<double>(cfg_.seeds.size());
        }
        csv += "\n";
        if (std::filesystem::exists(dir / "matrix.csv")) {
          const auto g = parse_matrix_csv(read_file(dir / "matrix.csv"));
          if (mean_matrix.empty()) mean_matrix.assign(static_cast<std::size_t>(g.n), std::vector<double>(static_cast<std::size_t>(g.n), 0.0));
          for (int w = 0; w < g.n; ++w)
            for (int y = 0; y < g.n; ++y) mean_matrix[static_cast<std::size_t>(w)][static_cast<std::size_t>(y)] += g.cells[static_cast<std::size_t>(w)][static_cast<std::size_t>(y)];
          ++matrices;
        }
      }
      auto mean = normalise_scores(mean_alpha, technique);
      mean.provenance = {{"task", t.name}, {"seeds", cfg_.seeds}, {"config_hash", hash_}};
      nlohmann::json j = mean;
      j["mcog"] = mcog(mean);
      write(base / t.name / "mean_scores.json", j.dump(2) + "\n", res.artifacts);
      if (matrices) {
        std::string m = "w,y,mem_error\n";
        for (std::size_t w = 0; w < mean_matrix.size(); ++w)
          for (std::size_t y = 0; y < mean_matrix.size(); ++y)
            m += std::to_string(w + 1) + "," + std::to_string(y + 1) + "," + format_double(mean_matrix[w][y] / matrices) + "\n";
        write(base / t.name / "mean_matrix.csv", m, res.artifacts);
      }
    }
    write(base / "summary.csv", csv, res.artifacts);
  }

  static std::string pair_dir(const std::string& task, const std::array<int, 2>& p) {
    return "control/" + task + "/pair_" + std::to_string(p[0]) + "_" + std::to_string(p[1]);
  }

  std::vector<std::string> control_job(const TaskSpec& t, const std::array<int, 2>& pair,
                                       const std::filesystem::path& dir) const {
    std::vector<std::string> out;
    const auto& ctl = cfg_.control;
    const auto main_data = load_task(ctl.main_task).train;
    const auto noisy = perturb_labels(load_task(t).train, cfg_.noise_rate, perturbation_seed(ctl.seed));
    ModelConfig mc = model_for(cfg_.model, main_data, ctl.seed);
    mc.vocab_size = std::max(mc.vocab_size, noisy.vocab_size);
    mc.max_seq_len = std::max(mc.max_seq_len, static_cast<int>(noisy.max_length()));
    mc.aux_head_classes = {noisy.n_classes};
    TrainConfig tc = ctl.train;
    tc.seed = ctl.seed;
    ModelState p = build_model(mc);
    if (ctl.pretrain_epochs > 0) {
      TrainConfig pre = tc;
      pre.epochs = ctl.pretrain_epochs;
      p = train_run(p, main_data, pre, LabelField::Assigned).theta_m2;
    }
    const std::vector<int> truth{pair[0], pair[1]};
    const auto m = control_finetune(p, main_data, noisy, truth, tc);
    // The twin shares theta_M's final learning rate so both follow the same main-task schedule.
    TrainConfig twin = tc;
    twin.learning_rate = m.learning_rate_used;
    const auto o = control_finetune(p, main_data, with_original_labels(noisy), truth, twin);
    const bool converged = m.noisy_train_accuracy > tc.control_accuracy_target;
    nlohmann::json cell{{"task", t.name},
                        {"pair", pair},
                        {"converged", converged},
                        {"retried", m.retried},
                        {"learning_rate_used", m.learning_rate_used},
                        {"noisy_train_accuracy", m.noisy_train_accuracy},
                        {"main_train_accuracy", m.main_train_accuracy},
                        {"original_twin_noisy_accuracy", o.noisy_train_accuracy},
                        {"m1_epoch", m.m1_epoch}};
    const TrainConfig& rc = twin;
    for (const auto& tech : cfg_.techniques) {
      LayerScores s;
      nlohmann::json extra = nlohmann::json::object();
      try {
        if (tech == "swap") {
          const auto w = swap_sweep(m.model, o.model, noisy, 1);
          s = matrix_to_scores(w);
          extra = {{"mean_clean_error", w.mean_clean_error}};
        } else if (tech == "retrain") {
          s = matrix_to_scores(retrain_sweep(m.model, p, noisy, rc, cfg_.retrain_epochs, 1));
        } else if (tech == "gradients") {
          s = forgetting_gradients(m.theta_m1 ? *m.theta_m1 : m.model, p, noisy, cfg_.gradients, 1).scores;
        } else {
          s = noise_probe_sweep(m.model, p, noisy, cfg_.probe).scores;
        }
      } catch (const DegenerateRunError& e) {
        s = normalise_scores(std::vector<double>(static_cast<std::size_t>(mc.n_layers), 0.0), tech);
        extra = {{"degenerate_run", e.what()}};
      }
      cell["techniques"][tech] = {{"alpha", s.alpha},
                                  {"degenerate", s.degenerate},
                                  {"accuracy_at_1", accuracy_at_k(s, truth, 1)},
                                  {"accuracy_at_2", accuracy_at_k(s, truth, 2)},
                                  {"details", extra}};
    }
    write(dir / "cell.json", cell.dump(2) + "\n", out);
    return out;
  }

  void control_summary(CommandResult& res) const {
    if (res.interrupted) return;
    const int L = cfg_.model.n_layers;
    std::string csv = "task,pair,technique,accuracy_at_1,accuracy_at_2,converged\n";
    std::map<std::string, std::array<double, 3>> by_tech;  // sum@1, sum@2, count
    std::map<std::string, std::map<std::string, std::array<double, 3>>> by_task;
    std::size_t cells = 0, excluded = 0;
    for (const auto& t : cfg_.control_tasks())
      for (const auto& p : cfg_.control_pairs()) {
        const auto cell = read_json(root_ / pair_dir(t.name, p) / "cell.json");
        const bool conv = cell.at("converged").get<bool>();
        ++cells;
        excluded += conv ? 0 : 1;
        for (const auto& tech : cfg_.techniques) {
          const auto& r = cell.at("techniques").at(tech);
          const double a1 = r.at("accuracy_at_1"), a2 = r.at("accuracy_at_2");
          csv += t.name + "," + std::to_string(p[0]) + "-" + std::to_string(p[1]) + "," + tech + "," +
                 format_double(a1) + "," + format_double(a2) + "," + (conv ? "1" : "0") + "\n";
          if (!conv) continue;
          for (auto* acc : {&by_tech[tech], &by_task[tech][t.name]}) {
            (*acc)[0] += a1;
            (*acc)[1] += a2;
            (*acc)[2] += 1;
          }
        }
      }
    nlohmann::json summary{{"cells", cells},
                           {"excluded_unconverged", excluded},
                           {"baseline", {{"accuracy_at_1", random_accuracy_at_k(L, 2, 1)},
                                         {"accuracy_at_2", random_accuracy_at_k(L, 2, 2)}}}};
    for (const auto& tech : cfg_.techniques) {
      const auto& a = by_tech[tech];
      auto mean = [&](double v, double n) { return n > 0 ? nlohmann::json(v / n) : nlohmann::json(nullptr); };
      summary["techniques"][tech] = {{"accuracy_at_1", mean(a[0], a[2])}, {"accuracy_at_2", mean(a[1], a[2])}, {"cells", static_cast<int>(a[2])}};
      for (const auto& [task, b] : by_task[tech])
        summary["per_task"][task][tech] = {{"accuracy_at_1", mean(b[0], b[2])}, {"accuracy_at_2", mean(b[1], b[2])}};
    }
    write(root_ / "control" / "results.csv", csv, res.artifacts);
    write(root_ / "control" / "summary.json", summary.dump(2) + "\n", res.artifacts);
  }

  std::vector<Job> genscore_jobs() const {
    std::vector<Job> jobs;
    for (const auto& t : cfg_.tasks)
      jobs.push_back({"genscore/" + t.name, [this, t](const std::filesystem::path& dir) {
                        std::vector<std::string> out;
                        const auto td = load_task(t);
                        TrainConfig tc = cfg_.train;
                        if (cfg_.genscore.epochs > 0) tc.epochs = cfg_.genscore.epochs;
                        const auto g = generalisation_score(td.train, model_for(cfg_.model, td.train, cfg_.seeds.front()),
                                                            tc, cfg_.genscore.seeds);
                        nlohmann::json j{{"task", t.name}, {"score", g.score}, {"pairs", g.pairs}, {"per_seed", g.per_seed}};
                        write(dir / "genscore.json", j.dump(2) + "\n", out);
                        return out;
                      }});
    return jobs;
  }

  std::vector<std::string> events_job(const TaskSpec& t, std::uint64_t seed, const std::filesystem::path& dir) const {
    std::vector<std::string> out;
    const auto rd = run_data(cfg_, t, seed);
    const auto m2 = checkpoint(t.name, seed, "theta_M2");
    EventSummary ev;
    ev.task = t.name;
    ev.model = "s" + std::to_string(seed);
    centroid_events(collect_states(m2, rd.noisy), rd.noisy, ev);
    const auto noisy_probe = class_probe_sweep(m2, rd.noisy, LabelField::Assigned, cfg_.probe);
    const auto orig_probe = class_probe_sweep(m2, rd.noisy, LabelField::Original, cfg_.probe);
    const auto pe = probe_events(noisy_probe, orig_probe, 1.0 / rd.noisy.n_classes);
    if (pe.mem_gg_gen) ev.mem_gg_gen = *pe.mem_gg_gen;
    if (pe.clean_f1_90) ev.clean_f1_90 = *pe.clean_f1_90;
    nlohmann::json j = ev;
    j["seed"] = seed;
    j["validation_score"] = rd.task.val.size() ? nlohmann::json(validation_score(m2, rd.task.val, rd.noisy.n_classes))
                                               : nlohmann::json(nullptr);
    j["probes"] = {{"noisy_label", noisy_probe}, {"original_label", orig_probe}};
    write(dir / "events.json", j.dump(2) + "\n", out);
    return out;
  }

  /// Mean M-CoG over seeds from the first configured technique with results.
  std::optional<double> task_mcog(const std::string& task) const {
    for (const auto& tech : cfg_.techniques) {
      const auto path = root_ / "localise" / tech / task / "mean_scores.json";
      if (std::filesystem::exists(path)) return read_json(path).at("mcog").get<double>();
    }
    return std::nullopt;
  }

  void events_summary(CommandResult& res) const {
    nlohmann::json runs = nlohmann::json::array();
    std::vector<double> cross, gg, init, f90;
    std::string scatter = "task,crossing,initiation,mem_gg_gen,clean_f1_90,mcog,generalisation_score,validation_score\n";
    std::map<std::string, std::map<std::string, double>> table_rows, table_cols;
    for (const auto& t : cfg_.tasks) {
      std::vector<std::optional<double>> c, in, m, f, v;
      for (auto s : cfg_.seeds) {
        const auto j = read_json(root_ / "events" / t.name / ("s" + std::to_string(s)) / "events.json");
        nlohmann::json slim = j;
        slim.erase("probes");
        runs.push_back(slim);
        c.push_back(json_optional(j, "crossing"));
        in.push_back(json_optional(j, "classification_initiation"));
        m.push_back(json_optional(j, "mem_gg_gen"));
        f.push_back(json_optional(j, "clean_f1_90"));
        v.push_back(json_optional(j, "validation_score"));
        if (c.back() && m.back()) cross.push_back(*c.back()), gg.push_back(*m.back());
        if (in.back() && f.back()) init.push_back(*in.back()), f90.push_back(*f.back());
      }
      const double gs = read_json(root_ / "genscore" / t.name / "genscore.json").at("score").get<double>();
      const auto mc = task_mcog(t.name);
      const std::vector<std::pair<std::string, std::optional<double>>> metrics{
          {"crossing", mean_of(c)}, {"initiation", mean_of(in)}, {"mem_gg_gen", mean_of(m)},
          {"clean_f1_90", mean_of(f)}, {"mcog", mc}};
      for (const auto& [name, value] : metrics)
        if (value) table_rows[name][t.name] = *value;
      table_cols["generalisation_score"][t.name] = gs;
      if (auto vs = mean_of(v)) table_cols["validation_score"][t.name] = *vs;
      scatter += t.name + "," + optional_csv(mean_of(c)) + "," + optional_csv(mean_of(in)) + "," +
                 optional_csv(mean_of(m)) + "," + optional_csv(mean_of(f)) + "," + optional_csv(mc) + "," +
                 format_double(gs) + "," + optional_csv(mean_of(v)) + "\n";
    }
    // Rows: event depths and M-CoG; columns: generalisation and validation score; over tasks.
    nlohmann::json table = nlohmann::json::object();
    std::vector<std::string> notes;
    for (const auto& [row, xs] : table_rows)
      for (const auto& [col, ys] : table_cols) {
        std::vector<double> x, y;
        for (const auto& [task, v] : xs)
          if (auto it = ys.find(task); it != ys.end()) x.push_back(v), y.push_back(it->second);
        if (x.size() < 3) {
          notes.push_back(row + " vs " + col + ": " + std::to_string(x.size()) + " tasks, correlation omitted");
          continue;
        }
        const auto r = spearman_rho(x, y);
        table[row][col] = r ? nlohmann::json{{"rho", r->rho}, {"p_value", r->p_value}, {"n", r->n}}
                            : nlohmann::json(nullptr);
      }
    auto corr = [](const std::vector<double>& x, const std::vector<double>& y) {
      if (x.size() < 3) return nlohmann::json(nullptr);
      const auto r = spearman_rho(x, y);
      return r ? nlohmann::json{{"rho", r->rho}, {"p_value", r->p_value}, {"n", r->n}} : nlohmann::json(nullptr);
    };
    nlohmann::json event_corr{{"crossing_vs_mem_gg_gen", corr(cross, gg)},
                              {"initiation_vs_clean_f1_90", corr(init, f90)}};
    write(root_ / "events" / "summary.json", runs.dump(2) + "\n", res.artifacts);
    write(root_ / "events" / "scatter.csv", scatter, res.artifacts);
    write(root_ / "events" / "table2.json", nlohmann::json{{"table", table}, {"notes", notes}}.dump(2) + "\n",
          res.artifacts);
    write(root_ / "events" / "event_correlations.json", event_corr.dump(2) + "\n", res.artifacts);
  }

  void write_report(CommandResult& res) const {
    std::string md = "# memloc report\n\nConfig hash: `" + hash_ + "`\n\n";
    const auto base = root_ / "localise";
    bool any = false;
    for (const auto& tech : cfg_.techniques) {
      if (!std::filesystem::exists(base / tech / "summary.csv")) continue;
      if (!any) md += "## Localisation (mean M-CoG over seeds)\n\n| technique | task | M-CoG |\n|---|---|---|\n";
      any = true;
      for (const auto& t : cfg_.tasks) {
        const auto j = read_json(base / tech / t.name / "mean_scores.json");
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3f", j.at("mcog").get<double>());
        md += "| " + tech + " | " + t.name + " | " + buf + " |\n";
        const auto mm = base / tech / t.name / "mean_matrix.csv";
        if (std::filesystem::exists(mm)) {
          const auto svg = root_ / "report" / ("heatmap_" + tech + "_" + t.name + ".svg");
          write(svg, heatmap_svg(parse_matrix_csv(read_file(mm)), tech + ": " + t.name), res.artifacts);
        }
      }
    }
    if (any) md += "\n";
    if (std::filesystem::exists(root_ / "control" / "summary.json")) {
      const auto s = read_json(root_ / "control" / "summary.json");
      md += "## Control setup\n\n| technique | accuracy@1 | accuracy@2 | cells |\n|---|---|---|---|\n";
      for (const auto& [tech, v] : s.at("techniques").items())
        md += "| " + tech + " | " + v.at("accuracy_at_1").dump() + " | " + v.at("accuracy_at_2").dump() + " | " +
              v.at("cells").dump() + " |\n";
      md += "\nRandom baseline: accuracy@1 " + s.at("baseline").at("accuracy_at_1").dump() + ", accuracy@2 " +
            s.at("baseline").at("accuracy_at_2").dump() + ". Unconverged cells excluded: " +
            s.at("excluded_unconverged").dump() + ".\n\n";
    }
    if (std::filesystem::exists(root_ / "events" / "scatter.csv")) {
      md += "## Events\n\n```\n" + read_file(root_ / "events" / "scatter.csv") + "```\n\n";
      md += "Spearman correlations:\n\n```\n" + read_file(root_ / "events" / "table2.json") + "```\n\n";
    }
    if (std::filesystem::exists(root_ / "correlate" / "correlations.csv"))
      md += "## Cross-technique correlations\n\nSee `correlate/correlations.csv`.\n";
    write(root_ / "report" / "report.md", md, res.artifacts);
  }
};

/// Renders a window-matrix CSV file as an SVG heatmap.
inline void emit_heatmap(const std::filesystem::path& csv, const std::filesystem::path& svg, const std::string& title = {}) {
  if (!std::filesystem::exists(csv)) throw DataError("heatmap input not found: " + csv.string());
  std::string text = read_file(csv);
  HeatmapGrid g;
  try {
    g = parse_matrix_csv(text);
  } catch (const ParseError& e) {
    throw ParseError(csv.string() + ": " + e.what(), e.position());
  }
  write_file_atomic(svg, heatmap_svg(g, title));
}

}  // namespace memloc
