#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/model.hpp"
#include "memloc/optim.hpp"
#include "memloc/rng.hpp"
#include "memloc/taskgen.hpp"

namespace memloc {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double m1_threshold = 0.993;
  std::uint64_t seed = 1;
  bool freeze_embeddings = true;
  double retry_lr_multiplier = 3.0;
  /// Accuracy the noisy task must exceed in the control setup before no retry.
  double control_accuracy_target = 0.99;
  /// Main-task learning rate relative to learning_rate in the control setup.
  double control_main_lr_scale = 1.0;
  int eval_batch_size = 128;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(m1_threshold > 0.0 && m1_threshold <= 1.0)) throw ConfigError("m1_threshold must lie in (0, 1]");
    if (!(retry_lr_multiplier > 0.0)) throw ConfigError("retry_lr_multiplier must be > 0");
    if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
    if (!(control_main_lr_scale > 0.0)) throw ConfigError("control_main_lr_scale must be > 0");
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"m1_threshold", c.m1_threshold},
                     {"seed", c.seed},
                     {"freeze_embeddings", c.freeze_embeddings},
                     {"retry_lr_multiplier", c.retry_lr_multiplier},
                     {"control_accuracy_target", c.control_accuracy_target},
                     {"control_main_lr_scale", c.control_main_lr_scale},
                     {"eval_batch_size", c.eval_batch_size}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.m1_threshold = j.value("m1_threshold", d.m1_threshold);
  c.seed = j.value("seed", d.seed);
  c.freeze_embeddings = j.value("freeze_embeddings", d.freeze_embeddings);
  c.retry_lr_multiplier = j.value("retry_lr_multiplier", d.retry_lr_multiplier);
  c.control_accuracy_target = j.value("control_accuracy_target", d.control_accuracy_target);
  c.control_main_lr_scale = j.value("control_main_lr_scale", d.control_main_lr_scale);
  c.eval_batch_size = j.value("eval_batch_size", d.eval_batch_size);
}

enum class LabelField { Assigned, Original };

inline int label_of(const Example& e, LabelField f) {
  return f == LabelField::Assigned ? e.assigned_label : e.original_label;
}

/// Copy of `data` supervised on its original labels (no noisy examples).
inline Dataset with_original_labels(const Dataset& data) {
  Dataset out = data;
  for (auto& e : out.examples) {
    e.assigned_label = e.original_label;
    e.noisy = false;
  }
  return out;
}

struct EvalResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<bool> correct;
  /// Softmax probability of each example's label under `label_field`.
  std::vector<float> label_probability;
  /// Share of noisy examples not predicted as their assigned label.
  std::optional<double> memorisation_error;
  /// Share of clean examples not predicted as their label.
  std::optional<double> clean_error;
};

namespace detail {

inline TokenBatch make_batch(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<const std::vector<std::int32_t>*> rows;
  rows.reserve(idx.size());
  for (auto i : idx) rows.push_back(&data.examples[i].tokens);
  return TokenBatch::from_sequences(rows);
}

inline void check_compatible(const ModelConfig& cfg, const Dataset& data, std::size_t head) {
  if (head >= static_cast<std::size_t>(cfg.head_count()))
    throw ConfigError("model has no head " + std::to_string(head));
  if (cfg.classes_of_head(head) != data.n_classes)
    throw ConfigError("head " + std::to_string(head) + " has " + std::to_string(cfg.classes_of_head(head)) +
                      " classes but the dataset has " + std::to_string(data.n_classes));
  if (data.max_length() > static_cast<std::size_t>(cfg.max_seq_len))
    throw ConfigError("dataset sequences of length " + std::to_string(data.max_length()) +
                      " exceed max_seq_len " + std::to_string(cfg.max_seq_len));
  for (const auto& e : data.examples) {
    for (auto t : e.tokens)
      if (t < 0 || t >= cfg.vocab_size)
        throw ConfigError("token id " + std::to_string(t) + " outside model vocabulary of " +
                          std::to_string(cfg.vocab_size));
    if (e.assigned_label < 0 || e.assigned_label >= data.n_classes || e.original_label < 0 ||
        e.original_label >= data.n_classes)
      throw ConfigError("label outside [0, n_classes)");
  }
}

/// Seed-determined example order for one epoch of one stream; label independent.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch, std::uint64_t stream) {
  Rng rng(derive_seed(derive_seed(seed, 0x0de5 + stream), static_cast<std::uint64_t>(epoch)));
  return permutation(n, rng);
}

// One optimiser step on a batch; returns the batch loss.
inline double train_step(ModelState& model, Adam& opt, const Dataset& data,
                         std::span<const std::size_t> idx, LabelField field,
                         const Trainability& mask, std::size_t head) {
  Tape tape;
  auto vars = bind_parameters(tape, model, mask);
  auto batch = make_batch(data, idx);
  ForwardOptions fo;
  fo.head = head;
  auto fr = forward(tape, model.config, vars, batch, fo);
  std::vector<std::int32_t> targets;
  targets.reserve(idx.size());
  for (auto i : idx) targets.push_back(label_of(data.examples[i], field));
  auto ce = softmax_cross_entropy(fr.logits, std::span<const std::int32_t>(targets));
  tape.backward(ce.loss);
  opt.apply(model, tape, vars, mask);
  return ce.loss.value()[0];
}

}  // namespace detail

/// Accuracy against `field`, per-example correctness and the memorisation
/// error over the noisy subset (absent when there are no noisy examples).
inline EvalResult evaluate(const ModelState& model, const Dataset& data, LabelField field = LabelField::Assigned,
                           std::size_t head = 0, std::size_t eval_batch = 128) {
  EvalResult r;
  const std::size_t n = data.size();
  r.predictions.resize(n);
  r.correct.resize(n);
  r.label_probability.resize(n);
  std::vector<std::size_t> idx;
  ForwardOptions fo;
  fo.head = head;
  for (std::size_t s = 0; s < n; s += eval_batch) {
    idx.clear();
    for (std::size_t i = s; i < std::min(n, s + eval_batch); ++i) idx.push_back(i);
    auto out = infer(model, detail::make_batch(data, idx), fo);
    const auto pred = argmax_rows(out.logits);
    const std::size_t c = out.logits.cols();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& e = data.examples[idx[k]];
      const float* row = out.logits.data() + k * c;
      const float mx = *std::max_element(row, row + c);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      const int y = label_of(e, field);
      r.predictions[idx[k]] = pred[k];
      r.correct[idx[k]] = pred[k] == y;
      r.label_probability[idx[k]] = static_cast<float>(std::exp(static_cast<double>(row[y] - mx)) / z);
    }
  }
  std::size_t hits = 0, noisy = 0, noisy_wrong = 0, clean = 0, clean_wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = data.examples[i];
    hits += r.correct[i] ? 1 : 0;
    if (e.noisy) {
      ++noisy;
      noisy_wrong += r.predictions[i] != e.assigned_label ? 1 : 0;
    } else {
      ++clean;
      clean_wrong += r.predictions[i] != e.assigned_label ? 1 : 0;
    }
  }
  r.accuracy = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  if (noisy) r.memorisation_error = static_cast<double>(noisy_wrong) / static_cast<double>(noisy);
  if (clean) r.clean_error = static_cast<double>(clean_wrong) / static_cast<double>(clean);
  return r;
}

/// Chance-corrected accuracy (acc - 1/C) / (1 - 1/C), clamped to [0, 1].
inline double normalised_accuracy(double accuracy, int n_classes) {
  const double chance = 1.0 / n_classes;
  return std::clamp((accuracy - chance) / (1.0 - chance), 0.0, 1.0);
}

inline double validation_score(const ModelState& model, const Dataset& val, int n_classes) {
  if (val.size() == 0) throw DataError("validation_score: empty validation set");
  return normalised_accuracy(evaluate(model, val, LabelField::Original).accuracy, n_classes);
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct TrainResult {
  std::optional<ModelState> theta_m1;
  int m1_epoch = 0;
  double m1_accuracy = 0.0;
  ModelState theta_m2;
  std::vector<EpochStats> curve;
  std::optional<double> final_val_accuracy;
  double wall_seconds = 0.0;
  /// Example ids in the order the first epoch consumed them.
  std::vector<std::int64_t> first_epoch_ids;
};

/// Observer called after every optimiser step with the model state before
/// and after the step and the task index (0 main, 1 noisy).
using StepObserver = std::function<void(const ModelState& before, const ModelState& after, int task)>;

inline TrainResult train_run(const ModelState& init, const Dataset& data, const TrainConfig& cfg,
                             LabelField field, const Dataset* val = nullptr) {
  cfg.validate();
  detail::check_compatible(init.config, data, 0);
  if (val) detail::check_compatible(init.config, *val, 0);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  ModelState model = init;
  Trainability mask = model.trainable;
  if (cfg.freeze_embeddings) mask.embeddings = false;
  Adam opt(model, AdamConfig{cfg.learning_rate});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(data.size(), cfg.seed, epoch, 0);
    if (epoch == 1)
      for (auto i : order) res.first_epoch_ids.push_back(data.examples[i].example_id);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(bs, order.size() - s));
      loss_sum += detail::train_step(model, opt, data, idx, field, mask, 0) * static_cast<double>(idx.size());
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = data.size() ? loss_sum / static_cast<double>(data.size()) : 0.0;
    st.train_accuracy = evaluate(model, data, field, 0, static_cast<std::size_t>(cfg.eval_batch_size)).accuracy;
    if (val && val->size()) st.val_accuracy = evaluate(model, *val, LabelField::Original).accuracy;
    if (!res.theta_m1 && st.train_accuracy > cfg.m1_threshold) {
      res.theta_m1 = model;
      res.m1_epoch = epoch;
      res.m1_accuracy = st.train_accuracy;
    }
    res.curve.push_back(st);
  }
  res.final_val_accuracy = res.curve.back().val_accuracy;
  res.theta_m2 = std::move(model);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Fine-tunes on assigned labels; yields theta_M1 (first epoch boundary with
/// train accuracy above threshold) and theta_M2 (final state).
inline TrainResult finetune(const ModelState& init, const Dataset& data, const TrainConfig& cfg,
                            const Dataset* val = nullptr) {
  return train_run(init, data, cfg, LabelField::Assigned, val);
}

/// Same schedule on original labels; the final state is theta_O.
inline TrainResult train_original(const ModelState& init, const Dataset& data, const TrainConfig& cfg,
                                  const Dataset* val = nullptr) {
  return train_run(init, data, cfg, LabelField::Original, val);
}

struct ControlResult {
  ModelState model;
  /// First epoch-boundary state whose noisy-task train accuracy exceeds m1_threshold.
  std::optional<ModelState> theta_m1;
  int m1_epoch = 0;
  std::vector<int> designated;
  double noisy_train_accuracy = 0.0;
  double main_train_accuracy = 0.0;
  bool retried = false;
  double learning_rate_used = 0.0;
};

/// Multitask control setup. Main-task batches (head 0) update everything but
/// frozen embeddings; noisy-task batches (head 1) update only the designated
/// blocks and head 1. Batches alternate main, noisy, main, ... each epoch.
inline ControlResult control_finetune(const ModelState& init, const Dataset& main_task, const Dataset& noisy_task,
                                      std::vector<int> designated, const TrainConfig& cfg,
                                      const StepObserver& observer = {}) {
  cfg.validate();
  const int L = init.config.n_layers;
  if (designated.size() != 2)
    throw ParameterError("control setup needs exactly 2 designated layers, got " + std::to_string(designated.size()));
  std::sort(designated.begin(), designated.end());
  if (designated[0] == designated[1]) throw ParameterError("designated layers must be distinct");
  for (int l : designated)
    if (l < 1 || l > L) throw ParameterError("designated layer " + std::to_string(l) + " outside 1.." + std::to_string(L));
  if (init.config.head_count() < 2) throw ConfigError("control setup needs a model with two heads");
  detail::check_compatible(init.config, main_task, 0);
  detail::check_compatible(init.config, noisy_task, 1);

  Trainability main_mask = init.trainable;
  if (cfg.freeze_embeddings) main_mask.embeddings = false;
  main_mask.heads.assign(init.heads.size(), false);
  main_mask.heads[0] = true;
  Trainability noisy_mask = Trainability::none(init.blocks.size(), init.heads.size());
  for (int l : designated) noisy_mask.blocks[static_cast<std::size_t>(l - 1)] = true;
  noisy_mask.heads[1] = true;

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto eb = static_cast<std::size_t>(cfg.eval_batch_size);
  std::optional<ModelState> m1;
  int m1_epoch = 0;
  auto run = [&](double lr) {
    m1.reset();
    m1_epoch = 0;
    ModelState model = init;
    Adam opt(model, AdamConfig{lr});
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const auto om = detail::epoch_order(main_task.size(), cfg.seed, epoch, 1);
      const auto on = detail::epoch_order(noisy_task.size(), cfg.seed, epoch, 2);
      std::size_t pm = 0, pn = 0;
      while (pm < om.size() || pn < on.size()) {
        if (pm < om.size()) {
          const std::span<const std::size_t> idx(om.data() + pm, std::min(bs, om.size() - pm));
          pm += idx.size();
          ModelState before = observer ? model : ModelState{};
          opt.set_learning_rate(lr * cfg.control_main_lr_scale);
          detail::train_step(model, opt, main_task, idx, LabelField::Assigned, main_mask, 0);
          if (observer) observer(before, model, 0);
        }
        if (pn < on.size()) {
          const std::span<const std::size_t> idx(on.data() + pn, std::min(bs, on.size() - pn));
          pn += idx.size();
          ModelState before = observer ? model : ModelState{};
          opt.set_learning_rate(lr);
          detail::train_step(model, opt, noisy_task, idx, LabelField::Assigned, noisy_mask, 1);
          if (observer) observer(before, model, 1);
        }
      }
      if (!m1 && evaluate(model, noisy_task, LabelField::Assigned, 1, eb).accuracy > cfg.m1_threshold) {
        m1 = model;
        m1_epoch = epoch;
      }
    }
    return model;
  };

  ControlResult res;
  res.designated = designated;
  res.learning_rate_used = cfg.learning_rate;
  res.model = run(cfg.learning_rate);
  res.noisy_train_accuracy = evaluate(res.model, noisy_task, LabelField::Assigned, 1, eb).accuracy;
  if (res.noisy_train_accuracy <= cfg.control_accuracy_target) {
    res.retried = true;
    res.learning_rate_used = cfg.learning_rate * cfg.retry_lr_multiplier;
    res.model = run(res.learning_rate_used);
    res.noisy_train_accuracy = evaluate(res.model, noisy_task, LabelField::Assigned, 1, eb).accuracy;
  }
  res.main_train_accuracy = evaluate(res.model, main_task, LabelField::Assigned, 0, eb).accuracy;
  res.theta_m1 = std::move(m1);
  res.m1_epoch = m1_epoch;
  return res;
}

struct GeneralisationResult {
  double score = 0.0;
  std::size_t pairs = 0;
  std::vector<double> per_seed;
};

/// Share of (example, held-out seed) pairs whose original label gets
/// probability above 1/C from a model trained on the other half.
inline GeneralisationResult generalisation_score(const Dataset& data, const ModelConfig& model_cfg,
                                                 const TrainConfig& cfg, int n_seeds = 30) {
  if (n_seeds < 1) throw ParameterError("n_seeds must be >= 1");
  if (data.size() < 2) throw DataError("generalisation_score needs at least 2 examples");
  GeneralisationResult out;
  std::size_t hits = 0;
  const double chance = 1.0 / data.n_classes;
  for (int s = 0; s < n_seeds; ++s) {
    const auto split_seed = derive_seed(cfg.seed, 0x6e00 + static_cast<std::uint64_t>(s));
    auto [train, held] = half_split(data, split_seed);
    ModelConfig mc = model_cfg;
    mc.seed = derive_seed(model_cfg.seed, 0x6f00 + static_cast<std::uint64_t>(s));
    TrainConfig tc = cfg;
    tc.seed = split_seed;
    auto tr = train_run(build_model(mc), train, tc, LabelField::Original);
    auto ev = evaluate(tr.theta_m2, held, LabelField::Original);
    std::size_t h = 0;
    for (float p : ev.label_probability) h += p > chance ? 1 : 0;
    hits += h;
    out.pairs += held.size();
    out.per_seed.push_back(static_cast<double>(h) / static_cast<double>(held.size()));
  }
  out.score = static_cast<double>(hits) / static_cast<double>(out.pairs);
  return out;
}

/// CSV with columns epoch,train_loss,train_acc,val_acc (val_acc empty if absent).
inline std::string curves_csv(const TrainResult& r) {
  std::string s = "epoch,train_loss,train_acc,val_acc\n";
  char buf[128];
  for (const auto& e : r.curve) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,", e.epoch, e.train_loss, e.train_accuracy);
    s += buf;
    if (e.val_accuracy) {
      std::snprintf(buf, sizeof buf, "%.6f", *e.val_accuracy);
      s += buf;
    }
    s += '\n';
  }
  return s;
}

}  // namespace memloc
