#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/jobs.hpp"
#include "memloc/model.hpp"
#include "memloc/optim.hpp"
#include "memloc/probe.hpp"
#include "memloc/taskgen.hpp"
#include "memloc/trainer.hpp"

namespace memloc {

struct WindowRecord {
  LayerWindow window;
  double mem_error = 0.0;    // raw, before normalisation
  double clean_error = 0.0;
};

/// values[w-1][y-1]: mean normalised memorisation error over all windows of
/// size w that contain layer y. Normalised = raw / full-window raw, clamped
/// to [0, 1].
struct WindowMatrix {
  int n_layers = 0;
  std::string technique;
  std::vector<std::vector<double>> values;
  std::vector<WindowRecord> windows;
  double full_window_error = 0.0;
  double mean_clean_error = 0.0;

  double at(int w, int y) const { return values.at(static_cast<std::size_t>(w - 1)).at(static_cast<std::size_t>(y - 1)); }
  /// Largest normalised error over the individual windows of size w.
  double max_window_error(int w) const {
    double m = 0.0;
    for (const auto& r : windows)
      if (r.window.size == w) m = std::max(m, normalise(r.mem_error));
    return m;
  }
  double normalise(double raw) const { return std::clamp(raw / full_window_error, 0.0, 1.0); }
};

/// Rebuilds the normalised matrix from raw window records. The full window
/// (size L) must be present with a nonzero error.
inline WindowMatrix matrix_from_records(int n_layers, std::vector<WindowRecord> records, std::string technique = {}) {
  WindowMatrix m;
  m.n_layers = n_layers;
  m.technique = std::move(technique);
  std::sort(records.begin(), records.end(), [](const WindowRecord& a, const WindowRecord& b) {
    return a.window.size != b.window.size ? a.window.size < b.window.size : a.window.start < b.window.start;
  });
  m.windows = std::move(records);
  if (m.windows.size() != static_cast<std::size_t>(n_layers * (n_layers + 1) / 2))
    throw DataError("window matrix needs " + std::to_string(n_layers * (n_layers + 1) / 2) + " windows, got " +
                    std::to_string(m.windows.size()));
  const auto& full = m.windows.back();
  if (full.window.size != n_layers) throw DataError("window matrix lacks the full window");
  m.full_window_error = full.mem_error;
  double clean = 0.0;
  for (const auto& r : m.windows) clean += r.clean_error;
  m.mean_clean_error = clean / static_cast<double>(m.windows.size());
  if (!(m.full_window_error > 0.0))
    throw DegenerateRunError(m.technique + ": full-window memorisation error is 0; nothing to normalise by");
  const auto L = static_cast<std::size_t>(n_layers);
  m.values.assign(L, std::vector<double>(L, 0.0));
  for (std::size_t w = 1; w <= L; ++w)
    for (std::size_t y = 1; y <= L; ++y) {
      double sum = 0.0;
      int count = 0;
      for (const auto& r : m.windows)
        if (r.window.size == static_cast<int>(w) && r.window.contains(static_cast<int>(y))) {
          sum += m.normalise(r.mem_error);
          ++count;
        }
      m.values[w - 1][y - 1] = sum / count;
    }
  return m;
}

/// CSV rows "w,y,mem_error,mean_clean_error" for every cell; mean_clean_error
/// is averaged over the same windows as the cell.
inline std::string matrix_csv(const WindowMatrix& m) {
  std::string s = "w,y,mem_error,mean_clean_error\n";
  char buf[128];
  for (int w = 1; w <= m.n_layers; ++w)
    for (int y = 1; y <= m.n_layers; ++y) {
      double clean = 0.0;
      int count = 0;
      for (const auto& r : m.windows)
        if (r.window.size == w && r.window.contains(y)) {
          clean += r.clean_error;
          ++count;
        }
      std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g\n", w, y, m.at(w, y), clean / count);
      s += buf;
    }
  return s;
}

/// CSV rows "start,size,mem_error,clean_error,normalised" per window (raw values).
inline std::string windows_csv(const WindowMatrix& m) {
  std::string s = "start,size,mem_error,clean_error,normalised\n";
  char buf[160];
  for (const auto& r : m.windows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g\n", r.window.start, r.window.size, r.mem_error,
                  r.clean_error, m.normalise(r.mem_error));
    s += buf;
  }
  return s;
}

struct LayerScores {
  std::vector<double> alpha;
  std::string technique;
  /// Set when the raw scores summed to zero and alpha fell back to uniform.
  bool degenerate = false;
  nlohmann::json provenance = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const LayerScores& s) {
  j = nlohmann::json{{"alpha", s.alpha}, {"technique", s.technique}, {"degenerate", s.degenerate},
                     {"provenance", s.provenance}};
}

inline void from_json(const nlohmann::json& j, LayerScores& s) {
  s.alpha = j.at("alpha").get<std::vector<double>>();
  s.technique = j.value("technique", "");
  s.degenerate = j.value("degenerate", false);
  s.provenance = j.value("provenance", nlohmann::json::object());
}

/// Nonnegative raw scores to weights summing to one; all-zero gives uniform.
inline LayerScores normalise_scores(std::vector<double> raw, std::string technique) {
  LayerScores s;
  s.technique = std::move(technique);
  double sum = 0.0;
  for (auto& v : raw) {
    if (!(v > 0.0)) v = 0.0;
    sum += v;
  }
  if (raw.empty()) throw DataError("normalise_scores: no layers");
  if (sum > 0.0) {
    for (auto& v : raw) v /= sum;
  } else {
    s.degenerate = true;
    raw.assign(raw.size(), 1.0 / static_cast<double>(raw.size()));
  }
  s.alpha = std::move(raw);
  return s;
}

/// Column means of the window matrix, normalised to sum to one.
inline LayerScores matrix_to_scores(const WindowMatrix& m) {
  const auto L = static_cast<std::size_t>(m.n_layers);
  std::vector<double> s(L, 0.0);
  for (std::size_t y = 0; y < L; ++y) {
    for (std::size_t w = 0; w < L; ++w) s[y] += m.values[w][y];
    s[y] /= static_cast<double>(L);
  }
  return normalise_scores(std::move(s), m.technique);
}

/// Memorisation (noisy) and clean error of `model` on `data` for head `head`.
inline WindowRecord window_record(const ModelState& model, const Dataset& data, LayerWindow w, std::size_t head) {
  const auto ev = evaluate(model, data, LabelField::Assigned, head);
  if (!ev.memorisation_error) throw DataError("localisation needs noisy examples");
  return {w, *ev.memorisation_error, ev.clean_error.value_or(0.0)};
}

/// Swaps every window of theta_O's blocks into theta_M2 and records the
/// hybrid's errors on `data`.
inline WindowMatrix swap_sweep(const ModelState& theta_m2, const ModelState& theta_o, const Dataset& data,
                               std::size_t head = 0, std::size_t threads = 1) {
  require_same_config(theta_m2.config, theta_o.config, "swap_sweep");
  const int L = theta_m2.config.n_layers;
  const auto windows = all_windows(L);
  auto records = parallel_map(windows.size(), threads, [&](std::size_t i) {
    return window_record(splice_layers(theta_m2, theta_o, windows[i]), data, windows[i], head);
  });
  return matrix_from_records(L, std::move(records), "swap");
}

/// Trains the trainable groups of `model` on `data` for `epochs` epochs.
inline void train_masked(ModelState& model, const Dataset& data, const TrainConfig& cfg, int epochs,
                         std::size_t head) {
  if (epochs <= 0 || data.size() == 0) return;
  Adam opt(model, AdamConfig{cfg.learning_rate});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const Trainability mask = model.trainable;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const auto order = detail::epoch_order(data.size(), cfg.seed, epoch, 3);
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(bs, order.size() - s));
      detail::train_step(model, opt, data, idx, LabelField::Assigned, mask, head);
    }
  }
}

/// Resets each window to theta_P, freezes everything else (head included),
/// retrains on the clean examples of `data` and records the errors on `data`.
inline WindowMatrix retrain_sweep(const ModelState& theta_m2, const ModelState& theta_p, const Dataset& data,
                                  const TrainConfig& cfg, int epochs = 5, std::size_t head = 0,
                                  std::size_t threads = 1) {
  require_same_config(theta_m2.config, theta_p.config, "retrain_sweep");
  const int L = theta_m2.config.n_layers;
  const auto clean = data.filtered(false);
  const auto windows = all_windows(L);
  auto records = parallel_map(windows.size(), threads, [&](std::size_t i) {
    auto m = reset_layers(theta_m2, theta_p, windows[i], true);
    train_masked(m, clean, cfg, epochs, head);
    return window_record(m, data, windows[i], head);
  });
  return matrix_from_records(L, std::move(records), "retrain");
}

enum class GradNorm { L1, L2 };

NLOHMANN_JSON_SERIALIZE_ENUM(GradNorm, {{GradNorm::L1, "l1"}, {GradNorm::L2, "l2"}})

struct GradientConfig {
  GradNorm norm = GradNorm::L1;
  bool subtract_clean = true;
  bool divide_frozen = true;
  std::uint64_t seed = 0x96ad;
  std::size_t chunk = 128;
};

inline void to_json(nlohmann::json& j, const GradientConfig& c) {
  j = nlohmann::json{{"norm", c.norm}, {"subtract_clean", c.subtract_clean}, {"divide_frozen", c.divide_frozen},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GradientConfig& c) {
  GradientConfig d;
  c.norm = j.value("norm", d.norm);
  c.subtract_clean = j.value("subtract_clean", d.subtract_clean);
  c.divide_frozen = j.value("divide_frozen", d.divide_frozen);
  c.seed = j.value("seed", d.seed);
}

/// Per-block norm of the gradient of the mean loss on `data` (assigned labels).
inline std::vector<double> block_gradient_norms(const ModelState& model, const Dataset& data, GradNorm norm,
                                                std::size_t head, std::size_t chunk = 128) {
  const auto L = static_cast<std::size_t>(model.config.n_layers);
  Trainability mask = Trainability::none(L, model.heads.size());
  mask.blocks.assign(L, true);
  // Accumulated mean gradient per parameter, canonical order.
  std::vector<std::vector<double>> acc;
  std::vector<ParamGroup> groups;
  for_each_parameter(model, [&](const std::string&, const Tensor& t, ParamGroup g) {
    acc.emplace_back(t.size(), 0.0);
    groups.push_back(g);
  });
  const std::size_t n = data.size();
  for (std::size_t s = 0; s < n; s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(n, s + chunk); ++i) idx.push_back(i);
    Tape tape;
    auto vars = bind_parameters(tape, model, mask);
    ForwardOptions fo;
    fo.head = head;
    auto fr = forward(tape, model.config, vars, detail::make_batch(data, idx), fo);
    std::vector<std::int32_t> tg;
    for (auto i : idx) tg.push_back(data.examples[i].assigned_label);
    auto ce = softmax_cross_entropy(fr.logits, std::span<const std::int32_t>(tg));
    tape.backward(ce.loss);
    const double share = static_cast<double>(idx.size()) / static_cast<double>(n);
    std::size_t p = 0;
    for_each_parameter(vars, [&](const std::string&, const Var& v, ParamGroup) {
      if (const float* g = tape.grad_data(v.id))
        for (std::size_t i = 0; i < acc[p].size(); ++i) acc[p][i] += share * g[i];
      ++p;
    });
  }
  std::vector<double> out(L, 0.0);
  for (std::size_t p = 0; p < acc.size(); ++p) {
    if (groups[p].kind != ParamGroup::Kind::Block) continue;
    for (double g : acc[p]) out[groups[p].index] += norm == GradNorm::L1 ? std::abs(g) : g * g;
  }
  if (norm == GradNorm::L2)
    for (auto& v : out) v = std::sqrt(v);
  return out;
}

struct GradientResult {
  LayerScores scores;
  std::vector<double> noisy_norms, clean_norms, frozen_norms, processed;
  GradientConfig config;
};

/// Forgetting gradients on theta_M1. The negated loss has the same gradient
/// norm as the loss, so norms are taken of the loss gradient. Clean
/// subtraction and frozen-model division happen on per-block norms.
inline GradientResult forgetting_gradients(const ModelState& theta_m1, const ModelState& theta_p, const Dataset& data,
                                           const GradientConfig& cfg = {}, std::size_t head = 0) {
  require_same_config(theta_m1.config, theta_p.config, "forgetting_gradients");
  const auto noisy = data.filtered(true);
  if (noisy.size() == 0) throw DataError("forgetting_gradients: no noisy examples to forget");
  auto clean = data.filtered(false);
  {
    Rng rng(cfg.seed);
    auto perm = permutation(clean.size(), rng);
    perm.resize(std::min(perm.size(), noisy.size()));
    std::sort(perm.begin(), perm.end());
    clean = clean.subset(perm);
  }
  GradientResult r;
  r.config = cfg;
  r.noisy_norms = block_gradient_norms(theta_m1, noisy, cfg.norm, head, cfg.chunk);
  r.processed = r.noisy_norms;
  if (cfg.subtract_clean) {
    r.clean_norms = block_gradient_norms(theta_m1, clean, cfg.norm, head, cfg.chunk);
    for (std::size_t l = 0; l < r.processed.size(); ++l)
      r.processed[l] = std::max(0.0, r.processed[l] - r.clean_norms[l]);
  }
  if (cfg.divide_frozen) {
    r.frozen_norms = block_gradient_norms(theta_p, noisy, cfg.norm, head, cfg.chunk);
    for (std::size_t l = 0; l < r.processed.size(); ++l)
      r.processed[l] /= std::max(r.frozen_norms[l], 1e-12);
  }
  r.scores = normalise_scores(r.processed, "gradients");
  r.scores.provenance = {{"norm", cfg.norm}, {"subtract_clean", cfg.subtract_clean},
                         {"divide_frozen", cfg.divide_frozen}};
  return r;
}

enum class ProbeTarget { NoiseFlag, ClassOriginal, ClassNoisy };

NLOHMANN_JSON_SERIALIZE_ENUM(ProbeTarget, {{ProbeTarget::NoiseFlag, "noise-flag"},
                                           {ProbeTarget::ClassOriginal, "class-original"},
                                           {ProbeTarget::ClassNoisy, "class-noisy"}})

/// Per-layer probe F1 (mean and std over seeds); noisy/clean columns hold
/// the F1 restricted to noisy or clean test examples.
struct ProbeResult {
  ProbeTarget target = ProbeTarget::NoiseFlag;
  std::vector<double> f1_mean, f1_std, f1_noisy, f1_clean;
  /// theta_P probe F1 per layer (noise-flag sweeps only).
  std::vector<double> baseline;
};

inline void to_json(nlohmann::json& j, const ProbeResult& p) {
  j = nlohmann::json{{"target", p.target},     {"f1_mean", p.f1_mean},   {"f1_std", p.f1_std},
                     {"f1_noisy", p.f1_noisy}, {"f1_clean", p.f1_clean}, {"baseline", p.baseline}};
}

inline void from_json(const nlohmann::json& j, ProbeResult& p) {
  p.target = j.at("target").get<ProbeTarget>();
  p.f1_mean = j.at("f1_mean").get<std::vector<double>>();
  p.f1_std = j.at("f1_std").get<std::vector<double>>();
  p.f1_noisy = j.value("f1_noisy", std::vector<double>{});
  p.f1_clean = j.value("f1_clean", std::vector<double>{});
  p.baseline = j.value("baseline", std::vector<double>{});
}

namespace detail {

struct LayerProbeStats {
  double mean = 0, sd = 0, noisy = 0, clean = 0;
};

inline LayerProbeStats probe_layer_seeds(const Tensor& states, const std::vector<int>& targets,
                                         const std::vector<bool>& noisy, int n_classes, int positive,
                                         const ProbeConfig& cfg) {
  std::vector<double> f1;
  double fn = 0, fc = 0;
  int nn = 0, nc = 0;
  for (int s = 0; s < cfg.seeds; ++s) {
    auto o = train_probe(states, targets, noisy, n_classes, positive, cfg,
                         derive_seed(cfg.seed, static_cast<std::uint64_t>(s)));
    f1.push_back(o.f1);
    if (o.f1_noisy) fn += *o.f1_noisy, ++nn;
    if (o.f1_clean) fc += *o.f1_clean, ++nc;
  }
  LayerProbeStats st;
  for (double v : f1) st.mean += v;
  st.mean /= static_cast<double>(f1.size());
  for (double v : f1) st.sd += (v - st.mean) * (v - st.mean);
  st.sd = f1.size() > 1 ? std::sqrt(st.sd / static_cast<double>(f1.size() - 1)) : 0.0;
  st.noisy = nn ? fn / nn : 0.0;
  st.clean = nc ? fc / nc : 0.0;
  return st;
}

inline ProbeResult probe_all_layers(const std::vector<Tensor>& states, const std::vector<int>& targets,
                                    const std::vector<bool>& noisy, int n_classes, int positive,
                                    const ProbeConfig& cfg, ProbeTarget target, std::size_t threads) {
  ProbeResult r;
  r.target = target;
  auto stats = parallel_map(states.size(), threads, [&](std::size_t l) {
    return probe_layer_seeds(states[l], targets, noisy, n_classes, positive, cfg);
  });
  for (const auto& st : stats) {
    r.f1_mean.push_back(st.mean);
    r.f1_std.push_back(st.sd);
    r.f1_noisy.push_back(st.noisy);
    r.f1_clean.push_back(st.clean);
  }
  return r;
}

}  // namespace detail

/// Relevance from a noise-flag F1 curve: delta_l = F1_l - F1_{l-1} with
/// F1_0 the theta_P layer-1 baseline, clamped at 0 and normalised.
inline LayerScores probe_deltas_to_scores(const std::vector<double>& f1, double baseline_layer1) {
  std::vector<double> delta(f1.size());
  for (std::size_t l = 0; l < f1.size(); ++l) delta[l] = f1[l] - (l == 0 ? baseline_layer1 : f1[l - 1]);
  return normalise_scores(std::move(delta), "probe");
}

struct NoiseProbeSweep {
  ProbeResult result;
  LayerScores scores;
};

/// Noisy-vs-clean probes on theta_M2 states at every layer, with a theta_P
/// probe at every depth as baseline.
inline NoiseProbeSweep noise_probe_sweep(const ModelState& theta_m2, const ModelState& theta_p, const Dataset& data,
                                         const ProbeConfig& cfg = {}, std::size_t threads = 1) {
  require_same_config(theta_m2.config, theta_p.config, "noise_probe_sweep");
  std::vector<int> targets;
  std::vector<bool> noisy;
  for (const auto& e : data.examples) {
    targets.push_back(e.noisy ? 1 : 0);
    noisy.push_back(e.noisy);
  }
  NoiseProbeSweep out;
  out.result = detail::probe_all_layers(collect_states(theta_m2, data), targets, noisy, 2, 1, cfg,
                                        ProbeTarget::NoiseFlag, threads);
  out.result.baseline = detail::probe_all_layers(collect_states(theta_p, data), targets, noisy, 2, 1, cfg,
                                                 ProbeTarget::NoiseFlag, threads)
                            .f1_mean;
  out.scores = probe_deltas_to_scores(out.result.f1_mean, out.result.baseline.at(0));
  return out;
}

/// Class probes on theta_M2 states trained on original or assigned labels;
/// F1 is macro-averaged and also reported on the noisy and clean test members.
inline ProbeResult class_probe_sweep(const ModelState& model, const Dataset& data, LabelField field,
                                     const ProbeConfig& cfg = {}, std::size_t threads = 1) {
  std::vector<int> targets;
  std::vector<bool> noisy;
  for (const auto& e : data.examples) {
    targets.push_back(label_of(e, field));
    noisy.push_back(e.noisy);
  }
  return detail::probe_all_layers(collect_states(model, data), targets, noisy, data.n_classes, -1, cfg,
                                  field == LabelField::Original ? ProbeTarget::ClassOriginal : ProbeTarget::ClassNoisy,
                                  threads);
}

}  // namespace memloc
