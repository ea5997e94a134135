#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/rng.hpp"
#include "memloc/taskgen.hpp"
#include "memloc/tensor.hpp"
#include "memloc/trainer.hpp"

namespace memloc {

struct ProbeConfig {
  int hidden = 0;  // 0 = d_model of the probed states
  int max_epochs = 100;
  double learning_rate = 2e-4;
  int patience = 10;
  int seeds = 5;
  int batch_size = 16;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
  /// Inverse-frequency class weights in the probe loss.
  bool balance_classes = true;
  std::uint64_t seed = 0x9b0e;

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"hidden", c.hidden},         {"max_epochs", c.max_epochs},
                     {"learning_rate", c.learning_rate}, {"patience", c.patience},
                     {"seeds", c.seeds},           {"batch_size", c.batch_size},
                     {"train_fraction", c.train_fraction}, {"val_fraction", c.val_fraction},
                     {"balance_classes", c.balance_classes}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.hidden = j.value("hidden", d.hidden);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.patience = j.value("patience", d.patience);
  c.seeds = j.value("seeds", d.seeds);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.train_fraction = j.value("train_fraction", d.train_fraction);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.balance_classes = j.value("balance_classes", d.balance_classes);
  c.seed = j.value("seed", d.seed);
}

/// Positive-class F1 when `positive` >= 0, otherwise macro F1 over the
/// classes occurring in either gold or predicted labels. 0 when undefined.
inline double f1_score(const std::vector<int>& gold, const std::vector<int>& pred, int n_classes, int positive = -1) {
  if (gold.size() != pred.size()) throw DimensionError("f1_score: size mismatch");
  auto f1_of = [&](int c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (pred[i] == c && gold[i] == c) ++tp;
      else if (pred[i] == c) ++fp;
      else if (gold[i] == c) ++fn;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    return denom ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
  };
  if (positive >= 0) return f1_of(positive);
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < n_classes; ++c) {
    const bool seen = std::find(gold.begin(), gold.end(), c) != gold.end() ||
                      std::find(pred.begin(), pred.end(), c) != pred.end();
    if (!seen) continue;
    sum += f1_of(c);
    ++used;
  }
  return used ? sum / used : 0.0;
}

struct ProbeSplit {
  std::vector<std::size_t> train, val, test;
};

/// Per-class shuffled split; every class with >= 3 members lands in all
/// three partitions.
inline ProbeSplit stratified_split(const std::vector<int>& targets, int n_classes, double train_frac,
                                   double val_frac, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < targets.size(); ++i) by_class.at(static_cast<std::size_t>(targets[i])).push_back(i);
  int populated = 0;
  for (const auto& c : by_class) populated += c.empty() ? 0 : 1;
  if (populated < 2) throw DataError("probe target has fewer than two populated classes");
  Rng rng(seed);
  ProbeSplit s;
  for (auto& members : by_class) {
    shuffle(members, rng);
    const std::size_t n = members.size();
    std::size_t n_tr = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
    std::size_t n_va = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n)));
    if (n >= 3) {
      n_va = std::max<std::size_t>(n_va, 1);
      n_tr = std::min(n_tr, n - n_va - 1);
      n_tr = std::max<std::size_t>(n_tr, 1);
    } else {
      n_tr = n;
      n_va = 0;
    }
    std::size_t i = 0;
    for (; i < n_tr; ++i) s.train.push_back(members[i]);
    for (; i < n_tr + n_va; ++i) s.val.push_back(members[i]);
    for (; i < n; ++i) s.test.push_back(members[i]);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct ProbeOutcome {
  /// F1 on the test partition, and restricted to noisy / clean test members.
  double f1 = 0.0;
  std::optional<double> f1_noisy;
  std::optional<double> f1_clean;
  int best_epoch = 0;
};

/// One-hidden-layer ReLU MLP probe on standardised features with early
/// stopping on validation F1. `positive` selects positive-class F1 (binary
/// targets) or macro F1 (-1).
inline ProbeOutcome train_probe(const Tensor& features, const std::vector<int>& targets,
                                const std::vector<bool>& noisy, int n_classes, int positive,
                                const ProbeConfig& cfg, std::uint64_t seed) {
  if (features.rank() != 2 || features.rows() != targets.size() || noisy.size() != targets.size())
    throw DimensionError("train_probe: features/targets/noise flags disagree");
  const std::size_t n = features.rows(), d = features.cols();
  const std::size_t h = cfg.hidden > 0 ? static_cast<std::size_t>(cfg.hidden) : d;
  const auto c = static_cast<std::size_t>(n_classes);
  const auto split = stratified_split(targets, n_classes, cfg.train_fraction, cfg.val_fraction,
                                      derive_seed(seed, 0x5b11));

  // Standardise with train-partition statistics.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (auto i : split.train)
    for (std::size_t j = 0; j < d; ++j) mean[j] += features[i * d + j];
  for (auto& m : mean) m /= static_cast<double>(split.train.size());
  for (auto i : split.train)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(features[i * d + j] - mean[j], 2);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(split.train.size())) + 1e-6;
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[i * d + j] = static_cast<float>((features[i * d + j] - mean[j]) / sd[j]);

  std::vector<float> class_weight(c, 1.0f);
  if (cfg.balance_classes) {
    std::vector<std::size_t> count(c, 0);
    for (auto i : split.train) ++count[static_cast<std::size_t>(targets[i])];
    std::size_t present = 0;
    for (auto k : count) present += k ? 1 : 0;
    for (std::size_t k = 0; k < c; ++k)
      class_weight[k] = count[k] ? static_cast<float>(static_cast<double>(split.train.size()) /
                                                      static_cast<double>(present * count[k]))
                                 : 0.0f;
  }

  Rng init(derive_seed(seed, 0x1417));
  auto normal = [&](Shape s, double scale) {
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = static_cast<float>(standard_normal(init) * scale);
    return t;
  };
  std::vector<Tensor> params{normal({d, h}, 1.0 / std::sqrt(static_cast<double>(d))), Tensor({h}),
                             normal({h, c}, 1.0 / std::sqrt(static_cast<double>(h))), Tensor({c})};
  std::vector<std::vector<float>> m1(params.size()), m2(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    m1[p].assign(params[p].size(), 0.0f);
    m2[p].assign(params[p].size(), 0.0f);
  }
  std::uint64_t step = 0;

  auto gather = [&](const std::vector<std::size_t>& idx) {
    Tensor b({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(x.data() + idx[r] * d, d, b.data() + r * d);
    return b;
  };
  auto predict = [&](const std::vector<Tensor>& w, const std::vector<std::size_t>& idx) {
    if (idx.empty()) return std::vector<int>{};
    Tape tape(false);
    auto in = tape.leaf(gather(idx));
    auto hid = relu(add_bias(matmul(in, tape.leaf(w[0])), tape.leaf(w[1])));
    auto out = add_bias(matmul(hid, tape.leaf(w[2])), tape.leaf(w[3]));
    return argmax_rows(out.value());
  };
  auto score = [&](const std::vector<Tensor>& w, const std::vector<std::size_t>& idx) {
    std::vector<int> gold;
    for (auto i : idx) gold.push_back(targets[i]);
    return f1_score(gold, predict(w, idx), n_classes, positive);
  };

  std::vector<Tensor> best = params;
  double best_f1 = -1.0;
  int best_epoch = 0, since = 0;
  Rng order_rng(derive_seed(seed, 0x0de5));
  auto order = split.train;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle(order, order_rng);
    for (std::size_t s = 0; s < order.size(); s += bs) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + bs)));
      Tape tape;
      std::vector<Var> w;
      for (const auto& p : params) w.push_back(tape.leaf(p, true));
      auto in = tape.leaf(gather(idx));
      auto hid = relu(add_bias(matmul(in, w[0]), w[1]));
      auto out = add_bias(matmul(hid, w[2]), w[3]);
      std::vector<std::int32_t> tg;
      std::vector<float> wt;
      for (auto i : idx) {
        tg.push_back(targets[i]);
        wt.push_back(class_weight[static_cast<std::size_t>(targets[i])]);
      }
      auto ce = softmax_cross_entropy(out, std::span<const std::int32_t>(tg), std::span<const float>(wt));
      tape.backward(ce.loss);
      ++step;
      const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        const float* g = tape.grad_data(w[p].id);
        if (!g) continue;
        for (std::size_t i = 0; i < params[p].size(); ++i) {
          m1[p][i] = static_cast<float>(0.9 * m1[p][i] + 0.1 * g[i]);
          m2[p][i] = static_cast<float>(0.999 * m2[p][i] + 0.001 * g[i] * g[i]);
          params[p][i] -= static_cast<float>(cfg.learning_rate * (m1[p][i] / c1) / (std::sqrt(m2[p][i] / c2) + 1e-8));
        }
      }
    }
    const double vf = split.val.empty() ? 0.0 : score(params, split.val);
    if (vf > best_f1) {
      best_f1 = vf;
      best = params;
      best_epoch = epoch;
      since = 0;
    } else if (++since >= cfg.patience) {
      break;
    }
  }

  ProbeOutcome out;
  out.best_epoch = best_epoch;
  const auto pred = predict(best, split.test);
  std::vector<int> gold, gn, pn, gc, pc;
  for (std::size_t k = 0; k < split.test.size(); ++k) {
    const auto i = split.test[k];
    gold.push_back(targets[i]);
    (noisy[i] ? gn : gc).push_back(targets[i]);
    (noisy[i] ? pn : pc).push_back(pred[k]);
  }
  out.f1 = f1_score(gold, pred, n_classes, positive);
  if (!gn.empty()) out.f1_noisy = f1_score(gn, pn, n_classes, positive);
  if (!gc.empty()) out.f1_clean = f1_score(gc, pc, n_classes, positive);
  return out;
}

/// Pooled hidden states of `data` after every block ([n x d] per layer),
/// plus the embedding output at index 0 when `with_embedding`.
inline std::vector<Tensor> collect_states(const ModelState& model, const Dataset& data, bool with_embedding = false,
                                          std::size_t eval_batch = 128) {
  const auto L = static_cast<std::size_t>(model.config.n_layers);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  const std::size_t n = data.size(), off = with_embedding ? 1 : 0;
  std::vector<Tensor> out(L + off, Tensor({n, d}));
  ForwardOptions fo;
  fo.capture = true;
  fo.capture_embedding = with_embedding;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < n; s += eval_batch) {
    idx.clear();
    for (std::size_t i = s; i < std::min(n, s + eval_batch); ++i) idx.push_back(i);
    auto r = infer(model, detail::make_batch(data, idx), fo);
    for (std::size_t l = 0; l < L; ++l)
      std::copy_n(r.hidden[l].data(), idx.size() * d, out[l + off].data() + s * d);
    if (with_embedding) std::copy_n(r.embedding_hidden->data(), idx.size() * d, out[0].data() + s * d);
  }
  return out;
}

}  // namespace memloc
