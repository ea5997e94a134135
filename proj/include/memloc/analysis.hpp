#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/localisation.hpp"
#include "memloc/taskgen.hpp"
#include "memloc/tensor.hpp"

namespace memloc {

/// Weighted mean layer index (1-based).
inline double mcog(const LayerScores& s) {
  double c = 0.0;
  for (std::size_t i = 0; i < s.alpha.size(); ++i) c += s.alpha[i] * static_cast<double>(i + 1);
  return c;
}

/// 1-based layers of the k highest scores; ties go to the lower layer.
inline std::vector<int> top_k_layers(const LayerScores& s, int k) {
  if (k < 1 || k > static_cast<int>(s.alpha.size()))
    throw ParameterError("k = " + std::to_string(k) + " outside 1.." + std::to_string(s.alpha.size()));
  std::vector<int> idx(s.alpha.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s.alpha[static_cast<std::size_t>(a)] > s.alpha[static_cast<std::size_t>(b)]; });
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(idx[static_cast<std::size_t>(i)] + 1);
  return out;
}

/// |top-k ∩ truth| / k.
inline double accuracy_at_k(const LayerScores& s, const std::vector<int>& truth, int k) {
  const auto top = top_k_layers(s, k);
  int hits = 0;
  for (int l : top) hits += std::find(truth.begin(), truth.end(), l) != truth.end() ? 1 : 0;
  return static_cast<double>(hits) / k;
}

/// Expected accuracy@k of a uniformly random layer ranking.
inline double random_accuracy_at_k(int n_layers, int truth_size, int /*k*/) {
  return static_cast<double>(truth_size) / n_layers;
}

struct LayerProjection {
  bool degenerate = false;
  double distance = 0.0;  // |c_b - c_a|
  std::vector<double> clean_a, clean_b, noisy;
};

/// Points of classes a and b projected per layer onto the line through the
/// clean-example centroids, with c_a at 0 and c_b at 1. Noisy points are
/// those with original label b and assigned label a.
struct CentroidTrajectory {
  int a = 0, b = 1;
  std::vector<LayerProjection> layers;
  /// Number of points behind the trajectory, used as aggregation weight.
  std::size_t population() const {
    if (layers.empty()) return 0;
    const auto& l = layers.front();
    return l.clean_a.size() + l.clean_b.size() + l.noisy.size();
  }
};

inline constexpr double kDegenerateCentroidDistance = 1e-9;

/// Coordinate of h on the line from ca (0) to cb (1).
inline double project_onto(std::span<const double> h, std::span<const double> ca, std::span<const double> cb) {
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < h.size(); ++j) {
    const double dir = cb[j] - ca[j];
    num += (h[j] - ca[j]) * dir;
    den += dir * dir;
  }
  return num / den;
}

/// `states[l]` holds the [n x d] hidden states of `data` at layer l+1.
template <class S>
CentroidTrajectory centroid_trajectory(const std::vector<basic_tensor<S>>& states, const Dataset& data, int a, int b) {
  CentroidTrajectory t;
  t.a = a;
  t.b = b;
  std::vector<std::size_t> ia, ib, in;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& e = data.examples[i];
    if (!e.noisy && e.assigned_label == a) ia.push_back(i);
    else if (!e.noisy && e.assigned_label == b) ib.push_back(i);
    else if (e.noisy && e.original_label == b && e.assigned_label == a) in.push_back(i);
  }
  if (ia.empty() || ib.empty())
    throw DataError("centroid_trajectory: class " + std::to_string(ia.empty() ? a : b) + " has no clean examples");
  for (const auto& st : states) {
    if (st.rank() != 2 || st.rows() != data.size()) throw DimensionError("centroid_trajectory: state shape mismatch");
    const std::size_t d = st.cols();
    auto centroid = [&](const std::vector<std::size_t>& idx) {
      std::vector<double> c(d, 0.0);
      for (auto i : idx)
        for (std::size_t j = 0; j < d; ++j) c[j] += st[i * d + j];
      for (auto& v : c) v /= static_cast<double>(idx.size());
      return c;
    };
    const auto ca = centroid(ia), cb = centroid(ib);
    LayerProjection lp;
    double dist2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) dist2 += (cb[j] - ca[j]) * (cb[j] - ca[j]);
    lp.distance = std::sqrt(dist2);
    lp.degenerate = lp.distance < kDegenerateCentroidDistance;
    if (!lp.degenerate) {
      std::vector<double> h(d);
      auto proj = [&](std::size_t i) {
        for (std::size_t j = 0; j < d; ++j) h[j] = st[i * d + j];
        return project_onto(h, ca, cb);
      };
      for (auto i : ia) lp.clean_a.push_back(proj(i));
      for (auto i : ib) lp.clean_b.push_back(proj(i));
      for (auto i : in) lp.noisy.push_back(proj(i));
    }
    t.layers.push_back(std::move(lp));
  }
  return t;
}

/// First layer whose mean noisy coordinate is strictly below 0.5.
inline std::optional<int> crossing(const CentroidTrajectory& t) {
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    const auto& lp = t.layers[l];
    if (lp.degenerate || lp.noisy.empty()) continue;
    const double mean = std::accumulate(lp.noisy.begin(), lp.noisy.end(), 0.0) / static_cast<double>(lp.noisy.size());
    if (mean < 0.5) return static_cast<int>(l + 1);
  }
  return std::nullopt;
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7).
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct InitiationResult {
  std::optional<int> layer;
  /// A class had fewer than 20 points at some layer.
  bool unreliable = false;
};

/// First layer where the [q, 1-q] quantile intervals of the clean class-a
/// and class-b coordinates are disjoint.
inline InitiationResult classification_initiation(const CentroidTrajectory& t, double q = 0.05) {
  InitiationResult r;
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    const auto& lp = t.layers[l];
    if (lp.degenerate) continue;
    if (lp.clean_a.size() < 20 || lp.clean_b.size() < 20) r.unreliable = true;
    const double a_lo = quantile(lp.clean_a, q), a_hi = quantile(lp.clean_a, 1.0 - q);
    const double b_lo = quantile(lp.clean_b, q), b_hi = quantile(lp.clean_b, 1.0 - q);
    if ((a_hi < b_lo || b_hi < a_lo) && !r.layer) r.layer = static_cast<int>(l + 1);
  }
  return r;
}

struct ProbeEvents {
  std::optional<int> mem_gg_gen;
  std::optional<int> clean_f1_90;
};

/// mem_gg_gen: first layer where the noisy-label probe's F1 on noisy examples
/// beats the original-label probe's by at least `margin`. clean_f1_90: first
/// layer where chance-corrected clean F1 reaches `level`.
inline ProbeEvents probe_events(const std::vector<double>& f1_noisy_probe, const std::vector<double>& f1_orig_probe,
                                const std::vector<double>& f1_clean, double chance, double margin = 0.10,
                                double level = 0.90) {
  if (f1_noisy_probe.size() != f1_orig_probe.size() || f1_clean.size() != f1_orig_probe.size())
    throw DimensionError("probe_events: curves differ in length");
  ProbeEvents ev;
  const double eps = 1e-12;
  for (std::size_t l = 0; l < f1_orig_probe.size(); ++l) {
    if (!ev.mem_gg_gen && f1_noisy_probe[l] >= f1_orig_probe[l] + margin - eps) ev.mem_gg_gen = static_cast<int>(l + 1);
    if (!ev.clean_f1_90 && (f1_clean[l] - chance) / (1.0 - chance) >= level - eps)
      ev.clean_f1_90 = static_cast<int>(l + 1);
  }
  return ev;
}

/// Probe events from sweeps: class-noisy and class-original probes scored on
/// noisy examples, class-original probe scored on clean examples.
inline ProbeEvents probe_events(const ProbeResult& noisy_probe, const ProbeResult& orig_probe, double chance) {
  return probe_events(noisy_probe.f1_noisy, orig_probe.f1_noisy, orig_probe.f1_clean, chance);
}

/// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> mid_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

/// Pearson correlation; nullopt when either input has zero variance.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  bool exact = false;
};

/// Spearman's rho on mid-ranks. Two-sided p-value by full permutation for
/// n <= 10, otherwise from the t approximation with n-2 degrees of freedom.
/// nullopt when either input is constant.
inline std::optional<SpearmanResult> spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman_rho: inputs differ in length");
  if (x.size() < 3) throw ParameterError("spearman_rho needs at least 3 pairs");
  const auto rx = mid_ranks(x), ry = mid_ranks(y);
  const auto rho = pearson(rx, ry);
  if (!rho) return std::nullopt;
  SpearmanResult r;
  r.rho = *rho;
  r.n = x.size();
  if (r.n <= 10) {
    r.exact = true;
    std::vector<double> perm = ry;
    std::sort(perm.begin(), perm.end());
    std::size_t extreme = 0, total = 0;
    const double obs = std::abs(r.rho) - 1e-12;
    do {
      ++total;
      if (std::abs(pearson(rx, perm).value_or(0.0)) >= obs) ++extreme;
    } while (std::next_permutation(perm.begin(), perm.end()));
    r.p_value = static_cast<double>(extreme) / static_cast<double>(total);
  } else {
    const double df = static_cast<double>(r.n) - 2.0;
    if (std::abs(r.rho) >= 1.0) {
      r.p_value = 0.0;
    } else {
      const double t = r.rho * std::sqrt(df / (1.0 - r.rho * r.rho));
      boost::math::students_t dist(df);
      r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
  }
  return r;
}

/// (v - min) / (max - min); all zeros when v is constant.
inline std::vector<double> minmax(const std::vector<double>& v) {
  if (v.empty()) return {};
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size(), 0.0);
  if (*hi > *lo)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / (*hi - *lo);
  return out;
}

/// Pairwise Spearman correlations between named series over their shared keys.
struct CorrelationMatrix {
  std::string title;
  std::vector<std::string> names;
  /// rho[i][j]; nullopt where the pair was skipped or undefined.
  std::vector<std::vector<std::optional<double>>> rho;
  std::vector<std::vector<std::size_t>> shared;
  std::vector<std::string> notes;
};

inline CorrelationMatrix pairwise_spearman(const std::string& title,
                                           const std::map<std::string, std::map<std::string, double>>& series,
                                           std::size_t min_shared = 3) {
  CorrelationMatrix m;
  m.title = title;
  for (const auto& [name, _] : series) m.names.push_back(name);
  const std::size_t n = m.names.size();
  m.rho.assign(n, std::vector<std::optional<double>>(n));
  m.shared.assign(n, std::vector<std::size_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const auto& a = series.at(m.names[i]);
      const auto& b = series.at(m.names[j]);
      std::vector<double> x, y;
      for (const auto& [key, v] : a)
        if (auto it = b.find(key); it != b.end()) {
          x.push_back(v);
          y.push_back(it->second);
        }
      m.shared[i][j] = x.size();
      if (x.size() < min_shared) {
        if (i < j)
          m.notes.push_back(m.names[i] + " vs " + m.names[j] + ": " + std::to_string(x.size()) +
                            " shared entries, skipped");
        continue;
      }
      if (auto r = spearman_rho(x, y)) m.rho[i][j] = r->rho;
      else if (i < j) m.notes.push_back(m.names[i] + " vs " + m.names[j] + ": constant series, undefined");
    }
  return m;
}

inline void to_json(nlohmann::json& j, const CorrelationMatrix& m) {
  nlohmann::json rho = nlohmann::json::array();
  for (const auto& row : m.rho) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& v : row) r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    rho.push_back(r);
  }
  j = nlohmann::json{{"title", m.title}, {"names", m.names}, {"rho", rho}, {"shared", m.shared}, {"notes", m.notes}};
}

/// Long-format CSV: title,row,col,rho,shared (rho empty when skipped).
inline std::string correlation_csv(const std::vector<CorrelationMatrix>& ms) {
  std::string s = "title,row,col,rho,shared\n";
  char buf[64];
  for (const auto& m : ms)
    for (std::size_t i = 0; i < m.names.size(); ++i)
      for (std::size_t j = 0; j < m.names.size(); ++j) {
        s += m.title + "," + m.names[i] + "," + m.names[j] + ",";
        if (m.rho[i][j]) {
          std::snprintf(buf, sizeof buf, "%.17g", *m.rho[i][j]);
          s += buf;
        }
        s += "," + std::to_string(m.shared[i][j]) + "\n";
      }
  return s;
}

/// One localisation result: technique, task, model (seed) and its scores.
struct ScoredRun {
  std::string technique;
  std::string task;
  std::string model;
  LayerScores scores;
};

/// (i) M-CoG across techniques (keys: task/model), (ii) M-CoG across models
/// per technique (keys: task), (iii) layer weights across techniques after
/// per-technique min-max normalisation (keys: task/model/layer).
inline std::vector<CorrelationMatrix> cross_compare(const std::vector<ScoredRun>& runs) {
  std::map<std::string, std::map<std::string, double>> by_technique, weights;
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> by_model;  // technique -> model -> task
  std::map<std::string, std::vector<const ScoredRun*>> runs_of;
  for (const auto& r : runs) {
    by_technique[r.technique][r.task + "/" + r.model] = mcog(r.scores);
    by_model[r.technique][r.model][r.task] = mcog(r.scores);
    runs_of[r.technique].push_back(&r);
  }
  for (const auto& [tech, rs] : runs_of) {
    std::vector<double> all;
    for (auto* r : rs) all.insert(all.end(), r->scores.alpha.begin(), r->scores.alpha.end());
    const auto norm = minmax(all);
    std::size_t k = 0;
    for (auto* r : rs)
      for (std::size_t l = 0; l < r->scores.alpha.size(); ++l)
        weights[tech][r->task + "/" + r->model + "/" + std::to_string(l + 1)] = norm[k++];
  }
  std::vector<CorrelationMatrix> out;
  out.push_back(pairwise_spearman("mcog_across_techniques", by_technique));
  for (const auto& [tech, models] : by_model)
    out.push_back(pairwise_spearman("mcog_across_models:" + tech, models));
  out.push_back(pairwise_spearman("weights_across_techniques", weights));
  return out;
}

/// Event depths of one (task, model) run; multi-class values are population
/// weighted means over class pairs and may be fractional.
struct EventSummary {
  std::string task;
  std::string model;
  std::optional<double> crossing, classification_initiation, mem_gg_gen, clean_f1_90;
  bool unreliable = false;
};

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline void to_json(nlohmann::json& j, const EventSummary& e) {
  j = nlohmann::json{{"task", e.task},
                     {"model", e.model},
                     {"crossing", optional_json(e.crossing)},
                     {"classification_initiation", optional_json(e.classification_initiation)},
                     {"mem_gg_gen", optional_json(e.mem_gg_gen)},
                     {"clean_f1_90", optional_json(e.clean_f1_90)},
                     {"unreliable", e.unreliable}};
}

/// Population-weighted mean over the pairs that have the event.
inline std::optional<double> weighted_event(const std::vector<std::pair<std::optional<int>, std::size_t>>& pairs) {
  double sum = 0.0, weight = 0.0;
  for (const auto& [layer, pop] : pairs)
    if (layer) {
      sum += static_cast<double>(*layer) * static_cast<double>(pop);
      weight += static_cast<double>(pop);
    }
  if (weight <= 0.0) return std::nullopt;
  return sum / weight;
}

/// Centroid events over all ordered class pairs (a, b) with noisy points.
template <class S>
void centroid_events(const std::vector<basic_tensor<S>>& states, const Dataset& data, EventSummary& out) {
  std::vector<std::pair<std::optional<int>, std::size_t>> cross, init;
  for (int a = 0; a < data.n_classes; ++a)
    for (int b = 0; b < data.n_classes; ++b) {
      if (a == b) continue;
      bool has_noisy = false;
      for (const auto& e : data.examples) has_noisy |= e.noisy && e.assigned_label == a && e.original_label == b;
      if (!has_noisy) continue;
      const auto t = centroid_trajectory(states, data, a, b);
      const auto ci = classification_initiation(t);
      out.unreliable |= ci.unreliable;
      cross.emplace_back(crossing(t), t.population());
      init.emplace_back(ci.layer, t.population());
    }
  out.crossing = weighted_event(cross);
  out.classification_initiation = weighted_event(init);
}

}  // namespace memloc
