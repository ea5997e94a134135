#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "memloc/analysis.hpp"

using namespace memloc;

namespace {

using TensorD = basic_tensor<double>;

LayerScores scores(std::vector<double> alpha) {
  LayerScores s;
  s.alpha = std::move(alpha);
  return s;
}

// Trajectory with only noisy coordinates filled in.
CentroidTrajectory noisy_means(const std::vector<double>& means) {
  CentroidTrajectory t;
  for (double m : means) {
    LayerProjection lp;
    lp.distance = 1.0;
    lp.noisy = {m - 0.1, m + 0.1};
    t.layers.push_back(lp);
  }
  return t;
}

LayerProjection clean_layer(const std::vector<double>& a, const std::vector<double>& b) {
  LayerProjection lp;
  lp.distance = 1.0;
  lp.clean_a = a;
  lp.clean_b = b;
  return lp;
}

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(lo + (hi - lo) * i / (n - 1));
  return v;
}

// Rank-difference formula, valid without ties.
double rank_difference_rho(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = mid_ranks(x), ry = mid_ranks(y);
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const double n = static_cast<double>(x.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

Example example(int original, int assigned) {
  Example e;
  e.tokens = {1, 4};
  e.original_label = original;
  e.assigned_label = assigned;
  e.noisy = original != assigned;
  return e;
}

}  // namespace

TEST(Mcog, HandExamples) {
  EXPECT_NEAR(mcog(scores(std::vector<double>(12, 1.0 / 12))), 6.5, 1e-9);
  std::vector<double> one_hot(12, 0.0);
  one_hot[2] = 1.0;
  EXPECT_EQ(mcog(scores(one_hot)), 3.0);
  std::vector<double> ends(12, 0.0);
  ends[0] = ends[11] = 0.5;
  EXPECT_EQ(mcog(scores(ends)), 6.5);
}

TEST(Mcog, BoundedAndShiftEquivariant) {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const auto L = static_cast<std::size_t>(1 + uniform_index(rng, 12));
    std::vector<double> raw(L);
    for (auto& v : raw) v = uniform01(rng);
    const auto s = normalise_scores(raw, "t");
    const double m = mcog(s);
    EXPECT_GE(m, 1.0 - 1e-12);
    EXPECT_LE(m, static_cast<double>(L) + 1e-12);
    const auto shift = static_cast<std::size_t>(uniform_index(rng, 4));
    auto padded = s.alpha;
    padded.insert(padded.begin(), shift, 0.0);
    EXPECT_NEAR(mcog(scores(padded)), m + static_cast<double>(shift), 1e-9);
  }
}

TEST(AccuracyAtK, HandExamples) {
  std::vector<double> a(12, 0.0);
  a[5] = 0.9;
  a[11] = 0.5;
  a[6] = 0.1;
  EXPECT_EQ(accuracy_at_k(scores(a), {6, 7}, 1), 1.0);
  EXPECT_EQ(accuracy_at_k(scores(a), {6, 7}, 2), 0.5);
  EXPECT_THROW(accuracy_at_k(scores(a), {6, 7}, 13), ParameterError);
  EXPECT_THROW(accuracy_at_k(scores(a), {6, 7}, 0), ParameterError);
}

TEST(AccuracyAtK, TiesGoToLowerLayer) {
  EXPECT_EQ(top_k_layers(scores({0.25, 0.25, 0.25, 0.25}), 2), (std::vector<int>{1, 2}));
  EXPECT_EQ(top_k_layers(scores({0.1, 0.3, 0.3, 0.3}), 1), (std::vector<int>{2}));
}

TEST(AccuracyAtK, ValuesOnTheKGrid) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> raw(8);
    for (auto& v : raw) v = uniform01(rng);
    const int k = 1 + static_cast<int>(uniform_index(rng, 8));
    const double acc = accuracy_at_k(scores(raw), {2, 5, 7}, k);
    const double scaled = acc * k;
    EXPECT_EQ(scaled, std::round(scaled));
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
}

TEST(AccuracyAtK, RandomBaselineByEnumeration) {
  // L=6: every permutation of distinct scores, truth {3,4}.
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  for (int k = 1; k <= 6; ++k) {
    double total = 0.0;
    int count = 0;
    std::sort(perm.begin(), perm.end());
    do {
      std::vector<double> a(perm.begin(), perm.end());
      total += accuracy_at_k(scores(a), {3, 4}, k);
      ++count;
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(total / count, random_accuracy_at_k(6, 2, k), 1e-12);
  }
  EXPECT_NEAR(random_accuracy_at_k(6, 2, 1), 1.0 / 3.0, 1e-15);
  // L=12, k=1: the top layer is uniform over all 12 positions.
  double total = 0.0;
  for (int top = 0; top < 12; ++top) {
    std::vector<double> a(12, 0.0);
    a[static_cast<std::size_t>(top)] = 1.0;
    total += accuracy_at_k(scores(a), {6, 7}, 1);
  }
  EXPECT_NEAR(total / 12.0, 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(random_accuracy_at_k(12, 2, 1), 1.0 / 6.0, 1e-15);
}

TEST(Centroid, ProjectionHandExamples) {
  const std::vector<double> ca{0, 0}, cb{2, 0};
  EXPECT_EQ(project_onto(std::vector<double>{1, 5}, ca, cb), 0.5);
  EXPECT_EQ(project_onto(ca, ca, cb), 0.0);
  EXPECT_EQ(project_onto(cb, ca, cb), 1.0);
  EXPECT_EQ(project_onto(std::vector<double>{1, 0}, ca, cb), 0.5);
}

TEST(Centroid, TrajectoryAnchorsAndNoisyMembers) {
  Dataset d;
  d.n_classes = 2;
  // clean a=0 at (0,0),(0,2); clean b=1 at (4,0),(4,2); noisy (orig 1 -> 0) at (1,7).
  d.examples = {example(0, 0), example(0, 0), example(1, 1), example(1, 1), example(1, 0), example(0, 1)};
  TensorD st({6, 2});
  const double pts[6][2] = {{0, 0}, {0, 2}, {4, 0}, {4, 2}, {1, 7}, {9, 9}};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 2; ++j) st.at(i, j) = pts[i][j];
  const auto t = centroid_trajectory(std::vector<TensorD>{st}, d, 0, 1);
  ASSERT_EQ(t.layers.size(), 1u);
  const auto& lp = t.layers[0];
  EXPECT_EQ(lp.clean_a, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(lp.clean_b, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(lp.noisy, (std::vector<double>{0.25}));
  EXPECT_EQ(lp.distance, 4.0);
  EXPECT_EQ(t.population(), 5u);
  EXPECT_EQ(crossing(t), 1);
}

TEST(Centroid, InvariantUnderIsometries) {
  Rng rng(33);
  Dataset d;
  d.n_classes = 2;
  for (int i = 0; i < 40; ++i) d.examples.push_back(example(i % 2, i % 2));
  for (int i = 0; i < 6; ++i) d.examples.push_back(example(1, 0));
  const std::size_t n = d.size(), dim = 5;
  for (int trial = 0; trial < 20; ++trial) {
    TensorD st({n, dim});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        st.at(i, j) = standard_normal(rng) + (d.examples[i].assigned_label == 1 && !d.examples[i].noisy ? 2.0 : 0.0);
    // Random orthogonal matrix by Gram-Schmidt, plus a translation.
    std::vector<std::vector<double>> q(dim, std::vector<double>(dim));
    for (std::size_t r = 0; r < dim; ++r) {
      for (auto& v : q[r]) v = standard_normal(rng);
      for (std::size_t p = 0; p < r; ++p) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dim; ++j) dot += q[r][j] * q[p][j];
        for (std::size_t j = 0; j < dim; ++j) q[r][j] -= dot * q[p][j];
      }
      double norm = 0.0;
      for (double v : q[r]) norm += v * v;
      for (auto& v : q[r]) v /= std::sqrt(norm);
    }
    TensorD moved({n, dim});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < dim; ++r) {
        double v = 3.0 * static_cast<double>(r) - 1.0;
        for (std::size_t j = 0; j < dim; ++j) v += q[r][j] * st.at(i, j);
        moved.at(i, r) = v;
      }
    const auto a = centroid_trajectory(std::vector<TensorD>{st}, d, 0, 1).layers[0];
    const auto b = centroid_trajectory(std::vector<TensorD>{moved}, d, 0, 1).layers[0];
    ASSERT_EQ(a.noisy.size(), b.noisy.size());
    for (std::size_t i = 0; i < a.noisy.size(); ++i) EXPECT_NEAR(a.noisy[i], b.noisy[i], 1e-9);
    for (std::size_t i = 0; i < a.clean_a.size(); ++i) EXPECT_NEAR(a.clean_a[i], b.clean_a[i], 1e-9);
    EXPECT_NEAR(a.distance, b.distance, 1e-9);
    const double mean_a = std::accumulate(a.clean_a.begin(), a.clean_a.end(), 0.0) / a.clean_a.size();
    const double mean_b = std::accumulate(a.clean_b.begin(), a.clean_b.end(), 0.0) / a.clean_b.size();
    EXPECT_NEAR(mean_a, 0.0, 1e-9);
    EXPECT_NEAR(mean_b, 1.0, 1e-9);
  }
}

TEST(Centroid, DegenerateLayerIsMarkedAndSkipped) {
  Dataset d;
  d.n_classes = 2;
  d.examples = {example(0, 0), example(1, 1), example(1, 0)};
  TensorD same({3, 2}, 1.0);
  TensorD apart({3, 2});
  apart.at(1, 0) = 1.0;
  apart.at(2, 0) = 0.1;
  const auto t = centroid_trajectory(std::vector<TensorD>{same, apart}, d, 0, 1);
  EXPECT_TRUE(t.layers[0].degenerate);
  EXPECT_TRUE(t.layers[0].noisy.empty());
  EXPECT_EQ(crossing(t), 2);
  Dataset missing = d;
  missing.examples = {example(0, 0), example(1, 0)};
  EXPECT_THROW(centroid_trajectory(std::vector<TensorD>{TensorD({2, 2})}, missing, 0, 1), DataError);
}

TEST(Crossing, HandExamples) {
  EXPECT_EQ(crossing(noisy_means({0.9, 0.7, 0.45, 0.2})), 3);
  EXPECT_FALSE(crossing(noisy_means({0.9, 0.7, 0.5, 0.6})));
  EXPECT_EQ(crossing(noisy_means({0.8, 0.5, 0.4})), 3);
}

TEST(Initiation, ConstructedSeparation) {
  CentroidTrajectory t;
  t.layers.push_back(clean_layer(linspace(0.0, 0.6, 30), linspace(0.4, 1.0, 30)));
  t.layers.push_back(clean_layer(linspace(-0.2, 0.29, 30), linspace(0.71, 1.2, 30)));
  const auto r = classification_initiation(t);
  EXPECT_EQ(r.layer, 2);
  EXPECT_FALSE(r.unreliable);

  CentroidTrajectory same;
  for (int l = 0; l < 3; ++l) same.layers.push_back(clean_layer(linspace(0, 1, 25), linspace(0, 1, 25)));
  EXPECT_FALSE(classification_initiation(same).layer);

  CentroidTrajectory small;
  small.layers.push_back(clean_layer({0.0, 0.1}, {0.9, 1.0}));
  const auto s = classification_initiation(small);
  EXPECT_TRUE(s.unreliable);
  EXPECT_EQ(s.layer, 1);
}

TEST(Initiation, SeparatedGaussiansMonteCarlo) {
  Rng rng(99);
  int disjoint = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    CentroidTrajectory t;
    std::vector<double> a(200), b(200);
    for (auto& v : a) v = 0.1 * standard_normal(rng);
    for (auto& v : b) v = 1.0 + 0.1 * standard_normal(rng);
    t.layers.push_back(clean_layer(a, b));
    disjoint += classification_initiation(t).layer ? 1 : 0;
  }
  EXPECT_GE(disjoint, 999);
}

TEST(Quantile, Type7Interpolation) {
  EXPECT_EQ(quantile({4, 1, 3, 2}, 0.0), 1.0);
  EXPECT_EQ(quantile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile(linspace(0, 100, 101), 0.05), 5.0);
  EXPECT_THROW(quantile({}, 0.5), DataError);
}

TEST(ProbeEvents, HandExamples) {
  const std::vector<double> orig{0.5, 0.5, 0.5, 0.5};
  const std::vector<double> noisy{0.3, 0.55, 0.62, 0.8};
  const auto ev = probe_events(noisy, orig, {0.5, 0.5, 0.5, 0.5}, 0.5);
  EXPECT_EQ(ev.mem_gg_gen, 3);
  EXPECT_FALSE(ev.clean_f1_90);
  const auto c = probe_events({0, 0, 0}, {0, 0, 0}, {0.5, 0.8, 0.96}, 0.5);
  EXPECT_EQ(c.clean_f1_90, 3);
  EXPECT_EQ(c.mem_gg_gen, std::nullopt);
  EXPECT_THROW(probe_events({0, 0}, {0}, {0, 0}, 0.5), DimensionError);
}

TEST(ProbeEvents, FromProbeResults) {
  ProbeResult noisy, orig;
  noisy.f1_noisy = {0.2, 0.7};
  orig.f1_noisy = {0.4, 0.3};
  orig.f1_clean = {0.7, 0.99};
  const auto ev = probe_events(noisy, orig, 0.5);
  EXPECT_EQ(ev.mem_gg_gen, 2);
  EXPECT_EQ(ev.clean_f1_90, 2);
}

TEST(Spearman, HandExamples) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_NEAR(spearman_rho(x, x)->rho, 1.0, 1e-9);
  EXPECT_NEAR(spearman_rho(x, {5, 4, 3, 2, 1})->rho, -1.0, 1e-9);
  const auto r = spearman_rho(x, {1, 3, 2, 5, 4});
  EXPECT_NEAR(r->rho, 0.8, 1e-9);
  EXPECT_TRUE(r->exact);
  // Only the identity and reversal reach |rho| = 1 among 5! orderings.
  EXPECT_NEAR(spearman_rho(x, x)->p_value, 2.0 / 120.0, 1e-12);
  EXPECT_FALSE(spearman_rho(x, {2, 2, 2, 2, 2}));
  EXPECT_THROW(spearman_rho({1, 2}, {1, 2}), ParameterError);
  EXPECT_THROW(spearman_rho({1, 2, 3}, {1, 2}), DimensionError);
}

TEST(Spearman, ExhaustiveAgainstRankDifferenceFormula) {
  for (std::size_t n = 3; n <= 7; ++n) {
    std::vector<double> x(n), y(n);
    std::iota(x.begin(), x.end(), 1.0);
    std::iota(y.begin(), y.end(), 1.0);
    do {
      EXPECT_NEAR(pearson(mid_ranks(x), mid_ranks(y)).value(), rank_difference_rho(x, y), 1e-9);
    } while (std::next_permutation(y.begin(), y.end()));
  }
}

TEST(Spearman, ExactPValueMatchesEnumeration) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  const std::vector<double> y{2, 1, 4, 3, 6, 5};
  const double obs = rank_difference_rho(x, y);
  std::vector<double> p = x;
  int extreme = 0, total = 0;
  do {
    ++total;
    extreme += std::abs(rank_difference_rho(x, p)) >= std::abs(obs) - 1e-12 ? 1 : 0;
  } while (std::next_permutation(p.begin(), p.end()));
  EXPECT_NEAR(spearman_rho(x, y)->p_value, static_cast<double>(extreme) / total, 1e-12);
}

TEST(Spearman, LargeSampleUsesTApproximation) {
  Rng rng(2);
  std::vector<double> x(30), y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    x[i] = standard_normal(rng);
    y[i] = 0.5 * x[i] + standard_normal(rng);
  }
  const auto r = spearman_rho(x, y);
  EXPECT_FALSE(r->exact);
  // Monte Carlo permutation oracle for the same statistic.
  int extreme = 0;
  const int draws = 20000;
  auto perm = y;
  for (int i = 0; i < draws; ++i) {
    shuffle(perm, rng);
    extreme += std::abs(spearman_rho(x, perm)->rho) >= std::abs(r->rho) ? 1 : 0;
  }
  EXPECT_NEAR(r->p_value, static_cast<double>(extreme) / draws, 0.02);
}

TEST(Spearman, MidRanksForTies) {
  EXPECT_EQ(mid_ranks({10, 20, 10, 30}), (std::vector<double>{1.5, 3, 1.5, 4}));
  EXPECT_EQ(mid_ranks({5, 5, 5}), (std::vector<double>{2, 2, 2}));
}

TEST(CrossCompare, MinMaxHandExample) {
  const auto v = minmax({0.2, 0.3, 0.5});
  EXPECT_NEAR(v[0], 0.0, 1e-15);
  EXPECT_NEAR(v[1], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(v[2], 1.0, 1e-15);
  EXPECT_EQ(minmax({0.4, 0.4}), (std::vector<double>{0.0, 0.0}));
}

TEST(CrossCompare, IdenticalTechniquesCorrelatePerfectly) {
  std::vector<ScoredRun> runs;
  const std::vector<std::vector<double>> alphas{{0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}, {0.1, 0.2, 0.7}, {0.4, 0.4, 0.2}};
  for (std::size_t t = 0; t < alphas.size(); ++t)
    for (const char* tech : {"swap", "retrain"})
      runs.push_back({tech, "task" + std::to_string(t), "seed1", scores(alphas[t])});
  runs.push_back({"probe", "task0", "seed1", scores({1, 0, 0})});
  const auto ms = cross_compare(runs);
  const auto& tech = ms.front();
  EXPECT_EQ(tech.title, "mcog_across_techniques");
  EXPECT_EQ(tech.names, (std::vector<std::string>{"probe", "retrain", "swap"}));
  EXPECT_NEAR(tech.rho[1][2].value(), 1.0, 1e-9);
  EXPECT_NEAR(tech.rho[2][2].value(), 1.0, 1e-9);
  EXPECT_FALSE(tech.rho[0][1]);
  EXPECT_EQ(tech.notes.size(), 2u);
  const auto& w = ms.back();
  EXPECT_EQ(w.title, "weights_across_techniques");
  EXPECT_NEAR(w.rho[1][2].value(), 1.0, 1e-9);
  const auto csv = correlation_csv({tech});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "title,row,col,rho,shared");
  EXPECT_NE(csv.find("mcog_across_techniques,probe,retrain,,1\n"), std::string::npos);
  EXPECT_NE(csv.find("mcog_across_techniques,swap,swap,1,4\n"), std::string::npos);
  const nlohmann::json j = tech;
  EXPECT_TRUE(j.at("rho")[0][1].is_null());
}

TEST(Events, WeightedAggregationAndJson) {
  EXPECT_NEAR(*weighted_event({{2, 10}, {4, 30}, {std::nullopt, 50}}), 3.5, 1e-15);
  EXPECT_FALSE(weighted_event({{std::nullopt, 5}}));
  EventSummary e;
  e.task = "t";
  e.crossing = 2.0;
  const nlohmann::json j = e;
  EXPECT_EQ(j.at("crossing"), 2.0);
  EXPECT_TRUE(j.at("mem_gg_gen").is_null());
}

TEST(Events, CentroidEventsOnSeparatingLayers) {
  // Layer 1: noisy points sit with their original class; layer 2: with the assigned one.
  Rng rng(12);
  Dataset d;
  d.n_classes = 2;
  for (int i = 0; i < 60; ++i) d.examples.push_back(example(i % 2, i % 2));
  for (int i = 0; i < 6; ++i) d.examples.push_back(example(1, 0));
  const std::size_t n = d.size();
  std::vector<TensorD> states(2, TensorD({n, 3}));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = d.examples[i];
    for (std::size_t l = 0; l < 2; ++l) {
      const int side = l == 0 ? e.original_label : e.assigned_label;
      for (std::size_t j = 0; j < 3; ++j) states[l].at(i, j) = 0.05 * standard_normal(rng);
      states[l].at(i, 0) += (l == 0 ? 0.3 : 1.0) * side;
    }
  }
  EventSummary ev;
  centroid_events(states, d, ev);
  EXPECT_EQ(ev.crossing, 2.0);
  EXPECT_EQ(ev.classification_initiation, 1.0);
}
