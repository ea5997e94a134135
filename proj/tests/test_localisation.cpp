#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "memloc/localisation.hpp"

using namespace memloc;

namespace {

ModelConfig tiny_model(int layers = 2, std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 24;
  c.max_seq_len = 9;
  c.n_classes = 2;
  c.seed = seed;
  return c;
}

TaskSpec tiny_task(int n_train = 120) {
  TaskSpec s;
  s.kind = TaskKind::SurfaceKeyToken;
  s.n_classes = 2;
  s.n_train = n_train;
  s.n_val = 60;
  s.vocab_size = 24;
  s.seq_len_min = 6;
  s.seq_len_max = 8;
  s.key_tokens = 2;
  s.seed = 3;
  return s;
}

TrainConfig quick(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.learning_rate = 3e-3;
  t.seed = 11;
  return t;
}

Dataset noisy_train(double rate = 0.2, int n_train = 120) {
  return perturb_labels(generate_task(tiny_task(n_train)).train, rate, 7);
}

// Trained pair on one noisy set: theta_P, theta_M2 (assigned labels), theta_O (original labels).
struct Trio {
  ModelState p, m2, o;
  Dataset data;
};

const Trio& trio() {
  static const Trio t = [] {
    Trio r;
    r.data = noisy_train();
    r.p = build_model(tiny_model());
    r.m2 = finetune(r.p, r.data, quick(10)).theta_m2;
    r.o = train_original(r.p, r.data, quick(10)).theta_m2;
    return r;
  }();
  return t;
}

std::vector<WindowRecord> records_for(int L, double full_error) {
  std::vector<WindowRecord> out;
  int k = 0;
  for (auto w : all_windows(L)) {
    const double e = w.size == L ? full_error : 0.05 * (++k);
    out.push_back({w, e, 0.01 * k});
  }
  return out;
}

WindowMatrix dense_matrix(std::vector<std::vector<double>> values) {
  WindowMatrix m;
  m.n_layers = static_cast<int>(values.size());
  m.values = std::move(values);
  return m;
}

void expect_valid_scores(const LayerScores& s, std::size_t L) {
  ASSERT_EQ(s.alpha.size(), L);
  double sum = 0.0;
  for (double a : s.alpha) {
    EXPECT_GE(a, 0.0);
    sum += a;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

Tensor features_from(const std::vector<std::vector<float>>& rows) {
  Tensor t({rows.size(), rows.front().size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) t.at(i, j) = rows[i][j];
  return t;
}

}  // namespace

TEST(WindowMatrix, NormalisedMeansMatchBruteForce) {
  const int L = 4;
  auto recs = records_for(L, 0.8);
  const auto m = matrix_from_records(L, recs, "swap");
  EXPECT_EQ(m.windows.size(), 10u);
  EXPECT_DOUBLE_EQ(m.full_window_error, 0.8);
  // Oracle: accumulate per window into every covered cell.
  std::vector<std::vector<double>> sum(L, std::vector<double>(L, 0.0)), cnt = sum;
  for (const auto& r : recs)
    for (int y = r.window.start; y < r.window.start + r.window.size; ++y) {
      sum[r.window.size - 1][y - 1] += std::min(1.0, r.mem_error / 0.8);
      cnt[r.window.size - 1][y - 1] += 1.0;
    }
  for (int w = 1; w <= L; ++w)
    for (int y = 1; y <= L; ++y) {
      EXPECT_NEAR(m.at(w, y), sum[w - 1][y - 1] / cnt[w - 1][y - 1], 1e-15);
      EXPECT_GE(m.at(w, y), 0.0);
      EXPECT_LE(m.at(w, y), 1.0);
    }
  for (int y = 1; y <= L; ++y) EXPECT_EQ(m.at(L, y), 1.0);
  double clean = 0.0;
  for (const auto& r : recs) clean += r.clean_error;
  EXPECT_NEAR(m.mean_clean_error, clean / 10.0, 1e-15);
}

TEST(WindowMatrix, RebuildFromStoredWindowsIsBitwise) {
  auto recs = records_for(3, 0.37);
  std::reverse(recs.begin(), recs.end());
  const auto a = matrix_from_records(3, recs, "swap");
  const auto b = matrix_from_records(3, a.windows, "swap");
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(matrix_csv(a), matrix_csv(b));
}

TEST(WindowMatrix, ErrorsAreClampedIntoUnitRange) {
  auto recs = records_for(3, 0.1);  // single-window errors exceed the full-window error
  const auto m = matrix_from_records(3, recs);
  for (int w = 1; w <= 3; ++w)
    for (int y = 1; y <= 3; ++y) EXPECT_LE(m.at(w, y), 1.0);
  EXPECT_EQ(m.max_window_error(1), 1.0);
}

TEST(WindowMatrix, DegenerateAndMalformedInputs) {
  EXPECT_THROW(matrix_from_records(3, records_for(3, 0.0)), DegenerateRunError);
  auto recs = records_for(3, 0.5);
  recs.pop_back();
  EXPECT_THROW(matrix_from_records(3, recs), DataError);
  recs = records_for(3, 0.5);
  recs.back().window = {1, 1};
  EXPECT_THROW(matrix_from_records(3, recs), DataError);
}

TEST(WindowMatrix, CsvLayouts) {
  const auto m = matrix_from_records(2, {{{1, 1}, 0.25, 0.0}, {{2, 1}, 0.5, 0.1}, {{1, 2}, 0.5, 0.2}});
  EXPECT_EQ(matrix_csv(m),
            "w,y,mem_error,mean_clean_error\n"
            "1,1,0.5,0\n1,2,1,0.10000000000000001\n"
            "2,1,1,0.20000000000000001\n2,2,1,0.20000000000000001\n");
  EXPECT_EQ(windows_csv(m),
            "start,size,mem_error,clean_error,normalised\n"
            "1,1,0.25,0,0.5\n2,1,0.5,0.10000000000000001,1\n1,2,0.5,0.20000000000000001,1\n");
}

TEST(LayerScores, MatrixToScoresHandExample) {
  const auto s = matrix_to_scores(dense_matrix({{0.2, 0.4}, {1.0, 1.0}}));
  EXPECT_NEAR(s.alpha[0], 6.0 / 13.0, 1e-15);
  EXPECT_NEAR(s.alpha[1], 7.0 / 13.0, 1e-15);
  EXPECT_FALSE(s.degenerate);
}

TEST(LayerScores, ConstantAndDominantColumns) {
  auto s = matrix_to_scores(dense_matrix({{0.3, 0.3, 0.3, 0.3}, {0.3, 0.3, 0.3, 0.3}, {0.3, 0.3, 0.3, 0.3},
                                          {0.3, 0.3, 0.3, 0.3}}));
  for (double a : s.alpha) EXPECT_NEAR(a, 0.25, 1e-15);
  s = matrix_to_scores(dense_matrix({{0.1, 0.2, 0.9, 0.0}, {0.2, 0.3, 0.8, 0.1}, {0.4, 0.5, 0.7, 0.3},
                                     {1.0, 1.0, 1.0, 1.0}}));
  EXPECT_EQ(std::max_element(s.alpha.begin(), s.alpha.end()) - s.alpha.begin(), 2);
  expect_valid_scores(s, 4);
}

TEST(LayerScores, NormaliseClampsAndFallsBack) {
  auto s = normalise_scores({-1.0, 1.0, 3.0}, "t");
  EXPECT_EQ(s.alpha, (std::vector<double>{0.0, 0.25, 0.75}));
  s = normalise_scores({0.0, -2.0, 0.0}, "t");
  EXPECT_TRUE(s.degenerate);
  for (double a : s.alpha) EXPECT_NEAR(a, 1.0 / 3.0, 1e-15);
  expect_valid_scores(s, 3);
  EXPECT_THROW(normalise_scores({}, "t"), DataError);
}

TEST(LayerScores, RandomRawScoresAlwaysValid) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + uniform_index(rng, 12);
    std::vector<double> raw(L);
    for (auto& v : raw) v = uniform01(rng) * 2.0 - 0.5;
    expect_valid_scores(normalise_scores(raw, "t"), L);
  }
}

TEST(LayerScores, ProbeDeltasHandExample) {
  const auto s = probe_deltas_to_scores({0.5, 0.6, 0.8, 0.8}, 0.5);
  ASSERT_EQ(s.alpha.size(), 4u);
  EXPECT_NEAR(s.alpha[0], 0.0, 1e-15);
  EXPECT_NEAR(s.alpha[1], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.alpha[2], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.alpha[3], 0.0, 1e-15);
}

TEST(LayerScores, JsonRoundTrip) {
  LayerScores s{{0.25, 0.75}, "swap", false, {{"seed", 3}}};
  const nlohmann::json j = s;
  const auto back = j.get<LayerScores>();
  EXPECT_EQ(back.alpha, s.alpha);
  EXPECT_EQ(back.technique, "swap");
  EXPECT_EQ(back.provenance, s.provenance);
}

TEST(SwapSweep, FullWindowIsOneAndCountsWindows) {
  const auto& t = trio();
  const auto m = swap_sweep(t.m2, t.o, t.data);
  EXPECT_EQ(m.windows.size(), 3u);
  EXPECT_EQ(m.at(2, 1), 1.0);
  EXPECT_EQ(m.at(2, 2), 1.0);
  expect_valid_scores(matrix_to_scores(m), 2);
  EXPECT_GE(m.mean_clean_error, 0.0);
  EXPECT_LE(m.mean_clean_error, 1.0);
}

TEST(SwapSweep, ThreeLayersGiveSixWindows) {
  const auto data = noisy_train();
  const auto a = build_model(tiny_model(3, 1));
  const auto b = finetune(a, data, quick(2)).theta_m2;
  const auto m = swap_sweep(b, a, data);
  EXPECT_EQ(m.windows.size(), 6u);
}

TEST(SwapSweep, IdentityDonorIsDegenerate) {
  const auto& t = trio();
  // Only meaningful if theta_M2 fits every noisy label.
  const auto ev = evaluate(t.m2, t.data);
  ASSERT_EQ(*ev.memorisation_error, 0.0);
  EXPECT_THROW(swap_sweep(t.m2, t.m2, t.data), DegenerateRunError);
}

TEST(SwapSweep, ParallelMatchesSerial) {
  const auto& t = trio();
  EXPECT_EQ(swap_sweep(t.m2, t.o, t.data, 0, 1).values, swap_sweep(t.m2, t.o, t.data, 0, 3).values);
}

TEST(SwapSweep, RequiresNoisyExamplesAndMatchingModels) {
  const auto& t = trio();
  EXPECT_THROW(swap_sweep(t.m2, t.o, t.data.filtered(false)), DataError);
  auto other = tiny_model();
  other.d_model = 8;
  other.d_ff = 16;
  EXPECT_THROW(swap_sweep(t.m2, build_model(other), t.data), IncompatibleModelError);
}

TEST(RetrainSweep, ZeroEpochsEqualsPlainReset) {
  const auto& t = trio();
  const auto m = retrain_sweep(t.m2, t.p, t.data, quick(1), 0);
  const auto direct = evaluate(reset_layers(t.m2, t.p, {1, 1}, true), t.data);
  ASSERT_EQ(m.windows.front().window, (LayerWindow{1, 1}));
  EXPECT_EQ(m.windows.front().mem_error, *direct.memorisation_error);
  EXPECT_EQ(m.windows.front().clean_error, *direct.clean_error);
}

TEST(RetrainSweep, FullWindowIsOneAndTrainsOnlyTheWindow) {
  const auto& t = trio();
  const auto m = retrain_sweep(t.m2, t.p, t.data, quick(1), 2);
  EXPECT_EQ(m.at(2, 1), 1.0);
  EXPECT_EQ(m.technique, "retrain");

  auto model = reset_layers(t.m2, t.p, {2, 1}, true);
  const auto before = model;
  train_masked(model, t.data.filtered(false), quick(1), 1, 0);
  EXPECT_EQ(model.blocks[0].wq.values().size(), before.blocks[0].wq.values().size());
  EXPECT_TRUE(std::equal(model.blocks[0].wq.values().begin(), model.blocks[0].wq.values().end(),
                         before.blocks[0].wq.values().begin()));
  EXPECT_TRUE(std::equal(model.heads[0].weight.values().begin(), model.heads[0].weight.values().end(),
                         before.heads[0].weight.values().begin()));
  EXPECT_FALSE(std::equal(model.blocks[1].wq.values().begin(), model.blocks[1].wq.values().end(),
                          before.blocks[1].wq.values().begin()));
}

TEST(ForgettingGradients, DefaultsAreTheSelectedPipeline) {
  const GradientConfig c;
  EXPECT_EQ(c.norm, GradNorm::L1);
  EXPECT_TRUE(c.subtract_clean);
  EXPECT_TRUE(c.divide_frozen);
  const nlohmann::json j = c;
  const auto back = j.get<GradientConfig>();
  EXPECT_EQ(back.norm, c.norm);
  EXPECT_EQ(back.seed, c.seed);
}

TEST(ForgettingGradients, ScoresAreValidAndDeterministic) {
  const auto& t = trio();
  const auto r = forgetting_gradients(t.m2, t.p, t.data);
  expect_valid_scores(r.scores, 2);
  EXPECT_EQ(r.noisy_norms.size(), 2u);
  EXPECT_EQ(r.clean_norms.size(), 2u);
  EXPECT_EQ(r.frozen_norms.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_GT(r.noisy_norms[l], 0.0);
    EXPECT_NEAR(r.processed[l], std::max(0.0, r.noisy_norms[l] - r.clean_norms[l]) / r.frozen_norms[l], 1e-12);
  }
  EXPECT_EQ(forgetting_gradients(t.m2, t.p, t.data).scores.alpha, r.scores.alpha);
}

TEST(ForgettingGradients, NormsRelateAcrossL1AndL2) {
  const auto& t = trio();
  const auto noisy = t.data.filtered(true);
  const auto l1 = block_gradient_norms(t.m2, noisy, GradNorm::L1, 0, 128);
  const auto l2 = block_gradient_norms(t.m2, noisy, GradNorm::L2, 0, 128);
  const auto chunked = block_gradient_norms(t.m2, noisy, GradNorm::L1, 0, 5);
  for (std::size_t l = 0; l < l1.size(); ++l) {
    EXPECT_LE(l2[l], l1[l]);
    EXPECT_NEAR(chunked[l], l1[l], 1e-5 * l1[l]);
  }
}

TEST(ForgettingGradients, EmptyNoisySetIsAnError) {
  const auto& t = trio();
  EXPECT_THROW(forgetting_gradients(t.m2, t.p, t.data.filtered(false)), DataError);
}

TEST(ForgettingGradients, CleanTwinsCancelToUniform) {
  // Every noisy example has a clean twin with the same tokens and assigned label.
  const auto base = generate_task(tiny_task()).train;
  Dataset d = base;
  d.examples.clear();
  for (std::size_t i = 0; i < 20; ++i) {
    Example clean = base.examples[i];
    Example noisy = clean;
    noisy.original_label = 1 - clean.assigned_label;
    noisy.noisy = true;
    clean.example_id = static_cast<std::int64_t>(2 * i);
    noisy.example_id = static_cast<std::int64_t>(2 * i + 1);
    d.examples.push_back(clean);
    d.examples.push_back(noisy);
  }
  const auto& t = trio();
  const auto r = forgetting_gradients(t.m2, t.p, d);
  EXPECT_EQ(r.noisy_norms, r.clean_norms);
  EXPECT_TRUE(r.scores.degenerate);
  for (double a : r.scores.alpha) EXPECT_DOUBLE_EQ(a, 0.5);
}

TEST(Probe, F1HandCases) {
  EXPECT_DOUBLE_EQ(f1_score({1, 1, 0, 0}, {1, 0, 1, 0}, 2, 1), 0.5);
  EXPECT_DOUBLE_EQ(f1_score({1, 1, 0, 0}, {1, 1, 0, 0}, 2, 1), 1.0);
  EXPECT_DOUBLE_EQ(f1_score({0, 0}, {0, 0}, 2, 1), 0.0);
  // Macro over classes 0 (F1 1/2), 1 (F1 0) and 2 (F1 1).
  EXPECT_NEAR(f1_score({0, 0, 1, 2}, {0, 1, 0, 2}, 3), 0.5, 1e-15);
  // Class 3 never occurs, so it is left out of the macro average.
  EXPECT_NEAR(f1_score({0, 1}, {0, 0}, 4), (2.0 / 3.0 + 0.0) / 2.0, 1e-15);
  EXPECT_THROW(f1_score({0}, {0, 1}, 2), DimensionError);
}

TEST(Probe, StratifiedSplitPartitionsEveryClass) {
  std::vector<int> targets;
  for (int i = 0; i < 200; ++i) targets.push_back(i % 10 < 2 ? 1 : (i % 10 < 5 ? 2 : 0));
  const auto s = stratified_split(targets, 3, 0.7, 0.15, 5);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    std::array<int, 3> per{};
    for (auto i : *part) {
      EXPECT_TRUE(all.insert(i).second);
      ++per[static_cast<std::size_t>(targets[i])];
    }
    for (int c : per) EXPECT_GT(c, 0);
  }
  EXPECT_EQ(all.size(), targets.size());
  EXPECT_EQ(s.train.size(), 140u);
  EXPECT_EQ(s.val.size(), 30u);
  EXPECT_EQ(stratified_split(targets, 3, 0.7, 0.15, 5).test, s.test);
  EXPECT_NE(stratified_split(targets, 3, 0.7, 0.15, 6).test, s.test);
  EXPECT_THROW(stratified_split(std::vector<int>(50, 1), 3, 0.7, 0.15, 5), DataError);
}

TEST(Probe, SeparableStatesReachPerfectF1) {
  Rng rng(4);
  std::vector<std::vector<float>> rows;
  std::vector<int> targets;
  std::vector<bool> noisy;
  for (int i = 0; i < 300; ++i) {
    const int y = i % 3 == 0 ? 1 : 0;
    std::vector<float> r(8);
    for (auto& v : r) v = static_cast<float>(standard_normal(rng));
    r[2] += y ? 4.0f : -4.0f;
    rows.push_back(r);
    targets.push_back(y);
    noisy.push_back(y == 1);
  }
  ProbeConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 30;
  const auto o = train_probe(features_from(rows), targets, noisy, 2, 1, cfg, 9);
  EXPECT_GE(o.f1, 0.98);
  const auto again = train_probe(features_from(rows), targets, noisy, 2, 1, cfg, 9);
  EXPECT_EQ(again.f1, o.f1);
  EXPECT_EQ(again.best_epoch, o.best_epoch);
}

TEST(Probe, ShuffledLabelsStayNearChance) {
  Rng rng(8);
  std::vector<std::vector<float>> rows;
  std::vector<int> targets;
  for (int i = 0; i < 600; ++i) {
    std::vector<float> r(8);
    for (auto& v : r) v = static_cast<float>(standard_normal(rng));
    rows.push_back(r);
    targets.push_back(i % 3);
  }
  shuffle(targets, rng);
  ProbeConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 30;
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s)
    mean += train_probe(features_from(rows), targets, std::vector<bool>(600, false), 3, -1, cfg, s).f1 / 5.0;
  EXPECT_NEAR(mean, 1.0 / 3.0, 0.15);
}

TEST(Probe, ProbeResultJsonRoundTrip) {
  ProbeResult p;
  p.target = ProbeTarget::ClassNoisy;
  p.f1_mean = {0.5, 0.7};
  p.f1_std = {0.01, 0.02};
  const nlohmann::json j = p;
  EXPECT_EQ(j.at("target"), "class-noisy");
  const auto back = j.get<ProbeResult>();
  EXPECT_EQ(back.f1_mean, p.f1_mean);
  EXPECT_EQ(back.target, p.target);
}

TEST(NoiseProbeSweep, ShapesScoresAndUninformedBaseline) {
  const auto data = noisy_train(0.3, 400);
  const auto p = build_model(tiny_model());
  const auto m2 = finetune(p, data, quick(4)).theta_m2;
  ProbeConfig cfg;
  cfg.seeds = 2;
  cfg.max_epochs = 25;
  cfg.learning_rate = 3e-3;
  const auto r = noise_probe_sweep(m2, p, data, cfg);
  EXPECT_EQ(r.result.target, ProbeTarget::NoiseFlag);
  ASSERT_EQ(r.result.f1_mean.size(), 2u);
  ASSERT_EQ(r.result.baseline.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_GE(r.result.f1_mean[l], 0.0);
    EXPECT_LE(r.result.f1_mean[l], 1.0);
    EXPECT_GE(r.result.f1_std[l], 0.0);
  }
  expect_valid_scores(r.scores, 2);
  // Before fine-tuning the flag is independent of the input: F1 sits between
  // random guessing (2r·0.5/(r+0.5)) and all-positive (2r/(1+r)), within 0.15.
  const double r_ = 0.3, lo = r_ / (r_ + 0.5) - 0.15, hi = 2 * r_ / (1 + r_) + 0.15;
  for (double b : r.result.baseline) {
    EXPECT_GE(b, lo);
    EXPECT_LE(b, hi);
  }
  EXPECT_EQ(noise_probe_sweep(m2, p, data, cfg).result.f1_mean, r.result.f1_mean);
}

TEST(ClassProbeSweep, ConvergedSurfaceModelTopLayer) {
  const auto data = generate_task(tiny_task(400)).train;
  const auto m = finetune(build_model(tiny_model()), data, quick(10)).theta_m2;
  ASSERT_GE(evaluate(m, data).accuracy, 0.95);
  ProbeConfig cfg;
  cfg.seeds = 2;
  cfg.max_epochs = 40;
  cfg.learning_rate = 1e-2;
  const auto r = class_probe_sweep(m, data, LabelField::Original, cfg);
  EXPECT_EQ(r.target, ProbeTarget::ClassOriginal);
  EXPECT_GE(r.f1_mean.back(), 0.9);
  EXPECT_EQ(class_probe_sweep(m, data, LabelField::Original, cfg).f1_mean, r.f1_mean);
}
