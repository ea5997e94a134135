#include <gtest/gtest.h>

#include <vector>

#include "memloc/trainer.hpp"

using namespace memloc;

namespace {

TaskSpec tiny_task(TaskKind kind = TaskKind::SurfaceKeyToken, std::uint64_t seed = 3, int n_train = 120) {
  TaskSpec s;
  s.kind = kind;
  s.n_classes = 2;
  s.n_train = n_train;
  s.n_val = 60;
  s.vocab_size = 24;
  s.seq_len_min = 6;
  s.seq_len_max = 8;
  s.key_tokens = 2;
  s.seed = seed;
  return s;
}

ModelConfig tiny_model(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 24;
  c.max_seq_len = 9;
  c.n_classes = 2;
  c.seed = seed;
  return c;
}

TrainConfig quick(int epochs = 4) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.learning_rate = 3e-3;
  t.seed = 11;
  return t;
}

// A model whose head ignores its input and always predicts class `cls`.
ModelState constant_predictor(int cls) {
  auto m = build_model(tiny_model());
  for (auto& v : m.heads[0].weight.values()) v = 0.0f;
  m.heads[0].bias[static_cast<std::size_t>(cls)] = 5.0f;
  return m;
}

Dataset labelled(const std::vector<std::pair<int, int>>& orig_assigned) {
  Dataset d;
  d.n_classes = 2;
  d.vocab_size = 24;
  for (const auto& [o, a] : orig_assigned) {
    Example e;
    e.tokens = {1, 5, 7};
    e.original_label = o;
    e.assigned_label = a;
    e.noisy = o != a;
    e.example_id = static_cast<std::int64_t>(d.examples.size());
    d.examples.push_back(e);
  }
  return d;
}

}  // namespace

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.epochs = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = quick();
  nlohmann::json j = t;
  EXPECT_EQ(j.get<TrainConfig>(), t);
}

TEST(Evaluate, MemorisationErrorArithmetic) {
  const auto zero = constant_predictor(0);
  // All noisy examples carry assigned label 0, which is always predicted.
  auto d = labelled({{1, 0}, {1, 0}, {0, 0}});
  EXPECT_EQ(*evaluate(zero, d).memorisation_error, 0.0);
  // All noisy examples carry assigned label 1, never predicted.
  d = labelled({{0, 1}, {0, 1}, {1, 1}});
  EXPECT_EQ(*evaluate(zero, d).memorisation_error, 1.0);
  // 3 of 10 noisy examples are assigned 1.
  std::vector<std::pair<int, int>> rows;
  for (int i = 0; i < 7; ++i) rows.emplace_back(1, 0);
  for (int i = 0; i < 3; ++i) rows.emplace_back(0, 1);
  rows.emplace_back(0, 0);
  const auto r = evaluate(zero, labelled(rows));
  EXPECT_DOUBLE_EQ(*r.memorisation_error, 0.3);
  EXPECT_DOUBLE_EQ(*r.clean_error, 0.0);
  EXPECT_FALSE(evaluate(zero, labelled({{0, 0}, {1, 1}})).memorisation_error.has_value());
}

TEST(Evaluate, OriginalLabelField) {
  const auto one = constant_predictor(1);
  const auto d = labelled({{1, 0}, {1, 0}, {0, 0}, {0, 0}});
  EXPECT_DOUBLE_EQ(evaluate(one, d, LabelField::Original).accuracy, 0.5);
  EXPECT_DOUBLE_EQ(evaluate(one, d, LabelField::Assigned).accuracy, 0.0);
  const auto r = evaluate(one, d, LabelField::Original);
  EXPECT_GT(r.label_probability[0], 0.5f);
  EXPECT_LT(r.label_probability[2], 0.5f);
}

TEST(Evaluate, EvalBatchSizeDoesNotChangeResults) {
  const auto m = build_model(tiny_model());
  const auto d = generate_task(tiny_task()).train;
  const auto a = evaluate(m, d, LabelField::Assigned, 0, 7);
  const auto b = evaluate(m, d, LabelField::Assigned, 0, 128);
  EXPECT_EQ(a.predictions, b.predictions);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(a.label_probability[i], b.label_probability[i], 1e-6);
}

TEST(ValidationScore, AffineChanceCorrection) {
  EXPECT_DOUBLE_EQ(normalised_accuracy(0.5, 2), 0.0);
  EXPECT_DOUBLE_EQ(normalised_accuracy(1.0, 2), 1.0);
  EXPECT_DOUBLE_EQ(normalised_accuracy(0.75, 2), 0.5);
  EXPECT_DOUBLE_EQ(normalised_accuracy(0.2, 4), 0.0);
  EXPECT_DOUBLE_EQ(normalised_accuracy(0.25, 4), 0.0);
  Dataset empty;
  EXPECT_THROW(validation_score(build_model(tiny_model()), empty, 2), DataError);
}

TEST(Finetune, DeterministicAndEmbeddingsFrozen) {
  const auto task = generate_task(tiny_task());
  const auto noisy = perturb_labels(task.train, 0.15, 5);
  const auto p = build_model(tiny_model());
  const auto a = finetune(p, noisy, quick(), &task.val);
  const auto b = finetune(p, noisy, quick(), &task.val);
  EXPECT_TRUE(bitwise_equal(a.theta_m2, b.theta_m2));
  EXPECT_TRUE(embeddings_bitwise_equal(a.theta_m2, p));
  EXPECT_FALSE(bitwise_equal(a.theta_m2.blocks[0].w1, p.blocks[0].w1));
  ASSERT_EQ(a.curve.size(), 4u);
  EXPECT_TRUE(a.curve.back().val_accuracy.has_value());
  const auto o = train_original(p, noisy, quick());
  EXPECT_TRUE(embeddings_bitwise_equal(o.theta_m2, p));
  EXPECT_EQ(o.first_epoch_ids, a.first_epoch_ids);
  EXPECT_FALSE(bitwise_equal(o.theta_m2, a.theta_m2));
}

TEST(Finetune, ZeroNoiseTwinIsIdentical) {
  const auto task = generate_task(tiny_task());
  const auto clean = perturb_labels(task.train, 0.0, 5);
  const auto p = build_model(tiny_model());
  const auto a = finetune(p, clean, quick(3));
  const auto o = train_original(p, clean, quick(3));
  EXPECT_TRUE(bitwise_equal(a.theta_m2, o.theta_m2));
  ASSERT_EQ(a.curve.size(), o.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].train_loss, o.curve[i].train_loss);
}

TEST(Finetune, EpochOrderIsLabelIndependentAndSeeded) {
  EXPECT_EQ(detail::epoch_order(50, 3, 1, 0), detail::epoch_order(50, 3, 1, 0));
  EXPECT_NE(detail::epoch_order(50, 3, 1, 0), detail::epoch_order(50, 3, 2, 0));
  EXPECT_NE(detail::epoch_order(50, 3, 1, 0), detail::epoch_order(50, 4, 1, 0));
}

TEST(Finetune, ThetaM1IsFirstEpochAboveThreshold) {
  const auto task = generate_task(tiny_task());
  const auto p = build_model(tiny_model());
  auto cfg = quick(12);
  cfg.m1_threshold = 0.9;
  const auto r = finetune(p, task.train, cfg);
  ASSERT_TRUE(r.theta_m1.has_value());
  EXPECT_GT(r.m1_accuracy, 0.9);
  for (const auto& e : r.curve) {
    if (e.epoch < r.m1_epoch) {
      EXPECT_LE(e.train_accuracy, 0.9);
    }
  }
  EXPECT_DOUBLE_EQ(evaluate(*r.theta_m1, task.train).accuracy, r.m1_accuracy);
}

TEST(Finetune, IncompatibleDataRejected) {
  auto spec = tiny_task();
  spec.n_classes = 3;
  EXPECT_THROW(finetune(build_model(tiny_model()), generate_task(spec).train, quick()), ConfigError);
  spec = tiny_task();
  spec.vocab_size = 40;
  EXPECT_THROW(finetune(build_model(tiny_model()), generate_task(spec).train, quick()), ConfigError);
}

TEST(Control, NoisyStepsOnlyTouchDesignatedLayers) {
  auto mc = tiny_model();
  mc.n_layers = 4;
  mc.aux_head_classes = {2};
  const auto p = build_model(mc);
  const auto main_task = generate_task(tiny_task(TaskKind::SurfaceKeyToken, 7, 48)).train;
  const auto noisy = perturb_labels(generate_task(tiny_task(TaskKind::OrderSensitive, 8, 48)).train, 0.15, 2);
  int noisy_steps = 0, main_steps = 0;
  auto observer = [&](const ModelState& before, const ModelState& after, int task) {
    EXPECT_TRUE(embeddings_bitwise_equal(before, after));
    if (task == 0) {
      ++main_steps;
      EXPECT_TRUE(bitwise_equal(before.heads[1].weight, after.heads[1].weight));
      return;
    }
    ++noisy_steps;
    for (int l : {1, 4}) {
      EXPECT_TRUE(bitwise_equal(before.blocks[l - 1].wq, after.blocks[l - 1].wq));
      EXPECT_TRUE(bitwise_equal(before.blocks[l - 1].w2, after.blocks[l - 1].w2));
    }
    EXPECT_FALSE(bitwise_equal(before.blocks[1].w1, after.blocks[1].w1));
    EXPECT_TRUE(bitwise_equal(before.heads[0].weight, after.heads[0].weight));
    EXPECT_TRUE(bitwise_equal(before.heads[0].ln_gain, after.heads[0].ln_gain));
  };
  auto cfg = quick(2);
  cfg.control_accuracy_target = 0.0;  // no retry in this check
  const auto r = control_finetune(p, main_task, noisy, {3, 2}, cfg, observer);
  EXPECT_EQ(r.designated, (std::vector<int>{2, 3}));
  EXPECT_EQ(noisy_steps, 2 * 6);
  EXPECT_EQ(main_steps, 2 * 6);
  EXPECT_FALSE(r.retried);
}

TEST(Control, NoisyMaskGradientIsExactlyZeroOutsideDesignated) {
  auto mc = tiny_model();
  mc.n_layers = 4;
  mc.aux_head_classes = {2};
  const auto p = build_model(mc);
  const auto noisy = perturb_labels(generate_task(tiny_task(TaskKind::OrderSensitive, 8, 16)).train, 0.25, 2);
  Trainability mask = Trainability::none(4, 2);
  mask.blocks[3] = mask.blocks[2] = true;
  mask.heads[1] = true;
  Tape tape;
  auto vars = bind_parameters(tape, p, mask);
  std::vector<std::size_t> idx(noisy.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  ForwardOptions fo;
  fo.head = 1;
  auto out = forward(tape, mc, vars, detail::make_batch(noisy, idx), fo);
  std::vector<std::int32_t> y;
  for (const auto& e : noisy.examples) y.push_back(e.assigned_label);
  tape.backward(softmax_cross_entropy(out.logits, std::span<const std::int32_t>(y)).loss);
  double outside = 0.0, inside = 0.0;
  for (std::size_t l = 0; l < 4; ++l)
    visit_block(vars.blocks[l], [&](const char*, const Var& v) {
      const Tensor g = tape.grad(v);
      for (float x : g.values()) (l >= 2 ? inside : outside) += std::abs(x);
    });
  EXPECT_EQ(outside, 0.0);
  EXPECT_GT(inside, 0.0);
}

TEST(Control, DesignatedLayersValidated) {
  auto mc = tiny_model();
  mc.aux_head_classes = {2};
  const auto p = build_model(mc);
  const auto d = generate_task(tiny_task()).train;
  EXPECT_THROW(control_finetune(p, d, d, {1, 2, 3}, quick(1)), ParameterError);
  EXPECT_THROW(control_finetune(p, d, d, {1, 3}, quick(1)), ParameterError);
  EXPECT_THROW(control_finetune(p, d, d, {2, 2}, quick(1)), ParameterError);
  EXPECT_THROW(control_finetune(build_model(tiny_model()), d, d, {1, 2}, quick(1)), ConfigError);
}

TEST(GeneralisationScore, SeparableTaskScoresHigh) {
  auto mc = tiny_model();
  const auto data = generate_task(tiny_task(TaskKind::SurfaceKeyToken, 3, 120)).train;
  const auto r = generalisation_score(data, mc, quick(20), 3);
  EXPECT_GE(r.score, 0.9);
  EXPECT_EQ(r.pairs, 3u * 60u);
  EXPECT_EQ(r.per_seed.size(), 3u);
}

TEST(GeneralisationScore, RandomLabelsNearChance) {
  auto data = generate_task(tiny_task(TaskKind::SurfaceKeyToken, 3, 120)).train;
  Rng rng(99);
  for (auto& e : data.examples) e.original_label = e.assigned_label = static_cast<int>(uniform_index(rng, 2));
  const auto r = generalisation_score(data, tiny_model(), quick(8), 3);
  EXPECT_NEAR(r.score, 0.5, 0.1);
}

TEST(GeneralisationScore, SingleSeedIsOneSplit) {
  const auto data = generate_task(tiny_task(TaskKind::SurfaceKeyToken, 3, 40)).train;
  auto tc = quick(2);
  const auto r = generalisation_score(data, tiny_model(), tc, 1);
  const auto split_seed = derive_seed(tc.seed, 0x6e00);
  auto [train, held] = half_split(data, split_seed);
  auto mc = tiny_model();
  mc.seed = derive_seed(mc.seed, 0x6f00);
  tc.seed = split_seed;
  const auto ev = evaluate(finetune(build_model(mc), train, tc).theta_m2, held, LabelField::Original);
  std::size_t hits = 0;
  for (float p : ev.label_probability) hits += p > 0.5f ? 1 : 0;
  EXPECT_DOUBLE_EQ(r.score, static_cast<double>(hits) / static_cast<double>(held.size()));
  EXPECT_THROW(generalisation_score(data, tiny_model(), tc, 0), ParameterError);
}

TEST(Curves, CsvShape) {
  TrainResult r;
  r.curve.push_back({1, 0.5, 0.75, std::nullopt});
  r.curve.push_back({2, 0.25, 1.0, 0.5});
  EXPECT_EQ(curves_csv(r), "epoch,train_loss,train_acc,val_acc\n1,0.500000,0.750000,\n2,0.250000,1.000000,0.500000\n");
}
