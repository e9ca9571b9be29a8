#include <gtest/gtest.h>

#include <cmath>

#include "persona_guard.hpp"
#include "support/fixtures.hpp"
#include "support/properties.hpp"

namespace pg = persona_guard;
namespace checks = persona_guard::checks;
using pg::ErrorCode;
using pg::testing::error_code;
using pg::testing::TempDir;

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, ChatbotRoundTrip) {
  TempDir dir;
  const auto data = checks::tiny_data(2);
  const pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 21);
  pg::save_chatbot(dir.path / "m.ckpt", model, {{"variant", "LM"}});
  const auto loaded = pg::load_chatbot<float>(dir.path / "m.ckpt");
  EXPECT_EQ(loaded.model.checksum(), model.checksum());
  EXPECT_EQ(loaded.meta.at("variant"), "LM");
  EXPECT_EQ(loaded.model.vocab().size(), model.vocab().size());
  EXPECT_EQ(pg::to_json(loaded.model.config()), pg::to_json(model.config()));
}

TEST(Checkpoint, ClassifierRoundTrip) {
  TempDir dir;
  const pg::PersonaClassifier<float> clf(8, 5, 3, 4);
  const pg::PersonaCatalog catalog{{"x .", "y .", "z ."}};
  pg::save_classifier(dir.path / "a.ckpt", clf, catalog);
  const auto loaded = pg::load_classifier<float>(dir.path / "a.ckpt");
  EXPECT_EQ(loaded.model.checksum(), clf.checksum());
  EXPECT_EQ(loaded.catalog, catalog);
}

TEST(Checkpoint, CorruptionIsAParseError) {
  TempDir dir;
  const auto data = checks::tiny_data(2);
  const pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 21);
  const auto path = dir.path / "m.ckpt";
  pg::save_chatbot(path, model);
  const auto bytes = pg::read_file(path);

  pg::write_file_atomic(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(error_code([&] { pg::load_chatbot<float>(path); }), ErrorCode::parse);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  pg::write_file_atomic(path, bad_magic);
  EXPECT_EQ(error_code([&] { pg::load_chatbot<float>(path); }), ErrorCode::parse);

  pg::write_file_atomic(path, bytes);
  EXPECT_EQ(error_code([&] { pg::load_classifier<float>(path); }), ErrorCode::parse);
}

TEST(Checkpoint, MissingFile) {
  TempDir dir;
  EXPECT_EQ(error_code([&] { pg::load_chatbot<float>(dir.path / "none.ckpt"); }), ErrorCode::missing_checkpoint);
  EXPECT_EQ(error_code([&] { pg::load_classifier<float>(dir.path / "none.ckpt"); }), ErrorCode::missing_checkpoint);
}

// ---------------------------------------------------------------------------
// Attacker

namespace {

pg::AttackDataset noise_dataset(pg::Rng& rng, std::size_t n, int dim, int classes) {
  pg::AttackDataset d;
  d.dim = dim;
  d.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < dim; ++j) d.embeddings.push_back(static_cast<float>(rng.normal()));
    d.records.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))), "n" + std::to_string(i), 0});
  }
  return d;
}

}  // namespace

TEST(Attack, NoiseEmbeddingsStayAtChance) {
  pg::Rng rng(5);
  const int C = 16;
  const auto train = noise_dataset(rng, 1600, 16, C);
  const auto val = noise_dataset(rng, 400, 16, C);
  const auto test = noise_dataset(rng, 3000, 16, C);
  pg::AttackerSettings s;
  s.hidden = 32;
  s.epochs = 5;
  const auto attacker = pg::train_attacker<float>(train, &val, s);
  const double acc = pg::classifier_accuracy(attacker, test);
  const double p = 1.0 / C;
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(test.size()));
  EXPECT_NEAR(acc, p, 3 * sigma);
}

TEST(Attack, HandBuiltClassifier) {
  // Two inputs, two hidden units, two classes; the ReLU zeroes unit 1.
  std::vector<float> values{
      1.0f, -1.0f,  // fc1.w row 0
      0.5f, 2.0f,   // fc1.w row 1
      0.0f, -3.0f,  // fc1.b
      2.0f, 0.0f,   // fc2.w row 0
      0.0f, 1.0f,   // fc2.w row 1
      0.1f, -0.1f,  // fc2.b
  };
  const auto clf = pg::PersonaClassifier<double>::from_params(2, 2, 2, values);
  const std::vector<double> x{1.0, 0.5};
  // pre = (1.25, -3), hidden = (1.25, 0), logits = (2.6, -0.1)
  const auto p = clf.predict(x);
  const double z0 = 2.5 + 0.1, z1 = -0.1;
  const double e0 = std::exp(z0), e1 = std::exp(z1);
  EXPECT_NEAR(p[0], e0 / (e0 + e1), 1e-6);
  EXPECT_NEAR(p[1], e1 / (e0 + e1), 1e-6);
}

TEST(Attack, DimensionMismatchRejected) {
  const pg::PersonaClassifier<float> clf(4, 3, 2, 1);
  const std::vector<float> x(5, 0.0f);
  EXPECT_EQ(error_code([&] { clf.predict(x); }), ErrorCode::dimension);
}

TEST(Attack, DatasetRoundTrip) {
  TempDir dir;
  pg::Rng rng(3);
  const auto d = noise_dataset(rng, 25, 6, 4);
  pg::save_attack_dataset(d, dir.path / "t.bin", dir.path / "t.jsonl");
  const auto back = pg::load_attack_dataset(dir.path / "t.bin", dir.path / "t.jsonl");
  EXPECT_EQ(back.dim, d.dim);
  EXPECT_EQ(back.num_classes, d.num_classes);
  EXPECT_EQ(back.embeddings, d.embeddings);
  EXPECT_EQ(back.labels(), d.labels());
  EXPECT_EQ(back.records[7].dialog_id, d.records[7].dialog_id);
}

TEST(Attack, ExtractionCoversEveryLabeledTurn) {
  const auto data = checks::tiny_data(8);
  const pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 2);
  std::size_t labeled = 0;
  for (const auto& c : data.train.conversations)
    for (const auto& t : c.turns) labeled += t.labeled() ? 1 : 0;
  const auto d = pg::extract_attack_dataset(model, data.train);
  EXPECT_EQ(d.size(), labeled);
  EXPECT_EQ(d.dim, model.config().model_dim);
  EXPECT_EQ(d.num_classes, data.train.catalog.size());
  const auto pooled = pg::extract_attack_dataset(model, data.train, pg::EmbeddingMode::mean_pooled);
  EXPECT_EQ(pooled.size(), labeled);
  EXPECT_NE(pooled.embeddings, d.embeddings);
}

TEST(Attack, EmptyTrainingSetRejected) {
  pg::AttackDataset empty;
  empty.dim = 4;
  empty.num_classes = 2;
  EXPECT_EQ(error_code([&] { pg::train_attacker<float>(empty, nullptr, {}); }), ErrorCode::empty_dataset);
}

// ---------------------------------------------------------------------------
// Defense losses

TEST(Defense, KlOfOneHotUsesTheFloor) {
  const double C = 4;
  const double expected = -std::log(C) - (3 * std::log(1e-9) + std::log(1.0)) / C;
  EXPECT_NEAR(pg::kl_uniform_loss({1.0, 0.0, 0.0, 0.0}), expected, 1e-9);
  EXPECT_TRUE(std::isfinite(pg::kl_uniform_loss({1.0, 0.0, 0.0, 0.0})));
}

TEST(Defense, KlTwoClassValue) {
  EXPECT_NEAR(pg::kl_uniform_loss({0.75, 0.25}), 0.14384, 1e-5);
  EXPECT_NEAR(pg::kl_uniform_loss({0.25, 0.25, 0.25, 0.25}), 0.0, 1e-15);
}

TEST(Defense, KlRejectsInvalidDistributions) {
  EXPECT_EQ(error_code([] { pg::kl_uniform_loss({0.5, 0.6}); }), ErrorCode::validation);
  EXPECT_EQ(error_code([] { pg::kl_uniform_loss({1.5, -0.5}); }), ErrorCode::validation);
  EXPECT_EQ(error_code([] { pg::kl_uniform_loss(std::span<const double>{}); }), ErrorCode::validation);
}

TEST(Defense, MiEmbeddingGradientsAreOpposite) {
  pg::PersonaClassifier<double> fake(5, 7, 3, 11);
  std::vector<double> e{0.3, -0.2, 0.8, 0.1, -0.5};
  const int label = 2;
  // Analytic gradient of L_mi1 through the classifier.
  pg::PersonaClassifier<double>::Cache cache;
  fake.forward(e, 1, cache);
  auto p = pg::softmax_rows(std::span<const double>(cache.logits), 1, 3);
  std::vector<double> d_mi1 = p, d_mi2 = p;
  d_mi1[label] -= 1;
  for (auto& v : d_mi2) v = -v;
  d_mi2[label] += 1;
  std::vector<double> g1(5, 0.0), g2(5, 0.0);
  fake.backward(cache, d_mi1, false, g1.data());
  fake.backward(cache, d_mi2, false, g2.data());
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(g2[i], -g1[i], 1e-12);
    auto plus = e, minus = e;
    plus[i] += 1e-6;
    minus[i] -= 1e-6;
    const auto mp = pg::mi_losses(fake, std::span<const double>(plus), label);
    const auto mm = pg::mi_losses(fake, std::span<const double>(minus), label);
    const double fd1 = (mp.mi1 - mm.mi1) / 2e-6;
    const double fd2 = (mp.mi2 - mm.mi2) / 2e-6;
    EXPECT_NEAR(fd1, g1[i], 1e-6);
    EXPECT_NEAR(fd2, -fd1, 1e-6);
  }
  const auto m = pg::mi_losses(fake, std::span<const double>(e), label);
  EXPECT_EQ(m.mi1 + m.mi2, 0.0);
}

TEST(Defense, CombinedMiLoss) {
  pg::DefenseConfig cfg;
  cfg.lambda0 = 2.0;
  EXPECT_DOUBLE_EQ(pg::combined_mi_loss(cfg, 1.5, -1.5), 1.5);
  cfg.lambda0 = 1.0;
  EXPECT_DOUBLE_EQ(pg::combined_mi_loss(cfg, 1.5, -1.5), 0.0);
}

TEST(Defense, RatioWarningAndStrictError) {
  pg::DefenseConfig cfg;
  cfg.lambda1 = 5;
  cfg.lambda2 = 1;
  ::testing::internal::CaptureStderr();
  EXPECT_FALSE(cfg.check());
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("warning"), std::string::npos);
  cfg.strict_ratio = true;
  EXPECT_EQ(error_code([&] { cfg.check(); }), ErrorCode::config);
  cfg.lambda1 = 10;
  EXPECT_TRUE(cfg.check());
  cfg.lambda0 = -1;
  EXPECT_EQ(error_code([&] { cfg.check(); }), ErrorCode::config);
}

TEST(Defense, SimplifiedKlIsConstant) {
  const std::vector<double> p{0.6, 0.3, 0.1};
  EXPECT_NEAR(pg::kl_variant_value(std::span<const double>(p), pg::KlVariant::simplified), -1.0 / 3, 1e-15);
  std::vector<double> g(3, 0.0);
  pg::kl_uniform_logit_grad(std::span<const double>(p), pg::KlVariant::simplified, 1.0, g.data());
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-15);
  pg::kl_uniform_logit_grad(std::span<const double>(p), pg::KlVariant::exact, 1.0, g.data());
  EXPECT_NEAR(g[0], 0.6 - 1.0 / 3, 1e-15);
}

TEST(Defense, UnlabeledCorpusRejectedWhenDefending) {
  auto data = checks::tiny_data(3);
  for (auto& c : data.train.conversations)
    for (auto& t : c.turns) t.persona_id = pg::kUnlabeled;
  pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 1);
  pg::DefenseConfig cfg;
  cfg.predictor_hidden = 4;
  auto fake = pg::make_fake_attacker(model, data.train.catalog.size(), cfg);
  EXPECT_EQ(error_code([&] { pg::train_defended(model, fake, data.train, cfg); }), ErrorCode::empty_dataset);
}

TEST(Defense, StepReportsAllComponents) {
  const auto data = checks::tiny_data(4);
  pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 1);
  pg::DefenseConfig cfg;
  cfg.predictor_hidden = 8;
  cfg.chatbot.epochs = 1;
  auto fake = pg::make_fake_attacker(model, data.train.catalog.size(), cfg);
  const auto h = pg::train_defended(model, fake, data.train, cfg);
  ASSERT_FALSE(h.steps.empty());
  for (const auto& r : h.steps) {
    EXPECT_GT(r.lm, 0.0);
    EXPECT_GE(r.kl, 0.0);
    EXPECT_EQ(r.mi2, -r.mi1);
    EXPECT_NEAR(r.total, r.lm + cfg.lambda1 * r.kl + cfg.lambda2 * r.mi, 1e-9);
  }
  ASSERT_EQ(h.epochs.size(), 1u);
}

TEST(Defense, MimicPredictorSkipsTheKlGradient) {
  const auto data = checks::tiny_data(5);
  pg::ChatbotModel<double> model(checks::tiny_lm(), data.vocab, 2);
  pg::DefenseConfig cfg;
  cfg.predictor_hidden = 6;
  cfg.lambda0 = 0.7;
  cfg.lambda2 = 1.3;
  auto fake = pg::make_fake_attacker(model, data.train.catalog.size(), cfg);
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  const auto pred_grads = [&](const pg::DefenseConfig& c) {
    model.zero_grad();
    fake.zero_grad();
    pg::defended_gradients(model, fake, data.train, batch, c, nullptr);
    return std::vector<double>(fake.grads().begin(), fake.grads().end());
  };
  auto mimic = cfg;
  mimic.predictor_objective = pg::PredictorObjective::mimic;
  auto joint_no_kl = cfg;
  joint_no_kl.lambda1 = 0;
  const auto a = pred_grads(mimic);
  const auto b = pred_grads(joint_no_kl);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << i;
}

TEST(Defense, MimicPredictorOnlyLearnsWithMi) {
  const auto data = checks::tiny_data(6);
  for (bool mi : {false, true}) {
    pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 1);
    pg::DefenseConfig cfg;
    cfg.predictor_hidden = 8;
    cfg.chatbot.epochs = 1;
    cfg.enable_mi = mi;
    cfg.predictor_objective = pg::PredictorObjective::mimic;
    cfg.predictor_steps = 2;
    cfg.predictor_replay = 16;
    cfg.predictor_batch = 8;
    auto fake = pg::make_fake_attacker(model, data.train.catalog.size(), cfg);
    const std::vector<float> before(fake.params().begin(), fake.params().end());
    pg::train_defended(model, fake, data.train, cfg);
    const std::vector<float> after(fake.params().begin(), fake.params().end());
    EXPECT_EQ(before != after, mi) << "enable_mi " << mi;
  }
}

TEST(Defense, ReplayTrainingIsDeterministic) {
  const auto data = checks::tiny_data(7);
  std::vector<std::vector<float>> runs;
  for (int i = 0; i < 2; ++i) {
    pg::ChatbotModel<float> model(checks::tiny_lm(), data.vocab, 1);
    pg::DefenseConfig cfg;
    cfg.predictor_hidden = 8;
    cfg.chatbot.epochs = 1;
    cfg.predictor_objective = pg::PredictorObjective::mimic;
    cfg.predictor_steps = 3;
    cfg.predictor_replay = 16;
    cfg.predictor_batch = 8;
    auto fake = pg::make_fake_attacker(model, data.train.catalog.size(), cfg);
    pg::train_defended(model, fake, data.train, cfg);
    std::vector<float> all(model.params().begin(), model.params().end());
    all.insert(all.end(), fake.params().begin(), fake.params().end());
    runs.push_back(std::move(all));
  }
  EXPECT_EQ(runs[0], runs[1]);
}
