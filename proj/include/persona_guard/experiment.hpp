#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "persona_guard/attack.hpp"
#include "persona_guard/corpus.hpp"
#include "persona_guard/defense.hpp"
#include "persona_guard/lm.hpp"
#include "persona_guard/metrics.hpp"
#include "persona_guard/tokenizer.hpp"

namespace persona_guard {

enum class Variant { lm, lm_kl, lm_mi, lm_kl_mi };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::lm: return "LM";
    case Variant::lm_kl: return "LM+KL";
    case Variant::lm_mi: return "LM+MI";
    case Variant::lm_kl_mi: return "LM+KL+MI";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::lm, Variant::lm_kl, Variant::lm_mi, Variant::lm_kl_mi})
    if (to_string(v) == s) return v;
  fail(ErrorCode::config, "unknown model variant " + s);
}

/// Directory-safe variant name ("LM+KL+MI" -> "lm_kl_mi").
inline std::string slug(Variant v) {
  switch (v) {
    case Variant::lm: return "lm";
    case Variant::lm_kl: return "lm_kl";
    case Variant::lm_mi: return "lm_mi";
    case Variant::lm_kl_mi: return "lm_kl_mi";
  }
  return "unknown";
}

struct UnseenSetup {
  std::vector<int> adversary_only_labels{0, 1, 2, 3};
  ImbalancedCounts counts{1000, 700, 300};
};

/// Everything that determines a run. Per-component seeds are derived from
/// `seed`, so one number reproduces the whole pipeline.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  /// Conversations JSONL to ingest; empty means synthesize from `synth`.
  std::string corpus_path;
  SynthSpec synth;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  VocabOptions vocab;
  LMConfig lm;
  LmTrainSettings lm_train{OptimizerSettings{3e-3, 0.9, 0.999, 1e-8, 0.01, 20, 1.0}, 3, 4, -1, LossMask::all_turns, 0};
  DefenseConfig defense = default_defense();
  std::vector<Variant> defended_variants{Variant::lm_kl_mi};
  AttackerSettings attacker;
  GenerationSettings generation;
  int utility_samples = 200;
  std::vector<int> topk{1, 2, 4};
  UnseenSetup unseen;

  static DefenseConfig default_defense() {
    DefenseConfig d;
    d.predictor = OptimizerSettings{3e-3, 0.9, 0.999, 1e-8, 0.01, 0, 0.0};
    d.predictor_steps = 20;
    d.predictor_replay = 512;
    d.predictor_objective = PredictorObjective::mimic;
    return d;
  }

  /// LM settings with the run seed applied.
  LmTrainSettings lm_settings() const {
    auto s = lm_train;
    s.seed = seed;
    return s;
  }

  /// Defense settings for one variant. The chatbot side shares the LM
  /// schedule and seed so the weights are the only difference.
  DefenseConfig defense_for(Variant v) const {
    auto d = defense;
    d.chatbot = lm_settings();
    d.enable_kl = v == Variant::lm_kl || v == Variant::lm_kl_mi;
    d.enable_mi = v == Variant::lm_mi || v == Variant::lm_kl_mi;
    return d;
  }
};

inline json to_json(const ExperimentConfig& c) {
  json variants = json::array();
  for (auto v : c.defended_variants) variants.push_back(to_string(v));
  json d = to_json(c.defense);
  // Chatbot settings come from lm_train; flags from the variant list.
  for (const char* k : {"chatbot", "lr_chatbot", "warmup_steps", "epochs", "seed", "enable_kl", "enable_mi"}) d.erase(k);
  return {{"seed", c.seed},
          {"corpus_path", c.corpus_path},
          {"synth", to_json(c.synth)},
          {"split_ratios", c.split_ratios},
          {"vocab", {{"max_size", c.vocab.max_size}, {"min_count", c.vocab.min_count}}},
          {"lm", to_json(c.lm)},
          {"lm_train", to_json(c.lm_train)},
          {"defense", d},
          {"defended_variants", variants},
          {"attacker", to_json(c.attacker)},
          {"generation",
           {{"top_p", c.generation.top_p}, {"temperature", c.generation.temperature}, {"max_tokens", c.generation.max_tokens}}},
          {"utility_samples", c.utility_samples},
          {"topk", c.topk},
          {"unseen",
           {{"adversary_only_labels", c.unseen.adversary_only_labels},
            {"defender", c.unseen.counts.defender},
            {"adversary", c.unseen.counts.adversary},
            {"test", c.unseen.counts.test}}}};
}

/// Reads a config; absent keys keep their defaults.
inline ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.corpus_path = j.value("corpus_path", c.corpus_path);
  if (j.contains("synth")) c.synth = synth_spec_from_json(j["synth"]);
  if (j.contains("split_ratios")) c.split_ratios = j["split_ratios"].get<std::array<double, 3>>();
  if (j.contains("vocab")) {
    c.vocab.max_size = j["vocab"].value("max_size", c.vocab.max_size);
    c.vocab.min_count = j["vocab"].value("min_count", c.vocab.min_count);
  }
  if (j.contains("lm")) c.lm = lm_config_from_json(j["lm"], c.lm);
  if (j.contains("lm_train")) c.lm_train = lm_train_settings_from_json(j["lm_train"], c.lm_train);
  if (j.contains("defense")) c.defense = defense_config_from_json(j["defense"], c.defense);
  if (j.contains("defended_variants")) {
    c.defended_variants.clear();
    for (const auto& v : j["defended_variants"]) {
      const auto variant = variant_from_string(v.get<std::string>());
      require(variant != Variant::lm, ErrorCode::config, "defended_variants cannot contain LM");
      c.defended_variants.push_back(variant);
    }
  }
  if (j.contains("attacker")) c.attacker = attacker_settings_from_json(j["attacker"], c.attacker);
  if (j.contains("generation")) {
    const auto& g = j["generation"];
    c.generation.top_p = g.value("top_p", c.generation.top_p);
    c.generation.temperature = g.value("temperature", c.generation.temperature);
    c.generation.max_tokens = g.value("max_tokens", c.generation.max_tokens);
  }
  c.utility_samples = j.value("utility_samples", c.utility_samples);
  if (j.contains("topk")) c.topk = j["topk"].get<std::vector<int>>();
  if (j.contains("unseen")) {
    const auto& u = j["unseen"];
    c.unseen.adversary_only_labels = u.value("adversary_only_labels", c.unseen.adversary_only_labels);
    c.unseen.counts.defender = u.value("defender", c.unseen.counts.defender);
    c.unseen.counts.adversary = u.value("adversary", c.unseen.counts.adversary);
    c.unseen.counts.test = u.value("test", c.unseen.counts.test);
  }
  for (int k : c.topk) require(k >= 1, ErrorCode::config, "topk entries must be positive");
  require(c.utility_samples >= 0, ErrorCode::config, "utility_samples must be non-negative");
  return c;
}

/// Hash of the canonical config JSON; stamped on every artifact.
inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// In-memory pipeline

struct PreparedData {
  AlignedCorpus corpus;
  AlignedCorpus train;
  AlignedCorpus validation;
  AlignedCorpus test;
  Vocab vocab;
};

inline AlignedCorpus synthesize(const ExperimentConfig& cfg) {
  if (!cfg.corpus_path.empty()) return ingest_jsonl(cfg.corpus_path);
  auto spec = cfg.synth;
  spec.vocab_seed = derive_seed(cfg.seed, "synth");
  return synthesize_corpus(spec);
}

/// Splits a corpus and builds the vocabulary over all of it.
inline PreparedData prepare(AlignedCorpus corpus, const ExperimentConfig& cfg) {
  PreparedData p;
  SplitSpec spec;
  spec.ratios = cfg.split_ratios;
  spec.seed = derive_seed(cfg.seed, "split");
  std::tie(p.train, p.validation, p.test) = split(corpus, spec);
  p.vocab = build_vocab(corpus, cfg.vocab);
  p.corpus = std::move(corpus);
  return p;
}

inline PreparedData prepare(const ExperimentConfig& cfg) { return prepare(synthesize(cfg), cfg); }

inline ChatbotModel<float> initial_model(const ExperimentConfig& cfg, const Vocab& vocab) {
  return ChatbotModel<float>(cfg.lm, vocab, derive_seed(cfg.seed, "lm-init"));
}

struct TrainedVariant {
  Variant variant = Variant::lm;
  ChatbotModel<float> model;
  std::optional<FakeAttacker<float>> fake;
  std::vector<double> lm_step_loss;
  std::optional<DefenseHistory> defense_history;
};

inline TrainedVariant train_variant(const ExperimentConfig& cfg, const AlignedCorpus& train, const Vocab& vocab,
                                    Variant variant, const std::function<void(int, double)>& on_step = {}) {
  TrainedVariant out;
  out.variant = variant;
  out.model = initial_model(cfg, vocab);
  if (variant == Variant::lm) {
    out.lm_step_loss = train_lm(out.model, train, cfg.lm_settings(), on_step).step_loss;
    return out;
  }
  const auto dcfg = cfg.defense_for(variant);
  auto fake = make_fake_attacker(out.model, train.catalog.size(), dcfg);
  out.defense_history = train_defended(out.model, fake, train, dcfg, [&](int step, const StepReport& r) {
    if (on_step) on_step(step, r.total);
  });
  for (const auto& s : out.defense_history->steps) out.lm_step_loss.push_back(s.lm);
  out.fake = std::move(fake);
  return out;
}

struct AttackOutcome {
  AttackerModel<float> attacker;
  AttackDataset train;
  AttackDataset test;
  std::vector<Distribution> predictions;
  std::vector<int> labels;
  std::uint64_t chatbot_checksum_before = 0;
  std::uint64_t chatbot_checksum_after = 0;
};

/// Black-box attack: the adversary queries the frozen chatbot on its own
/// labeled data, trains a fresh attacker and predicts the test turns.
inline AttackOutcome run_attack(const ChatbotModel<float>& chatbot, const AlignedCorpus& adversary_train,
                                const AlignedCorpus& adversary_validation, const AlignedCorpus& test,
                                const ExperimentConfig& cfg) {
  AttackOutcome out;
  out.chatbot_checksum_before = chatbot.checksum();
  out.train = extract_attack_dataset(chatbot, adversary_train);
  std::optional<AttackDataset> val;
  if (!adversary_validation.empty()) {
    bool labeled = false;
    for (const auto& c : adversary_validation.conversations)
      for (const auto& t : c.turns) labeled = labeled || t.labeled();
    if (labeled) val = extract_attack_dataset(chatbot, adversary_validation);
  }
  auto settings = cfg.attacker;
  settings.seed = derive_seed(cfg.seed, "attacker");
  out.attacker = train_attacker<float>(out.train, val ? &*val : nullptr, settings);
  out.test = extract_attack_dataset(chatbot, test);
  out.predictions = predict_all(out.attacker, out.test);
  out.labels = out.test.labels();
  out.chatbot_checksum_after = chatbot.checksum();
  require(out.chatbot_checksum_before == out.chatbot_checksum_after, ErrorCode::validation,
          "chatbot parameters changed during the attack");
  return out;
}

/// Fake-attacker distributions on the same test turns, for the report.
inline std::vector<Distribution> fake_predictions(const FakeAttacker<float>& fake, const AttackDataset& test) {
  return predict_all(fake, test);
}

struct GeneratedResponses {
  std::vector<Tokens> candidates;
  std::vector<Tokens> references;
  std::vector<std::string> texts;
};

/// The model answers the last turn of the first `samples` test dialogs from
/// the preceding context; each reply has a seed derived from its dialog id.
inline GeneratedResponses generate_responses(const ChatbotModel<float>& model, const AlignedCorpus& test,
                                             const ExperimentConfig& cfg) {
  GeneratedResponses out;
  const auto n = std::min<std::size_t>(test.conversations.size(), static_cast<std::size_t>(cfg.utility_samples));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& conv = test.conversations[i];
    Conversation context{conv.dialog_id, {conv.turns.begin(), conv.turns.end() - 1}};
    auto settings = cfg.generation;
    settings.seed = derive_seed(cfg.seed, "generate:" + conv.dialog_id);
    const auto reply = generate(model, context, settings);
    out.texts.push_back(reply.text);
    out.candidates.push_back(tokenize(reply.text));
    out.references.push_back(tokenize(conv.turns.back().text));
  }
  return out;
}

inline UtilityReport evaluate_utility(const ChatbotModel<float>& model, const AlignedCorpus& test,
                                      const ExperimentConfig& cfg) {
  const double ppl = perplexity(model, test);
  const auto gen = generate_responses(model, test, cfg);
  return utility_report(ppl, gen.candidates, gen.references);
}

struct UnseenOutcome {
  Variant variant = Variant::lm_kl_mi;
  ImbalancedSplit split;
  TrainedVariant trained;
  AttackOutcome attack;
  PrivacyReport privacy;
  double random_pred = 0.0;
};

/// Defender trains without the adversary-only labels; the attacker learns
/// all labels from its own split and is scored on the held-out labels.
inline UnseenOutcome run_unseen(const ExperimentConfig& cfg, const AlignedCorpus& corpus, const Vocab& vocab,
                                Variant variant) {
  UnseenOutcome out;
  out.variant = variant;
  const std::set<int> held(cfg.unseen.adversary_only_labels.begin(), cfg.unseen.adversary_only_labels.end());
  out.split = imbalanced_split(corpus, held, cfg.unseen.counts, derive_seed(cfg.seed, "unseen-split"));
  out.trained = train_variant(cfg, out.split.defender, vocab, variant);
  AlignedCorpus no_validation;
  no_validation.catalog = corpus.catalog;
  out.attack = run_attack(out.trained.model, out.split.adversary, no_validation, out.split.test, cfg);
  out.privacy = privacy_report(out.attack.predictions, out.attack.labels, cfg.topk, cfg.unseen.adversary_only_labels);
  require(out.privacy.unseen.has_value(), ErrorCode::empty_dataset, "test split has no adversary-only labels");
  out.random_pred = 100.0 / corpus.catalog.size();
  return out;
}

}  // namespace persona_guard
