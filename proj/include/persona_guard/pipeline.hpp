#pragma once

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "persona_guard/checkpoint.hpp"
#include "persona_guard/cluster.hpp"
#include "persona_guard/experiment.hpp"

// On-disk experiment layout. One directory holds one immutable config
// snapshot plus everything derived from it:
//
//   config.json                      config snapshot
//   stages/<stage>.json              stage manifests (config hash, file hashes)
//   data/{corpus,train,validation,test}.jsonl, data/personas.jsonl, data/vocab.jsonl
//   models/<slug>.ckpt               chatbot checkpoints
//   models/<slug>.fake.ckpt          fake attacker of a defended model
//   models/<slug>.history.jsonl      per-step losses
//   attack/<slug>/...                attack datasets, attacker, predictions
//   eval/<slug>.json                 privacy and utility report of one model
//   report.json, report.md           table over all evaluated models
//   unseen/<slug>.json               unseen-label experiment
//   cluster/...                      persona clustering and relabeled splits

namespace persona_guard {

inline constexpr const char* kOutEnv = "PERSONA_GUARD_OUT";

inline std::string file_hash(const fs::path& path) { return hex64(fnv1a(read_file(path))); }

/// An experiment directory bound to its config.
class Workspace {
 public:
  /// Opens `root`. A snapshot already on disk wins unless `override_cfg`
  /// differs from it, which needs `force` and replaces the snapshot. With
  /// `create` false a missing snapshot means synth has not run.
  static Workspace open(const fs::path& root, std::optional<ExperimentConfig> override_cfg, bool force, bool create) {
    Workspace ws;
    ws.root_ = root;
    ws.force_ = force;
    const auto snapshot = root / "config.json";
    if (fs::exists(snapshot)) {
      const auto stored = experiment_config_from_json(json::parse(read_file(snapshot)));
      ws.cfg_ = stored;
      if (override_cfg && config_hash(*override_cfg) != config_hash(stored)) {
        require(force, ErrorCode::hash_mismatch,
                "config hash " + config_hash(*override_cfg) + " differs from the snapshot " + config_hash(stored) +
                    " in " + root.string() + " (use --force to replace it)");
        ws.cfg_ = *override_cfg;
        ws.write_snapshot();
      }
    } else {
      require(create, ErrorCode::stage_order, "no experiment at " + root.string() + "; run synth first");
      ws.cfg_ = override_cfg.value_or(ExperimentConfig{});
      ws.write_snapshot();
    }
    ws.hash_ = config_hash(ws.cfg_);
    return ws;
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const fs::path& root() const { return root_; }
  bool force() const { return force_; }

  fs::path path(const std::string& rel) const { return root_ / rel; }
  fs::path manifest_path(const std::string& stage) const { return root_ / "stages" / (manifest_name(stage) + ".json"); }

  bool has_stage(const std::string& stage) const { return fs::exists(manifest_path(stage)); }

  /// Records a finished stage with the hashes of its inputs and outputs.
  void record_stage(const std::string& stage, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, const json& info = json::object()) const {
    json in = json::object(), out = json::object();
    for (const auto& rel : inputs) in[rel] = file_hash(path(rel));
    for (const auto& rel : outputs) out[rel] = file_hash(path(rel));
    json m = {{"stage", stage}, {"config_hash", hash_}, {"inputs", in}, {"outputs", out}, {"info", info}};
    write_file_atomic(manifest_path(stage), m.dump(2) + "\n");
  }

  /// Checks that `stage` ran under this config and its outputs are intact.
  json require_stage(const std::string& stage, const std::string& needed_by) const {
    require(has_stage(stage), ErrorCode::stage_order, needed_by + " requires stage " + stage + " to run first");
    const auto m = json::parse(read_file(manifest_path(stage)));
    if (m.at("config_hash").get<std::string>() != hash_ && !force_)
      fail(ErrorCode::hash_mismatch, "stage " + stage + " was produced under config " +
                                         m.at("config_hash").get<std::string>() + ", current is " + hash_);
    for (const auto& [rel, h] : m.at("outputs").items()) {
      const auto p = path(rel);
      const bool is_ckpt = p.extension() == ".ckpt";
      require(fs::exists(p), is_ckpt ? ErrorCode::missing_checkpoint : ErrorCode::io, "missing artifact " + p.string());
      if (file_hash(p) != h.get<std::string>() && !force_)
        fail(ErrorCode::hash_mismatch, "artifact " + rel + " changed since stage " + stage + " wrote it");
    }
    return m;
  }

 private:
  static std::string manifest_name(std::string stage) {
    for (auto& ch : stage)
      if (ch == ':' || ch == '/') ch = '_';
    return stage;
  }

  void write_snapshot() const { write_file_atomic(root_ / "config.json", to_json(cfg_).dump(2) + "\n"); }

  fs::path root_;
  ExperimentConfig cfg_;
  std::string hash_;
  bool force_ = false;
};

inline std::string train_stage(Variant v) { return "train:" + slug(v); }
inline std::string attack_stage(Variant v) { return "attack:" + slug(v); }
inline std::string eval_stage(Variant v) { return "eval:" + slug(v); }
inline std::string model_rel(Variant v) { return "models/" + slug(v) + ".ckpt"; }
inline std::string fake_rel(Variant v) { return "models/" + slug(v) + ".fake.ckpt"; }
inline std::string attacker_rel(Variant v) { return "attack/" + slug(v) + "/attacker.ckpt"; }

using Log = std::function<void(const std::string&)>;

namespace detail {

inline void note(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

inline AlignedCorpus load_split(const Workspace& ws, const std::string& name) {
  const auto path = ws.path("data/" + name + ".jsonl");
  AlignedCorpus c;
  c.catalog = read_catalog(ws.path("data/personas.jsonl"));
  for (const auto& line : read_lines(path))
    if (!line.empty()) c.conversations.push_back(conversation_from_json(json::parse(line)));
  return c;
}

inline Vocab load_vocab(const Workspace& ws) { return vocab_from_jsonl(read_file(ws.path("data/vocab.jsonl"))); }

inline std::string predictions_jsonl(const AttackDataset& test, const std::vector<Distribution>& preds) {
  std::vector<json> rows;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& r = test.records[i];
    rows.push_back({{"dialog_id", r.dialog_id}, {"turn_index", r.turn_index}, {"label", r.persona_id}, {"probs", preds[i]}});
  }
  return to_jsonl(rows);
}

inline std::pair<std::vector<Distribution>, std::vector<int>> read_predictions(const fs::path& path) {
  std::pair<std::vector<Distribution>, std::vector<int>> out;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    out.first.push_back(j.at("probs").get<Distribution>());
    out.second.push_back(j.at("label").get<int>());
  }
  return out;
}

inline std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

/// Builds or ingests the corpus, splits it and fixes the vocabulary.
inline void stage_synth(const Workspace& ws, const Log& log = {}) {
  const auto& cfg = ws.config();
  auto data = prepare(cfg);
  validate(data.corpus);
  write_file_atomic(ws.path("data/personas.jsonl"), catalog_jsonl(data.corpus.catalog));
  write_file_atomic(ws.path("data/corpus.jsonl"), conversations_jsonl(data.corpus.conversations));
  write_file_atomic(ws.path("data/train.jsonl"), conversations_jsonl(data.train.conversations));
  write_file_atomic(ws.path("data/validation.jsonl"), conversations_jsonl(data.validation.conversations));
  write_file_atomic(ws.path("data/test.jsonl"), conversations_jsonl(data.test.conversations));
  write_file_atomic(ws.path("data/vocab.jsonl"), vocab_jsonl(data.vocab));
  const auto st = stats(data.corpus);
  write_file_atomic(ws.path("data/stats.json"), to_json(st).dump(2) + "\n");
  ws.record_stage("synth", {},
                  {"data/personas.jsonl", "data/corpus.jsonl", "data/train.jsonl", "data/validation.jsonl",
                   "data/test.jsonl", "data/vocab.jsonl"},
                  {{"train", data.train.conversations.size()},
                   {"validation", data.validation.conversations.size()},
                   {"test", data.test.conversations.size()},
                   {"vocab", data.vocab.size()}});
  detail::note(log, "synth: " + std::to_string(data.corpus.conversations.size()) + " dialogs, " +
                        std::to_string(data.corpus.catalog.size()) + " personas, vocab " +
                        std::to_string(data.vocab.size()));
}

/// Trains one variant on the train split. LM is plain language modeling;
/// the others add the defense objectives.
inline void stage_train(const Workspace& ws, Variant v, const Log& log = {}) {
  const auto stage = train_stage(v);
  ws.require_stage("synth", stage);
  const auto& cfg = ws.config();
  const auto train = detail::load_split(ws, "train");
  const auto vocab = detail::load_vocab(ws);
  const int total = planned_steps(train.conversations.size(), cfg.lm_train.batch_dialogs, cfg.lm_train.epochs,
                                  cfg.lm_train.max_steps);
  const int every = std::max(1, total / 10);
  auto trained = train_variant(cfg, train, vocab, v, [&](int step, double loss) {
    if ((step + 1) % every == 0 || step + 1 == total)
      detail::note(log, to_string(v) + " step " + std::to_string(step + 1) + "/" + std::to_string(total) +
                            " loss " + detail::fixed(loss, 4));
  });
  const json meta = {{"variant", to_string(v)}, {"config_hash", ws.hash()}};
  save_chatbot(ws.path(model_rel(v)), trained.model, meta);
  std::vector<std::string> outputs{model_rel(v), "models/" + slug(v) + ".history.jsonl"};
  std::vector<json> rows;
  if (trained.defense_history) {
    for (std::size_t i = 0; i < trained.defense_history->steps.size(); ++i) {
      const auto& s = trained.defense_history->steps[i];
      rows.push_back({{"step", i}, {"lm", s.lm}, {"kl", s.kl}, {"mi1", s.mi1}, {"mi2", s.mi2}, {"total", s.total},
                      {"labeled_turns", s.labeled_turns}, {"predictor_accuracy", s.predictor_accuracy}});
    }
    save_classifier(ws.path(fake_rel(v)), *trained.fake, train.catalog, meta);
    outputs.push_back(fake_rel(v));
  } else {
    for (std::size_t i = 0; i < trained.lm_step_loss.size(); ++i)
      rows.push_back({{"step", i}, {"lm", trained.lm_step_loss[i]}});
  }
  write_file_atomic(ws.path("models/" + slug(v) + ".history.jsonl"), to_jsonl(rows));
  ws.record_stage(stage, {"data/train.jsonl", "data/vocab.jsonl"}, outputs,
                  {{"variant", to_string(v)}, {"checksum", hex64(trained.model.checksum())}});
  detail::note(log, "trained " + to_string(v) + " -> " + ws.path(model_rel(v)).string());
}

/// Black-box attack on a frozen checkpoint: embeddings of the labeled train
/// turns teach a fresh attacker, which then labels the test turns.
inline void stage_attack(const Workspace& ws, Variant v, const Log& log = {}) {
  const auto stage = attack_stage(v);
  ws.require_stage("synth", stage);
  ws.require_stage(train_stage(v), stage);
  const auto& cfg = ws.config();
  const auto chatbot = load_chatbot<float>(ws.path(model_rel(v))).model;
  const auto train = detail::load_split(ws, "train");
  const auto validation = detail::load_split(ws, "validation");
  const auto test = detail::load_split(ws, "test");
  const auto out = run_attack(chatbot, train, validation, test, cfg);
  const std::string dir = "attack/" + slug(v) + "/";
  save_attack_dataset(out.train, ws.path(dir + "train.bin"), ws.path(dir + "train.jsonl"));
  save_attack_dataset(out.test, ws.path(dir + "test.bin"), ws.path(dir + "test.jsonl"));
  save_classifier(ws.path(attacker_rel(v)), out.attacker, train.catalog,
                  {{"variant", to_string(v)}, {"config_hash", ws.hash()}});
  write_file_atomic(ws.path(dir + "predictions.jsonl"), detail::predictions_jsonl(out.test, out.predictions));
  ws.record_stage(stage, {model_rel(v), "data/train.jsonl", "data/validation.jsonl", "data/test.jsonl"},
                  {dir + "train.bin", dir + "train.jsonl", dir + "test.bin", dir + "test.jsonl", attacker_rel(v),
                   dir + "predictions.jsonl"},
                  {{"variant", to_string(v)},
                   {"chatbot_checksum_before", hex64(out.chatbot_checksum_before)},
                   {"chatbot_checksum_after", hex64(out.chatbot_checksum_after)}});
  const auto acc = accuracy_and_f1(out.predictions, out.labels).accuracy;
  detail::note(log, "attack on " + to_string(v) + ": accuracy " + detail::fixed(acc, 2) + "% over " +
                        std::to_string(out.labels.size()) + " test turns");
}

/// Privacy and utility of one attacked model.
inline ModelReport stage_eval(const Workspace& ws, Variant v, const Log& log = {}) {
  const auto stage = eval_stage(v);
  const auto trained = ws.require_stage(train_stage(v), stage);
  ws.require_stage(attack_stage(v), stage);
  // The model must come from the corpus on disk now.
  const auto corpus_hash = file_hash(ws.path("data/train.jsonl"));
  if (trained.at("inputs").at("data/train.jsonl").get<std::string>() != corpus_hash && !ws.force())
    fail(ErrorCode::hash_mismatch, to_string(v) + " was trained on a different corpus (use --force to evaluate anyway)");
  const auto& cfg = ws.config();
  const std::string dir = "attack/" + slug(v) + "/";
  const auto [preds, labels] = detail::read_predictions(ws.path(dir + "predictions.jsonl"));
  const auto model = load_chatbot<float>(ws.path(model_rel(v))).model;
  const auto test = detail::load_split(ws, "test");
  const auto utility = evaluate_utility(model, test, cfg);
  std::vector<Distribution> fake_preds;
  std::vector<std::string> inputs{model_rel(v), dir + "predictions.jsonl", "data/test.jsonl"};
  if (fs::exists(ws.path(fake_rel(v)))) {
    const auto fake = load_classifier<float>(ws.path(fake_rel(v))).model;
    fake_preds = fake_predictions(fake, load_attack_dataset(ws.path(dir + "test.bin"), ws.path(dir + "test.jsonl")));
    inputs.push_back(fake_rel(v));
  }
  const auto report = build_model_report(to_string(v), preds, labels, cfg.topk, {}, utility, fake_preds);
  write_file_atomic(ws.path("eval/" + slug(v) + ".json"), to_json(report).dump(2) + "\n");
  ws.record_stage(stage, inputs, {"eval/" + slug(v) + ".json"}, {{"variant", to_string(v)}});
  detail::note(log, "eval " + to_string(v) + ": acc " + detail::fixed(report.privacy.overall.accuracy, 2) + "%, ppl " +
                        detail::fixed(utility.ppl, 3));
  return report;
}

/// Markdown tables shaped like the paper-style privacy and utility tables.
inline std::string report_markdown(const Report& r) {
  std::ostringstream md;
  std::vector<int> ks;
  if (!r.models.empty())
    for (const auto& [k, _] : r.models.front().privacy.overall.topk) ks.push_back(k);
  md << "# Persona inference attack\n\n" << r.num_classes << " persona classes.\n\n";
  md << "| Model | Acc | F1 | Max-Ratio | BP_u |";
  for (int k : ks) md << " top-" << k << " |";
  md << "\n|---|---|---|---|---|";
  for (std::size_t i = 0; i < ks.size(); ++i) md << "---|";
  md << "\n";
  const auto row = [&](const std::string& name, const PrivacySlice& s) {
    md << "| " << name << " | " << detail::fixed(s.accuracy, 2) << " | " << detail::fixed(s.weighted_f1, 2) << " | "
       << detail::fixed(s.max_ratio, 2) << " | " << detail::fixed(s.bp_uniform, 4) << " |";
    for (int k : ks) md << " " << (s.topk.contains(k) ? detail::fixed(s.topk.at(k), 2) : "-") << " |";
    md << "\n";
  };
  if (r.baselines.contains("random_pred")) row("Random Pred", r.baselines.at("random_pred"));
  if (r.baselines.contains("best_guess")) row("Best Guess", r.baselines.at("best_guess"));
  for (const auto& m : r.models) row(m.name, m.privacy.overall);
  md << "\n# Utility\n\n| Model | PPL | Distinct-1 | Distinct-2 | BLEU-1 | BLEU-2 | BLEU-4 |\n|---|---|---|---|---|---|---|\n";
  for (const auto& m : r.models) {
    if (!m.utility) continue;
    const auto& u = *m.utility;
    md << "| " << m.name << " | " << detail::fixed(u.ppl, 3) << " | " << detail::fixed(u.distinct.at(1), 4) << " | "
       << detail::fixed(u.distinct.at(2), 4) << " | " << detail::fixed(u.bleu.at(1), 4) << " | "
       << detail::fixed(u.bleu.at(2), 4) << " | " << detail::fixed(u.bleu.at(4), 4) << " |\n";
  }
  return md.str();
}

/// Collects every evaluated model into report.json and report.md.
inline Report stage_report(const Workspace& ws, const Log& log = {}) {
  const auto& cfg = ws.config();
  std::vector<Variant> variants{Variant::lm};
  for (auto v : cfg.defended_variants) variants.push_back(v);
  Report r;
  std::vector<std::string> inputs;
  for (auto v : variants) {
    if (!ws.has_stage(eval_stage(v)) && v != Variant::lm) continue;
    ws.require_stage(eval_stage(v), "report");
    const auto rel = "eval/" + slug(v) + ".json";
    r.models.push_back(model_report_from_json(json::parse(read_file(ws.path(rel)))));
    inputs.push_back(rel);
  }
  // Baselines only see the attacker's train labels and the test labels.
  const std::string dir = "attack/" + slug(Variant::lm) + "/";
  const auto train_labels = load_attack_dataset(ws.path(dir + "train.bin"), ws.path(dir + "train.jsonl")).labels();
  const auto [_, test_labels] = detail::read_predictions(ws.path(dir + "predictions.jsonl"));
  r.num_classes = read_catalog(ws.path("data/personas.jsonl")).size();
  r.baselines = baseline_slices(train_labels, test_labels, r.num_classes, cfg.topk);
  r.extra = {{"config_hash", ws.hash()}, {"seed", cfg.seed}};
  for (auto v : variants)
    if (fs::exists(ws.path("unseen/" + slug(v) + ".json")))
      r.extra["unseen"][to_string(v)] = json::parse(read_file(ws.path("unseen/" + slug(v) + ".json")));
  write_file_atomic(ws.path("report.json"), to_json(r).dump(2) + "\n");
  write_file_atomic(ws.path("report.md"), report_markdown(r));
  ws.record_stage("report", inputs, {"report.json", "report.md"});
  detail::note(log, "report -> " + ws.path("report.md").string());
  return r;
}

/// Unseen-label experiment for one variant, written to unseen/<slug>.json.
inline json stage_unseen(const Workspace& ws, Variant v, const Log& log = {}) {
  const auto stage = "unseen:" + slug(v);
  ws.require_stage("synth", stage);
  const auto& cfg = ws.config();
  const auto corpus = detail::load_split(ws, "corpus");
  const auto vocab = detail::load_vocab(ws);
  const auto out = run_unseen(cfg, corpus, vocab, v);
  json j = {{"variant", to_string(v)},
            {"adversary_only_labels", cfg.unseen.adversary_only_labels},
            {"defender_dialogs", out.split.defender.conversations.size()},
            {"adversary_dialogs", out.split.adversary.conversations.size()},
            {"test_dialogs", out.split.test.conversations.size()},
            {"random_pred", out.random_pred},
            {"privacy", to_json(out.privacy)}};
  const auto rel = "unseen/" + slug(v) + ".json";
  write_file_atomic(ws.path(rel), j.dump(2) + "\n");
  ws.record_stage(stage, {"data/corpus.jsonl", "data/vocab.jsonl"}, {rel});
  detail::note(log, "unseen " + to_string(v) + ": accuracy on adversary-only labels " +
                        detail::fixed(out.privacy.unseen->accuracy, 2) + "% (random " +
                        detail::fixed(out.random_pred, 2) + "%)");
  return j;
}

enum class EmbedderKind { bow, lm };

/// Clusters the persona catalog and writes a relabeled copy of each split.
inline ClusterMap stage_cluster(const Workspace& ws, int k, EmbedderKind kind, const Log& log = {}) {
  ws.require_stage("synth", "cluster");
  std::vector<std::string> inputs{"data/personas.jsonl"};
  SentenceEmbedder embed = hashed_bow_embedder();
  std::optional<ChatbotModel<double>> lm;
  if (kind == EmbedderKind::lm) {
    ws.require_stage(train_stage(Variant::lm), "cluster");
    lm = ChatbotModel<double>::convert(load_chatbot<float>(ws.path(model_rel(Variant::lm))).model);
    embed = [&lm](const std::string& text) { return sentence_embedding(*lm, text); };
    inputs.push_back(model_rel(Variant::lm));
  }
  const auto catalog = read_catalog(ws.path("data/personas.jsonl"));
  const auto points = persona_embeddings(catalog, embed);
  const auto map = kmeans(points, k, derive_seed(ws.config().seed, "kmeans"));
  std::vector<std::string> outputs{"cluster/cluster_map.jsonl"};
  write_file_atomic(ws.path("cluster/cluster_map.jsonl"), cluster_map_jsonl(map));
  for (const char* name : {"train", "validation", "test"}) {
    const auto relabeled = relabel_corpus(detail::load_split(ws, name), map);
    if (std::string(name) == "train") {
      write_file_atomic(ws.path("cluster/personas.jsonl"), catalog_jsonl(relabeled.catalog));
      outputs.push_back("cluster/personas.jsonl");
    }
    const auto rel = std::string("cluster/") + name + ".jsonl";
    write_file_atomic(ws.path(rel), conversations_jsonl(relabeled.conversations));
    outputs.push_back(rel);
  }
  ws.record_stage("cluster", inputs, outputs,
                  {{"k", k}, {"inertia", map.inertia}, {"iterations", map.iterations},
                   {"embedder", kind == EmbedderKind::lm ? "lm" : "bow"}});
  detail::note(log, "cluster: " + std::to_string(catalog.size()) + " personas into " + std::to_string(k) +
                        " clusters, inertia " + detail::fixed(map.inertia, 4));
  return map;
}

}  // namespace persona_guard
