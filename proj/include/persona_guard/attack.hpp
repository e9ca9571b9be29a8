#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "persona_guard/checkpoint.hpp"
#include "persona_guard/classifier.hpp"
#include "persona_guard/corpus.hpp"
#include "persona_guard/lm.hpp"
#include "persona_guard/optim.hpp"

namespace persona_guard {

template <std::floating_point Real>
using AttackerModel = PersonaClassifier<Real>;

enum class EmbeddingMode {
  /// Final-layer state at the separator ending the utterance.
  last_token,
  /// Mean of the final-layer states over the utterance's tokens and separator.
  mean_pooled,
};

struct AttackRecord {
  int persona_id = 0;
  std::string dialog_id;
  int turn_index = 0;
};

/// Labeled utterance embeddings queried from a frozen chatbot. Embeddings
/// are stored row-major in `embeddings`.
struct AttackDataset {
  int dim = 0;
  int num_classes = 0;
  std::vector<float> embeddings;
  std::vector<AttackRecord> records;

  std::size_t size() const { return records.size(); }
  std::span<const float> row(std::size_t i) const {
    return {embeddings.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& r : records) out.push_back(r.persona_id);
    return out;
  }
};

namespace detail {

template <std::floating_point Real>
std::vector<std::vector<Real>> mean_pooled_embeddings(const ChatbotModel<Real>& model, const Conversation& conv) {
  const int d = model.config().model_dim;
  std::vector<std::vector<Real>> out(conv.turns.size());
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    const auto enc = encode_prefix(conv, i, model.vocab(), model.config().context_window);
    ForwardCache<Real> cache;
    forward(model, enc.tokens, cache);
    const int end = enc.boundaries[i];
    int start = i == 0 ? 0 : enc.boundaries[i - 1] + 1;
    start = std::max(start, 0);
    std::vector<Real> mean(static_cast<std::size_t>(d), Real(0));
    for (int t = start; t <= end; ++t) kernels::axpy(mean.data(), Real(1), cache.lnf.data() + t * d, d);
    for (auto& v : mean) v /= static_cast<Real>(end - start + 1);
    out[i] = std::move(mean);
  }
  return out;
}

}  // namespace detail

/// One record per labeled utterance. The chatbot is only queried; its
/// parameter checksum is verified unchanged afterwards.
template <std::floating_point Real>
AttackDataset extract_attack_dataset(const ChatbotModel<Real>& frozen, const AlignedCorpus& corpus,
                                     EmbeddingMode mode = EmbeddingMode::last_token) {
  const auto before = frozen.checksum();
  AttackDataset data;
  data.dim = frozen.config().model_dim;
  data.num_classes = corpus.catalog.size();
  for (const auto& conv : corpus.conversations) {
    const bool any = std::any_of(conv.turns.begin(), conv.turns.end(), [](const Utterance& u) { return u.labeled(); });
    if (!any) continue;
    const auto embs = mode == EmbeddingMode::last_token ? dialog_embeddings(frozen, conv)
                                                        : detail::mean_pooled_embeddings(frozen, conv);
    for (std::size_t i = 0; i < conv.turns.size(); ++i) {
      if (!conv.turns[i].labeled()) continue;
      for (Real v : embs[i]) data.embeddings.push_back(static_cast<float>(v));
      data.records.push_back({conv.turns[i].persona_id, conv.dialog_id, static_cast<int>(i)});
    }
  }
  require(frozen.checksum() == before, ErrorCode::validation, "chatbot parameters changed during extraction");
  require(!data.records.empty(), ErrorCode::empty_dataset, "corpus has no labeled utterances");
  return data;
}

// ---------------------------------------------------------------------------
// Persistence: binary tensor file plus a JSONL index.

inline void save_attack_dataset(const AttackDataset& data, const fs::path& tensor_path, const fs::path& index_path) {
  std::string bin = "PGTN";
  Archive::append(bin, std::uint32_t{1});
  Archive::append(bin, static_cast<std::uint64_t>(data.size()));
  Archive::append(bin, static_cast<std::uint32_t>(data.dim));
  Archive::append(bin, static_cast<std::uint32_t>(data.num_classes));
  for (float v : data.embeddings) Archive::append(bin, v);
  write_file_atomic(tensor_path, bin);
  std::vector<json> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data.records[i];
    rows.push_back({{"row", i}, {"persona_id", r.persona_id}, {"dialog_id", r.dialog_id}, {"turn_index", r.turn_index}});
  }
  write_file_atomic(index_path, to_jsonl(rows));
}

inline AttackDataset load_attack_dataset(const fs::path& tensor_path, const fs::path& index_path) {
  const auto bin = read_file(tensor_path);
  require(bin.size() >= 24 && bin.compare(0, 4, "PGTN") == 0, ErrorCode::parse, "not an attack tensor file");
  std::size_t pos = 4;
  require(Archive::read<std::uint32_t>(bin, pos) == 1, ErrorCode::parse, "unsupported tensor file version");
  const auto rows = Archive::read<std::uint64_t>(bin, pos);
  AttackDataset data;
  data.dim = static_cast<int>(Archive::read<std::uint32_t>(bin, pos));
  data.num_classes = static_cast<int>(Archive::read<std::uint32_t>(bin, pos));
  data.embeddings.resize(rows * static_cast<std::uint64_t>(data.dim));
  for (auto& v : data.embeddings) v = Archive::read<float>(bin, pos);
  for (const auto& line : read_lines(index_path)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    data.records.push_back({j.at("persona_id").get<int>(), j.at("dialog_id").get<std::string>(),
                            j.at("turn_index").get<int>()});
  }
  require(data.records.size() == rows, ErrorCode::parse, "attack index does not match tensor rows");
  return data;
}

// ---------------------------------------------------------------------------
// Training

struct AttackerSettings {
  int hidden = 256;
  int epochs = 40;
  int batch_size = 64;
  OptimizerSettings optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0, 0};
  std::uint64_t seed = 0;
};

inline json to_json(const AttackerSettings& s) {
  return {{"hidden", s.hidden}, {"epochs", s.epochs}, {"batch_size", s.batch_size},
          {"optimizer", to_json(s.optimizer)}, {"seed", s.seed}};
}

inline AttackerSettings attacker_settings_from_json(const json& j, AttackerSettings s = {}) {
  s.hidden = j.value("hidden", s.hidden);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  if (j.contains("optimizer")) s.optimizer = optimizer_settings_from_json(j["optimizer"], s.optimizer);
  s.seed = j.value("seed", s.seed);
  return s;
}

/// Full distribution over the C personas for one embedding.
template <std::floating_point Real>
std::vector<Real> predict_persona(const AttackerModel<Real>& attacker, std::span<const Real> embedding) {
  return attacker.predict(embedding);
}

/// Distributions for every row of a dataset.
template <std::floating_point Real>
std::vector<std::vector<double>> predict_all(const AttackerModel<Real>& attacker, const AttackDataset& data) {
  require(data.dim == attacker.input_dim(), ErrorCode::dimension, "attack dataset dimension mismatch");
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  std::vector<Real> x(static_cast<std::size_t>(data.dim));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = data.row(i);
    std::copy(r.begin(), r.end(), x.begin());
    const auto p = attacker.predict(x);
    out.emplace_back(p.begin(), p.end());
  }
  return out;
}

template <std::floating_point Real>
double classifier_accuracy(const AttackerModel<Real>& attacker, const AttackDataset& data) {
  if (data.size() == 0) return 0.0;
  const auto preds = predict_all(attacker, data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto best = static_cast<int>(std::max_element(preds[i].begin(), preds[i].end()) - preds[i].begin());
    hits += best == data.records[i].persona_id ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Cross-entropy of a minibatch; fills d_logits with d(mean CE)/d(logits).
template <std::floating_point Real>
double cross_entropy_grad(std::span<const Real> logits, std::span<const int> labels, int classes,
                          std::vector<Real>& d_logits) {
  const int rows = static_cast<int>(labels.size());
  d_logits = softmax_rows(logits, rows, classes);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    Real* p = d_logits.data() + static_cast<std::ptrdiff_t>(r) * classes;
    const int y = labels[static_cast<std::size_t>(r)];
    loss -= std::log(std::max(static_cast<double>(p[y]), 1e-300));
    p[y] -= Real(1);
    for (int c = 0; c < classes; ++c) p[c] /= static_cast<Real>(rows);
  }
  return loss / rows;
}

/// Trains a fresh attacker on (embedding, persona) pairs with Adam, keeping
/// the parameters with the best validation accuracy (train accuracy when no
/// validation set is given).
template <std::floating_point Real>
AttackerModel<Real> train_attacker(const AttackDataset& train, const AttackDataset* validation,
                                   const AttackerSettings& settings) {
  require(train.size() > 0, ErrorCode::empty_dataset, "attacker training set is empty");
  require(train.num_classes > 0, ErrorCode::config, "attack dataset has no classes");
  if (train.size() < static_cast<std::size_t>(train.num_classes))
    std::cerr << "warning: attacker training set (" << train.size() << ") smaller than class count ("
              << train.num_classes << ")\n";
  AttackerModel<Real> model(train.dim, settings.hidden, train.num_classes, derive_seed(settings.seed, "attacker-init"));
  AdamW<Real> opt(model.params().size(), settings.optimizer);
  const auto decay = model.layout().decay_mask();
  Rng rng(derive_seed(settings.seed, "attacker-batches"));
  const AttackDataset& select_on = validation != nullptr && validation->size() > 0 ? *validation : train;

  std::vector<Real> best(model.params().begin(), model.params().end());
  double best_acc = classifier_accuracy(model, select_on);
  std::optional<double> initial_loss;
  typename AttackerModel<Real>::Cache cache;
  std::vector<Real> x, d_logits;
  std::vector<int> y;
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(settings.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(settings.batch_size));
      x.clear();
      y.clear();
      for (std::size_t k = start; k < end; ++k) {
        const auto r = train.row(order[k]);
        x.insert(x.end(), r.begin(), r.end());
        y.push_back(train.records[order[k]].persona_id);
      }
      model.zero_grad();
      model.forward(x, static_cast<int>(y.size()), cache);
      const double loss = cross_entropy_grad(std::span<const Real>(cache.logits), y, train.num_classes, d_logits);
      if (!std::isfinite(loss)) fail(ErrorCode::divergence, "attacker loss is not finite");
      model.backward(cache, d_logits, true, nullptr);
      opt.step(model.params(), model.grads(), settings.optimizer.lr, decay);
      epoch_loss += loss;
      ++batches;
    }
    epoch_loss /= std::max(batches, 1);
    if (!initial_loss) initial_loss = epoch_loss;
    if (epoch_loss > 10.0 * *initial_loss + 10.0)
      fail(ErrorCode::divergence, "attacker loss diverged at epoch " + std::to_string(epoch));
    const double acc = classifier_accuracy(model, select_on);
    if (acc > best_acc) {
      best_acc = acc;
      best.assign(model.params().begin(), model.params().end());
    }
  }
  std::copy(best.begin(), best.end(), model.params().begin());
  return model;
}

}  // namespace persona_guard
