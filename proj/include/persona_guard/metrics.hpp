#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "persona_guard/error.hpp"
#include "persona_guard/io.hpp"

namespace persona_guard {

using Distribution = std::vector<double>;

inline constexpr const char* kReportSchema = "persona_guard.report.v1";

/// Index of the largest entry; ties go to the smallest index.
inline int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

struct AccuracyF1 {
  double accuracy = 0.0;  // percent
  double weighted_f1 = 0.0;
};

inline AccuracyF1 accuracy_and_f1(std::span<const Distribution> preds, std::span<const int> labels) {
  require(!preds.empty(), ErrorCode::empty_dataset, "accuracy needs at least one prediction");
  require(preds.size() == labels.size(), ErrorCode::validation, "predictions and labels differ in length");
  std::map<int, std::size_t> tp, predicted, support;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(labels[i] >= 0, ErrorCode::validation, "unlabeled sample in accuracy input");
    const int y = labels[i];
    const int yhat = argmax(preds[i]);
    ++support[y];
    ++predicted[yhat];
    if (y == yhat) {
      ++hits;
      ++tp[y];
    }
  }
  const double n = static_cast<double>(preds.size());
  double f1 = 0.0;
  for (const auto& [c, sup] : support) {
    const double t = static_cast<double>(tp[c]);
    const double prec = predicted[c] > 0 ? t / static_cast<double>(predicted[c]) : 0.0;
    const double rec = t / static_cast<double>(sup);
    const double f = prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    f1 += static_cast<double>(sup) / n * f;
  }
  return {100.0 * static_cast<double>(hits) / n, f1};
}

struct MaxRatio {
  double ratio = 0.0;  // percent
  int label = 0;
};

/// Share of the most frequent argmax label; ties go to the smallest label.
inline MaxRatio max_ratio(std::span<const Distribution> preds) {
  require(!preds.empty(), ErrorCode::empty_dataset, "max_ratio needs at least one prediction");
  std::map<int, std::size_t> counts;
  for (const auto& p : preds) ++counts[argmax(p)];
  MaxRatio best{0.0, 0};
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {
      best_count = count;
      best.label = label;
    }
  }
  best.ratio = 100.0 * static_cast<double>(best_count) / static_cast<double>(preds.size());
  return best;
}

inline double kl_from_uniform(std::span<const double> p, double eps = 1e-9) {
  const double C = static_cast<double>(p.size());
  double s = 0.0;
  for (double v : p) s += std::log(std::max(v, eps));
  return -std::log(C) - s / C;
}

enum class BpMode {
  /// Mean over samples of D_KL(uniform || pred).
  per_sample,
  /// D_KL(uniform || mean pred).
  of_mean,
};

inline Distribution mean_distribution(std::span<const Distribution> preds) {
  require(!preds.empty(), ErrorCode::empty_dataset, "mean distribution of no predictions");
  Distribution mean(preds.front().size(), 0.0);
  for (const auto& p : preds) {
    require(p.size() == mean.size(), ErrorCode::dimension, "predictions differ in class count");
    for (std::size_t c = 0; c < p.size(); ++c) mean[c] += p[c];
  }
  for (auto& v : mean) v /= static_cast<double>(preds.size());
  return mean;
}

inline double bayesian_privacy_uniform(std::span<const Distribution> preds, BpMode mode = BpMode::per_sample) {
  require(!preds.empty(), ErrorCode::empty_dataset, "bayesian privacy needs at least one prediction");
  if (mode == BpMode::of_mean) return kl_from_uniform(mean_distribution(preds));
  double s = 0.0;
  for (const auto& p : preds) s += kl_from_uniform(p);
  return s / static_cast<double>(preds.size());
}

/// Labels of the k highest-probability entries; ties prefer the smaller id.
inline std::vector<int> top_k_labels(std::span<const double> p, int k) {
  std::vector<int> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(idx.size()))));
  return idx;
}

/// Percent of samples whose label is among the top k, for each k.
inline std::map<int, double> top_k_accuracy(std::span<const Distribution> preds, std::span<const int> labels,
                                            std::span<const int> ks) {
  require(!preds.empty(), ErrorCode::empty_dataset, "top-k needs at least one prediction");
  require(preds.size() == labels.size(), ErrorCode::validation, "predictions and labels differ in length");
  std::map<int, double> out;
  for (int k : ks) {
    require(k >= 1 && k <= static_cast<int>(preds.front().size()), ErrorCode::validation,
            "k=" + std::to_string(k) + " outside [1, C]");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto top = top_k_labels(preds[i], k);
      hits += std::find(top.begin(), top.end(), labels[i]) != top.end() ? 1 : 0;
    }
    out[k] = 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text metrics over token lists

using Tokens = std::vector<std::string>;

inline std::vector<Tokens> ngrams(const Tokens& toks, int n) {
  std::vector<Tokens> out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
    out.emplace_back(toks.begin() + static_cast<std::ptrdiff_t>(i), toks.begin() + static_cast<std::ptrdiff_t>(i) + n);
  return out;
}

inline double distinct_n(std::span<const Tokens> texts, int n) {
  require(n >= 1, ErrorCode::validation, "distinct_n needs n >= 1");
  std::set<Tokens> unique;
  std::size_t total = 0;
  for (const auto& t : texts) {
    for (auto& g : ngrams(t, n)) {
      unique.insert(std::move(g));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// Corpus BLEU with one reference per candidate. Orders 2..n with zero
/// matches use (0 + 1) / (total + 1).
inline double bleu_n(std::span<const Tokens> candidates, std::span<const Tokens> references, int n) {
  require(n >= 1, ErrorCode::validation, "bleu_n needs n >= 1");
  require(candidates.size() == references.size(), ErrorCode::validation, "candidates and references differ in length");
  std::size_t cand_len = 0, ref_len = 0;
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += candidates[i].size();
    ref_len += references[i].size();
    for (int k = 1; k <= n; ++k) {
      std::map<Tokens, int> ref_counts;
      for (auto& g : ngrams(references[i], k)) ++ref_counts[g];
      std::map<Tokens, int> cand_counts;
      for (auto& g : ngrams(candidates[i], k)) ++cand_counts[g];
      for (const auto& [g, c] : cand_counts) {
        const auto it = ref_counts.find(g);
        matched[static_cast<std::size_t>(k - 1)] += std::min(c, it == ref_counts.end() ? 0 : it->second);
        total[static_cast<std::size_t>(k - 1)] += c;
      }
    }
  }
  if (cand_len == 0 || matched[0] == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    double m = matched[static_cast<std::size_t>(k)];
    double t = total[static_cast<std::size_t>(k)];
    if (k > 0 && m == 0.0) {
      m += 1.0;
      t += 1.0;
    }
    log_sum += std::log(m / t);
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len)) : 1.0;
  return bp * std::exp(log_sum / n);
}

// ---------------------------------------------------------------------------
// Baselines

/// Exactly uniform prediction for every sample.
inline std::vector<Distribution> random_pred_baseline(std::size_t samples, int classes) {
  return std::vector<Distribution>(samples, Distribution(static_cast<std::size_t>(classes), 1.0 / classes));
}

/// Most frequent training label; ties go to the smallest label.
inline int most_frequent_label(std::span<const int> train_labels) {
  require(!train_labels.empty(), ErrorCode::empty_dataset, "best guess needs training labels");
  std::map<int, std::size_t> counts;
  for (int y : train_labels) ++counts[y];
  int best = counts.begin()->first;
  std::size_t best_count = 0;
  for (const auto& [y, c] : counts)
    if (c > best_count) {
      best = y;
      best_count = c;
    }
  return best;
}

/// One-hot on the most frequent training label for every test sample.
inline std::vector<Distribution> best_guess_baseline(std::span<const int> train_labels, std::size_t samples,
                                                     int classes) {
  Distribution one_hot(static_cast<std::size_t>(classes), 0.0);
  one_hot[static_cast<std::size_t>(most_frequent_label(train_labels))] = 1.0;
  return std::vector<Distribution>(samples, one_hot);
}

// ---------------------------------------------------------------------------
// Reports

struct PrivacySlice {
  std::size_t samples = 0;
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  double max_ratio = 0.0;
  int max_pred_label = 0;
  double bp_uniform = 0.0;
  std::map<int, double> topk;
};

inline json to_json(const PrivacySlice& s) {
  json topk = json::object();
  for (const auto& [k, v] : s.topk) topk[std::to_string(k)] = v;
  return {{"samples", s.samples},   {"accuracy", s.accuracy},     {"weighted_f1", s.weighted_f1},
          {"max_ratio", s.max_ratio}, {"max_pred_label", s.max_pred_label}, {"bp_uniform", s.bp_uniform},
          {"topk", topk}};
}

inline PrivacySlice privacy_slice_from_json(const json& j) {
  PrivacySlice s;
  s.samples = j.at("samples").get<std::size_t>();
  s.accuracy = j.at("accuracy").get<double>();
  s.weighted_f1 = j.at("weighted_f1").get<double>();
  s.max_ratio = j.at("max_ratio").get<double>();
  s.max_pred_label = j.at("max_pred_label").get<int>();
  s.bp_uniform = j.at("bp_uniform").get<double>();
  for (const auto& [k, v] : j.at("topk").items()) s.topk[std::stoi(k)] = v.get<double>();
  return s;
}

inline PrivacySlice privacy_slice(std::span<const Distribution> preds, std::span<const int> labels,
                                  std::span<const int> ks, BpMode bp = BpMode::per_sample) {
  PrivacySlice s;
  s.samples = preds.size();
  const auto af = accuracy_and_f1(preds, labels);
  s.accuracy = af.accuracy;
  s.weighted_f1 = af.weighted_f1;
  const auto mr = max_ratio(preds);
  s.max_ratio = mr.ratio;
  s.max_pred_label = mr.label;
  s.bp_uniform = bayesian_privacy_uniform(preds, bp);
  s.topk = top_k_accuracy(preds, labels, ks);
  return s;
}

struct PrivacyReport {
  PrivacySlice overall;
  /// Samples whose label belongs to the adversary-only set.
  std::optional<PrivacySlice> unseen;
};

inline json to_json(const PrivacyReport& r) {
  json j = {{"overall", to_json(r.overall)}};
  j["unseen"] = r.unseen ? to_json(*r.unseen) : json(nullptr);
  return j;
}

inline PrivacyReport privacy_report_from_json(const json& j) {
  PrivacyReport r;
  r.overall = privacy_slice_from_json(j.at("overall"));
  if (j.contains("unseen") && !j["unseen"].is_null()) r.unseen = privacy_slice_from_json(j["unseen"]);
  return r;
}

/// Overall metrics plus, when `unseen_labels` is nonempty, the slice of
/// samples carrying one of those labels.
inline PrivacyReport privacy_report(std::span<const Distribution> preds, std::span<const int> labels,
                                    std::span<const int> ks, std::span<const int> unseen_labels = {},
                                    BpMode bp = BpMode::per_sample) {
  PrivacyReport r;
  r.overall = privacy_slice(preds, labels, ks, bp);
  if (!unseen_labels.empty()) {
    const std::set<int> unseen(unseen_labels.begin(), unseen_labels.end());
    std::vector<Distribution> p;
    std::vector<int> y;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (unseen.contains(labels[i])) {
        p.push_back(preds[i]);
        y.push_back(labels[i]);
      }
    if (!p.empty()) r.unseen = privacy_slice(p, y, ks, bp);
  }
  return r;
}

struct UtilityReport {
  double ppl = 0.0;
  std::map<int, double> distinct;
  std::map<int, double> bleu;
  /// Slot for an external embedding-similarity score; never filled here.
  std::optional<double> embedding_similarity;
};

inline json to_json(const UtilityReport& u) {
  json distinct = json::object(), bleu = json::object();
  for (const auto& [n, v] : u.distinct) distinct[std::to_string(n)] = v;
  for (const auto& [n, v] : u.bleu) bleu[std::to_string(n)] = v;
  return {{"ppl", u.ppl},
          {"distinct", distinct},
          {"bleu", bleu},
          {"embedding_similarity", u.embedding_similarity ? json(*u.embedding_similarity) : json(nullptr)}};
}

inline UtilityReport utility_report_from_json(const json& j) {
  UtilityReport u;
  u.ppl = j.at("ppl").get<double>();
  for (const auto& [k, v] : j.at("distinct").items()) u.distinct[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("bleu").items()) u.bleu[std::stoi(k)] = v.get<double>();
  if (j.contains("embedding_similarity") && !j["embedding_similarity"].is_null())
    u.embedding_similarity = j["embedding_similarity"].get<double>();
  return u;
}

inline UtilityReport utility_report(double ppl, std::span<const Tokens> generated, std::span<const Tokens> references) {
  UtilityReport u;
  u.ppl = ppl;
  for (int n : {1, 2}) u.distinct[n] = distinct_n(generated, n);
  for (int n : {1, 2, 4}) u.bleu[n] = bleu_n(generated, references, n);
  return u;
}

/// Everything measured for one model variant.
struct ModelReport {
  std::string name;
  PrivacyReport privacy;
  std::optional<UtilityReport> utility;
  Distribution attacker_mean;
  std::optional<Distribution> fake_attacker_mean;
};

inline json to_json(const ModelReport& m) {
  json j = {{"name", m.name}, {"privacy", to_json(m.privacy)}, {"attacker_mean_distribution", m.attacker_mean}};
  j["utility"] = m.utility ? to_json(*m.utility) : json(nullptr);
  j["fake_attacker_mean_distribution"] = m.fake_attacker_mean ? json(*m.fake_attacker_mean) : json(nullptr);
  return j;
}

inline ModelReport model_report_from_json(const json& j) {
  ModelReport m;
  m.name = j.at("name").get<std::string>();
  m.privacy = privacy_report_from_json(j.at("privacy"));
  if (!j.at("utility").is_null()) m.utility = utility_report_from_json(j["utility"]);
  m.attacker_mean = j.at("attacker_mean_distribution").get<Distribution>();
  if (!j.at("fake_attacker_mean_distribution").is_null())
    m.fake_attacker_mean = j["fake_attacker_mean_distribution"].get<Distribution>();
  return m;
}

struct Report {
  int num_classes = 0;
  std::map<std::string, PrivacySlice> baselines;
  std::vector<ModelReport> models;
  json extra = json::object();
};

inline json to_json(const Report& r) {
  json baselines = json::object();
  for (const auto& [name, s] : r.baselines) baselines[name] = to_json(s);
  json models = json::array();
  for (const auto& m : r.models) models.push_back(to_json(m));
  return {{kReportSchema, {{"num_classes", r.num_classes}, {"baselines", baselines}, {"models", models},
                           {"extra", r.extra}}}};
}

inline Report report_from_json(const json& j) {
  require(j.contains(kReportSchema), ErrorCode::parse, std::string("report lacks the ") + kReportSchema + " key");
  const auto& b = j.at(kReportSchema);
  Report r;
  r.num_classes = b.at("num_classes").get<int>();
  for (const auto& [name, s] : b.at("baselines").items()) r.baselines[name] = privacy_slice_from_json(s);
  for (const auto& m : b.at("models")) r.models.push_back(model_report_from_json(m));
  r.extra = b.value("extra", json::object());
  return r;
}

/// Privacy metrics of one attacker run, plus the mean predicted
/// distributions of the attacker and, when given, the fake attacker.
inline ModelReport build_model_report(std::string name, std::span<const Distribution> preds, std::span<const int> labels,
                                      std::span<const int> ks, std::span<const int> unseen_labels = {},
                                      std::optional<UtilityReport> utility = std::nullopt,
                                      std::span<const Distribution> fake_preds = {}) {
  ModelReport m;
  m.name = std::move(name);
  m.privacy = privacy_report(preds, labels, ks, unseen_labels);
  m.utility = std::move(utility);
  m.attacker_mean = mean_distribution(preds);
  if (!fake_preds.empty()) m.fake_attacker_mean = mean_distribution(fake_preds);
  return m;
}

/// Random Pred and Best Guess slices for a test label set.
inline std::map<std::string, PrivacySlice> baseline_slices(std::span<const int> train_labels,
                                                           std::span<const int> test_labels, int classes,
                                                           std::span<const int> ks) {
  std::map<std::string, PrivacySlice> out;
  const auto random = random_pred_baseline(test_labels.size(), classes);
  // Argmax of a uniform row is always label 0, so the ranking metrics use
  // the uniform guesser's expectation instead.
  auto rs = privacy_slice(random, test_labels, ks);
  rs.accuracy = 100.0 / classes;
  for (auto& [k, v] : rs.topk) v = 100.0 * k / classes;
  out["random_pred"] = rs;
  const auto best = best_guess_baseline(train_labels, test_labels.size(), classes);
  out["best_guess"] = privacy_slice(best, test_labels, ks);
  return out;
}

}  // namespace persona_guard
