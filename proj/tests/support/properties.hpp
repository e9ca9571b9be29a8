#pragma once

// Numerical property checks shared by the unit tests and the acceptance
// gate. Every oracle here is written independently of the library code it
// checks.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "persona_guard.hpp"

namespace persona_guard::checks {

struct CheckResult {
  bool ok = true;
  std::string detail;
};

inline constexpr double kFdEps = 1e-5;
inline constexpr double kFdTolerance = 1e-3;
inline constexpr int kProbes = 10;
inline constexpr double kOracleTolerance = 1e-12;

/// Tiny corpus and vocabulary for gradient probes.
inline PreparedData tiny_data(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.synth.num_personas = 4;
  cfg.synth.dialogs = 30;
  cfg.synth.min_turns = 3;
  cfg.synth.max_turns = 4;
  return prepare(cfg);
}

inline LMConfig tiny_lm() {
  LMConfig c;
  c.layers = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.context_window = 64;
  return c;
}

inline double relative_error(double a, double b) {
  const double denom = std::max(std::abs(a), std::abs(b));
  return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

/// Picks `kProbes` parameter indices whose analytic gradient is not
/// vanishing, so the relative error is well defined.
inline std::vector<std::size_t> probe_indices(std::span<const double> grads, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (std::abs(grads[i]) > 1e-6) candidates.push_back(i);
  rng.shuffle(candidates);
  candidates.resize(std::min<std::size_t>(candidates.size(), kProbes));
  return candidates;
}

/// Compares analytic gradients with central differences of `loss`.
template <typename Loss>
CheckResult compare_fd(const std::string& what, std::span<double> params, std::span<const double> grads,
                       std::span<const std::size_t> probes, Loss&& loss) {
  CheckResult r;
  std::ostringstream ss;
  double worst = 0.0;
  if (probes.size() < static_cast<std::size_t>(kProbes)) {
    r.ok = false;
    ss << what << ": only " << probes.size() << " usable probes";
  }
  for (std::size_t i : probes) {
    const double saved = params[i];
    params[i] = saved + kFdEps;
    const double up = loss();
    params[i] = saved - kFdEps;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * kFdEps);
    const double err = relative_error(grads[i], numeric);
    worst = std::max(worst, err);
    if (err > kFdTolerance) {
      r.ok = false;
      ss << what << " param " << i << ": analytic " << grads[i] << " numeric " << numeric << "; ";
    }
  }
  ss << what << " worst relative error " << worst << " over " << probes.size() << " probes";
  r.detail = ss.str();
  return r;
}

inline CheckResult lm_gradient_check(std::uint64_t seed) {
  const auto data = tiny_data(seed);
  ChatbotModel<double> model(tiny_lm(), data.vocab, derive_seed(seed, "fd-lm"));
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, data.train.conversations.size()); ++i) batch.push_back(i);
  model.zero_grad();
  lm_batch_gradient(model, data.train, batch, LossMask::all_turns, nullptr);
  const std::vector<double> grads(model.grads().begin(), model.grads().end());
  Rng rng(derive_seed(seed, "fd-lm-probes"));
  const auto probes = probe_indices(grads, rng);
  return compare_fd("lm_loss", model.params(), grads, probes, [&] {
    model.zero_grad();
    return lm_batch_gradient(model, data.train, batch, LossMask::all_turns, nullptr);
  });
}

/// Chatbot side: d(L_f + l1 L_kl + l2 L_mi2); predictor side:
/// d(l1 L_kl + l2 l0 L_mi1). Both with the other party held fixed.
inline CheckResult defended_gradient_check(std::uint64_t seed, KlVariant variant = KlVariant::exact) {
  const auto data = tiny_data(seed);
  ChatbotModel<double> model(tiny_lm(), data.vocab, derive_seed(seed, "fd-chatbot"));
  DefenseConfig cfg;
  cfg.lambda0 = 0.7;
  cfg.lambda1 = 10.0;
  cfg.lambda2 = 1.3;
  cfg.kl_variant = variant;
  cfg.predictor_hidden = 6;
  cfg.chatbot.seed = seed;
  auto fake = make_fake_attacker(model, data.corpus.catalog.size(), cfg);
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < std::min<std::size_t>(4, data.train.conversations.size()); ++i) batch.push_back(i);
  const auto chatbot_objective = [&] {
    model.zero_grad();
    fake.zero_grad();
    const auto r = defended_gradients(model, fake, data.train, batch, cfg, nullptr);
    return r.lm + cfg.lambda1 * r.kl + cfg.lambda2 * r.mi2;
  };
  const auto predictor_objective = [&] {
    model.zero_grad();
    fake.zero_grad();
    const auto r = defended_gradients(model, fake, data.train, batch, cfg, nullptr);
    return cfg.lambda1 * r.kl + cfg.lambda2 * cfg.lambda0 * r.mi1;
  };
  model.zero_grad();
  fake.zero_grad();
  const auto report = defended_gradients(model, fake, data.train, batch, cfg, nullptr);
  if (report.labeled_turns == 0) return {false, "probe batch has no labeled turns"};
  const std::vector<double> chat_grads(model.grads().begin(), model.grads().end());
  const std::vector<double> pred_grads(fake.grads().begin(), fake.grads().end());
  Rng rng(derive_seed(seed, "fd-defense-probes"));
  const auto chat_probes = probe_indices(chat_grads, rng);
  const auto pred_probes = probe_indices(pred_grads, rng);
  auto a = compare_fd("defended chatbot", model.params(), chat_grads, chat_probes, chatbot_objective);
  const auto b = compare_fd("defended predictor", fake.params(), pred_grads, pred_probes, predictor_objective);
  a.ok = a.ok && b.ok;
  a.detail += "; " + b.detail;
  return a;
}

inline CheckResult kl_values() {
  const double uniform = kl_uniform_loss({0.25, 0.25, 0.25, 0.25});
  const double skewed = kl_uniform_loss({0.75, 0.25});
  std::ostringstream ss;
  ss << std::setprecision(10) << "kl(uniform)=" << uniform << " kl(0.75,0.25)=" << skewed;
  return {std::abs(uniform) < 1e-12 && std::abs(skewed - 0.14384) <= 1e-5, ss.str()};
}

/// L_mi1 + L_mi2 must vanish exactly on random embeddings and labels.
inline CheckResult mi_sum_zero(std::uint64_t seed, int trials = 200) {
  Rng rng(seed);
  FakeAttacker<double> fake(8, 6, 5, derive_seed(seed, "mi-fake"));
  for (int t = 0; t < trials; ++t) {
    std::vector<double> emb(8);
    for (auto& v : emb) v = rng.normal() * 3.0;
    const auto m = mi_losses(fake, std::span<const double>(emb), static_cast<int>(rng.below(5)));
    if (m.mi1 + m.mi2 != 0.0) return {false, "nonzero sum at trial " + std::to_string(t)};
  }
  return {true, std::to_string(trials) + " random embeddings"};
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles

namespace oracle {

inline int argmax_scan(const Distribution& p) {
  int best = 0;
  for (std::size_t c = 1; c < p.size(); ++c)
    if (p[c] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  return best;
}

/// Label is in the top k when fewer than k classes outrank it (higher
/// probability, or equal probability and smaller id).
inline bool in_top_k(const Distribution& p, int label, int k) {
  int outranked = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double pc = p[c], py = p[static_cast<std::size_t>(label)];
    if (pc > py || (pc == py && static_cast<int>(c) < label)) ++outranked;
  }
  return outranked < k;
}

inline double top_k(const std::vector<Distribution>& preds, const std::vector<int>& labels, int k) {
  int hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += in_top_k(preds[i], labels[i], k) ? 1 : 0;
  return 100.0 * hits / static_cast<double>(preds.size());
}

inline double weighted_f1(const std::vector<Distribution>& preds, const std::vector<int>& labels, int classes) {
  double out = 0.0;
  const double n = static_cast<double>(labels.size());
  for (int c = 0; c < classes; ++c) {
    int tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int yhat = argmax_scan(preds[i]);
      if (labels[i] == c) ++support;
      if (labels[i] == c && yhat == c) ++tp;
      if (labels[i] != c && yhat == c) ++fp;
      if (labels[i] == c && yhat != c) ++fn;
    }
    if (support == 0 || tp == 0) continue;
    const double prec = tp / static_cast<double>(tp + fp);
    const double rec = tp / static_cast<double>(tp + fn);
    out += support / n * (2.0 * prec * rec / (prec + rec));
  }
  return out;
}

inline bool same_gram(const Tokens& a, std::size_t i, const Tokens& b, std::size_t j, int n) {
  for (int k = 0; k < n; ++k)
    if (a[i + static_cast<std::size_t>(k)] != b[j + static_cast<std::size_t>(k)]) return false;
  return true;
}

/// Occurrences of the n-gram starting at a[i] inside b.
inline int count_in(const Tokens& a, std::size_t i, const Tokens& b, int n) {
  int c = 0;
  for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= b.size(); ++j) c += same_gram(a, i, b, j, n) ? 1 : 0;
  return c;
}

inline double distinct(const std::vector<Tokens>& texts, int n) {
  std::vector<std::pair<std::size_t, std::size_t>> seen;  // (text, start) of first occurrences
  int total = 0;
  for (std::size_t t = 0; t < texts.size(); ++t) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= texts[t].size(); ++i) {
      ++total;
      bool dup = false;
      for (const auto& [s, j] : seen) dup = dup || same_gram(texts[t], i, texts[s], j, n);
      if (!dup) seen.emplace_back(t, i);
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(seen.size()) / total;
}

inline double bleu(const std::vector<Tokens>& cands, const std::vector<Tokens>& refs, int n) {
  double log_sum = 0.0;
  std::size_t c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    c_len += cands[i].size();
    r_len += refs[i].size();
  }
  for (int k = 1; k <= n; ++k) {
    double matched = 0.0, total = 0.0;
    for (std::size_t s = 0; s < cands.size(); ++s) {
      const auto& cand = cands[s];
      for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= cand.size(); ++i) {
        total += 1.0;
        // Count each distinct n-gram once, at its first occurrence.
        bool first = true;
        for (std::size_t j = 0; j < i; ++j) first = first && !same_gram(cand, i, cand, j, k);
        if (!first) continue;
        matched += std::min(count_in(cand, i, cand, k), count_in(cand, i, refs[s], k));
      }
    }
    if (k == 1 && (c_len == 0 || matched == 0.0)) return 0.0;
    if (k > 1 && matched == 0.0) {
      matched = 1.0;
      total += 1.0;
    }
    log_sum += std::log(matched / total);
  }
  const double bp = c_len < r_len ? std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len)) : 1.0;
  return bp * std::exp(log_sum / n);
}

}  // namespace oracle

inline std::vector<Distribution> random_predictions(Rng& rng, std::size_t n, int classes) {
  std::vector<Distribution> out(n, Distribution(static_cast<std::size_t>(classes)));
  const bool coarse = rng.bernoulli(0.5);  // coarse values force ties
  for (auto& p : out) {
    double s = 0.0;
    for (auto& v : p) {
      v = coarse ? static_cast<double>(rng.below(4)) + 0.5 : -std::log(1.0 - rng.uniform());
      s += v;
    }
    for (auto& v : p) v /= s;
  }
  return out;
}

inline std::vector<Tokens> random_texts(Rng& rng, std::size_t n) {
  static const std::vector<std::string> words{"a", "b", "c", "d", "e"};
  std::vector<Tokens> out(n);
  for (auto& t : out) {
    const auto len = rng.below(9);
    for (std::size_t i = 0; i < len; ++i) t.push_back(words[rng.below(words.size())]);
  }
  return out;
}

/// BLEU, Distinct, weighted F1 and top-k against the oracles above.
inline CheckResult metric_oracles(std::uint64_t seed, int instances = 20) {
  Rng rng(seed);
  std::ostringstream bad;
  for (int inst = 0; inst < instances; ++inst) {
    const int classes = 2 + static_cast<int>(rng.below(7));
    const auto n = 1 + rng.below(40);
    const auto preds = random_predictions(rng, n, classes);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng.below(static_cast<std::size_t>(classes)));
    const auto af = accuracy_and_f1(preds, labels);
    if (std::abs(af.weighted_f1 - oracle::weighted_f1(preds, labels, classes)) > kOracleTolerance)
      bad << "f1@" << inst << " ";
    std::vector<int> ks;
    for (int k = 1; k <= classes; ++k) ks.push_back(k);
    const auto topk = top_k_accuracy(preds, labels, ks);
    for (int k : ks)
      if (std::abs(topk.at(k) - oracle::top_k(preds, labels, k)) > kOracleTolerance) bad << "top" << k << "@" << inst << " ";
    if (std::abs(af.accuracy - oracle::top_k(preds, labels, 1)) > kOracleTolerance) bad << "acc@" << inst << " ";

    const auto count = 1 + rng.below(6);
    const auto cands = random_texts(rng, count);
    const auto refs = random_texts(rng, count);
    for (int order : {1, 2})
      if (std::abs(distinct_n(cands, order) - oracle::distinct(cands, order)) > kOracleTolerance)
        bad << "distinct" << order << "@" << inst << " ";
    for (int order : {1, 2, 4})
      if (std::abs(bleu_n(cands, refs, order) - oracle::bleu(cands, refs, order)) > kOracleTolerance)
        bad << "bleu" << order << "@" << inst << " ";
  }
  const auto s = bad.str();
  return {s.empty(), s.empty() ? std::to_string(instances) + " random instances" : "mismatches: " + s};
}

/// Training an attacker against a frozen chatbot leaves its parameters
/// bit-identical.
inline CheckResult blackbox_checksum(std::uint64_t seed) {
  const auto data = tiny_data(seed);
  const ChatbotModel<float> model(tiny_lm(), data.vocab, derive_seed(seed, "bb-lm"));
  const auto before = model.checksum();
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.attacker.epochs = 3;
  cfg.attacker.hidden = 16;
  const auto out = run_attack(model, data.train, data.validation, data.test, cfg);
  const auto after = model.checksum();
  return {before == after && out.chatbot_checksum_before == before && out.chatbot_checksum_after == before,
          "checksum " + hex64(before) + " -> " + hex64(after)};
}

}  // namespace persona_guard::checks
