#pragma once

#include <cmath>
#include <concepts>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "persona_guard/classifier.hpp"
#include "persona_guard/lm.hpp"
#include "persona_guard/optim.hpp"

namespace persona_guard {

/// The defender's own persona predictor, trained jointly with the chatbot.
template <std::floating_point Real>
using FakeAttacker = PersonaClassifier<Real>;

inline constexpr double kProbFloor = 1e-9;

enum class KlVariant {
  /// D_KL(uniform || p).
  exact,
  /// -(1/C) * sum_k p_k. Constant for normalized p, so it carries no gradient.
  simplified,
};

enum class PredictorObjective { joint, mimic };

struct DefenseConfig {
  double lambda0 = 1.0;
  double lambda1 = 10.0;
  double lambda2 = 1.0;
  bool enable_kl = true;
  bool enable_mi = true;
  KlVariant kl_variant = KlVariant::exact;
  /// Reject lambda1 < 10 * lambda2 instead of warning.
  bool strict_ratio = false;
  LmTrainSettings chatbot;
  OptimizerSettings predictor{1e-3, 0.9, 0.999, 1e-8, 0.01, 0};
  int predictor_hidden = 256;
  /// Extra predictor-only updates on the step's detached embeddings, run
  /// before the fake attacker is evaluated for the joint update.
  int predictor_steps = 0;
  /// `joint`: the fake attacker minimises lambda1 L_kl + lambda2 lambda0 L_mi1,
  /// in the joint step and in the extra updates. `mimic`: it only minimises
  /// the cross-entropy (L_mi1), so it keeps mimicking a trained adversary
  /// and L_kl reaches the chatbot alone.
  PredictorObjective predictor_objective = PredictorObjective::joint;
  /// Recent labeled embeddings kept for those extra updates; each one then
  /// samples `predictor_batch` of them. 0 uses the current batch only.
  int predictor_replay = 0;
  int predictor_batch = 64;

  /// Validates the weights; returns false (after a warning) when the ratio
  /// recommendation is violated in non-strict mode.
  bool check() const {
    require(lambda0 >= 0 && lambda1 >= 0 && lambda2 >= 0, ErrorCode::config, "lambdas must be non-negative");
    require(predictor_hidden > 0, ErrorCode::config, "predictor_hidden must be positive");
    require(predictor_steps >= 0, ErrorCode::config, "predictor_steps must be non-negative");
    require(predictor_replay >= 0 && predictor_batch > 0, ErrorCode::config,
            "predictor_replay must be non-negative and predictor_batch positive");
    if (enable_kl && enable_mi && lambda1 < 10.0 * lambda2) {
      const std::string msg = "lambda1 (" + std::to_string(lambda1) + ") < 10 * lambda2 (" + std::to_string(lambda2) + ")";
      if (strict_ratio) fail(ErrorCode::config, msg);
      std::cerr << "warning: " << msg << "\n";
      return false;
    }
    return true;
  }

  bool any_defense() const { return enable_kl || enable_mi; }
  /// Under `mimic` the fake attacker only learns from the MI cross-entropy,
  /// so with MI off it keeps its initialization.
  bool predictor_learns() const {
    return predictor_objective == PredictorObjective::joint ? any_defense() : enable_mi;
  }
};

inline json to_json(const DefenseConfig& c) {
  return {{"lambda0", c.lambda0},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"enable_kl", c.enable_kl},
          {"enable_mi", c.enable_mi},
          {"kl_variant", c.kl_variant == KlVariant::exact ? "exact" : "simplified"},
          {"strict_ratio", c.strict_ratio},
          {"lr_chatbot", c.chatbot.optimizer.lr},
          {"lr_predictor", c.predictor.lr},
          {"warmup_steps", c.chatbot.optimizer.warmup_steps},
          {"epochs", c.chatbot.epochs},
          {"seed", c.chatbot.seed},
          {"chatbot", to_json(c.chatbot)},
          {"predictor", to_json(c.predictor)},
          {"predictor_hidden", c.predictor_hidden},
          {"predictor_steps", c.predictor_steps},
          {"predictor_objective", c.predictor_objective == PredictorObjective::joint ? "joint" : "mimic"},
          {"predictor_replay", c.predictor_replay},
          {"predictor_batch", c.predictor_batch}};
}

/// Nested "chatbot"/"predictor" blocks are read first; the flat keys
/// (lr_chatbot, lr_predictor, warmup_steps, epochs, seed) override them.
inline DefenseConfig defense_config_from_json(const json& j, DefenseConfig c = {}) {
  c.lambda0 = j.value("lambda0", c.lambda0);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.enable_kl = j.value("enable_kl", c.enable_kl);
  c.enable_mi = j.value("enable_mi", c.enable_mi);
  if (j.contains("kl_variant")) {
    const auto v = j["kl_variant"].get<std::string>();
    require(v == "exact" || v == "simplified", ErrorCode::config, "kl_variant must be exact or simplified");
    c.kl_variant = v == "exact" ? KlVariant::exact : KlVariant::simplified;
  }
  c.strict_ratio = j.value("strict_ratio", c.strict_ratio);
  if (j.contains("chatbot")) c.chatbot = lm_train_settings_from_json(j["chatbot"], c.chatbot);
  if (j.contains("predictor")) c.predictor = optimizer_settings_from_json(j["predictor"], c.predictor);
  c.chatbot.optimizer.lr = j.value("lr_chatbot", c.chatbot.optimizer.lr);
  c.predictor.lr = j.value("lr_predictor", c.predictor.lr);
  c.chatbot.optimizer.warmup_steps = j.value("warmup_steps", c.chatbot.optimizer.warmup_steps);
  c.chatbot.epochs = j.value("epochs", c.chatbot.epochs);
  c.chatbot.seed = j.value("seed", c.chatbot.seed);
  c.predictor_hidden = j.value("predictor_hidden", c.predictor_hidden);
  c.predictor_steps = j.value("predictor_steps", c.predictor_steps);
  c.predictor_replay = j.value("predictor_replay", c.predictor_replay);
  c.predictor_batch = j.value("predictor_batch", c.predictor_batch);
  if (j.contains("predictor_objective")) {
    const auto v = j["predictor_objective"].get<std::string>();
    require(v == "joint" || v == "mimic", ErrorCode::config, "predictor_objective must be joint or mimic");
    c.predictor_objective = v == "joint" ? PredictorObjective::joint : PredictorObjective::mimic;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

template <std::floating_point Real>
void require_distribution(std::span<const Real> probs) {
  require(!probs.empty(), ErrorCode::validation, "empty distribution");
  double sum = 0.0;
  for (Real p : probs) {
    require(std::isfinite(static_cast<double>(p)) && p >= Real(0), ErrorCode::validation,
            "distribution has a negative or non-finite entry");
    sum += static_cast<double>(p);
  }
  require(std::abs(sum - 1.0) <= 1e-6, ErrorCode::validation,
          "distribution sums to " + std::to_string(sum) + ", not 1");
}

}  // namespace detail

/// D_KL(uniform || probs) = -ln C - (1/C) sum_k ln max(p_k, 1e-9).
template <std::floating_point Real>
double kl_uniform_loss(std::span<const Real> probs) {
  detail::require_distribution(probs);
  const double C = static_cast<double>(probs.size());
  double s = 0.0;
  for (Real p : probs) s += std::log(std::max(static_cast<double>(p), kProbFloor));
  return -std::log(C) - s / C;
}

inline double kl_uniform_loss(std::initializer_list<double> probs) {
  return kl_uniform_loss(std::span<const double>(probs.begin(), probs.size()));
}

/// Gradient of the KL term with respect to the logits behind `probs`:
/// p_j - 1/C for the exact variant, zero for the simplified one.
template <std::floating_point Real>
void kl_uniform_logit_grad(std::span<const Real> probs, KlVariant variant, Real scale, Real* out) {
  const Real inv_c = Real(1) / static_cast<Real>(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (variant == KlVariant::exact) {
      out[j] += scale * (probs[j] - inv_c);
    } else {
      // d/dz_j of -(1/C) sum_k p_k = -(1/C) sum_k p_k (delta_kj - p_j) = -(1/C) (p_j - p_j)
      Real s = 0;
      for (std::size_t k = 0; k < probs.size(); ++k) s += probs[k] * ((k == j ? Real(1) : Real(0)) - probs[j]);
      out[j] += scale * (-inv_c * s);
    }
  }
}

template <std::floating_point Real>
double kl_variant_value(std::span<const Real> probs, KlVariant variant) {
  if (variant == KlVariant::exact) return kl_uniform_loss(probs);
  double s = 0.0;
  for (Real p : probs) s += static_cast<double>(p);
  return -s / static_cast<double>(probs.size());
}

struct MiLosses {
  double mi1 = 0.0;
  double mi2 = 0.0;
};

/// L_mi1 = CE(A_p(f(u)), s) for the predictor and L_mi2 = -L_mi1 for the
/// chatbot. Gradient routing is applied by the caller (see defended_step).
template <std::floating_point Real>
MiLosses mi_losses(const FakeAttacker<Real>& fake, std::span<const Real> embedding, int label) {
  require(label >= 0, ErrorCode::validation, "mi_losses needs a labeled utterance");
  require(label < fake.num_classes(), ErrorCode::validation, "label outside the predictor's classes");
  const auto p = fake.predict(embedding);
  const double ce = -std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(label)]), 1e-300));
  return {ce, -ce};
}

inline double combined_mi_loss(const DefenseConfig& cfg, double mi1, double mi2) {
  return cfg.lambda0 * mi1 + mi2;
}

// ---------------------------------------------------------------------------
// Joint step

struct StepReport {
  double lm = 0.0;
  double kl = 0.0;
  double mi1 = 0.0;
  double mi2 = 0.0;
  double mi = 0.0;
  /// L_f + lambda1 L_kl + lambda2 L_mi.
  double total = 0.0;
  std::size_t labeled_turns = 0;
  /// Fraction of labeled turns the fake attacker classified correctly.
  double predictor_accuracy = 0.0;
};

inline json to_json(const StepReport& r) {
  return {{"lm", r.lm}, {"kl", r.kl}, {"mi1", r.mi1}, {"mi2", r.mi2}, {"mi", r.mi},
          {"total", r.total}, {"labeled_turns", r.labeled_turns}, {"predictor_accuracy", r.predictor_accuracy}};
}

namespace detail {

inline void check_component(const char* name, double value) {
  if (std::isnan(value)) fail(ErrorCode::nan_loss, std::string("NaN in ") + name);
}

}  // namespace detail

/// Two optimizers plus the schedule state carried across steps.
template <std::floating_point Real>
struct DefenseOptimizers {
  AdamW<Real> chatbot;
  AdamW<Real> predictor;
  std::vector<std::uint8_t> chatbot_decay;
  std::vector<std::uint8_t> predictor_decay;
  int step = 0;
  int total_steps = 1;
  /// Ring buffer of detached labeled embeddings for predictor-only updates.
  std::vector<Real> replay;
  std::vector<int> replay_labels;
  std::size_t replay_next = 0;
  Rng replay_rng;

  DefenseOptimizers(const ChatbotModel<Real>& model, const FakeAttacker<Real>& fake, const DefenseConfig& cfg,
                    int total)
      : chatbot(model.params().size(), cfg.chatbot.optimizer),
        predictor(fake.params().size(), cfg.predictor),
        chatbot_decay(model.layout().decay_mask()),
        predictor_decay(fake.layout().decay_mask()),
        total_steps(total),
        replay_rng(derive_seed(cfg.chatbot.seed, "predictor-replay")) {}

  void remember(std::span<const Real> inputs, std::span<const int> labels, std::size_t capacity) {
    const std::size_t d = labels.empty() ? 0 : inputs.size() / labels.size();
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const auto row = inputs.subspan(r * d, d);
      if (replay_labels.size() < capacity) {
        replay.insert(replay.end(), row.begin(), row.end());
        replay_labels.push_back(labels[r]);
      } else {
        std::copy(row.begin(), row.end(), replay.begin() + static_cast<std::ptrdiff_t>(replay_next * d));
        replay_labels[replay_next] = labels[r];
        replay_next = (replay_next + 1) % capacity;
      }
    }
  }

  /// `n` rows drawn with replacement from the buffer.
  std::pair<std::vector<Real>, std::vector<int>> sample(std::size_t n) {
    const std::size_t d = replay.size() / replay_labels.size();
    std::pair<std::vector<Real>, std::vector<int>> out;
    out.first.reserve(n * d);
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = replay_rng.below(replay_labels.size());
      out.first.insert(out.first.end(), replay.begin() + static_cast<std::ptrdiff_t>(i * d),
                       replay.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      out.second.push_back(replay_labels[i]);
    }
    return out;
  }
};

/// Gradients of one batch without applying them. The chatbot buffer receives
/// d(L_f + l1 L_kl + l2 L_mi2)/d(theta_f); the predictor buffer receives
/// d(l1 L_kl + l2 l0 L_mi1)/d(theta_Ap), without the KL term under `mimic`.
/// Persona terms average over the labeled turns of the batch.
template <std::floating_point Real>
using LabeledEmbeddingHook = std::function<void(std::span<const Real>, std::span<const int>)>;

/// `before_fake`, when set, sees the batch's detached labeled embeddings
/// before the fake attacker is evaluated on them.
template <std::floating_point Real>
StepReport defended_gradients(ChatbotModel<Real>& model, FakeAttacker<Real>& fake, const AlignedCorpus& corpus,
                              std::span<const std::size_t> batch, const DefenseConfig& cfg, Rng* dropout_rng,
                              const LabeledEmbeddingHook<Real>& before_fake = {}) {
  const int d = model.config().model_dim;
  const int C = fake.num_classes();
  std::vector<DialogEncoding> encs;
  std::size_t token_count = 0;
  for (std::size_t i : batch) {
    encs.push_back(encode_dialog(corpus.conversations[i], model.vocab(), model.config().context_window,
                                 cfg.chatbot.mask));
    for (std::size_t j = 1; j < encs.back().target.size(); ++j) token_count += encs.back().target[j];
  }

  std::vector<ForwardCache<Real>> caches(encs.size());
  for (std::size_t b = 0; b < encs.size(); ++b) forward(model, encs[b].tokens, caches[b], dropout_rng);

  // Labeled turns that survived truncation.
  struct Slot {
    std::size_t enc;
    int pos;
  };
  std::vector<Slot> slots;
  std::vector<Real> inputs;
  std::vector<int> labels;
  if (cfg.any_defense()) {
    for (std::size_t b = 0; b < encs.size(); ++b) {
      const auto& conv = corpus.conversations[batch[b]];
      for (std::size_t t = 0; t < conv.turns.size(); ++t) {
        const int pos = encs[b].boundaries[t];
        if (!conv.turns[t].labeled() || pos < 0) continue;
        require(conv.turns[t].persona_id < C, ErrorCode::validation, "persona label outside predictor classes");
        slots.push_back({b, pos});
        const auto h = caches[b].hidden(pos, d);
        inputs.insert(inputs.end(), h.begin(), h.end());
        labels.push_back(conv.turns[t].persona_id);
      }
    }
  }

  StepReport report;
  report.labeled_turns = slots.size();
  std::vector<Real> d_emb;
  if (!slots.empty()) {
    const int N = static_cast<int>(slots.size());
    if (before_fake) {
      before_fake(std::span<const Real>(inputs), std::span<const int>(labels));
      fake.zero_grad();
    }
    typename FakeAttacker<Real>::Cache fc;
    fake.forward(inputs, N, fc);
    const auto probs = softmax_rows(std::span<const Real>(fc.logits), N, C);
    std::vector<Real> d_chat(static_cast<std::size_t>(N) * C, Real(0));
    std::vector<Real> d_pred(static_cast<std::size_t>(N) * C, Real(0));
    const Real inv_n = Real(1) / static_cast<Real>(N);
    const Real l1 = cfg.enable_kl ? static_cast<Real>(cfg.lambda1) : Real(0);
    const Real l2 = cfg.enable_mi ? static_cast<Real>(cfg.lambda2) : Real(0);
    const Real l0 = static_cast<Real>(cfg.lambda0);
    std::size_t hits = 0;
    for (int r = 0; r < N; ++r) {
      const std::span<const Real> p(probs.data() + static_cast<std::ptrdiff_t>(r) * C, static_cast<std::size_t>(C));
      const int y = labels[static_cast<std::size_t>(r)];
      report.kl += kl_variant_value(p, cfg.kl_variant);
      const double ce = -std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(y)]), 1e-300));
      report.mi1 += ce;
      hits += static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == y ? 1 : 0;
      Real* dc = d_chat.data() + static_cast<std::ptrdiff_t>(r) * C;
      Real* dp = d_pred.data() + static_cast<std::ptrdiff_t>(r) * C;
      if (cfg.enable_kl) {
        kl_uniform_logit_grad(p, cfg.kl_variant, l1 * inv_n, dc);
        if (cfg.predictor_objective == PredictorObjective::joint)
          kl_uniform_logit_grad(p, cfg.kl_variant, l1 * inv_n, dp);
      }
      if (cfg.enable_mi) {
        for (int c = 0; c < C; ++c) {
          const Real g = (p[static_cast<std::size_t>(c)] - (c == y ? Real(1) : Real(0))) * inv_n;
          dc[c] -= l2 * g;       // L_mi2 = -CE, routed to theta_f
          dp[c] += l2 * l0 * g;  // L_mi1 = CE, routed to theta_Ap
        }
      }
    }
    report.kl /= N;
    report.mi1 /= N;
    report.mi2 = -report.mi1;
    report.predictor_accuracy = static_cast<double>(hits) / N;
    d_emb.assign(static_cast<std::size_t>(N) * d, Real(0));
    fake.backward(fc, d_chat, false, d_emb.data());
    fake.backward(fc, d_pred, true, nullptr);
  }
  if (!cfg.enable_kl) report.kl = 0.0;
  if (!cfg.enable_mi) report.mi1 = report.mi2 = 0.0;

  if (token_count > 0) {
    const Real scale = Real(1) / static_cast<Real>(token_count);
    std::vector<Real> d_hidden;
    std::size_t next_slot = 0;
    double nll = 0.0;
    for (std::size_t b = 0; b < encs.size(); ++b) {
      d_hidden.assign(caches[b].lnf.size(), Real(0));
      nll += lm_head_loss(model, caches[b], encs[b].target, scale, d_hidden.data(), model.g(model.wte())).nll;
      for (; next_slot < slots.size() && slots[next_slot].enc == b; ++next_slot)
        kernels::axpy(d_hidden.data() + static_cast<std::ptrdiff_t>(slots[next_slot].pos) * d, Real(1),
                      d_emb.data() + static_cast<std::ptrdiff_t>(next_slot) * d, d);
      backward(model, caches[b], std::span<const Real>(d_hidden));
    }
    report.lm = nll / static_cast<double>(token_count);
  } else {
    std::vector<Real> d_hidden;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const auto b = slots[s].enc;
      d_hidden.assign(caches[b].lnf.size(), Real(0));
      kernels::axpy(d_hidden.data() + static_cast<std::ptrdiff_t>(slots[s].pos) * d, Real(1),
                    d_emb.data() + static_cast<std::ptrdiff_t>(s) * d, d);
      backward(model, caches[b], std::span<const Real>(d_hidden));
    }
  }

  report.mi = combined_mi_loss(cfg, report.mi1, report.mi2);
  report.total = report.lm + (cfg.enable_kl ? cfg.lambda1 * report.kl : 0.0) +
                 (cfg.enable_mi ? cfg.lambda2 * report.mi : 0.0);
  detail::check_component("L_f", report.lm);
  detail::check_component("L_kl", report.kl);
  detail::check_component("L_mi1", report.mi1);
  detail::check_component("L_mi2", report.mi2);
  return report;
}

namespace detail {

/// Predictor-only update on detached embeddings.
template <std::floating_point Real>
void predictor_only_step(FakeAttacker<Real>& fake, std::span<const Real> inputs, std::span<const int> labels,
                         const DefenseConfig& cfg, AdamW<Real>& opt, std::span<const std::uint8_t> decay, double lr) {
  const int N = static_cast<int>(labels.size());
  const int C = fake.num_classes();
  typename FakeAttacker<Real>::Cache fc;
  fake.forward(inputs, N, fc);
  const auto probs = softmax_rows(std::span<const Real>(fc.logits), N, C);
  std::vector<Real> dp(probs.size(), Real(0));
  const Real inv_n = Real(1) / static_cast<Real>(N);
  const bool mimic = cfg.predictor_objective == PredictorObjective::mimic;
  for (int r = 0; r < N; ++r) {
    const std::span<const Real> p(probs.data() + static_cast<std::ptrdiff_t>(r) * C, static_cast<std::size_t>(C));
    Real* g = dp.data() + static_cast<std::ptrdiff_t>(r) * C;
    const int y = labels[static_cast<std::size_t>(r)];
    if (mimic) {
      for (int c = 0; c < C; ++c) g[c] += inv_n * (p[static_cast<std::size_t>(c)] - (c == y ? Real(1) : Real(0)));
      continue;
    }
    if (cfg.enable_kl) kl_uniform_logit_grad(p, cfg.kl_variant, static_cast<Real>(cfg.lambda1) * inv_n, g);
    if (cfg.enable_mi)
      for (int c = 0; c < C; ++c)
        g[c] += static_cast<Real>(cfg.lambda2 * cfg.lambda0) * inv_n *
                (p[static_cast<std::size_t>(c)] - (c == y ? Real(1) : Real(0)));
  }
  fake.zero_grad();
  fake.backward(fc, dp, true, nullptr);
  opt.step(fake.params(), fake.grads(), lr, decay);
}

}  // namespace detail

/// One optimization step of the joint objective; both optimizers are
/// applied sequentially from the same forward pass.
template <std::floating_point Real>
StepReport defended_step(ChatbotModel<Real>& model, FakeAttacker<Real>& fake, const AlignedCorpus& corpus,
                         std::span<const std::size_t> batch, const DefenseConfig& cfg, DefenseOptimizers<Real>& opt,
                         Rng* dropout_rng = nullptr) {
  const double lr_chat = scheduled_lr(cfg.chatbot.optimizer.lr, opt.step, cfg.chatbot.optimizer.warmup_steps,
                                      opt.total_steps);
  // The predictor keeps its peak rate after warmup so it stays adaptive
  // while the chatbot anneals.
  const double lr_pred = scheduled_lr(cfg.predictor.lr, opt.step, cfg.predictor.warmup_steps, 0);
  LabeledEmbeddingHook<Real> hook;
  if (cfg.predictor_learns() && cfg.predictor_steps > 0)
    hook = [&](std::span<const Real> inputs, std::span<const int> labels) {
      if (cfg.predictor_replay > 0) opt.remember(inputs, labels, static_cast<std::size_t>(cfg.predictor_replay));
      for (int k = 0; k < cfg.predictor_steps; ++k) {
        if (cfg.predictor_replay > 0 && !opt.replay_labels.empty()) {
          const auto [x, y] = opt.sample(static_cast<std::size_t>(cfg.predictor_batch));
          detail::predictor_only_step(fake, std::span<const Real>(x), std::span<const int>(y), cfg, opt.predictor,
                                      opt.predictor_decay, lr_pred);
        } else {
          detail::predictor_only_step(fake, inputs, labels, cfg, opt.predictor, opt.predictor_decay, lr_pred);
        }
      }
    };
  model.zero_grad();
  fake.zero_grad();
  const auto report = defended_gradients(model, fake, corpus, batch, cfg, dropout_rng, hook);
  clip_grad_norm(model.grads(), cfg.chatbot.optimizer.clip_norm);
  opt.chatbot.step(model.params(), model.grads(), lr_chat, opt.chatbot_decay);
  if (report.labeled_turns > 0 && cfg.predictor_learns())
    opt.predictor.step(fake.params(), fake.grads(), lr_pred, opt.predictor_decay);
  ++opt.step;
  return report;
}

struct EpochComponents {
  double lm = 0.0, kl = 0.0, mi1 = 0.0, mi2 = 0.0, mi = 0.0, total = 0.0, predictor_accuracy = 0.0;
  std::size_t steps = 0;
};

inline json to_json(const EpochComponents& e) {
  return {{"lm", e.lm}, {"kl", e.kl}, {"mi1", e.mi1}, {"mi2", e.mi2}, {"mi", e.mi},
          {"total", e.total}, {"predictor_accuracy", e.predictor_accuracy}, {"steps", e.steps}};
}

struct DefenseHistory {
  std::vector<StepReport> steps;
  std::vector<EpochComponents> epochs;
};

inline json to_json(const DefenseHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) epochs.push_back(to_json(e));
  return {{"epochs", epochs}};
}

template <std::floating_point Real>
FakeAttacker<Real> make_fake_attacker(const ChatbotModel<Real>& model, int num_classes, const DefenseConfig& cfg) {
  return FakeAttacker<Real>(model.config().model_dim, cfg.predictor_hidden, num_classes,
                            derive_seed(cfg.chatbot.seed, "fake-attacker"));
}

/// Full training loop over defended_step. Batches and dropout draw from the
/// same streams as train_lm, so with every weight at zero the chatbot ends
/// with the same parameters.
template <std::floating_point Real>
DefenseHistory train_defended(ChatbotModel<Real>& model, FakeAttacker<Real>& fake, const AlignedCorpus& corpus,
                              const DefenseConfig& cfg,
                              const std::function<void(int, const StepReport&)>& on_step = {}) {
  require(!corpus.empty(), ErrorCode::empty_corpus, "train_defended needs a nonempty corpus");
  cfg.check();
  if (cfg.any_defense()) {
    const bool labeled = std::any_of(corpus.conversations.begin(), corpus.conversations.end(), [](const auto& c) {
      return std::any_of(c.turns.begin(), c.turns.end(), [](const Utterance& u) { return u.labeled(); });
    });
    require(labeled, ErrorCode::empty_dataset, "defense enabled but the corpus has no labeled turns");
  }
  const auto& s = cfg.chatbot;
  Rng rng(derive_seed(s.seed, "lm-batches"));
  Rng dropout_rng(derive_seed(s.seed, "lm-dropout"));
  const int total = planned_steps(corpus.conversations.size(), s.batch_dialogs, s.epochs, s.max_steps);
  DefenseOptimizers<Real> opt(model, fake, cfg, total);
  DefenseHistory history;
  DivergenceGuard guard;
  for (int epoch = 0; epoch < s.epochs && opt.step < total; ++epoch) {
    EpochComponents acc;
    for (const auto& batch : epoch_batches(corpus.conversations.size(), s.batch_dialogs, rng)) {
      if (opt.step >= total) break;
      const int step = opt.step;
      const auto r = defended_step(model, fake, corpus, batch, cfg, opt, &dropout_rng);
      guard.observe(r.lm);
      acc.lm += r.lm;
      acc.kl += r.kl;
      acc.mi1 += r.mi1;
      acc.mi2 += r.mi2;
      acc.mi += r.mi;
      acc.total += r.total;
      acc.predictor_accuracy += r.predictor_accuracy;
      ++acc.steps;
      history.steps.push_back(r);
      if (on_step) on_step(step, r);
    }
    if (acc.steps > 0) {
      const double n = static_cast<double>(acc.steps);
      acc.lm /= n;
      acc.kl /= n;
      acc.mi1 /= n;
      acc.mi2 /= n;
      acc.mi /= n;
      acc.total /= n;
      acc.predictor_accuracy /= n;
    }
    history.epochs.push_back(acc);
  }
  return history;
}

}  // namespace persona_guard
