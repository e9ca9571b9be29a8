#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "persona_guard/corpus.hpp"
#include "persona_guard/kernels.hpp"
#include "persona_guard/optim.hpp"
#include "persona_guard/params.hpp"
#include "persona_guard/rng.hpp"
#include "persona_guard/tokenizer.hpp"

namespace persona_guard {

struct LMConfig {
  int layers = 2;
  int model_dim = 128;
  int heads = 4;
  int context_window = 256;
  int vocab_size = 0;
  double dropout = 0.0;

  void check() const {
    require(layers >= 1, ErrorCode::config, "layers must be positive");
    require(model_dim >= 1 && heads >= 1, ErrorCode::config, "model_dim and heads must be positive");
    require(model_dim % heads == 0, ErrorCode::config, "model_dim must be divisible by heads");
    require(context_window >= 2, ErrorCode::config, "context_window must be at least 2");
    require(vocab_size > Vocab::kUnknown, ErrorCode::config, "vocab_size too small");
    require(dropout >= 0.0 && dropout < 1.0, ErrorCode::config, "dropout must be in [0, 1)");
  }
};

inline json to_json(const LMConfig& c) {
  return {{"layers", c.layers},   {"model_dim", c.model_dim},
          {"heads", c.heads},     {"context_window", c.context_window},
          {"vocab_size", c.vocab_size}, {"dropout", c.dropout}};
}

inline LMConfig lm_config_from_json(const json& j, LMConfig c = {}) {
  c.layers = j.value("layers", c.layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.heads = j.value("heads", c.heads);
  c.context_window = j.value("context_window", c.context_window);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

// ---------------------------------------------------------------------------
// Dialog encoding

enum class LossMask { all_turns, speaker_b };

struct DialogEncoding {
  std::vector<int> tokens;
  /// Separator position for each turn of the source conversation; -1 when the
  /// turn was truncated out of the window.
  std::vector<int> boundaries;
  /// target[i] != 0 when token i is a prediction target (position 0 never is).
  std::vector<std::uint8_t> target;
  bool truncated = false;

  int length() const { return static_cast<int>(tokens.size()); }
};

/// utt_1 sep utt_2 sep ..., left-truncated to the window.
inline DialogEncoding encode_dialog(const Conversation& conv, const Vocab& vocab, int window,
                                    LossMask mask = LossMask::all_turns) {
  require(!conv.turns.empty(), ErrorCode::validation, "cannot encode an empty conversation");
  DialogEncoding enc;
  for (const auto& turn : conv.turns) {
    const bool counts = mask == LossMask::all_turns || turn.speaker == Speaker::B;
    for (int id : encode_text(vocab, turn.text)) {
      enc.tokens.push_back(id);
      enc.target.push_back(counts ? 1 : 0);
    }
    enc.tokens.push_back(Vocab::kSeparator);
    enc.target.push_back(counts ? 1 : 0);
    enc.boundaries.push_back(static_cast<int>(enc.tokens.size()) - 1);
  }
  const int total = static_cast<int>(enc.tokens.size());
  if (total > window) {
    const int drop = total - window;
    enc.tokens.erase(enc.tokens.begin(), enc.tokens.begin() + drop);
    enc.target.erase(enc.target.begin(), enc.target.begin() + drop);
    for (int& b : enc.boundaries) b = b >= drop ? b - drop : -1;
    enc.truncated = true;
  }
  if (!enc.target.empty()) enc.target[0] = 0;
  return enc;
}

/// Prefix encoding ending at the separator of `turn_index`, so that turn is
/// always inside the window.
inline DialogEncoding encode_prefix(const Conversation& conv, std::size_t turn_index,
                                    const Vocab& vocab, int window) {
  Conversation prefix{conv.dialog_id, {conv.turns.begin(),
                                       conv.turns.begin() + static_cast<std::ptrdiff_t>(turn_index) + 1}};
  return encode_dialog(prefix, vocab, window);
}

// ---------------------------------------------------------------------------
// Model

template <std::floating_point Real>
class ChatbotModel {
 public:
  struct LayerOffsets {
    std::size_t ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t ln2_w, ln2_b, fc_w, fc_b, fcproj_w, fcproj_b;
  };

  ChatbotModel() = default;

  /// GPT-2 style initialization: N(0, 0.02), residual projections scaled by
  /// 1/sqrt(2 * layers).
  ChatbotModel(LMConfig config, Vocab vocab, std::uint64_t seed)
      : config_(config), vocab_(std::move(vocab)) {
    config_.vocab_size = vocab_.size();
    config_.check();
    build_layout();
    params_.assign(layout_.total(), Real(0));
    grads_.assign(layout_.total(), Real(0));
    Rng rng(seed);
    const double proj_std = 0.02 / std::sqrt(2.0 * config_.layers);
    for (const auto& t : layout_.tensors()) {
      const bool is_ln_weight = t.name.find("ln") != std::string::npos && t.name.ends_with(".w");
      const bool is_bias = t.name.ends_with(".b");
      const bool is_proj = t.name.ends_with("proj.w");
      for (std::size_t i = 0; i < t.size; ++i) {
        Real v = 0;
        if (is_ln_weight) {
          v = 1;
        } else if (!is_bias) {
          v = static_cast<Real>(rng.normal() * (is_proj ? proj_std : 0.02));
        }
        params_[t.offset + i] = v;
      }
    }
  }

  const LMConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<Real> params() { return params_; }
  std::span<const Real> params() const { return params_; }
  std::span<Real> grads() { return grads_; }
  std::span<const Real> grads() const { return grads_; }
  void zero_grad() { std::fill(grads_.begin(), grads_.end(), Real(0)); }

  const Real* p(std::size_t off) const { return params_.data() + off; }
  Real* g(std::size_t off) { return grads_.data() + off; }

  std::size_t wte() const { return wte_; }
  std::size_t wpe() const { return wpe_; }
  std::size_t lnf_w() const { return lnf_w_; }
  std::size_t lnf_b() const { return lnf_b_; }
  const LayerOffsets& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

  std::uint64_t checksum() const { return persona_guard::checksum(std::span<const Real>(params_)); }

  /// Copies parameters from a model of any precision with the same layout.
  template <std::floating_point Other>
  static ChatbotModel convert(const ChatbotModel<Other>& other) {
    ChatbotModel out;
    out.config_ = other.config();
    out.vocab_ = other.vocab();
    out.build_layout();
    out.params_.resize(out.layout_.total());
    out.grads_.assign(out.layout_.total(), Real(0));
    auto src = other.params();
    for (std::size_t i = 0; i < src.size(); ++i) out.params_[i] = static_cast<Real>(src[i]);
    return out;
  }

  /// Builds an uninitialized model and fills it from a flat parameter vector.
  static ChatbotModel from_params(LMConfig config, Vocab vocab, std::span<const float> values) {
    ChatbotModel out;
    out.config_ = config;
    out.vocab_ = std::move(vocab);
    out.config_.vocab_size = out.vocab_.size();
    out.config_.check();
    out.build_layout();
    require(values.size() == out.layout_.total(), ErrorCode::validation,
            "parameter count mismatch: expected " + std::to_string(out.layout_.total()) +
                ", got " + std::to_string(values.size()));
    out.params_.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out.params_[i] = static_cast<Real>(values[i]);
    out.grads_.assign(values.size(), Real(0));
    return out;
  }

 private:
  void build_layout() {
    const int d = config_.model_dim;
    layout_ = ParamLayout{};
    wte_ = layout_.add("wte", {config_.vocab_size, d}, true);
    wpe_ = layout_.add("wpe", {config_.context_window, d}, true);
    layers_.clear();
    for (int l = 0; l < config_.layers; ++l) {
      const std::string pre = "h" + std::to_string(l) + ".";
      LayerOffsets o{};
      o.ln1_w = layout_.add(pre + "ln1.w", {d}, false);
      o.ln1_b = layout_.add(pre + "ln1.b", {d}, false);
      o.qkv_w = layout_.add(pre + "attn.qkv.w", {d, 3 * d}, true);
      o.qkv_b = layout_.add(pre + "attn.qkv.b", {3 * d}, false);
      o.proj_w = layout_.add(pre + "attn.proj.w", {d, d}, true);
      o.proj_b = layout_.add(pre + "attn.proj.b", {d}, false);
      o.ln2_w = layout_.add(pre + "ln2.w", {d}, false);
      o.ln2_b = layout_.add(pre + "ln2.b", {d}, false);
      o.fc_w = layout_.add(pre + "mlp.fc.w", {d, 4 * d}, true);
      o.fc_b = layout_.add(pre + "mlp.fc.b", {4 * d}, false);
      o.fcproj_w = layout_.add(pre + "mlp.proj.w", {4 * d, d}, true);
      o.fcproj_b = layout_.add(pre + "mlp.proj.b", {d}, false);
      layers_.push_back(o);
    }
    lnf_w_ = layout_.add("lnf.w", {d}, false);
    lnf_b_ = layout_.add("lnf.b", {d}, false);
  }

  template <std::floating_point>
  friend class ChatbotModel;

  LMConfig config_;
  Vocab vocab_;
  ParamLayout layout_;
  std::vector<Real> params_;
  std::vector<Real> grads_;
  std::vector<LayerOffsets> layers_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_w_ = 0, lnf_b_ = 0;
};

/// Activations of one forward pass, kept for the backward pass.
template <std::floating_point Real>
struct ForwardCache {
  int rows = 0;
  std::vector<int> tokens;
  std::vector<std::vector<Real>> residual;  // input of layer l; residual[L] is the stack output
  struct Layer {
    std::vector<Real> ln1, ln1_mean, ln1_rstd, qkv, att, atty, res1;
    std::vector<Real> ln2, ln2_mean, ln2_rstd, fch, fch_gelu;
    std::vector<Real> drop1, drop2;  // empty when dropout is off
  };
  std::vector<Layer> layers;
  std::vector<Real> lnf, lnf_mean, lnf_rstd;

  /// Final-layer hidden state at position t (the output of the last layer norm).
  std::span<const Real> hidden(int t, int dim) const {
    return {lnf.data() + static_cast<std::ptrdiff_t>(t) * dim, static_cast<std::size_t>(dim)};
  }
};

/// Runs the transformer over `tokens`. Passing `dropout_rng` enables dropout.
template <std::floating_point Real>
void forward(const ChatbotModel<Real>& model, std::span<const int> tokens, ForwardCache<Real>& cache,
             Rng* dropout_rng = nullptr) {
  namespace k = kernels;
  const auto& cfg = model.config();
  const int T = static_cast<int>(tokens.size());
  const int d = cfg.model_dim;
  require(T >= 1 && T <= cfg.context_window, ErrorCode::validation,
          "sequence length " + std::to_string(T) + " outside the context window");
  const auto td = static_cast<std::size_t>(T) * static_cast<std::size_t>(d);
  cache.rows = T;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.residual.resize(static_cast<std::size_t>(cfg.layers) + 1);
  cache.layers.resize(static_cast<std::size_t>(cfg.layers));

  auto& x0 = cache.residual[0];
  x0.resize(td);
  for (int t = 0; t < T; ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    require(tok >= 0 && tok < cfg.vocab_size, ErrorCode::validation, "token id out of range");
    const Real* e = model.p(model.wte()) + static_cast<std::ptrdiff_t>(tok) * d;
    const Real* pe = model.p(model.wpe()) + static_cast<std::ptrdiff_t>(t) * d;
    Real* o = x0.data() + static_cast<std::ptrdiff_t>(t) * d;
    for (int i = 0; i < d; ++i) o[i] = e[i] + pe[i];
  }

  const bool use_dropout = dropout_rng != nullptr && cfg.dropout > 0.0;
  const Real keep_scale = use_dropout ? static_cast<Real>(1.0 / (1.0 - cfg.dropout)) : Real(1);
  auto make_mask = [&](std::vector<Real>& mask) {
    if (!use_dropout) {
      mask.clear();
      return;
    }
    mask.resize(td);
    for (auto& m : mask) m = dropout_rng->bernoulli(cfg.dropout) ? Real(0) : keep_scale;
  };

  std::vector<Real> tmp(td);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& o = model.layer(l);
    auto& c = cache.layers[static_cast<std::size_t>(l)];
    const auto& in = cache.residual[static_cast<std::size_t>(l)];
    c.ln1.resize(td);
    c.ln1_mean.resize(static_cast<std::size_t>(T));
    c.ln1_rstd.resize(static_cast<std::size_t>(T));
    k::layernorm_forward(c.ln1.data(), c.ln1_mean.data(), c.ln1_rstd.data(), in.data(),
                         model.p(o.ln1_w), model.p(o.ln1_b), T, d);
    c.qkv.resize(3 * td);
    k::linear_forward(c.qkv.data(), c.ln1.data(), model.p(o.qkv_w), model.p(o.qkv_b), T, d, 3 * d);
    c.att.resize(static_cast<std::size_t>(cfg.heads) * static_cast<std::size_t>(T) *
                 static_cast<std::size_t>(T));
    c.atty.resize(td);
    k::attention_forward(c.atty.data(), c.att.data(), c.qkv.data(), T, d, cfg.heads);
    k::linear_forward(tmp.data(), c.atty.data(), model.p(o.proj_w), model.p(o.proj_b), T, d, d);
    make_mask(c.drop1);
    c.res1.resize(td);
    for (std::size_t i = 0; i < td; ++i)
      c.res1[i] = in[i] + (use_dropout ? tmp[i] * c.drop1[i] : tmp[i]);

    c.ln2.resize(td);
    c.ln2_mean.resize(static_cast<std::size_t>(T));
    c.ln2_rstd.resize(static_cast<std::size_t>(T));
    k::layernorm_forward(c.ln2.data(), c.ln2_mean.data(), c.ln2_rstd.data(), c.res1.data(),
                         model.p(o.ln2_w), model.p(o.ln2_b), T, d);
    c.fch.resize(4 * td);
    c.fch_gelu.resize(4 * td);
    k::linear_forward(c.fch.data(), c.ln2.data(), model.p(o.fc_w), model.p(o.fc_b), T, d, 4 * d);
    k::gelu_forward(c.fch_gelu.data(), c.fch.data(), 4 * td);
    k::linear_forward(tmp.data(), c.fch_gelu.data(), model.p(o.fcproj_w), model.p(o.fcproj_b), T,
                      4 * d, d);
    make_mask(c.drop2);
    auto& out = cache.residual[static_cast<std::size_t>(l) + 1];
    out.resize(td);
    for (std::size_t i = 0; i < td; ++i)
      out[i] = c.res1[i] + (use_dropout ? tmp[i] * c.drop2[i] : tmp[i]);
  }
  cache.lnf.resize(td);
  cache.lnf_mean.resize(static_cast<std::size_t>(T));
  cache.lnf_rstd.resize(static_cast<std::size_t>(T));
  k::layernorm_forward(cache.lnf.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(),
                       cache.residual.back().data(), model.p(model.lnf_w()), model.p(model.lnf_b()),
                       T, d);
}

/// Next-token logits at position t (tied input/output embedding).
template <std::floating_point Real>
void next_token_logits(const ChatbotModel<Real>& model, const ForwardCache<Real>& cache, int t,
                       std::span<Real> out) {
  const int d = model.config().model_dim;
  const Real* h = cache.lnf.data() + static_cast<std::ptrdiff_t>(t) * d;
  const Real* wte = model.p(model.wte());
  for (int v = 0; v < model.config().vocab_size; ++v)
    out[static_cast<std::size_t>(v)] = kernels::dot(h, wte + static_cast<std::ptrdiff_t>(v) * d, d);
}

struct LossSum {
  double nll = 0.0;
  std::size_t count = 0;
};

/// Sums -log Pr(token_i | tokens_<i) over target positions. When `d_hidden`
/// is given, adds scale * d(sum)/d(hidden) into it and the tied head's
/// weight gradient into `d_wte`.
template <std::floating_point Real>
LossSum lm_head_loss(const ChatbotModel<Real>& model, const ForwardCache<Real>& cache,
                     std::span<const std::uint8_t> target, std::type_identity_t<Real> scale,
                     std::type_identity_t<Real>* d_hidden, std::type_identity_t<Real>* d_wte) {
  const int d = model.config().model_dim;
  const int V = model.config().vocab_size;
  std::vector<Real> logits(static_cast<std::size_t>(V));
  LossSum sum;
  const Real* wte = model.p(model.wte());
  for (int t = 0; t + 1 < cache.rows; ++t) {
    if (target[static_cast<std::size_t>(t) + 1] == 0) continue;
    const int y = cache.tokens[static_cast<std::size_t>(t) + 1];
    next_token_logits(model, cache, t, std::span<Real>(logits));
    const Real z_y = logits[static_cast<std::size_t>(y)];
    const Real lse = kernels::softmax_inplace(logits.data(), V);
    sum.nll += static_cast<double>(lse - z_y);
    ++sum.count;
    if (d_hidden == nullptr) continue;
    const Real* h = cache.lnf.data() + static_cast<std::ptrdiff_t>(t) * d;
    Real* dh = d_hidden + static_cast<std::ptrdiff_t>(t) * d;
    for (int v = 0; v < V; ++v) {
      const Real gv = (logits[static_cast<std::size_t>(v)] - (v == y ? Real(1) : Real(0))) * scale;
      kernels::axpy(dh, gv, wte + static_cast<std::ptrdiff_t>(v) * d, d);
      if (d_wte != nullptr) kernels::axpy(d_wte + static_cast<std::ptrdiff_t>(v) * d, gv, h, d);
    }
  }
  return sum;
}

/// Backpropagates a gradient on the final hidden states through the stack,
/// accumulating parameter gradients.
template <std::floating_point Real>
void backward(ChatbotModel<Real>& model, const ForwardCache<Real>& cache, std::span<const Real> d_hidden) {
  namespace k = kernels;
  const auto& cfg = model.config();
  const int T = cache.rows;
  const int d = cfg.model_dim;
  const auto td = static_cast<std::size_t>(T) * static_cast<std::size_t>(d);

  std::vector<Real> d_res(td, Real(0));
  k::layernorm_backward(d_res.data(), model.g(model.lnf_w()), model.g(model.lnf_b()), d_hidden.data(),
                        cache.residual.back().data(), model.p(model.lnf_w()), cache.lnf_mean.data(),
                        cache.lnf_rstd.data(), T, d);
  std::vector<Real> d_branch(td), d_fchg(4 * td), d_fch(4 * td), d_ln(td), d_res1(td), d_atty(td),
      d_qkv(3 * td), scratch(static_cast<std::size_t>(T));
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& o = model.layer(l);
    const auto& c = cache.layers[static_cast<std::size_t>(l)];
    // out = res1 + drop(mlp(ln2(res1)))
    for (std::size_t i = 0; i < td; ++i) d_branch[i] = c.drop2.empty() ? d_res[i] : d_res[i] * c.drop2[i];
    std::fill(d_fchg.begin(), d_fchg.end(), Real(0));
    k::linear_backward(d_fchg.data(), model.g(o.fcproj_w), model.g(o.fcproj_b), d_branch.data(),
                       c.fch_gelu.data(), model.p(o.fcproj_w), T, 4 * d, d);
    std::fill(d_fch.begin(), d_fch.end(), Real(0));
    k::gelu_backward(d_fch.data(), c.fch.data(), d_fchg.data(), 4 * td);
    std::fill(d_ln.begin(), d_ln.end(), Real(0));
    k::linear_backward(d_ln.data(), model.g(o.fc_w), model.g(o.fc_b), d_fch.data(), c.ln2.data(),
                       model.p(o.fc_w), T, d, 4 * d);
    d_res1 = d_res;
    k::layernorm_backward(d_res1.data(), model.g(o.ln2_w), model.g(o.ln2_b), d_ln.data(),
                          c.res1.data(), model.p(o.ln2_w), c.ln2_mean.data(), c.ln2_rstd.data(), T, d);
    // res1 = in + drop(proj(attn(ln1(in))))
    for (std::size_t i = 0; i < td; ++i) d_branch[i] = c.drop1.empty() ? d_res1[i] : d_res1[i] * c.drop1[i];
    std::fill(d_atty.begin(), d_atty.end(), Real(0));
    k::linear_backward(d_atty.data(), model.g(o.proj_w), model.g(o.proj_b), d_branch.data(),
                       c.atty.data(), model.p(o.proj_w), T, d, d);
    std::fill(d_qkv.begin(), d_qkv.end(), Real(0));
    k::attention_backward(d_qkv.data(), scratch.data(), d_atty.data(), c.qkv.data(), c.att.data(), T, d,
                          cfg.heads);
    std::fill(d_ln.begin(), d_ln.end(), Real(0));
    k::linear_backward(d_ln.data(), model.g(o.qkv_w), model.g(o.qkv_b), d_qkv.data(), c.ln1.data(),
                       model.p(o.qkv_w), T, d, 3 * d);
    d_res = d_res1;
    k::layernorm_backward(d_res.data(), model.g(o.ln1_w), model.g(o.ln1_b), d_ln.data(),
                          cache.residual[static_cast<std::size_t>(l)].data(), model.p(o.ln1_w),
                          c.ln1_mean.data(), c.ln1_rstd.data(), T, d);
  }
  for (int t = 0; t < T; ++t) {
    const Real* g = d_res.data() + static_cast<std::ptrdiff_t>(t) * d;
    k::axpy(model.g(model.wte()) + static_cast<std::ptrdiff_t>(cache.tokens[static_cast<std::size_t>(t)]) * d,
            Real(1), g, d);
    k::axpy(model.g(model.wpe()) + static_cast<std::ptrdiff_t>(t) * d, Real(1), g, d);
  }
}

/// Mean per-token negative log-likelihood over the encoding's targets.
template <std::floating_point Real>
double lm_loss(const ChatbotModel<Real>& model, const DialogEncoding& enc) {
  ForwardCache<Real> cache;
  forward(model, enc.tokens, cache);
  const auto s = lm_head_loss(model, cache, enc.target, Real(1), nullptr, nullptr);
  return s.count == 0 ? 0.0 : s.nll / static_cast<double>(s.count);
}

/// Adds d(mean loss)/d(theta) to the model's gradient buffer; returns the loss.
template <std::floating_point Real>
double lm_loss_backward(ChatbotModel<Real>& model, const DialogEncoding& enc) {
  ForwardCache<Real> cache;
  forward(model, enc.tokens, cache);
  std::size_t count = 0;
  for (std::size_t i = 1; i < enc.target.size(); ++i) count += enc.target[i];
  if (count == 0) return 0.0;
  std::vector<Real> d_hidden(cache.lnf.size(), Real(0));
  const auto s = lm_head_loss(model, cache, enc.target, Real(1) / static_cast<Real>(count), d_hidden.data(),
                              model.g(model.wte()));
  backward(model, cache, std::span<const Real>(d_hidden));
  return s.nll / static_cast<double>(count);
}

/// Next-token distribution after every prefix (rows of size vocab).
template <std::floating_point Real>
std::vector<std::vector<Real>> next_token_distributions(const ChatbotModel<Real>& model,
                                                        std::span<const int> tokens) {
  ForwardCache<Real> cache;
  forward(model, tokens, cache);
  std::vector<std::vector<Real>> out;
  for (int t = 0; t < cache.rows; ++t) {
    std::vector<Real> row(static_cast<std::size_t>(model.config().vocab_size));
    next_token_logits(model, cache, t, std::span<Real>(row));
    kernels::softmax_inplace(row.data(), static_cast<int>(row.size()));
    out.push_back(std::move(row));
  }
  return out;
}

/// f(u): final-layer hidden state at the separator that ends `turn_index`.
template <std::floating_point Real>
std::vector<Real> utterance_embedding(const ChatbotModel<Real>& model, const DialogEncoding& enc,
                                      int turn_index) {
  require(turn_index >= 0 && turn_index < static_cast<int>(enc.boundaries.size()), ErrorCode::validation,
          "turn index " + std::to_string(turn_index) + " out of range");
  const int pos = enc.boundaries[static_cast<std::size_t>(turn_index)];
  require(pos >= 0, ErrorCode::validation,
          "turn " + std::to_string(turn_index) + " was truncated out of the context window");
  ForwardCache<Real> cache;
  forward(model, std::span<const int>(enc.tokens.data(), static_cast<std::size_t>(pos) + 1), cache);
  const auto h = cache.hidden(pos, model.config().model_dim);
  return {h.begin(), h.end()};
}

/// Embeddings for every turn of a conversation. One forward pass when the
/// dialog fits the window; truncated turns are re-encoded as prefixes.
template <std::floating_point Real>
std::vector<std::vector<Real>> dialog_embeddings(const ChatbotModel<Real>& model, const Conversation& conv) {
  const int window = model.config().context_window;
  const auto enc = encode_dialog(conv, model.vocab(), window);
  ForwardCache<Real> cache;
  forward(model, enc.tokens, cache);
  std::vector<std::vector<Real>> out(conv.turns.size());
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    const int pos = enc.boundaries[i];
    if (pos >= 0 && !enc.truncated) {
      const auto h = cache.hidden(pos, model.config().model_dim);
      out[i].assign(h.begin(), h.end());
    } else {
      const auto prefix = encode_prefix(conv, i, model.vocab(), window);
      out[i] = utterance_embedding(model, prefix, static_cast<int>(i));
    }
  }
  return out;
}

/// Mean-pooled final-layer states of a standalone sentence.
template <std::floating_point Real>
std::vector<Real> sentence_embedding(const ChatbotModel<Real>& model, std::string_view text) {
  std::vector<int> tokens = encode_text(model.vocab(), text);
  tokens.push_back(Vocab::kSeparator);
  const int window = model.config().context_window;
  if (static_cast<int>(tokens.size()) > window)
    tokens.erase(tokens.begin(), tokens.end() - window);
  ForwardCache<Real> cache;
  forward(model, tokens, cache);
  const int d = model.config().model_dim;
  std::vector<Real> mean(static_cast<std::size_t>(d), Real(0));
  for (int t = 0; t < cache.rows; ++t) kernels::axpy(mean.data(), Real(1), cache.lnf.data() + t * d, d);
  for (auto& v : mean) v /= static_cast<Real>(cache.rows);
  return mean;
}

// ---------------------------------------------------------------------------
// Decoding

/// Keeps the smallest probability-sorted prefix whose mass reaches top_p and
/// renormalizes. Ties are ordered by token id.
inline std::vector<double> nucleus_filter(std::span<const double> probs, double top_p) {
  require(top_p > 0.0 && top_p <= 1.0, ErrorCode::config, "top_p must be in (0, 1]");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0.0;
  for (std::size_t idx : order) {
    out[idx] = probs[idx];
    mass += probs[idx];
    if (mass >= top_p) break;
  }
  for (auto& p : out) p /= mass;
  return out;
}

/// softmax(logits / temperature) followed by the nucleus filter.
template <std::floating_point Real>
std::vector<double> nucleus_distribution(std::span<const Real> logits, double top_p, double temperature) {
  require(temperature > 0.0, ErrorCode::config, "temperature must be positive");
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = static_cast<double>(logits[i]) / temperature;
  kernels::softmax_inplace(scaled.data(), static_cast<int>(scaled.size()));
  return nucleus_filter(scaled, top_p);
}

struct GenerationSettings {
  double top_p = 0.9;
  double temperature = 0.9;
  int max_tokens = 32;
  std::uint64_t seed = 0;
};

/// Token ids of a sampled continuation (separator excluded).
template <std::floating_point Real>
std::vector<int> generate_ids(const ChatbotModel<Real>& model, std::vector<int> context,
                              const GenerationSettings& settings) {
  const int window = model.config().context_window;
  const int V = model.config().vocab_size;
  Rng rng(settings.seed);
  std::vector<int> out;
  std::vector<Real> logits(static_cast<std::size_t>(V));
  ForwardCache<Real> cache;
  for (int step = 0; step < settings.max_tokens; ++step) {
    if (static_cast<int>(context.size()) > window)
      context.erase(context.begin(), context.end() - window);
    forward(model, context, cache);
    next_token_logits(model, cache, cache.rows - 1, std::span<Real>(logits));
    // Padding and unknown are never emitted.
    logits[Vocab::kPad] = -std::numeric_limits<Real>::infinity();
    logits[Vocab::kUnknown] = -std::numeric_limits<Real>::infinity();
    const auto dist = nucleus_distribution(std::span<const Real>(logits), settings.top_p, settings.temperature);
    const int next = static_cast<int>(rng.categorical(std::span<const double>(dist)));
    if (next == Vocab::kSeparator) break;
    out.push_back(next);
    context.push_back(next);
  }
  return out;
}

/// Samples the next utterance of `context` with nucleus sampling. The
/// speaker alternates from the last context turn.
template <std::floating_point Real>
Utterance generate(const ChatbotModel<Real>& model, const Conversation& context,
                   const GenerationSettings& settings) {
  std::vector<int> ids;
  for (const auto& turn : context.turns) {
    for (int id : encode_text(model.vocab(), turn.text)) ids.push_back(id);
    ids.push_back(Vocab::kSeparator);
  }
  if (ids.empty()) ids.push_back(Vocab::kSeparator);
  const auto out = generate_ids(model, std::move(ids), settings);
  Utterance u;
  u.speaker = (!context.turns.empty() && context.turns.back().speaker == Speaker::A) ? Speaker::B : Speaker::A;
  u.text = decode_ids(model.vocab(), out);
  return u;
}

/// exp(mean per-token NLL) over the corpus targets.
template <std::floating_point Real>
double perplexity(const ChatbotModel<Real>& model, const AlignedCorpus& corpus,
                  LossMask mask = LossMask::all_turns) {
  require(!corpus.empty(), ErrorCode::empty_corpus, "perplexity needs a nonempty corpus");
  LossSum total;
  ForwardCache<Real> cache;
  for (const auto& conv : corpus.conversations) {
    const auto enc = encode_dialog(conv, model.vocab(), model.config().context_window, mask);
    forward(model, enc.tokens, cache);
    const auto s = lm_head_loss(model, cache, enc.target, Real(1), nullptr, nullptr);
    total.nll += s.nll;
    total.count += s.count;
  }
  require(total.count > 0, ErrorCode::empty_corpus, "no target tokens for perplexity");
  return std::exp(total.nll / static_cast<double>(total.count));
}

// ---------------------------------------------------------------------------
// Training

struct LmTrainSettings {
  OptimizerSettings optimizer{1e-3, 0.9, 0.999, 1e-8, 0.01, 20, 1.0};
  int epochs = 3;
  int batch_dialogs = 8;
  /// Stops after this many optimizer steps when >= 0.
  int max_steps = -1;
  LossMask mask = LossMask::all_turns;
  std::uint64_t seed = 0;
};

inline json to_json(const LmTrainSettings& s) {
  return {{"optimizer", to_json(s.optimizer)},
          {"epochs", s.epochs},
          {"batch_dialogs", s.batch_dialogs},
          {"max_steps", s.max_steps},
          {"response_only", s.mask == LossMask::speaker_b},
          {"seed", s.seed}};
}

inline LmTrainSettings lm_train_settings_from_json(const json& j, LmTrainSettings s = {}) {
  if (j.contains("optimizer")) s.optimizer = optimizer_settings_from_json(j["optimizer"], s.optimizer);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_dialogs = j.value("batch_dialogs", s.batch_dialogs);
  s.max_steps = j.value("max_steps", s.max_steps);
  if (j.value("response_only", false)) s.mask = LossMask::speaker_b;
  s.seed = j.value("seed", s.seed);
  return s;
}

/// Whole conversations grouped into shuffled batches for each epoch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch))));
  return out;
}

inline int planned_steps(std::size_t n, int batch, int epochs, int max_steps) {
  const int per_epoch = static_cast<int>((n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  const int total = per_epoch * epochs;
  return max_steps >= 0 ? std::min(total, max_steps) : total;
}

/// Aborts when the loss stays above 10x its initial value for 100 steps.
class DivergenceGuard {
 public:
  void observe(double loss) {
    if (!std::isfinite(loss)) fail(ErrorCode::divergence, "training loss is not finite");
    if (!initial_) initial_ = loss;
    run_ = loss > 10.0 * *initial_ ? run_ + 1 : 0;
    if (run_ >= 100)
      fail(ErrorCode::divergence, "loss above 10x initial (" + std::to_string(*initial_) + ") for 100 steps");
  }

 private:
  std::optional<double> initial_;
  int run_ = 0;
};

struct TrainHistory {
  std::vector<double> step_loss;
};

/// One LM-only step over a batch of conversations; returns the batch loss.
template <std::floating_point Real>
double lm_batch_gradient(ChatbotModel<Real>& model, const AlignedCorpus& corpus,
                         std::span<const std::size_t> batch, LossMask mask, Rng* dropout_rng) {
  std::vector<DialogEncoding> encs;
  std::size_t count = 0;
  for (std::size_t i : batch) {
    encs.push_back(encode_dialog(corpus.conversations[i], model.vocab(), model.config().context_window, mask));
    for (std::size_t j = 1; j < encs.back().target.size(); ++j) count += encs.back().target[j];
  }
  if (count == 0) return 0.0;
  const Real scale = Real(1) / static_cast<Real>(count);
  double nll = 0.0;
  ForwardCache<Real> cache;
  std::vector<Real> d_hidden;
  for (const auto& enc : encs) {
    forward(model, enc.tokens, cache, dropout_rng);
    d_hidden.assign(cache.lnf.size(), Real(0));
    nll += lm_head_loss(model, cache, enc.target, scale, d_hidden.data(), model.g(model.wte())).nll;
    backward(model, cache, std::span<const Real>(d_hidden));
  }
  return nll / static_cast<double>(count);
}

/// Language-model training with AdamW and a linear warmup/decay schedule.
template <std::floating_point Real>
TrainHistory train_lm(ChatbotModel<Real>& model, const AlignedCorpus& corpus, const LmTrainSettings& settings,
                      const std::function<void(int, double)>& on_step = {}) {
  require(!corpus.empty(), ErrorCode::empty_corpus, "train_lm needs a nonempty corpus");
  Rng rng(derive_seed(settings.seed, "lm-batches"));
  Rng dropout_rng(derive_seed(settings.seed, "lm-dropout"));
  AdamW<Real> opt(model.params().size(), settings.optimizer);
  const auto decay = model.layout().decay_mask();
  const int total = planned_steps(corpus.conversations.size(), settings.batch_dialogs, settings.epochs,
                                  settings.max_steps);
  TrainHistory history;
  DivergenceGuard guard;
  int step = 0;
  for (int epoch = 0; epoch < settings.epochs && step < total; ++epoch) {
    for (const auto& batch : epoch_batches(corpus.conversations.size(), settings.batch_dialogs, rng)) {
      if (step >= total) break;
      model.zero_grad();
      const double loss = lm_batch_gradient(model, corpus, batch, settings.mask, &dropout_rng);
      guard.observe(loss);
      const double lr = scheduled_lr(settings.optimizer.lr, step, settings.optimizer.warmup_steps, total);
      clip_grad_norm(model.grads(), settings.optimizer.clip_norm);
      opt.step(model.params(), model.grads(), lr, decay);
      history.step_loss.push_back(loss);
      if (on_step) on_step(step, loss);
      ++step;
    }
  }
  return history;
}

}  // namespace persona_guard
