#pragma once

#include <algorithm>
#include <concepts>
#include <span>
#include <vector>

#include "persona_guard/kernels.hpp"
#include "persona_guard/params.hpp"
#include "persona_guard/rng.hpp"

namespace persona_guard {

/// Two-layer persona classifier: input -> hidden (ReLU) -> C logits, read
/// through a softmax. Shared by the adversary's attacker and the defender's
/// fake attacker.
template <std::floating_point Real>
class PersonaClassifier {
 public:
  PersonaClassifier() = default;

  PersonaClassifier(int input_dim, int hidden_dim, int num_classes, std::uint64_t seed)
      : input_dim_(input_dim), hidden_dim_(hidden_dim), num_classes_(num_classes) {
    require(input_dim > 0 && hidden_dim > 0 && num_classes > 0, ErrorCode::config,
            "classifier dimensions must be positive");
    build_layout();
    params_.assign(layout_.total(), Real(0));
    grads_.assign(layout_.total(), Real(0));
    // He-style scaling for the ReLU layer, Xavier-style for the output.
    Rng rng(seed);
    const double s1 = std::sqrt(2.0 / input_dim);
    const double s2 = std::sqrt(1.0 / hidden_dim);
    for (std::size_t i = 0; i < static_cast<std::size_t>(input_dim) * hidden_dim; ++i)
      params_[w1_ + i] = static_cast<Real>(rng.normal() * s1);
    for (std::size_t i = 0; i < static_cast<std::size_t>(hidden_dim) * num_classes; ++i)
      params_[w2_ + i] = static_cast<Real>(rng.normal() * s2);
  }

  static PersonaClassifier from_params(int input_dim, int hidden_dim, int num_classes,
                                       std::span<const float> values) {
    PersonaClassifier c;
    c.input_dim_ = input_dim;
    c.hidden_dim_ = hidden_dim;
    c.num_classes_ = num_classes;
    c.build_layout();
    require(values.size() == c.layout_.total(), ErrorCode::validation, "classifier parameter count mismatch");
    c.params_.assign(values.begin(), values.end());
    c.grads_.assign(values.size(), Real(0));
    return c;
  }

  int input_dim() const { return input_dim_; }
  int hidden_dim() const { return hidden_dim_; }
  int num_classes() const { return num_classes_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<Real> params() { return params_; }
  std::span<const Real> params() const { return params_; }
  std::span<Real> grads() { return grads_; }
  std::span<const Real> grads() const { return grads_; }
  void zero_grad() { std::fill(grads_.begin(), grads_.end(), Real(0)); }
  std::uint64_t checksum() const { return persona_guard::checksum(std::span<const Real>(params_)); }

  struct Cache {
    int rows = 0;
    std::vector<Real> input, pre, hidden, logits;
  };

  /// Logits for `rows` inputs laid out row-major.
  void forward(std::span<const Real> inputs, int rows, Cache& cache) const {
    require(inputs.size() == static_cast<std::size_t>(rows) * input_dim_, ErrorCode::dimension,
            "classifier input has wrong dimension");
    cache.rows = rows;
    cache.input.assign(inputs.begin(), inputs.end());
    cache.pre.resize(static_cast<std::size_t>(rows) * hidden_dim_);
    kernels::linear_forward(cache.pre.data(), cache.input.data(), params_.data() + w1_, params_.data() + b1_,
                            rows, input_dim_, hidden_dim_);
    cache.hidden.resize(cache.pre.size());
    for (std::size_t i = 0; i < cache.pre.size(); ++i) cache.hidden[i] = std::max(cache.pre[i], Real(0));
    cache.logits.resize(static_cast<std::size_t>(rows) * num_classes_);
    kernels::linear_forward(cache.logits.data(), cache.hidden.data(), params_.data() + w2_, params_.data() + b2_,
                            rows, hidden_dim_, num_classes_);
  }

  /// Backpropagates d_logits. Parameter gradients accumulate when
  /// `accumulate_params` is set; input gradients are added to `d_input` when given.
  void backward(const Cache& cache, std::span<const Real> d_logits, bool accumulate_params,
                Real* d_input) {
    const int rows = cache.rows;
    std::vector<Real> d_hidden(static_cast<std::size_t>(rows) * hidden_dim_, Real(0));
    kernels::linear_backward(d_hidden.data(), accumulate_params ? grads_.data() + w2_ : nullptr,
                             accumulate_params ? grads_.data() + b2_ : nullptr, d_logits.data(),
                             cache.hidden.data(), params_.data() + w2_, rows, hidden_dim_, num_classes_);
    for (std::size_t i = 0; i < d_hidden.size(); ++i)
      if (cache.pre[i] <= Real(0)) d_hidden[i] = 0;
    kernels::linear_backward(d_input, accumulate_params ? grads_.data() + w1_ : nullptr,
                             accumulate_params ? grads_.data() + b1_ : nullptr, d_hidden.data(),
                             cache.input.data(), params_.data() + w1_, rows, input_dim_, hidden_dim_);
  }

  /// Full output distribution for one input.
  std::vector<Real> predict(std::span<const Real> input) const {
    require(static_cast<int>(input.size()) == input_dim_, ErrorCode::dimension,
            "embedding dimension " + std::to_string(input.size()) + " does not match attacker input " +
                std::to_string(input_dim_));
    Cache cache;
    forward(input, 1, cache);
    kernels::softmax_inplace(cache.logits.data(), num_classes_);
    return cache.logits;
  }

  std::span<Real> weight1() { return {params_.data() + w1_, static_cast<std::size_t>(input_dim_) * hidden_dim_}; }
  std::span<Real> bias1() { return {params_.data() + b1_, static_cast<std::size_t>(hidden_dim_)}; }
  std::span<Real> weight2() { return {params_.data() + w2_, static_cast<std::size_t>(hidden_dim_) * num_classes_}; }
  std::span<Real> bias2() { return {params_.data() + b2_, static_cast<std::size_t>(num_classes_)}; }

 private:
  void build_layout() {
    layout_ = ParamLayout{};
    w1_ = layout_.add("fc1.w", {input_dim_, hidden_dim_}, true);
    b1_ = layout_.add("fc1.b", {hidden_dim_}, false);
    w2_ = layout_.add("fc2.w", {hidden_dim_, num_classes_}, true);
    b2_ = layout_.add("fc2.b", {num_classes_}, false);
  }

  int input_dim_ = 0;
  int hidden_dim_ = 0;
  int num_classes_ = 0;
  ParamLayout layout_;
  std::vector<Real> params_;
  std::vector<Real> grads_;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;
};

/// Row-wise softmax of a logits block.
template <std::floating_point Real>
std::vector<Real> softmax_rows(std::span<const Real> logits, int rows, int cols) {
  std::vector<Real> out(logits.begin(), logits.end());
  for (int r = 0; r < rows; ++r) kernels::softmax_inplace(out.data() + static_cast<std::ptrdiff_t>(r) * cols, cols);
  return out;
}

}  // namespace persona_guard
