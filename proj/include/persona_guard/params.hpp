#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "persona_guard/error.hpp"

namespace persona_guard {

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = true;
};

/// Named views into one flat parameter buffer.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape, bool decay) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    tensors_.push_back({std::move(name), std::move(shape), total_, n, decay});
    total_ += n;
    return tensors_.back().offset;
  }

  std::size_t total() const { return total_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }

  const TensorInfo& find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return t;
    fail(ErrorCode::not_found, "no tensor named " + name);
  }

  std::vector<std::uint8_t> decay_mask() const {
    std::vector<std::uint8_t> mask(total_, 0);
    for (const auto& t : tensors_)
      if (t.decay)
        for (std::size_t i = 0; i < t.size; ++i) mask[t.offset + i] = 1;
    return mask;
  }

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

}  // namespace persona_guard
