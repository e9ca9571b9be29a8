#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <unistd.h>

#include "persona_guard/error.hpp"
#include "persona_guard/rng.hpp"

namespace persona_guard::testing {

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static std::atomic<unsigned> counter{0};
    const auto tag = std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1));
    path = std::filesystem::temp_directory_path() / ("persona_guard_test_" + tag);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Error code thrown by `fn`, or nullopt when it returns normally.
inline std::optional<ErrorCode> error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace persona_guard::testing
