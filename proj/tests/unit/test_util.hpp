#pragma once

#include <cstdlib>
#include <optional>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "styleprobe/core.hpp"

namespace styleprobe::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "styleprobe-XXXXXX").string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline ImageTensor random_image(ImageShape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> data(shape.size());
  for (auto& v : data) v = u(rng);
  return ImageTensor(shape, std::move(data));
}

// Code of the styleprobe::Error thrown by `fn`, or nullopt when none is.
template <typename F>
std::optional<ErrorCode> error_code_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace styleprobe::testing
