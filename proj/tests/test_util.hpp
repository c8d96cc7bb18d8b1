#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "dhkd/matrix.hpp"

namespace dhkd::testing {

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.same_shape(b) && bitwise_equal(a.flat(), b.flat());
}

/// Per-process scratch directory, created on first use.
inline std::filesystem::path scratch_dir() {
  auto p = std::filesystem::temp_directory_path() / ("dhkd_test_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace dhkd::testing
