// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "mlaforge/config.hpp"
#include "mlaforge/linalg.hpp"
#include "mlaforge/util.hpp"

namespace testing {

inline mlaforge::ModelConfig toy_config(std::uint32_t n_g = 4, std::uint32_t n_layers = 2) {
  mlaforge::ModelConfig cfg;
  cfg.d = 64;
  cfg.n_h = 4;
  cfg.n_g = n_g;
  cfg.d_h = 16;
  cfg.n_layers = n_layers;
  cfg.vocab = 256;
  return cfg;
}

inline mlaforge::MatrixD gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  mlaforge::GaussianStream rng(seed);
  mlaforge::MatrixD m(rows, cols);
  for (double& v : m.values()) v = scale * rng.next();
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mlaforge_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout only
};

inline CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  FILE* pipe = ::popen((cmd + " 2>/dev/null").c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace testing
