#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "calm/autodiff.hpp"
#include "calm/rng.hpp"
#include "calm/tensor.hpp"

namespace calm::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

inline Shape random_shape(Rng& rng, std::size_t rank, std::size_t max_extent = 4) {
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.below(max_extent));
  return s;
}

/// ||a - b|| / max(||a||, ||b||), or the absolute difference when both are ~0.
inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  return scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

using ScalarFn = std::function<Var(Tape&, std::vector<Var>&)>;

/// Worst relative error between the tape gradient of `f` with respect to
/// each parameter and a central difference with step h.
inline double gradcheck(std::vector<Parameter>& params, const ScalarFn& f, double h = 1e-5) {
  auto evaluate = [&] {
    Tape tape;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.parameter(p));
    return f(tape, leaves).value().item();
  };
  zero_grads(params);
  {
    Tape tape;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.parameter(p));
    tape.backward(f(tape, leaves));
  }
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> numeric(p.value.size());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = evaluate();
      p.value[i] = saved - h;
      const double down = evaluate();
      p.value[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, rel_error(p.grad.data(), numeric));
  }
  return worst;
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
inline Var weighted_sum(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, tape.constant(random_tensor(out.shape(), rng))));
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("calm-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace calm::test
