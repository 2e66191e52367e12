#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "fewshot/error.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

// Evaluates expr and checks that it throws fewshot::Error with the given code.
#define CHECK_ERRC(expr, errc)                    \
  do {                                            \
    bool caught_ = false;                         \
    try {                                         \
      (void)(expr);                               \
    } catch (const fewshot::Error& e_) {          \
      caught_ = true;                             \
      CHECK(e_.code() == (errc));                 \
    }                                             \
    CHECK_MESSAGE(caught_, "expected an Error");  \
  } while (0)

namespace testutil {

using fewshot::Shape;
using fewshot::Tensor;

inline std::vector<double> uniform_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  auto rng = fewshot::Rng::stream(seed, "test-values");
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                    bool grad = true) {
  auto t = Tensor<double>::from(shape, uniform_values(fewshot::shape_numel(shape), seed, lo, hi));
  t.set_requires_grad(grad);
  return t;
}

/// sum(y * w) with a fixed random w, so every output coordinate gets a distinct weight.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  auto w = Tensor<double>::from(y.shape(), uniform_values(y.numel(), seed ^ 0x9e3779b97f4a7c15ULL, 0.5, 1.5));
  return fewshot::sum(fewshot::mul(y, w));
}

struct FdReport {
  double max_rel = 0.0;
  std::size_t coords = 0;
};

/// Central differences on every coordinate of every leaf, compared with the
/// tape's gradient: |a - n| / max(|a|, |n|, floor).
inline FdReport finite_difference_check(std::vector<Tensor<double>> leaves,
                                        const std::function<Tensor<double>()>& f, double h = 1e-5,
                                        double floor = 1e-8) {
  auto loss = f();
  fewshot::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    analytic.emplace_back(l.grad().begin(), l.grad().end());
  }
  FdReport rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = f().item();
      vals[i] = orig - h;
      const double down = f().item();
      vals[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[li][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      rep.max_rel = std::max(rep.max_rel, rel);
      ++rep.coords;
    }
  }
  return rep;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("fewshot-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
