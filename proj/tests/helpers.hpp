#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "capslu/rng.hpp"
#include "capslu/tensor.hpp"

namespace testing {

inline capslu::Tensor<double> random_tensor(capslu::Rng& rng, capslu::Shape shape, double lo = -1.0, double hi = 1.0) {
  capslu::Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

template <typename T>
double max_abs_diff(const capslu::Tensor<T>& a, const capslu::Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

inline std::filesystem::path tmp_dir(const std::string& name) {
  std::filesystem::path p = std::filesystem::path(CAPSLU_TEST_TMP) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
