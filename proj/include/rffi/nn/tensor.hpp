#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rffi/rng.hpp"

namespace rffi::nn {

// Dense row-major float32 tensor. Kernels accumulate in float or double as
// documented per op; storage is always 32-bit.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
  }
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, float v) {
    Tensor t(std::move(s));
    for (float& x : t.data) x = v;
    return t;
  }
  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (float& x : t.data) x = static_cast<float>(rng.normal() * stddev);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  bool all_finite() const;
  std::string shape_str() const;
};

// Deterministic fixed-stripe float reduction helpers. The accumulation
// pattern depends only on the length, never on threading, so results are
// reproducible while the lanes still vectorize.
float dot_f32(const float* a, const float* b, int64_t n);
float sum_f32(const float* a, int64_t n);
double sum_f64(const float* a, int64_t n);

}  // namespace rffi::nn
