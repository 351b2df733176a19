#include "rffi/nn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace rffi::nn {

bool Tensor::all_finite() const {
  for (float x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

float dot_f32(const float* a, const float* b, int64_t n) {
  float lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t n8 = n & ~int64_t(7);
  for (int64_t i = 0; i < n8; i += 8)
    for (int j = 0; j < 8; ++j) lanes[j] += a[i + j] * b[i + j];
  for (int64_t i = n8; i < n; ++i) lanes[i - n8] += a[i] * b[i];
  float s = 0.f;
  for (int j = 0; j < 8; ++j) s += lanes[j];
  return s;
}

float sum_f32(const float* a, int64_t n) {
  float lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t n8 = n & ~int64_t(7);
  for (int64_t i = 0; i < n8; i += 8)
    for (int j = 0; j < 8; ++j) lanes[j] += a[i + j];
  for (int64_t i = n8; i < n; ++i) lanes[i - n8] += a[i];
  float s = 0.f;
  for (int j = 0; j < 8; ++j) s += lanes[j];
  return s;
}

double sum_f64(const float* a, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += a[i];
  return s;
}

}  // namespace rffi::nn
