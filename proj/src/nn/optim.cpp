#include "rffi/nn/optim.hpp"

#include <cmath>

namespace rffi::nn {

void AdamW::step(ParamStore& ps, const std::vector<const Tensor*>& grads, float lr) const {
  if (grads.size() != ps.entries.size())
    throw std::invalid_argument("adamw: gradient list does not match param store");
  ps.step_count += 1;
  double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(ps.step_count));
  double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(ps.step_count));
  for (size_t pi = 0; pi < ps.entries.size(); ++pi) {
    auto& e = ps.entries[pi];
    const Tensor* gt = grads[pi];
    float* theta = e.value.ptr();
    float* m = e.m.ptr();
    float* v = e.v.ptr();
    const float* g = gt ? gt->ptr() : nullptr;
    int64_t n = e.value.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      float gi = g ? g[i] : 0.0f;
      m[i] = beta1 * m[i] + (1.0f - beta1) * gi;
      v[i] = beta2 * v[i] + (1.0f - beta2) * gi * gi;
      float mhat = m[i] / static_cast<float>(bc1);
      float vhat = v[i] / static_cast<float>(bc2);
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps)) + lr * weight_decay * theta[i];
    }
  }
}

std::vector<const Tensor*> collect_grads(const Graph& g, const GraphParams& gp) {
  std::vector<const Tensor*> out(gp.ids.size(), nullptr);
  for (size_t i = 0; i < gp.ids.size(); ++i)
    if (g.has_grad(gp.ids[i])) out[i] = &g.grad(gp.ids[i]);
  return out;
}

Schedule schedule_from_string(const std::string& s) {
  if (s == "constant") return Schedule::kConstant;
  if (s == "cosine") return Schedule::kCosine;
  if (s == "onecycle") return Schedule::kOneCycle;
  throw std::invalid_argument("unknown schedule: " + s);
}

std::string schedule_to_string(Schedule s) {
  switch (s) {
    case Schedule::kConstant: return "constant";
    case Schedule::kCosine: return "cosine";
    case Schedule::kOneCycle: return "onecycle";
  }
  return "constant";
}

double lr_schedule(Schedule kind, int64_t step, int64_t total_steps, double base_lr) {
  if (step < 0 || step > total_steps) throw std::invalid_argument("lr_schedule: step out of range");
  if (kind == Schedule::kConstant || total_steps == 0) return base_lr;
  double t = static_cast<double>(step);
  double total = static_cast<double>(total_steps);
  if (kind == Schedule::kCosine) return 0.5 * (1.0 + std::cos(M_PI * t / total)) * base_lr;
  // one-cycle
  double floor_lr = base_lr / 25.0;
  double warm = 0.3 * total;
  if (t <= warm) {
    double frac = warm > 0 ? t / warm : 1.0;
    return floor_lr + (base_lr - floor_lr) * frac;
  }
  double frac = (t - warm) / (total - warm);
  return floor_lr + (base_lr - floor_lr) * 0.5 * (1.0 + std::cos(M_PI * frac));
}

}  // namespace rffi::nn
