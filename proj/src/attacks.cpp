#include "rffi/attacks.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rffi::attack {

using nn::Tensor;

SanitizeMethod sanitize_method_from_string(const std::string& s) {
  if (s == "gaussian_blur") return SanitizeMethod::kGaussianBlur;
  if (s == "median3") return SanitizeMethod::kMedian3;
  if (s == "noise") return SanitizeMethod::kNoise;
  throw std::invalid_argument("unknown sanitize method: " + s);
}

namespace {

void blur_axis(std::vector<float>& grid, int rows, int cols, const std::vector<double>& kernel,
               bool along_cols) {
  int r = static_cast<int>(kernel.size() / 2);
  std::vector<float> out(grid.size());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) {
        int ii = i, jj = j;
        if (along_cols)
          jj = std::clamp(j + t, 0, cols - 1);
        else
          ii = std::clamp(i + t, 0, rows - 1);
        acc += kernel[static_cast<size_t>(t + r)] * grid[static_cast<size_t>(ii) * cols + jj];
      }
      out[static_cast<size_t>(i) * cols + j] = static_cast<float>(acc);
    }
  grid = std::move(out);
}

}  // namespace

void sanitize_input(float* spec, int n_mels, int frames, const SanitizeStep& step, Rng* rng) {
  switch (step.method) {
    case SanitizeMethod::kGaussianBlur: {
      if (step.sigma <= 0) return;  // identity in the limit
      int r = static_cast<int>(std::ceil(3.0 * step.sigma));
      std::vector<double> kernel(static_cast<size_t>(2 * r + 1));
      double sum = 0.0;
      for (int t = -r; t <= r; ++t) {
        double v = std::exp(-0.5 * t * t / (step.sigma * step.sigma));
        kernel[static_cast<size_t>(t + r)] = v;
        sum += v;
      }
      for (double& v : kernel) v /= sum;
      std::vector<float> grid(spec, spec + static_cast<size_t>(n_mels) * frames);
      blur_axis(grid, n_mels, frames, kernel, true);
      blur_axis(grid, n_mels, frames, kernel, false);
      std::copy(grid.begin(), grid.end(), spec);
      break;
    }
    case SanitizeMethod::kMedian3: {
      std::vector<float> out(static_cast<size_t>(n_mels) * frames);
      float win[9];
      for (int i = 0; i < n_mels; ++i)
        for (int j = 0; j < frames; ++j) {
          int k = 0;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              int ii = std::clamp(i + di, 0, n_mels - 1);
              int jj = std::clamp(j + dj, 0, frames - 1);
              win[k++] = spec[ii * frames + jj];
            }
          std::sort(win, win + 9);
          out[static_cast<size_t>(i) * frames + j] = win[4];
        }
      std::copy(out.begin(), out.end(), spec);
      break;
    }
    case SanitizeMethod::kNoise: {
      if (!rng) throw std::invalid_argument("sanitize noise requires an rng");
      for (int i = 0; i < n_mels * frames; ++i)
        spec[i] += static_cast<float>(rng->normal(0.0, step.sigma));
      break;
    }
  }
}

namespace {

bool is_prunable(const std::string& name, const Tensor& t) {
  return t.ndim() >= 2 && name.size() > 7 && name.rfind(".weight") == name.size() - 7;
}

}  // namespace

int64_t count_prunable(const Checkpoint& ckpt) {
  int64_t n = 0;
  for (const auto& [name, t] : ckpt.tensors)
    if (is_prunable(name, t)) n += t.numel();
  return n;
}

Checkpoint prune(const Checkpoint& ckpt, double rho) {
  if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("prune: rho must be in [0, 1)");
  Checkpoint out = ckpt;
  if (rho == 0.0) return out;
  struct Ref {
    float mag;
    int tensor;
    int64_t elem;
  };
  std::vector<Ref> refs;
  for (size_t ti = 0; ti < out.tensors.size(); ++ti) {
    const auto& [name, t] = out.tensors[ti];
    if (!is_prunable(name, t)) continue;
    for (int64_t i = 0; i < t.numel(); ++i)
      refs.push_back({std::fabs(t.data[static_cast<size_t>(i)]), static_cast<int>(ti), i});
  }
  int64_t kill = static_cast<int64_t>(std::floor(rho * static_cast<double>(refs.size())));
  std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.elem < b.elem;
  });
  for (int64_t i = 0; i < kill; ++i)
    out.tensors[static_cast<size_t>(refs[static_cast<size_t>(i)].tensor)]
        .second.data[static_cast<size_t>(refs[static_cast<size_t>(i)].elem)] = 0.0f;
  return out;
}

Checkpoint quantize(const Checkpoint& ckpt, int bits) {
  if (bits < 2 || bits > 16) throw std::invalid_argument("quantize: bits must be in [2, 16]");
  Checkpoint out = ckpt;
  double qmax = static_cast<double>((1 << (bits - 1)) - 1);
  for (auto& [name, t] : out.tensors) {
    float maxabs = 0.0f;
    for (float v : t.data) maxabs = std::max(maxabs, std::fabs(v));
    if (maxabs == 0.0f) continue;  // scale 0: unchanged
    double scale = maxabs / qmax;
    for (float& v : t.data) {
      double q = std::nearbyint(v / scale);  // FE_TONEAREST: ties to even
      q = std::clamp(q, -qmax, qmax);
      v = static_cast<float>(q * scale);
    }
  }
  return out;
}

clf::TrainLog finetune(clf::Model& model, const data::FeatureSet& fs,
                       const std::vector<int>& train_idx, int epochs, double lr, uint64_t seed) {
  if (epochs < 0) throw std::invalid_argument("finetune: negative epochs");
  clf::TrainLog log;
  if (epochs == 0) return log;
  nn::TrainHyper hyper;
  hyper.learning_rate = lr;
  hyper.weight_decay = 0.0;
  hyper.schedule = nn::Schedule::kConstant;
  hyper.label_smoothing = 0.0;
  hyper.task_loss = nn::TaskLoss::kCrossEntropy;
  hyper.max_epochs = epochs;
  nn::AugmentConfig aug;
  aug.enabled = false;
  clf::WmTrainConfig no_wm;
  return clf::train_model(model, fs, train_idx, {}, nullptr, no_wm, hyper, aug, seed,
                          /*early_stop=*/false, /*restore_best=*/false);
}

EvadeResult evade(const clf::Model& model, const Tensor& specs, const std::vector<int>& labels,
                  double epsilon, int steps, double step_size) {
  if (specs.ndim() != 4) throw std::invalid_argument("evade: expects [N,1,H,W] inputs");
  int n = specs.dim(0);
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("evade: label count");
  EvadeResult res;
  Tensor delta(specs.shape);
  float eps = static_cast<float>(epsilon);
  for (int step = 0; step < steps && epsilon > 0; ++step) {
    Tensor xadv = specs;
    for (int64_t i = 0; i < xadv.numel(); ++i)
      xadv.data[static_cast<size_t>(i)] += delta.data[static_cast<size_t>(i)];
    nn::Graph g;
    nn::GraphParams gp = nn::GraphParams::bind(g, model.params, false);
    nn::NodeId xin = g.input(std::move(xadv), true);
    clf::ForwardNodes fwd = clf::forward_model(g, model, gp, xin);
    nn::NodeId loss = g.softmax_ce(fwd.logits, labels, 0.0f, 0.0f);
    g.backward(loss);
    const Tensor& gx = g.grad(xin);
    if (!gx.all_finite()) throw std::runtime_error("evade: non-finite input gradients");
    for (int64_t i = 0; i < delta.numel(); ++i) {
      float gv = gx.data[static_cast<size_t>(i)];
      float d = delta.data[static_cast<size_t>(i)] +
                static_cast<float>(step_size) * (gv > 0.f ? 1.0f : (gv < 0.f ? -1.0f : 0.0f));
      delta.data[static_cast<size_t>(i)] = std::clamp(d, -eps, eps);
    }
  }
  res.adv = specs;
  for (int64_t i = 0; i < res.adv.numel(); ++i)
    res.adv.data[static_cast<size_t>(i)] += delta.data[static_cast<size_t>(i)];

  int M = specs.dim(2), F = specs.dim(3);
  auto argmax_of = [&](const Tensor& batch) {
    nn::Graph g;
    nn::GraphParams gp = nn::GraphParams::bind(g, model.params, false);
    clf::ForwardNodes fwd = clf::forward_model(g, model, gp, g.input(batch, false));
    const Tensor& lg = g.val(fwd.logits);
    int K = lg.dim(1);
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      const float* row = lg.ptr() + static_cast<int64_t>(i) * K;
      out[static_cast<size_t>(i)] = static_cast<int>(std::max_element(row, row + K) - row);
    }
    return out;
  };
  (void)M;
  (void)F;
  res.pred_before = argmax_of(specs);
  res.pred_after = argmax_of(res.adv);
  for (int i = 0; i < n; ++i)
    if (res.pred_before[static_cast<size_t>(i)] != res.pred_after[static_cast<size_t>(i)])
      res.changed_count++;
  return res;
}

}  // namespace rffi::attack
