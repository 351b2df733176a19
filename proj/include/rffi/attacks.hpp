#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rffi/checkpoint.hpp"
#include "rffi/classifier.hpp"
#include "rffi/data.hpp"
#include "rffi/rng.hpp"

namespace rffi::attack {

enum class SanitizeMethod { kGaussianBlur, kMedian3, kNoise };
SanitizeMethod sanitize_method_from_string(const std::string& s);

struct SanitizeStep {
  SanitizeMethod method = SanitizeMethod::kGaussianBlur;
  double sigma = 0.0;  // blur width or noise stddev
};

// gaussian_blur: separable kernel truncated at 3 sigma, edge-replicate;
// median3: 3x3 median with edge-replicate; noise: additive Gaussian (rng
// required)
void sanitize_input(float* spec, int n_mels, int frames, const SanitizeStep& step, Rng* rng);

// Global magnitude pruning over conv/linear weights (>= 2-D ".weight"
// tensors); normalization and bias parameters are exempt. Ties break by
// (tensor, element) order.
Checkpoint prune(const Checkpoint& ckpt, double rho);
int64_t count_prunable(const Checkpoint& ckpt);

// Per-tensor symmetric uniform quantization with round-to-nearest-even,
// dequantized back to float storage. All parameter tensors are quantized;
// an all-zero tensor is left unchanged.
Checkpoint quantize(const Checkpoint& ckpt, int bits);

// Task-only continuation training (no watermark losses, no augmentation),
// fixed epoch budget, constant learning rate.
clf::TrainLog finetune(clf::Model& model, const data::FeatureSet& fs,
                       const std::vector<int>& train_idx, int epochs, double lr, uint64_t seed);

struct EvadeResult {
  nn::Tensor adv;  // perturbed inputs
  std::vector<int> pred_before, pred_after;
  int changed_count = 0;
};

// Untargeted L-inf PGD against the true labels.
EvadeResult evade(const clf::Model& model, const nn::Tensor& specs,
                  const std::vector<int>& labels, double epsilon, int steps, double step_size);

struct AttackReport {
  std::string kind;
  std::string params_json;
  double clean_accuracy_before = 0, clean_accuracy_after = 0;
  double trigger_asr_before = 0, trigger_asr_after = 0;
  double signature_cos_before = 0, signature_cos_after = 0;
  double guard_flag_rate = -1.0;  // input-side attacks only; -1 when n/a
  double misclassification_rate = -1.0;  // evade only
};

}  // namespace rffi::attack
