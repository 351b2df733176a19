#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rffi/data.hpp"
#include "rffi/nn/tensor.hpp"

namespace rffi::clf {
struct Model;
}
namespace rffi::attack {
struct SanitizeStep;
}

namespace rffi::wm {

struct TriggerSpec {
  int mel0 = 0;
  int frame0 = 0;
  int height = 4;
  int width = 4;
  float amplitude = 3.0f;  // standardized units
};

struct AdvBudget {
  float epsilon = 0.1f;  // L-inf
  int steps = 5;
  float step_size = 0.025f;
};

struct WatermarkKey {
  uint64_t key_seed = 0;
  int y_wm = 0;  // reserved class index == num device classes
  int feature_dim = 0;
  TriggerSpec trigger;
  AdvBudget budget;
  std::vector<float> v;  // unit secret vector, length feature_dim
  float lambda = 0.05f;
  int probe_count = 64;
  uint64_t probe_seed = 0;
};

// Deterministic in (key_seed, num_classes, feature_dim); v is an isotropic
// draw normalized to unit length, trigger position is drawn inside (32, 65).
WatermarkKey gen_key(uint64_t key_seed, int num_classes, int feature_dim);

// Overwrites the key's block with the trigger amplitude; idempotent.
void apply_trigger(float* spec, int n_mels, int frames, const WatermarkKey& key);

// Projected gradient ascent on CE(f(S' + delta), y_wm) within L-inf epsilon;
// the trigger block is re-stamped after every projection. Batched over
// [N,1,H,W] triggered inputs.
nn::Tensor craft_adversarial(const clf::Model& model, const nn::Tensor& triggered,
                             const WatermarkKey& key);

// lambda * (1 - cos(f_hat, v)); throws on a zero feature vector
double signature_loss(const std::vector<float>& batch_mean_feature, const std::vector<float>& v,
                      double lambda);

struct VerificationResult {
  std::string kind;  // trigger | adversarial_trigger | signature
  double score = 0.0;
  double threshold = 0.0;
  bool pass = false;
  int probe_count = 0;
};

enum class VerifyMode { kPlain, kAdversarial, kSanitized };

// ASR over triggered probes (optionally PGD-perturbed or sanitized);
// pass at ASR >= 0.9
VerificationResult verify_trigger(const clf::Model& model, const WatermarkKey& key,
                                  const data::FeatureSet& fs, const std::vector<int>& probe_idx,
                                  VerifyMode mode,
                                  const std::vector<attack::SanitizeStep>* sanitize = nullptr);

// cosine between the probe-mean penultimate feature and v; pass at >= 0.5
VerificationResult verify_signature(const clf::Model& model, const WatermarkKey& key,
                                    const data::FeatureSet& fs,
                                    const std::vector<int>& probe_idx);

// deterministic probe selection from a clean pool
std::vector<int> select_probes(const std::vector<int>& pool, int count, uint64_t probe_seed);

void save_key(const std::string& path, const WatermarkKey& key);
WatermarkKey load_key(const std::string& path);

constexpr double kTriggerPassThreshold = 0.9;
constexpr double kSignaturePassThreshold = 0.5;

}  // namespace rffi::wm
