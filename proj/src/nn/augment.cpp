#include "rffi/nn/augment.hpp"

#include <algorithm>

namespace rffi::nn {

AugmentOutcome light_spec_aug(float* spec, int n_mels, int frames, const AugmentConfig& cfg,
                              Rng& rng) {
  AugmentOutcome out;
  if (!cfg.enabled) return out;
  if (cfg.noise_sigma > 0) {
    for (int i = 0; i < n_mels * frames; ++i)
      spec[i] += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
  }
  if (cfg.time_mask_max > 0 && rng.uniform() < cfg.mask_prob) {
    int width = 1 + static_cast<int>(rng.uniform_int(static_cast<uint32_t>(
                        std::min(cfg.time_mask_max, frames))));
    int start = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(frames - width + 1)));
    for (int m = 0; m < n_mels; ++m)
      for (int f = start; f < start + width; ++f) spec[m * frames + f] = 0.0f;
    out.time_masked = true;
  }
  if (cfg.freq_mask_max > 0 && rng.uniform() < cfg.mask_prob) {
    int height = 1 + static_cast<int>(rng.uniform_int(static_cast<uint32_t>(
                         std::min(cfg.freq_mask_max, n_mels))));
    int start = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(n_mels - height + 1)));
    for (int m = start; m < start + height; ++m)
      for (int f = 0; f < frames; ++f) spec[m * frames + f] = 0.0f;
    out.freq_masked = true;
  }
  return out;
}

}  // namespace rffi::nn
