#pragma once

#include "rffi/rng.hpp"

namespace rffi::nn {

// LightSpecAug: with probability mask_prob each, one time mask (<= 8 frames)
// and one frequency mask (<= 4 mel bins) zeroed (the standardized mean), plus
// additive Gaussian noise. Noise is added first so masked cells end at 0.
struct AugmentConfig {
  bool enabled = true;
  double mask_prob = 0.5;
  int time_mask_max = 8;
  int freq_mask_max = 4;
  double noise_sigma = 0.02;
};

struct AugmentOutcome {
  bool time_masked = false;
  bool freq_masked = false;
};

AugmentOutcome light_spec_aug(float* spec, int n_mels, int frames, const AugmentConfig& cfg,
                              Rng& rng);

}  // namespace rffi::nn
