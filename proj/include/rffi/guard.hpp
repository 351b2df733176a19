#pragma once

#include <map>
#include <string>
#include <vector>

#include "rffi/checkpoint.hpp"
#include "rffi/data.hpp"
#include "rffi/nn/graph.hpp"
#include "rffi/nn/optim.hpp"

namespace rffi::vae {

struct VAEPreset {
  std::string name;
  int latent_dim = 32;
  int base_channels = 64;
};

// base: latent 32; robust: latent 64 (KL warm-up + free-bits)
VAEPreset vae_preset(const std::string& name);

struct GuardTrainConfig {
  double beta_max = 1.0;
  int warmup_epochs = 10;
  double tau_fb = 0.02;  // nats/dim
  double lr = 2e-3;
  int patience = 10;
  int batch_size = 64;
  double weight_decay = 1e-4;
  int max_epochs = 30;

  void validate() const;
};

// base: lr 3e-4, patience 5, tau_fb 0, warm-up 5; robust: lr 2e-3,
// patience 10, tau_fb 0.02, warm-up 10
GuardTrainConfig guard_train_defaults(const std::string& preset);

// Encoder: three strided 4x4 convs (GN+ReLU) -> linear mu / logvar heads.
// Decoder: linear projection -> three transposed convs -> crop/pad to
// (1, 32, 65). Input shape is fixed at (1, 32, 65).
struct VAEModel {
  VAEPreset preset;
  nn::ParamStore params;
};

VAEModel build_vae(const std::string& preset, uint64_t seed);

struct VaeNodes {
  nn::NodeId xhat, mu, logvar, z;
};
// eta == nullptr selects deterministic mode (z = mu)
VaeNodes forward_vae(nn::Graph& g, const VAEModel& m, const nn::GraphParams& gp, nn::NodeId x,
                     const nn::Tensor* eta);

struct VaeBatchOut {
  nn::Tensor xhat, mu, logvar, z;
};
VaeBatchOut vae_forward(const VAEModel& m, const float* specs, int n, int n_mels, int frames,
                        const nn::Tensor* eta);

// total = recon + beta * sum_d max(KL_d, tau_fb), recon the batch-mean SSE,
// KL_d = 0.5 (mu_d^2 + sigma_d^2 - log sigma_d^2 - 1) batch-averaged
struct ElboParts {
  double total = 0, recon = 0;
  std::vector<double> kl_per_dim;
};
ElboParts elbo_loss(const nn::Tensor& x, const nn::Tensor& xhat, const nn::Tensor& mu,
                    const nn::Tensor& logvar, double beta, double tau_fb);

// beta_max * min(1, epoch / warmup_epochs); constant beta_max when warmup is 0
double beta_schedule(int epoch, const GuardTrainConfig& cfg);

struct GuardTrainLog {
  std::vector<double> train_loss, val_loss, val_recon;
  double initial_val_recon = 0.0;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  double best_val_recon = 0.0;
  int epochs_run = 0;
};

// Trains on clean spectrograms only; early-stops on validation total loss
// evaluated at beta = beta_max with eta = 0.
GuardTrainLog train_guard(VAEModel& m, const data::FeatureSet& fs,
                          const std::vector<int>& train_idx, const std::vector<int>& val_idx,
                          const GuardTrainConfig& cfg, uint64_t seed);

// s(x) = alpha * ||x - xhat||_2 + (1 - alpha) * ELBO^-  with
// ELBO^- = SSE + per-sample KL (beta = 1, no free-bits floor); deterministic
double anomaly_score(const VAEModel& m, const float* spec, int n_mels, int frames, double alpha);
std::vector<double> anomaly_scores(const VAEModel& m, const data::FeatureSet& fs,
                                   const std::vector<int>& idx, double alpha);
std::vector<double> anomaly_scores_buffer(const VAEModel& m, const float* specs, int n,
                                          int n_mels, int frames, double alpha);

struct GuardCalibration {
  double alpha = 0.5;
  double tau = 0.0;
  double target_fpr = 0.05;
  double achieved_fpr = 0.0;
  int64_t clean_count = 0;
  std::map<std::string, double> quantiles;
};

// tau = empirical (1 - target_fpr) quantile with linear interpolation
// between order statistics; needs >= 200 clean scores
GuardCalibration calibrate_threshold(std::vector<double> clean_scores, double target_fpr,
                                     double alpha);

struct GuardDecision {
  bool flag = false;
  double score = 0.0;
};
// flag iff score > tau (ties keep)
GuardDecision guard_decision(const VAEModel& m, const float* spec, int n_mels, int frames,
                             const GuardCalibration& calib);

std::string guard_calibration_json(const GuardCalibration& c);
GuardCalibration guard_calibration_from_json(const std::string& text);

std::string vae_arch_json(const VAEModel& m);
Checkpoint vae_to_checkpoint(const VAEModel& m, const std::string& meta_json);
VAEModel vae_from_checkpoint(const Checkpoint& c);

}  // namespace rffi::vae
