#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "rffi/attacks.hpp"
#include "rffi/classifier.hpp"
#include "rffi/frontend.hpp"
#include "rffi/guard.hpp"
#include "rffi/nn/augment.hpp"
#include "rffi/nn/optim.hpp"
#include "rffi/sim.hpp"

namespace rffi::harness {

using json = nlohmann::json;

struct VerifyConfig {
  int probe_count = 200;
  std::vector<attack::SanitizeStep> sanitize = {
      {attack::SanitizeMethod::kGaussianBlur, 1.0},
      {attack::SanitizeMethod::kNoise, 0.05}};
};

struct ClassifierConfig {
  std::string preset = "mini_resnet";
  nn::TrainHyper hyper;
  nn::AugmentConfig augment;
  clf::WmTrainConfig wm;
  uint64_t wm_key_seed = 7;
  VerifyConfig verify;
};

struct GuardConfig {
  std::string preset = "robust";
  vae::GuardTrainConfig train;
  double alpha = 0.5;
  double target_fpr = 0.05;
};

struct AttackSpec {
  std::string kind;  // prune | quantize | finetune | sanitize | evade
  json params;
};

struct ExperimentConfig {
  uint64_t seed = 42;
  std::string out_dir;
  sim::DatasetConfig dataset;
  dsp::FrontendConfig frontend;
  ClassifierConfig classifier;
  GuardConfig guard;
  std::vector<AttackSpec> attacks;
};

ExperimentConfig config_from_json(const json& j);
json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config_file(const std::string& path);
std::string config_digest(const ExperimentConfig& cfg);

// Desk-scale default: 10 devices x (200 train-pool, 100 test) at 20 dB,
// 5 unseen devices x 100 + 500 noise packets, mini_resnet, robust guard,
// the standard attack list.
ExperimentConfig desk_config(const std::string& out_dir);

struct MetricsBundle {
  json doc;
};

// simulate -> featurize -> train classifier -> train guard -> calibrate ->
// verify watermarks -> run attacks -> bundle. Every stage is cached in
// out_dir keyed by its config digest; a failed stage aborts with its name.
MetricsBundle run_experiment(const ExperimentConfig& cfg, bool verbose = false);

// canonical form drops wall-clock timings (and the digest itself)
std::string bundle_canonical(const json& bundle);
std::string render_report(const json& bundle);

json attack_report_to_json(const attack::AttackReport& r);
json eval_report_to_json(const clf::EvalReport& r);

}  // namespace rffi::harness
