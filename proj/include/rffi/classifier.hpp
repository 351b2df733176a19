#pragma once

#include <string>
#include <vector>

#include "rffi/checkpoint.hpp"
#include "rffi/data.hpp"
#include "rffi/nn/augment.hpp"
#include "rffi/nn/graph.hpp"
#include "rffi/nn/optim.hpp"
#include "rffi/watermark.hpp"

namespace rffi::clf {

struct ArchPreset {
  std::string name;
  int stem_width = 16;
  std::vector<int> stage_widths;
  std::vector<int> stage_blocks;
  int feature_dim = 64;
  bool residual = true;  // shallow_cnn uses plain conv stages
};

// shallow_cnn | mini_resnet | resnet18 | resnet34
ArchPreset arch_preset(const std::string& name);

// Residual classifier over log-Mel grids. The head always has C+1 outputs;
// index C is the reserved watermark class, present even without watermarks.
struct Model {
  ArchPreset arch;
  int num_device_classes = 0;
  nn::ParamStore params;

  int output_dim() const { return num_device_classes + 1; }
  int wm_class() const { return num_device_classes; }
};

Model build_model(const std::string& preset, int num_classes, uint64_t seed);

struct ForwardNodes {
  nn::NodeId logits;
  nn::NodeId penult;
};
ForwardNodes forward_model(nn::Graph& g, const Model& m, const nn::GraphParams& gp,
                           nn::NodeId input);

struct BatchOutput {
  nn::Tensor logits;  // [N, C+1]
  nn::Tensor penult;  // [N, feature_dim]
};
BatchOutput forward_batch(const Model& m, const float* specs, int n, int n_mels, int frames);

struct Prediction {
  std::vector<float> logits;
  int argmax = 0;
};
Prediction predict(const Model& m, const float* spec, int n_mels, int frames);

std::vector<int> predict_labels(const Model& m, const data::FeatureSet& fs,
                                const std::vector<int>& idx);

struct EvalReport {
  double overall_accuracy = 0.0;
  int num_classes = 0;
  int64_t total = 0;
  struct ClassStat {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    int64_t support = 0;
  };
  std::vector<ClassStat> per_class;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  double weighted_precision = 0, weighted_recall = 0, weighted_f1 = 0;
  double min_precision = 0, max_precision = 0;
  double min_recall = 0, max_recall = 0;
  double min_f1 = 0, max_f1 = 0;
  std::vector<std::vector<int64_t>> confusion;  // true class x predicted (C+1)
  double wm_prediction_rate = 0.0;              // clean predictions landing on y_wm
};

// Builds an EvalReport from predictions; the reserved class column is kept in
// the confusion matrix but excluded from per-class averages.
EvalReport report_from_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                   int num_classes);
EvalReport evaluate(const Model& m, const data::FeatureSet& fs, const std::vector<int>& idx);

struct WmTrainConfig {
  bool enabled = false;
  double p_wm = 0.05;       // triggered fraction per batch
  bool adversarial = true;  // perturb half the triggered samples
  bool signature = true;
};

struct TrainLog {
  std::vector<double> val_accuracy;
  std::vector<double> train_loss;
  int best_epoch = -1;
  double best_val_accuracy = 0.0;
  int epochs_run = 0;
};

// Combined objective: L = L_task + L_trig + L_adv + L_sig. Per batch a
// p_wm fraction is triggered and relabeled to the reserved class, half of
// those adversarially perturbed; the signature term aligns the batch-mean
// penultimate feature with the key's secret vector. Aborts on non-finite
// loss. With key == nullptr all watermark terms are exactly zero.
TrainLog train_model(Model& model, const data::FeatureSet& fs, const std::vector<int>& train_idx,
                     const std::vector<int>& val_idx, const wm::WatermarkKey* key,
                     const WmTrainConfig& wm_cfg, const nn::TrainHyper& hyper,
                     const nn::AugmentConfig& aug, uint64_t seed, bool early_stop = true,
                     bool restore_best = true);

std::string model_arch_json(const Model& m);
Checkpoint model_to_checkpoint(const Model& m, const std::string& meta_json);
Model model_from_checkpoint(const Checkpoint& c);

}  // namespace rffi::clf
