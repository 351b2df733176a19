#pragma once

#include <string>
#include <vector>

#include "rffi/frontend.hpp"
#include "rffi/sim.hpp"

namespace rffi::data {

// In-memory feature table: one standardized log-Mel grid per packet.
struct FeatureSet {
  int n_mels = 32;
  int frames = 65;
  std::vector<float> values;  // count * (n_mels * frames)
  std::vector<int> labels;    // device_id, -1 for noise
  std::vector<std::string> splits;
  std::vector<std::string> paths;

  int64_t count() const { return static_cast<int64_t>(labels.size()); }
  int64_t spec_len() const { return static_cast<int64_t>(n_mels) * frames; }
  const float* spec(int64_t i) const { return values.data() + i * spec_len(); }
  float* spec(int64_t i) { return values.data() + i * spec_len(); }

  std::vector<int> indices_of_split(const std::string& split) const {
    std::vector<int> out;
    for (int64_t i = 0; i < count(); ++i)
      if (splits[static_cast<size_t>(i)] == split) out.push_back(static_cast<int>(i));
    return out;
  }
};

// Runs the front end over every packet in a dataset manifest, writing one
// feature cache file per packet plus a features manifest.
std::string featurize_dataset(const std::string& manifest_path, const std::string& out_dir,
                              const dsp::FrontendConfig& cfg);

FeatureSet load_feature_set(const std::string& features_manifest_path);

}  // namespace rffi::data
