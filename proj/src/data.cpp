#include "rffi/data.hpp"

#include <filesystem>
#include <stdexcept>

#include "json.hpp"
#include "rffi/binio.hpp"

namespace rffi::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string featurize_dataset(const std::string& manifest_path, const std::string& out_dir,
                              const dsp::FrontendConfig& cfg) {
  cfg.validate();
  sim::DatasetManifest m = sim::load_manifest(manifest_path);
  fs::path base = fs::path(manifest_path).parent_path();
  fs::create_directories(fs::path(out_dir) / "features");

  std::vector<std::string> feat_paths(m.packets.size());
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < static_cast<long long>(m.packets.size()); ++i) {
    const auto& rec = m.packets[static_cast<size_t>(i)];
    sim::IQBuffer iq = sim::load_iq((base / rec.path).string(), m.sample_rate_hz);
    dsp::LogMelSpectrogram s = dsp::featurize(iq, cfg);
    std::string name = fs::path(rec.path).stem().string() + ".lm";
    std::string rel = (fs::path("features") / name).string();
    dsp::save_feature((fs::path(out_dir) / rel).string(), s);
    feat_paths[static_cast<size_t>(i)] = rel;
  }

  json j;
  j["format_version"] = 1;
  j["n_mels"] = cfg.n_mels;
  j["frames"] = cfg.target_frames;
  j["frontend"] = json::parse(dsp::frontend_config_json(cfg));
  j["dataset_manifest_digest"] = m.config_digest;
  json entries = json::array();
  for (size_t i = 0; i < m.packets.size(); ++i) {
    const auto& rec = m.packets[i];
    entries.push_back({{"path", feat_paths[i]},
                       {"device_id", rec.device_id},
                       {"split", rec.split}});
  }
  j["entries"] = std::move(entries);
  std::string out_manifest = (fs::path(out_dir) / "features_manifest.json").string();
  write_text_file(out_manifest, j.dump(1));
  return out_manifest;
}

FeatureSet load_feature_set(const std::string& features_manifest_path) {
  json j = json::parse(read_text_file(features_manifest_path));
  fs::path base = fs::path(features_manifest_path).parent_path();
  FeatureSet out;
  out.n_mels = j.at("n_mels").get<int>();
  out.frames = j.at("frames").get<int>();
  const auto& entries = j.at("entries");
  int64_t n = static_cast<int64_t>(entries.size());
  out.values.resize(static_cast<size_t>(n * out.spec_len()));
  out.labels.resize(static_cast<size_t>(n));
  out.splits.resize(static_cast<size_t>(n));
  out.paths.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& e = entries[static_cast<size_t>(i)];
    out.labels[static_cast<size_t>(i)] = e.at("device_id").get<int>();
    out.splits[static_cast<size_t>(i)] = e.at("split").get<std::string>();
    out.paths[static_cast<size_t>(i)] = e.at("path").get<std::string>();
    dsp::LogMelSpectrogram s = dsp::load_feature((base / out.paths[static_cast<size_t>(i)]).string());
    if (s.n_mels != out.n_mels || s.frames != out.frames)
      throw std::runtime_error("feature set: inconsistent feature shape");
    std::copy(s.values.begin(), s.values.end(), out.values.begin() + i * out.spec_len());
  }
  return out;
}

}  // namespace rffi::data
