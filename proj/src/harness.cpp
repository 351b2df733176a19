#include "rffi/harness.hpp"

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "rffi/binio.hpp"
#include "rffi/metrics.hpp"
#include "rffi/sha256.hpp"
#include "rffi/watermark.hpp"

namespace rffi::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config serialization

namespace {

json sanitize_steps_to_json(const std::vector<attack::SanitizeStep>& steps) {
  json arr = json::array();
  for (const auto& s : steps) {
    std::string m = s.method == attack::SanitizeMethod::kGaussianBlur ? "gaussian_blur"
                    : s.method == attack::SanitizeMethod::kMedian3    ? "median3"
                                                                      : "noise";
    arr.push_back({{"method", m}, {"sigma", s.sigma}});
  }
  return arr;
}

std::vector<attack::SanitizeStep> sanitize_steps_from_json(const json& arr) {
  std::vector<attack::SanitizeStep> out;
  for (const auto& e : arr) {
    attack::SanitizeStep s;
    s.method = attack::sanitize_method_from_string(e.at("method").get<std::string>());
    s.sigma = e.value("sigma", 0.0);
    out.push_back(s);
  }
  return out;
}

}  // namespace

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["dataset"] = json::parse(sim::dataset_config_json(cfg.dataset));
  j["frontend"] = json::parse(dsp::frontend_config_json(cfg.frontend));
  const auto& c = cfg.classifier;
  j["classifier"] = {
      {"preset", c.preset},
      {"hyper",
       {{"learning_rate", c.hyper.learning_rate},
        {"weight_decay", c.hyper.weight_decay},
        {"batch_size", c.hyper.batch_size},
        {"schedule", nn::schedule_to_string(c.hyper.schedule)},
        {"early_stop_patience", c.hyper.early_stop_patience},
        {"label_smoothing", c.hyper.label_smoothing},
        {"focal_gamma", c.hyper.focal_gamma},
        {"task_loss", c.hyper.task_loss == nn::TaskLoss::kFocal ? "focal" : "ce"},
        {"max_epochs", c.hyper.max_epochs}}},
      {"augment",
       {{"enabled", c.augment.enabled},
        {"mask_prob", c.augment.mask_prob},
        {"time_mask_max", c.augment.time_mask_max},
        {"freq_mask_max", c.augment.freq_mask_max},
        {"noise_sigma", c.augment.noise_sigma}}},
      {"watermark",
       {{"enabled", c.wm.enabled},
        {"p_wm", c.wm.p_wm},
        {"adversarial", c.wm.adversarial},
        {"signature", c.wm.signature},
        {"key_seed", c.wm_key_seed}}},
      {"verify",
       {{"probe_count", c.verify.probe_count},
        {"sanitize", sanitize_steps_to_json(c.verify.sanitize)}}}};
  const auto& g = cfg.guard;
  j["guard"] = {{"preset", g.preset},
                {"alpha", g.alpha},
                {"target_fpr", g.target_fpr},
                {"train",
                 {{"beta_max", g.train.beta_max},
                  {"warmup_epochs", g.train.warmup_epochs},
                  {"tau_fb", g.train.tau_fb},
                  {"lr", g.train.lr},
                  {"patience", g.train.patience},
                  {"batch_size", g.train.batch_size},
                  {"weight_decay", g.train.weight_decay},
                  {"max_epochs", g.train.max_epochs}}}};
  json atk = json::array();
  for (const auto& a : cfg.attacks) atk.push_back({{"kind", a.kind}, {"params", a.params}});
  j["attacks"] = atk;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  cfg.seed = j.value("seed", 42ull);
  cfg.out_dir = j.value("out_dir", std::string());
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    cfg.dataset.dataset_seed = d.value("dataset_seed", cfg.seed);
    cfg.dataset.device_count = d.value("device_count", 10);
    cfg.dataset.train_packets_per_device = d.value("train_packets_per_device", 200);
    cfg.dataset.test_packets_per_device = d.value("test_packets_per_device", 100);
    cfg.dataset.unseen_device_count = d.value("unseen_device_count", 5);
    cfg.dataset.unseen_packets_per_device = d.value("unseen_packets_per_device", 100);
    cfg.dataset.noise_packets = d.value("noise_packets", 500);
    cfg.dataset.snr_db = d.value("snr_db", 20.0);
    cfg.dataset.random_phase = d.value("random_phase", false);
    if (d.contains("taps"))
      for (const auto& t : d.at("taps"))
        cfg.dataset.taps.push_back(
            {t.at("delay").get<int>(),
             {t.value("re", 1.0), t.value("im", 0.0)}});
  }
  if (j.contains("frontend")) {
    const auto& f = j.at("frontend");
    cfg.frontend.n_fft = f.value("n_fft", 256);
    cfg.frontend.hop = f.value("hop", 128);
    cfg.frontend.n_mels = f.value("n_mels", 32);
    cfg.frontend.log_epsilon = f.value("log_epsilon", 1e-6);
    cfg.frontend.target_frames = f.value("target_frames", 65);
    cfg.frontend.sample_rate_hz = f.value("sample_rate_hz", 1e6);
    cfg.frontend.window = f.value("window", std::string("hann")) == "rect"
                              ? dsp::FrontendConfig::Window::kRect
                              : dsp::FrontendConfig::Window::kHann;
    cfg.frontend.standardize = f.value("standardize", true);
  }
  if (j.contains("classifier")) {
    const auto& c = j.at("classifier");
    cfg.classifier.preset = c.value("preset", std::string("mini_resnet"));
    if (c.contains("hyper")) {
      const auto& h = c.at("hyper");
      auto& hy = cfg.classifier.hyper;
      hy.learning_rate = h.value("learning_rate", 3e-4);
      hy.weight_decay = h.value("weight_decay", 1e-4);
      hy.batch_size = h.value("batch_size", 64);
      hy.schedule = nn::schedule_from_string(h.value("schedule", std::string("onecycle")));
      hy.early_stop_patience = h.value("early_stop_patience", 5);
      hy.label_smoothing = h.value("label_smoothing", 0.05);
      hy.focal_gamma = h.value("focal_gamma", 2.0);
      hy.task_loss = h.value("task_loss", std::string("ce")) == "focal" ? nn::TaskLoss::kFocal
                                                                        : nn::TaskLoss::kCrossEntropy;
      hy.max_epochs = h.value("max_epochs", 20);
    }
    if (c.contains("augment")) {
      const auto& a = c.at("augment");
      auto& ag = cfg.classifier.augment;
      ag.enabled = a.value("enabled", true);
      ag.mask_prob = a.value("mask_prob", 0.5);
      ag.time_mask_max = a.value("time_mask_max", 8);
      ag.freq_mask_max = a.value("freq_mask_max", 4);
      ag.noise_sigma = a.value("noise_sigma", 0.02);
    }
    if (c.contains("watermark")) {
      const auto& w = c.at("watermark");
      cfg.classifier.wm.enabled = w.value("enabled", false);
      cfg.classifier.wm.p_wm = w.value("p_wm", 0.05);
      cfg.classifier.wm.adversarial = w.value("adversarial", true);
      cfg.classifier.wm.signature = w.value("signature", true);
      cfg.classifier.wm_key_seed = w.value("key_seed", 7ull);
    }
    if (c.contains("verify")) {
      const auto& v = c.at("verify");
      cfg.classifier.verify.probe_count = v.value("probe_count", 200);
      if (v.contains("sanitize"))
        cfg.classifier.verify.sanitize = sanitize_steps_from_json(v.at("sanitize"));
    }
  }
  if (j.contains("guard")) {
    const auto& g = j.at("guard");
    cfg.guard.preset = g.value("preset", std::string("robust"));
    cfg.guard.train = vae::guard_train_defaults(cfg.guard.preset);
    cfg.guard.alpha = g.value("alpha", 0.5);
    cfg.guard.target_fpr = g.value("target_fpr", 0.05);
    if (g.contains("train")) {
      const auto& t = g.at("train");
      auto& tc = cfg.guard.train;
      tc.beta_max = t.value("beta_max", tc.beta_max);
      tc.warmup_epochs = t.value("warmup_epochs", tc.warmup_epochs);
      tc.tau_fb = t.value("tau_fb", tc.tau_fb);
      tc.lr = t.value("lr", tc.lr);
      tc.patience = t.value("patience", tc.patience);
      tc.batch_size = t.value("batch_size", tc.batch_size);
      tc.weight_decay = t.value("weight_decay", tc.weight_decay);
      tc.max_epochs = t.value("max_epochs", tc.max_epochs);
    }
  } else {
    cfg.guard.train = vae::guard_train_defaults(cfg.guard.preset);
  }
  if (j.contains("attacks"))
    for (const auto& a : j.at("attacks"))
      cfg.attacks.push_back({a.at("kind").get<std::string>(), a.value("params", json::object())});
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  return config_from_json(json::parse(read_text_file(path)));
}

std::string config_digest(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("out_dir");  // digests cover content, not placement
  return sha256_hex(j.dump());
}

ExperimentConfig desk_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = 42;
  cfg.out_dir = out_dir;
  cfg.dataset.dataset_seed = 42;
  cfg.classifier.wm.enabled = true;
  cfg.guard.train = vae::guard_train_defaults("robust");
  cfg.guard.train.max_epochs = 24;
  cfg.attacks = {{"prune", {{"rho", 0.3}}},
                 {"quantize", {{"bits", 8}}},
                 {"finetune", {{"epochs", 3}, {"lr", 1e-4}}},
                 {"sanitize",
                  {{"steps", json::array({{{"method", "gaussian_blur"}, {"sigma", 1.0}},
                                          {{"method", "noise"}, {"sigma", 0.05}}})}}},
                 {"evade", {{"epsilon", 0.3}, {"steps", 10}, {"count", 200}}}};
  return cfg;
}

// ---------------------------------------------------------------------------
// stage caching

namespace {

std::string short8(const std::string& digest) { return digest.substr(0, 8); }

bool stage_done(const fs::path& dir, const std::string& digest) {
  fs::path marker = dir / "stage.json";
  if (!fs::exists(marker)) return false;
  try {
    json j = json::parse(read_text_file(marker.string()));
    return j.value("digest", std::string()) == digest;
  } catch (...) {
    return false;
  }
}

void mark_stage(const fs::path& dir, const std::string& digest) {
  json j;
  j["digest"] = digest;
  write_text_file((dir / "stage.json").string(), j.dump());
}

struct StageTimer {
  json& timings;
  std::string name;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  ~StageTimer() {
    timings[name] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

}  // namespace

json eval_report_to_json(const clf::EvalReport& r) {
  json j;
  j["overall_accuracy"] = r.overall_accuracy;
  j["total"] = r.total;
  j["num_classes"] = r.num_classes;
  j["macro"] = {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}};
  j["weighted"] = {{"precision", r.weighted_precision},
                   {"recall", r.weighted_recall},
                   {"f1", r.weighted_f1}};
  j["min_class"] = {{"precision", r.min_precision}, {"recall", r.min_recall}, {"f1", r.min_f1}};
  j["max_class"] = {{"precision", r.max_precision}, {"recall", r.max_recall}, {"f1", r.max_f1}};
  json pc = json::array();
  for (const auto& c : r.per_class)
    pc.push_back({{"precision", c.precision},
                  {"recall", c.recall},
                  {"f1", c.f1},
                  {"support", c.support}});
  j["per_class"] = pc;
  j["confusion"] = r.confusion;
  j["wm_prediction_rate"] = r.wm_prediction_rate;
  return j;
}

namespace {

json verification_to_json(const wm::VerificationResult& v) {
  return {{"kind", v.kind},
          {"score", v.score},
          {"threshold", v.threshold},
          {"pass", v.pass},
          {"probe_count", v.probe_count}};
}

}  // namespace

json attack_report_to_json(const attack::AttackReport& r) {
  json j;
  j["kind"] = r.kind;
  j["params"] = json::parse(r.params_json);
  j["clean_accuracy_before"] = r.clean_accuracy_before;
  j["clean_accuracy_after"] = r.clean_accuracy_after;
  j["trigger_asr_before"] = r.trigger_asr_before;
  j["trigger_asr_after"] = r.trigger_asr_after;
  j["signature_cos_before"] = r.signature_cos_before;
  j["signature_cos_after"] = r.signature_cos_after;
  if (r.guard_flag_rate >= 0) j["guard_flag_rate"] = r.guard_flag_rate;
  if (r.misclassification_rate >= 0) j["misclassification_rate"] = r.misclassification_rate;
  return j;
}

// ---------------------------------------------------------------------------
// run_experiment

namespace {

std::vector<double> score_buffers(const vae::VAEModel& guard, const std::vector<float>& bufs,
                                  int n, int n_mels, int frames, double alpha) {
  std::vector<double> out;
  const int B = 64;
  int64_t slen = static_cast<int64_t>(n_mels) * frames;
  for (int b0 = 0; b0 < n; b0 += B) {
    int bs = std::min(B, n - b0);
    for (int i = 0; i < bs; ++i) {
      out.push_back(vae::anomaly_score(guard, bufs.data() + (b0 + i) * slen, n_mels, frames,
                                       alpha));
    }
  }
  return out;
}

double accuracy_on_buffers(const clf::Model& model, const std::vector<float>& bufs, int n,
                           int n_mels, int frames, const std::vector<int>& truth) {
  int64_t slen = static_cast<int64_t>(n_mels) * frames;
  int64_t correct = 0;
  const int B = 64;
  for (int b0 = 0; b0 < n; b0 += B) {
    int bs = std::min(B, n - b0);
    clf::BatchOutput out = clf::forward_batch(model, bufs.data() + b0 * slen, bs, n_mels, frames);
    int K = out.logits.dim(1);
    for (int i = 0; i < bs; ++i) {
      const float* row = out.logits.ptr() + static_cast<int64_t>(i) * K;
      int arg = static_cast<int>(std::max_element(row, row + K) - row);
      if (arg == truth[static_cast<size_t>(b0 + i)]) correct++;
    }
  }
  return static_cast<double>(correct) / n;
}

}  // namespace

MetricsBundle run_experiment(const ExperimentConfig& cfg_in, bool verbose) {
  ExperimentConfig cfg = cfg_in;
  if (cfg.out_dir.empty()) throw std::invalid_argument("run_experiment: out_dir required");
  fs::create_directories(cfg.out_dir);
  json bundle;
  json timings;
  auto note = [&](const std::string& s) {
    if (verbose) std::fprintf(stderr, "[run] %s\n", s.c_str());
  };

  // --- simulate ---------------------------------------------------------
  std::string sim_digest;
  fs::path sim_dir;
  {
    StageTimer t{timings, "simulate"};
    sim_digest = sha256_hex("sim:" + sim::dataset_config_json(cfg.dataset));
    sim_dir = fs::path(cfg.out_dir) / ("sim-" + short8(sim_digest));
    if (!stage_done(sim_dir, sim_digest)) {
      note("simulate " + short8(sim_digest));
      sim::DatasetConfig ds = cfg.dataset;
      ds.out_dir = sim_dir.string();
      try {
        sim::build_dataset(ds);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage simulate failed: ") + e.what());
      }
      mark_stage(sim_dir, sim_digest);
    }
  }

  // --- featurize --------------------------------------------------------
  std::string feat_digest;
  fs::path feat_dir;
  {
    StageTimer t{timings, "featurize"};
    feat_digest =
        sha256_hex("feat:" + dsp::frontend_config_json(cfg.frontend) + ":" + sim_digest);
    feat_dir = fs::path(cfg.out_dir) / ("feat-" + short8(feat_digest));
    if (!stage_done(feat_dir, feat_digest)) {
      note("featurize " + short8(feat_digest));
      try {
        data::featurize_dataset((sim_dir / "manifest.json").string(), feat_dir.string(),
                                cfg.frontend);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage featurize failed: ") + e.what());
      }
      mark_stage(feat_dir, feat_digest);
    }
  }
  data::FeatureSet fsx = data::load_feature_set((feat_dir / "features_manifest.json").string());
  std::vector<int> train_idx = fsx.indices_of_split("train");
  std::vector<int> val_idx = fsx.indices_of_split("val");
  std::vector<int> test_idx = fsx.indices_of_split("test");
  std::vector<int> unseen_idx = fsx.indices_of_split("unseen");
  std::vector<int> noise_idx = fsx.indices_of_split("noise");
  const int C = cfg.dataset.device_count;
  const int M = fsx.n_mels, F = fsx.frames;
  const int64_t slen = fsx.spec_len();

  // --- classifier -------------------------------------------------------
  clf::Model model;
  wm::WatermarkKey key;
  bool use_wm = cfg.classifier.wm.enabled;
  json clf_section;
  std::string clf_digest;
  {
    StageTimer t{timings, "classifier"};
    json cj = config_to_json(cfg).at("classifier");
    clf_digest = sha256_hex("clf:" + cj.dump() + ":" + feat_digest + ":" +
                            std::to_string(cfg.seed));
    fs::path clf_dir = fs::path(cfg.out_dir) / ("clf-" + short8(clf_digest));
    if (use_wm)
      key = wm::gen_key(cfg.classifier.wm_key_seed, C,
                        clf::arch_preset(cfg.classifier.preset).feature_dim);
    if (stage_done(clf_dir, clf_digest)) {
      model = clf::model_from_checkpoint(load_checkpoint((clf_dir / "model.ckpt").string()));
      clf_section["trainlog"] = json::parse(read_text_file((clf_dir / "trainlog.json").string()));
    } else {
      note("train classifier " + short8(clf_digest));
      fs::create_directories(clf_dir);
      model = clf::build_model(cfg.classifier.preset, C, cfg.seed);
      clf::TrainLog log;
      try {
        log = clf::train_model(model, fsx, train_idx, val_idx, use_wm ? &key : nullptr,
                               cfg.classifier.wm, cfg.classifier.hyper, cfg.classifier.augment,
                               cfg.seed);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage classifier failed: ") + e.what());
      }
      json meta = {{"config_digest", clf_digest},
                   {"epoch", log.best_epoch},
                   {"metrics", {{"best_val_accuracy", log.best_val_accuracy}}}};
      save_checkpoint((clf_dir / "model.ckpt").string(),
                      clf::model_to_checkpoint(model, meta.dump()));
      if (use_wm) wm::save_key((clf_dir / "key.bin").string(), key);
      json lg = {{"val_accuracy", log.val_accuracy},
                 {"train_loss", log.train_loss},
                 {"best_epoch", log.best_epoch},
                 {"best_val_accuracy", log.best_val_accuracy},
                 {"epochs_run", log.epochs_run}};
      write_text_file((clf_dir / "trainlog.json").string(), lg.dump(1));
      clf_section["trainlog"] = lg;
      mark_stage(clf_dir, clf_digest);
    }
    clf::EvalReport eval = clf::evaluate(model, fsx, test_idx);
    clf_section["eval"] = eval_report_to_json(eval);
    clf_section["preset"] = cfg.classifier.preset;
    clf_section["digest"] = clf_digest;
  }
  bundle["classifier"] = clf_section;
  double clean_acc = clf_section["eval"]["overall_accuracy"].get<double>();

  // --- guard ------------------------------------------------------------
  vae::VAEModel guard;
  vae::GuardCalibration calib;
  json guard_section;
  {
    StageTimer t{timings, "guard"};
    json gj = config_to_json(cfg).at("guard");
    std::string guard_digest = sha256_hex("guard:" + gj.dump() + ":" + feat_digest + ":" +
                                          std::to_string(cfg.seed));
    fs::path guard_dir = fs::path(cfg.out_dir) / ("guard-" + short8(guard_digest));
    if (stage_done(guard_dir, guard_digest)) {
      guard = vae::vae_from_checkpoint(load_checkpoint((guard_dir / "guard.ckpt").string()));
      calib = vae::guard_calibration_from_json(
          read_text_file((guard_dir / "calibration.json").string()));
      guard_section["trainlog"] =
          json::parse(read_text_file((guard_dir / "trainlog.json").string()));
    } else {
      note("train guard " + short8(guard_digest));
      fs::create_directories(guard_dir);
      guard = vae::build_vae(cfg.guard.preset, cfg.seed);
      vae::GuardTrainLog log;
      try {
        log = vae::train_guard(guard, fsx, train_idx, val_idx, cfg.guard.train, cfg.seed);
        std::vector<double> val_scores = vae::anomaly_scores(guard, fsx, val_idx, cfg.guard.alpha);
        calib = vae::calibrate_threshold(std::move(val_scores), cfg.guard.target_fpr,
                                         cfg.guard.alpha);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage guard failed: ") + e.what());
      }
      json meta = {{"config_digest", guard_digest}, {"epoch", log.best_epoch}};
      save_checkpoint((guard_dir / "guard.ckpt").string(),
                      vae::vae_to_checkpoint(guard, meta.dump()));
      write_text_file((guard_dir / "calibration.json").string(),
                      vae::guard_calibration_json(calib));
      json lg = {{"train_loss", log.train_loss},
                 {"val_loss", log.val_loss},
                 {"val_recon", log.val_recon},
                 {"initial_val_recon", log.initial_val_recon},
                 {"best_epoch", log.best_epoch},
                 {"best_val_loss", log.best_val_loss},
                 {"best_val_recon", log.best_val_recon},
                 {"epochs_run", log.epochs_run}};
      write_text_file((guard_dir / "trainlog.json").string(), lg.dump(1));
      guard_section["trainlog"] = lg;
      mark_stage(guard_dir, guard_digest);
    }
    guard_section["preset"] = cfg.guard.preset;
    guard_section["digest"] = guard_digest;
    guard_section["calibration"] = json::parse(vae::guard_calibration_json(calib));
  }

  // --- guard metrics ----------------------------------------------------
  {
    StageTimer t{timings, "guard_metrics"};
    std::vector<double> s_test = vae::anomaly_scores(guard, fsx, test_idx, cfg.guard.alpha);
    std::vector<double> s_unseen = vae::anomaly_scores(guard, fsx, unseen_idx, cfg.guard.alpha);
    std::vector<double> s_noise = vae::anomaly_scores(guard, fsx, noise_idx, cfg.guard.alpha);
    auto metric_pair = [&](const std::vector<double>& anom) {
      std::vector<double> scores = s_test;
      scores.insert(scores.end(), anom.begin(), anom.end());
      std::vector<int> labels(s_test.size(), 0);
      labels.insert(labels.end(), anom.size(), 1);
      return std::make_pair(metrics::auroc(scores, labels),
                            metrics::average_precision(scores, labels));
    };
    json gm;
    if (!unseen_idx.empty()) {
      auto [a, p] = metric_pair(s_unseen);
      gm["auroc_unseen"] = a;
      gm["ap_unseen"] = p;
    }
    if (!noise_idx.empty()) {
      auto [a, p] = metric_pair(s_noise);
      gm["auroc_noise"] = a;
      gm["ap_noise"] = p;
    }
    std::vector<double> pooled = s_unseen;
    pooled.insert(pooled.end(), s_noise.begin(), s_noise.end());
    if (!pooled.empty()) {
      auto [a, p] = metric_pair(pooled);
      gm["auroc_pooled"] = a;
      gm["ap_pooled"] = p;
    }
    std::vector<bool> kept;
    kept.reserve(s_test.size());
    for (double s : s_test) kept.push_back(!(s > calib.tau));
    gm["keep_rate_clean_test"] = metrics::keep_rate(kept);
    gm["heldout_fpr"] = 1.0 - metrics::keep_rate(kept);
    gm["clean_test_count"] = static_cast<int64_t>(s_test.size());
    guard_section["metrics"] = gm;
  }
  bundle["guard"] = guard_section;

  // --- watermark verification -------------------------------------------
  std::vector<int> probes;
  wm::VerificationResult plain{}, sig{};
  json wm_section;
  wm_section["enabled"] = use_wm;
  if (use_wm) {
    StageTimer t{timings, "verify"};
    probes = wm::select_probes(test_idx, cfg.classifier.verify.probe_count, key.probe_seed);
    plain = wm::verify_trigger(model, key, fsx, probes, wm::VerifyMode::kPlain);
    wm::VerificationResult adv =
        wm::verify_trigger(model, key, fsx, probes, wm::VerifyMode::kAdversarial);
    wm::VerificationResult sanitized = wm::verify_trigger(
        model, key, fsx, probes, wm::VerifyMode::kSanitized, &cfg.classifier.verify.sanitize);
    sig = wm::verify_signature(model, key, fsx, probes);
    wm_section["plain"] = verification_to_json(plain);
    wm_section["adversarial"] = verification_to_json(adv);
    wm_section["sanitized"] = verification_to_json(sanitized);
    wm_section["signature"] = verification_to_json(sig);
    wm_section["probe_count"] = static_cast<int>(probes.size());
  }
  bundle["watermark"] = wm_section;

  // --- attacks ------------------------------------------------------------
  json attacks_json = json::array();
  for (size_t ai = 0; ai < cfg.attacks.size(); ++ai) {
    const AttackSpec& spec = cfg.attacks[ai];
    StageTimer t{timings, "attack_" + std::to_string(ai) + "_" + spec.kind};
    std::string atk_digest = sha256_hex("atk:" + spec.kind + ":" + spec.params.dump() + ":" +
                                        clf_digest + ":" + std::to_string(cfg.seed));
    fs::path atk_dir =
        fs::path(cfg.out_dir) / ("atk" + std::to_string(ai) + "-" + short8(atk_digest));
    if (stage_done(atk_dir, atk_digest)) {
      attacks_json.push_back(json::parse(read_text_file((atk_dir / "report.json").string())));
      continue;
    }
    note("attack " + spec.kind);
    fs::create_directories(atk_dir);
    attack::AttackReport rep;
    rep.kind = spec.kind;
    rep.params_json = spec.params.dump();
    rep.clean_accuracy_before = clean_acc;
    rep.trigger_asr_before = use_wm ? plain.score : -1.0;
    rep.signature_cos_before = use_wm ? sig.score : -1.0;
    try {
      if (spec.kind == "prune" || spec.kind == "quantize") {
        Checkpoint ck = clf::model_to_checkpoint(model, "{}");
        Checkpoint attacked = spec.kind == "prune"
                                  ? attack::prune(ck, spec.params.at("rho").get<double>())
                                  : attack::quantize(ck, spec.params.at("bits").get<int>());
        clf::Model m2 = clf::model_from_checkpoint(attacked);
        rep.clean_accuracy_after = clf::evaluate(m2, fsx, test_idx).overall_accuracy;
        if (use_wm) {
          rep.trigger_asr_after =
              wm::verify_trigger(m2, key, fsx, probes, wm::VerifyMode::kPlain).score;
          rep.signature_cos_after = wm::verify_signature(m2, key, fsx, probes).score;
        }
        save_checkpoint((atk_dir / "attacked.ckpt").string(), attacked);
      } else if (spec.kind == "finetune") {
        clf::Model m2 = model;
        attack::finetune(m2, fsx, train_idx, spec.params.value("epochs", 3),
                         spec.params.value("lr", 1e-4), seed_mix(cfg.seed, 0xf17eull));
        rep.clean_accuracy_after = clf::evaluate(m2, fsx, test_idx).overall_accuracy;
        if (use_wm) {
          rep.trigger_asr_after =
              wm::verify_trigger(m2, key, fsx, probes, wm::VerifyMode::kPlain).score;
          rep.signature_cos_after = wm::verify_signature(m2, key, fsx, probes).score;
        }
        save_checkpoint((atk_dir / "attacked.ckpt").string(),
                        clf::model_to_checkpoint(m2, "{}"));
      } else if (spec.kind == "sanitize") {
        std::vector<attack::SanitizeStep> steps;
        if (spec.params.contains("steps"))
          steps = sanitize_steps_from_json(spec.params.at("steps"));
        else
          steps = {{attack::sanitize_method_from_string(
                        spec.params.at("method").get<std::string>()),
                    spec.params.value("sigma", 0.0)}};
        std::vector<float> bufs(static_cast<size_t>(test_idx.size()) * slen);
        std::vector<int> truth(test_idx.size());
        for (size_t i = 0; i < test_idx.size(); ++i) {
          float* row = bufs.data() + i * slen;
          std::copy_n(fsx.spec(test_idx[i]), slen, row);
          Rng rng(seed_mix(seed_tag(cfg.seed, "sanitize_attack"), static_cast<uint64_t>(i)));
          for (const auto& st : steps) attack::sanitize_input(row, M, F, st, &rng);
          truth[i] = fsx.labels[static_cast<size_t>(test_idx[i])];
        }
        rep.clean_accuracy_after = accuracy_on_buffers(
            model, bufs, static_cast<int>(test_idx.size()), M, F, truth);
        std::vector<double> flag_scores = score_buffers(
            guard, bufs, static_cast<int>(test_idx.size()), M, F, cfg.guard.alpha);
        int64_t flags = 0;
        for (double s : flag_scores)
          if (s > calib.tau) flags++;
        rep.guard_flag_rate = static_cast<double>(flags) / static_cast<double>(test_idx.size());
        if (use_wm) {
          rep.trigger_asr_after =
              wm::verify_trigger(model, key, fsx, probes, wm::VerifyMode::kSanitized, &steps)
                  .score;
          rep.signature_cos_after = wm::verify_signature(model, key, fsx, probes).score;
        }
      } else if (spec.kind == "evade") {
        double eps = spec.params.value("epsilon", 0.3);
        int steps = spec.params.value("steps", 10);
        int count = spec.params.value("count", 200);
        double step_size = spec.params.value("step_size", steps > 0 ? 2.5 * eps / steps : 0.0);
        std::vector<int> pred = clf::predict_labels(model, fsx, test_idx);
        std::vector<int> chosen;
        for (size_t i = 0; i < test_idx.size() && static_cast<int>(chosen.size()) < count; ++i)
          if (pred[i] == fsx.labels[static_cast<size_t>(test_idx[i])])
            chosen.push_back(test_idx[i]);
        if (chosen.empty()) throw std::runtime_error("evade: no correctly classified inputs");
        int64_t changed = 0, flagged = 0;
        const int B = 50;
        for (size_t b0 = 0; b0 < chosen.size(); b0 += B) {
          int bs = static_cast<int>(std::min<size_t>(B, chosen.size() - b0));
          nn::Tensor x({bs, 1, M, F});
          std::vector<int> lab(static_cast<size_t>(bs));
          for (int i = 0; i < bs; ++i) {
            std::copy_n(fsx.spec(chosen[b0 + static_cast<size_t>(i)]), slen,
                        x.ptr() + static_cast<int64_t>(i) * slen);
            lab[static_cast<size_t>(i)] =
                fsx.labels[static_cast<size_t>(chosen[b0 + static_cast<size_t>(i)])];
          }
          attack::EvadeResult er = attack::evade(model, x, lab, eps, steps, step_size);
          changed += er.changed_count;
          std::vector<double> s = score_buffers(guard, er.adv.data, bs, M, F, cfg.guard.alpha);
          for (double v : s)
            if (v > calib.tau) flagged++;
        }
        rep.misclassification_rate =
            static_cast<double>(changed) / static_cast<double>(chosen.size());
        rep.guard_flag_rate = static_cast<double>(flagged) / static_cast<double>(chosen.size());
        rep.clean_accuracy_after = 1.0 - rep.misclassification_rate;
        rep.trigger_asr_after = rep.trigger_asr_before;
        rep.signature_cos_after = rep.signature_cos_before;
      } else {
        throw std::invalid_argument("unknown attack kind: " + spec.kind);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("stage attack[" + spec.kind + "] failed: " + e.what());
    }
    json rj = attack_report_to_json(rep);
    write_text_file((atk_dir / "report.json").string(), rj.dump(1));
    mark_stage(atk_dir, atk_digest);
    attacks_json.push_back(rj);
  }
  bundle["attacks"] = attacks_json;

  bundle["config_digest"] = config_digest(cfg);
  bundle["bundle_digest"] = sha256_hex(bundle_canonical(bundle));
  bundle["timings"] = timings;

  write_text_file((fs::path(cfg.out_dir) / "metrics.json").string(), bundle.dump(1));
  write_text_file((fs::path(cfg.out_dir) / "report.md").string(), render_report(bundle));
  return {bundle};
}

std::string bundle_canonical(const json& bundle) {
  json j = bundle;
  j.erase("timings");
  j.erase("bundle_digest");
  return j.dump();
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
  return buf;
}

std::string num(double v, int prec = 4) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

std::string render_report(const json& b) {
  std::string out;
  out += "# Experiment report\n\n";
  out += "config digest: `" + b.value("config_digest", std::string("?")) + "`\n\n";

  if (b.contains("guard")) {
    const auto& g = b.at("guard");
    const auto& m = g.at("metrics");
    out += "## Anomaly guard\n\n";
    out += "| Model | Keep Rate(%) | AUROC | AP |\n|---|---|---|---|\n";
    out += "| ConvVAE (" + g.value("preset", std::string("?")) + ") | " +
           pct(m.value("keep_rate_clean_test", 0.0)) + " | " +
           num(m.value("auroc_pooled", 0.0), 3) + " | " + num(m.value("ap_pooled", 0.0), 3) +
           " |\n\n";
    out += "Per-pool AUROC/AP: unseen " + num(m.value("auroc_unseen", 0.0), 3) + "/" +
           num(m.value("ap_unseen", 0.0), 3) + ", noise " + num(m.value("auroc_noise", 0.0), 3) +
           "/" + num(m.value("ap_noise", 0.0), 3) + ". Held-out clean FPR " +
           pct(m.value("heldout_fpr", 0.0)) + "% at target " +
           pct(g.at("calibration").value("target_fpr", 0.0)) + "%.\n\n";
  }

  if (b.contains("classifier")) {
    const auto& e = b.at("classifier").at("eval");
    out += "## Classifier (" + b.at("classifier").value("preset", std::string("?")) + ")\n\n";
    out += "| Metric | Macro Avg. (%) | Weighted Avg. (%) | Min Class (%) | Max Class (%) |\n";
    out += "|---|---|---|---|---|\n";
    for (const char* metric : {"precision", "recall", "f1"}) {
      std::string name = metric;
      name[0] = static_cast<char>(std::toupper(name[0]));
      out += "| " + name + " | " + pct(e.at("macro").value(metric, 0.0)) + " | " +
             pct(e.at("weighted").value(metric, 0.0)) + " | " +
             pct(e.at("min_class").value(metric, 0.0)) + " | " +
             pct(e.at("max_class").value(metric, 0.0)) + " |\n";
    }
    out += "| Accuracy | " + pct(e.value("overall_accuracy", 0.0)) +
           " (overall test accuracy) | | | |\n\n";
  }

  if (b.contains("watermark") && b.at("watermark").value("enabled", false)) {
    const auto& w = b.at("watermark");
    out += "## Watermarks\n\n";
    out += "| Check | Score | Threshold | Pass |\n|---|---|---|---|\n";
    for (const char* k : {"plain", "adversarial", "sanitized", "signature"}) {
      if (!w.contains(k)) continue;
      const auto& v = w.at(k);
      out += std::string("| ") + k + " (" + v.value("kind", std::string()) + ") | " +
             num(v.value("score", 0.0), 4) + " | " + num(v.value("threshold", 0.0), 2) + " | " +
             (v.value("pass", false) ? "yes" : "no") + " |\n";
    }
    out += "\n";
  }

  if (b.contains("attacks") && !b.at("attacks").empty()) {
    out += "## Attacks\n\n";
    out += "| Attack | Clean Acc before/after (%) | Trigger ASR before/after | Signature cos "
           "before/after | Guard flag rate |\n|---|---|---|---|---|\n";
    for (const auto& a : b.at("attacks")) {
      out += "| " + a.value("kind", std::string("?")) + " | " +
             pct(a.value("clean_accuracy_before", 0.0)) + " / " +
             pct(a.value("clean_accuracy_after", 0.0)) + " | " +
             num(a.value("trigger_asr_before", 0.0), 3) + " / " +
             num(a.value("trigger_asr_after", 0.0), 3) + " | " +
             num(a.value("signature_cos_before", 0.0), 3) + " / " +
             num(a.value("signature_cos_after", 0.0), 3) + " | " +
             (a.contains("guard_flag_rate") ? num(a.value("guard_flag_rate", 0.0), 3)
                                            : std::string("-")) +
             " |\n";
    }
    out += "\n";
  }
  return out;
}

}  // namespace rffi::harness
