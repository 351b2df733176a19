#include "rffi/guard.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace rffi::vae {

using nn::Graph;
using nn::GraphParams;
using nn::NodeId;
using nn::Tensor;
using json = nlohmann::json;

namespace {
constexpr int kMels = 32;
constexpr int kFrames = 65;
constexpr int kNormGroups = 8;
// encoder spatial path: 32x65 -> 16x32 -> 8x16 -> 4x8
constexpr int kEncH = 4;
constexpr int kEncW = 8;
}  // namespace

VAEPreset vae_preset(const std::string& name) {
  VAEPreset p;
  p.name = name;
  if (name == "base") {
    p.latent_dim = 32;
  } else if (name == "robust") {
    p.latent_dim = 64;
  } else {
    throw std::invalid_argument("unknown vae preset: " + name);
  }
  return p;
}

void GuardTrainConfig::validate() const {
  if (tau_fb < 0) throw std::invalid_argument("guard: tau_fb must be >= 0");
  if (warmup_epochs < 0) throw std::invalid_argument("guard: warmup_epochs must be >= 0");
  if (lr <= 0 || batch_size < 1 || max_epochs < 1 || patience < 1)
    throw std::invalid_argument("guard: bad training config");
  if (beta_max < 0) throw std::invalid_argument("guard: beta_max must be >= 0");
}

GuardTrainConfig guard_train_defaults(const std::string& preset) {
  GuardTrainConfig cfg;
  if (preset == "base") {
    cfg.lr = 3e-4;
    cfg.patience = 5;
    cfg.tau_fb = 0.0;
    cfg.warmup_epochs = 5;
  } else if (preset == "robust") {
    cfg.lr = 2e-3;
    cfg.patience = 10;
    cfg.tau_fb = 0.02;
    cfg.warmup_epochs = 10;
  } else {
    throw std::invalid_argument("unknown vae preset: " + preset);
  }
  return cfg;
}

namespace {

Tensor he_init(std::vector<int> shape, int fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
}

}  // namespace

VAEModel build_vae(const std::string& preset, uint64_t seed) {
  VAEModel m;
  m.preset = vae_preset(preset);
  Rng rng(seed_tag(seed, "vae_init"));
  int C = m.preset.base_channels;
  int flat = C * kEncH * kEncW;
  int D = m.preset.latent_dim;

  m.params.add("enc1.weight", he_init({C, 1, 4, 4}, 16, rng));
  m.params.add("enc1.gn.gamma", Tensor::full({C}, 1.0f));
  m.params.add("enc1.gn.beta", Tensor::zeros({C}));
  m.params.add("enc2.weight", he_init({C, C, 4, 4}, C * 16, rng));
  m.params.add("enc2.gn.gamma", Tensor::full({C}, 1.0f));
  m.params.add("enc2.gn.beta", Tensor::zeros({C}));
  m.params.add("enc3.weight", he_init({C, C, 4, 4}, C * 16, rng));
  m.params.add("enc3.gn.gamma", Tensor::full({C}, 1.0f));
  m.params.add("enc3.gn.beta", Tensor::zeros({C}));
  m.params.add("mu.weight", he_init({D, flat}, flat, rng));
  m.params.add("mu.bias", Tensor::zeros({D}));
  m.params.add("logvar.weight", he_init({D, flat}, flat, rng));
  m.params.add("logvar.bias", Tensor::zeros({D}));
  m.params.add("dec0.weight", he_init({flat, D}, D, rng));
  m.params.add("dec0.bias", Tensor::zeros({flat}));
  m.params.add("dec1.weight", he_init({C, C, 4, 4}, C * 16, rng));  // convT: [Ci,Co,kh,kw]
  m.params.add("dec1.gn.gamma", Tensor::full({C}, 1.0f));
  m.params.add("dec1.gn.beta", Tensor::zeros({C}));
  m.params.add("dec2.weight", he_init({C, C, 4, 4}, C * 16, rng));
  m.params.add("dec2.gn.gamma", Tensor::full({C}, 1.0f));
  m.params.add("dec2.gn.beta", Tensor::zeros({C}));
  m.params.add("dec3.weight", he_init({C, 1, 4, 4}, C * 16, rng));
  m.params.add("dec3.bias", Tensor::zeros({1}));
  return m;
}

VaeNodes forward_vae(Graph& g, const VAEModel& m, const GraphParams& gp, NodeId x,
                     const Tensor* eta) {
  const Tensor& xv = g.val(x);
  if (xv.ndim() != 4 || xv.dim(1) != 1 || xv.dim(2) != kMels || xv.dim(3) != kFrames)
    throw std::invalid_argument("vae: input must be [N,1,32,65]");
  int n = xv.dim(0);
  int C = m.preset.base_channels;
  int D = m.preset.latent_dim;
  int flat = C * kEncH * kEncW;

  NodeId h = g.conv2d(x, gp["enc1.weight"], -1, 2, 1);
  h = g.relu(g.group_norm(h, gp["enc1.gn.gamma"], gp["enc1.gn.beta"], kNormGroups));
  h = g.conv2d(h, gp["enc2.weight"], -1, 2, 1);
  h = g.relu(g.group_norm(h, gp["enc2.gn.gamma"], gp["enc2.gn.beta"], kNormGroups));
  h = g.conv2d(h, gp["enc3.weight"], -1, 2, 1);
  h = g.relu(g.group_norm(h, gp["enc3.gn.gamma"], gp["enc3.gn.beta"], kNormGroups));
  h = g.reshape(h, {n, flat});
  NodeId mu = g.linear(h, gp["mu.weight"], gp["mu.bias"]);
  NodeId logvar = g.linear(h, gp["logvar.weight"], gp["logvar.bias"]);

  NodeId z;
  if (eta) {
    if (!g.val(mu).same_shape(*eta))
      throw std::invalid_argument("vae: eta shape must match [N, latent]");
    z = g.reparam(mu, logvar, *eta);
  } else {
    z = g.reparam(mu, logvar, Tensor({n, D}));  // eta = 0: z = mu exactly
  }

  NodeId d = g.relu(g.linear(z, gp["dec0.weight"], gp["dec0.bias"]));
  d = g.reshape(d, {n, C, kEncH, kEncW});
  d = g.conv_transpose2d(d, gp["dec1.weight"], -1, 2, 1);
  d = g.relu(g.group_norm(d, gp["dec1.gn.gamma"], gp["dec1.gn.beta"], kNormGroups));
  d = g.conv_transpose2d(d, gp["dec2.weight"], -1, 2, 1);
  d = g.relu(g.group_norm(d, gp["dec2.gn.gamma"], gp["dec2.gn.beta"], kNormGroups));
  d = g.conv_transpose2d(d, gp["dec3.weight"], gp["dec3.bias"], 2, 1);  // [n,1,32,64]
  d = g.crop_pad2d(d, kMels, kFrames);
  return {d, mu, logvar, z};
}

VaeBatchOut vae_forward(const VAEModel& m, const float* specs, int n, int n_mels, int frames,
                        const Tensor* eta) {
  Graph g;
  GraphParams gp = GraphParams::bind(g, m.params, false);
  Tensor x({n, 1, n_mels, frames});
  std::copy_n(specs, x.numel(), x.ptr());
  VaeNodes nodes = forward_vae(g, m, gp, g.input(std::move(x), false), eta);
  return {g.val(nodes.xhat), g.val(nodes.mu), g.val(nodes.logvar), g.val(nodes.z)};
}

ElboParts elbo_loss(const Tensor& x, const Tensor& xhat, const Tensor& mu, const Tensor& logvar,
                    double beta, double tau_fb) {
  if (!x.same_shape(xhat) || mu.ndim() != 2 || !mu.same_shape(logvar))
    throw std::invalid_argument("elbo_loss: shape mismatch");
  if (tau_fb < 0) throw std::invalid_argument("elbo_loss: tau_fb must be >= 0");
  if (!x.all_finite() || !xhat.all_finite() || !mu.all_finite() || !logvar.all_finite())
    throw std::invalid_argument("elbo_loss: non-finite inputs");
  int N = mu.dim(0), D = mu.dim(1);
  ElboParts out;
  double sse = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = static_cast<double>(x.data[static_cast<size_t>(i)]) -
               xhat.data[static_cast<size_t>(i)];
    sse += d * d;
  }
  out.recon = sse / N;
  out.kl_per_dim.assign(static_cast<size_t>(D), 0.0);
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d) {
      double m = mu.data[static_cast<size_t>(n) * D + d];
      double l = logvar.data[static_cast<size_t>(n) * D + d];
      out.kl_per_dim[static_cast<size_t>(d)] += 0.5 * (m * m + std::exp(l) - l - 1.0);
    }
  double klsum = 0.0;
  for (int d = 0; d < D; ++d) {
    out.kl_per_dim[static_cast<size_t>(d)] /= N;
    klsum += std::max(out.kl_per_dim[static_cast<size_t>(d)], tau_fb);
  }
  out.total = out.recon + beta * klsum;
  return out;
}

double beta_schedule(int epoch, const GuardTrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("beta_schedule: negative epoch");
  if (cfg.warmup_epochs == 0) return cfg.beta_max;
  return cfg.beta_max * std::min(1.0, static_cast<double>(epoch) / cfg.warmup_epochs);
}

namespace {

// validation ELBO at beta = beta_max, deterministic (eta = 0)
ElboParts val_elbo(const VAEModel& m, const data::FeatureSet& fs, const std::vector<int>& idx,
                   const GuardTrainConfig& cfg) {
  const int B = 64;
  double total = 0.0, recon = 0.0;
  int64_t n_total = 0;
  std::vector<float> buf;
  ElboParts last;
  for (size_t b0 = 0; b0 < idx.size(); b0 += B) {
    int bs = static_cast<int>(std::min<size_t>(B, idx.size() - b0));
    buf.resize(static_cast<size_t>(bs) * fs.spec_len());
    for (int i = 0; i < bs; ++i)
      std::copy_n(fs.spec(idx[b0 + static_cast<size_t>(i)]), fs.spec_len(),
                  buf.data() + static_cast<int64_t>(i) * fs.spec_len());
    VaeBatchOut out = vae_forward(m, buf.data(), bs, fs.n_mels, fs.frames, nullptr);
    Tensor x({bs, 1, fs.n_mels, fs.frames});
    std::copy_n(buf.data(), x.numel(), x.ptr());
    ElboParts p = elbo_loss(x, out.xhat, out.mu, out.logvar, cfg.beta_max, cfg.tau_fb);
    total += p.total * bs;
    recon += p.recon * bs;
    n_total += bs;
  }
  last.total = total / static_cast<double>(n_total);
  last.recon = recon / static_cast<double>(n_total);
  return last;
}

}  // namespace

GuardTrainLog train_guard(VAEModel& m, const data::FeatureSet& fs,
                          const std::vector<int>& train_idx, const std::vector<int>& val_idx,
                          const GuardTrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (train_idx.empty() || val_idx.empty())
    throw std::invalid_argument("train_guard: empty train or val set");
  for (int i : train_idx)
    if (fs.labels[static_cast<size_t>(i)] < 0)
      throw std::invalid_argument("train_guard: training set must contain clean packets only");

  const int M = fs.n_mels, F = fs.frames;
  const int64_t slen = fs.spec_len();
  const int B = cfg.batch_size;
  const int D = m.preset.latent_dim;

  nn::AdamW opt;
  opt.weight_decay = static_cast<float>(cfg.weight_decay);

  GuardTrainLog log;
  log.initial_val_recon = val_elbo(m, fs, val_idx, cfg).recon;

  std::vector<Tensor> best_values;
  double best_loss = 0.0;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double beta = beta_schedule(epoch, cfg);
    std::vector<int> order = train_idx;
    Rng shuffle_rng(seed_mix(seed_tag(seed, "guard_shuffle"), static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = shuffle_rng.uniform_int(static_cast<uint32_t>(i));
      std::swap(order[i - 1], order[j]);
    }
    double ep_loss = 0.0;
    int64_t nb = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(B)) {
      int bs = static_cast<int>(std::min<size_t>(B, order.size() - b0));
      uint64_t batch_tag = (static_cast<uint64_t>(epoch) << 32) | (b0 / B);
      Tensor x({bs, 1, M, F});
      for (int i = 0; i < bs; ++i)
        std::copy_n(fs.spec(order[b0 + static_cast<size_t>(i)]), slen,
                    x.ptr() + static_cast<int64_t>(i) * slen);
      Rng eta_rng(seed_mix(seed_tag(seed, "guard_eta"), batch_tag));
      Tensor eta = Tensor::randn({bs, D}, eta_rng);

      Graph g;
      GraphParams gp = GraphParams::bind(g, m.params, true);
      Tensor target = x;
      VaeNodes nodes = forward_vae(g, m, gp, g.input(std::move(x), false), &eta);
      NodeId loss = g.sse_mean(nodes.xhat, std::move(target));
      NodeId kl = g.kl_free_bits(nodes.mu, nodes.logvar, static_cast<float>(cfg.tau_fb));
      loss = g.add(loss, g.scale(kl, static_cast<float>(beta)));
      g.backward(loss);
      float lv = g.val(loss).data[0];
      if (!std::isfinite(lv))
        throw std::runtime_error("guard training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch));
      ep_loss += lv;
      nb++;
      opt.step(m.params, nn::collect_grads(g, gp), static_cast<float>(cfg.lr));
    }
    log.train_loss.push_back(ep_loss / static_cast<double>(nb));
    log.epochs_run = epoch + 1;

    ElboParts vp = val_elbo(m, fs, val_idx, cfg);
    log.val_loss.push_back(vp.total);
    log.val_recon.push_back(vp.recon);
    if (log.best_epoch < 0 || vp.total < best_loss) {
      best_loss = vp.total;
      log.best_epoch = epoch;
      log.best_val_loss = vp.total;
      log.best_val_recon = vp.recon;
      since_best = 0;
      best_values.clear();
      for (const auto& e : m.params.entries) best_values.push_back(e.value);
    } else {
      since_best++;
      if (since_best >= cfg.patience) break;
    }
  }
  if (!best_values.empty())
    for (size_t i = 0; i < m.params.entries.size(); ++i)
      m.params.entries[i].value = best_values[i];
  return log;
}

namespace {

std::vector<double> anomaly_scores_impl(const VAEModel& m, const float* specs, int n, int n_mels,
                                        int frames, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("anomaly_score: alpha in [0,1]");
  VaeBatchOut out = vae_forward(m, specs, n, n_mels, frames, nullptr);
  int D = m.preset.latent_dim;
  int64_t slen = static_cast<int64_t>(n_mels) * frames;
  std::vector<double> scores(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double sse = 0.0;
    const float* xr = specs + static_cast<int64_t>(i) * slen;
    const float* hr = out.xhat.ptr() + static_cast<int64_t>(i) * slen;
    for (int64_t j = 0; j < slen; ++j) {
      double d = static_cast<double>(xr[j]) - hr[j];
      sse += d * d;
    }
    double kl = 0.0;
    for (int d = 0; d < D; ++d) {
      double mu = out.mu.data[static_cast<size_t>(i) * D + d];
      double l = out.logvar.data[static_cast<size_t>(i) * D + d];
      kl += 0.5 * (mu * mu + std::exp(l) - l - 1.0);
    }
    scores[static_cast<size_t>(i)] = alpha * std::sqrt(sse) + (1.0 - alpha) * (sse + kl);
  }
  return scores;
}

}  // namespace

double anomaly_score(const VAEModel& m, const float* spec, int n_mels, int frames, double alpha) {
  return anomaly_scores_impl(m, spec, 1, n_mels, frames, alpha)[0];
}

std::vector<double> anomaly_scores_buffer(const VAEModel& m, const float* specs, int n,
                                          int n_mels, int frames, double alpha) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(n));
  const int B = 64;
  int64_t slen = static_cast<int64_t>(n_mels) * frames;
  for (int b0 = 0; b0 < n; b0 += B) {
    int bs = std::min(B, n - b0);
    std::vector<double> s =
        anomaly_scores_impl(m, specs + static_cast<int64_t>(b0) * slen, bs, n_mels, frames, alpha);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

std::vector<double> anomaly_scores(const VAEModel& m, const data::FeatureSet& fs,
                                   const std::vector<int>& idx, double alpha) {
  std::vector<double> out;
  out.reserve(idx.size());
  const int B = 64;
  std::vector<float> buf;
  for (size_t b0 = 0; b0 < idx.size(); b0 += B) {
    int bs = static_cast<int>(std::min<size_t>(B, idx.size() - b0));
    buf.resize(static_cast<size_t>(bs) * fs.spec_len());
    for (int i = 0; i < bs; ++i)
      std::copy_n(fs.spec(idx[b0 + static_cast<size_t>(i)]), fs.spec_len(),
                  buf.data() + static_cast<int64_t>(i) * fs.spec_len());
    std::vector<double> s = anomaly_scores_impl(m, buf.data(), bs, fs.n_mels, fs.frames, alpha);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

GuardCalibration calibrate_threshold(std::vector<double> clean_scores, double target_fpr,
                                     double alpha) {
  if (clean_scores.size() < 200)
    throw std::invalid_argument("calibrate_threshold: need at least 200 clean scores");
  if (target_fpr < 0.0 || target_fpr > 0.5)
    throw std::invalid_argument("calibrate_threshold: bad target fpr");
  GuardCalibration c;
  c.alpha = alpha;
  c.target_fpr = target_fpr;
  c.clean_count = static_cast<int64_t>(clean_scores.size());
  std::sort(clean_scores.begin(), clean_scores.end());
  auto quantile = [&](double q) {
    double h = q * static_cast<double>(clean_scores.size() - 1);
    size_t lo = static_cast<size_t>(std::floor(h));
    if (lo + 1 >= clean_scores.size()) return clean_scores.back();
    return clean_scores[lo] + (h - lo) * (clean_scores[lo + 1] - clean_scores[lo]);
  };
  c.tau = quantile(1.0 - target_fpr);
  int64_t over = 0;
  for (double s : clean_scores)
    if (s > c.tau) over++;
  c.achieved_fpr = static_cast<double>(over) / static_cast<double>(clean_scores.size());
  c.quantiles = {{"p05", quantile(0.05)}, {"p25", quantile(0.25)}, {"p50", quantile(0.50)},
                 {"p75", quantile(0.75)}, {"p95", quantile(0.95)}};
  return c;
}

GuardDecision guard_decision(const VAEModel& m, const float* spec, int n_mels, int frames,
                             const GuardCalibration& calib) {
  GuardDecision d;
  d.score = anomaly_score(m, spec, n_mels, frames, calib.alpha);
  d.flag = d.score > calib.tau;
  return d;
}

std::string guard_calibration_json(const GuardCalibration& c) {
  json j;
  j["alpha"] = c.alpha;
  j["tau"] = c.tau;
  j["target_fpr"] = c.target_fpr;
  j["achieved_fpr"] = c.achieved_fpr;
  j["clean_count"] = c.clean_count;
  j["quantiles"] = c.quantiles;
  return j.dump(1);
}

GuardCalibration guard_calibration_from_json(const std::string& text) {
  json j = json::parse(text);
  GuardCalibration c;
  c.alpha = j.at("alpha").get<double>();
  c.tau = j.at("tau").get<double>();
  c.target_fpr = j.at("target_fpr").get<double>();
  c.achieved_fpr = j.at("achieved_fpr").get<double>();
  c.clean_count = j.at("clean_count").get<int64_t>();
  for (auto& [k, v] : j.at("quantiles").items()) c.quantiles[k] = v.get<double>();
  return c;
}

std::string vae_arch_json(const VAEModel& m) {
  json j;
  j["kind"] = "vae";
  j["preset"] = m.preset.name;
  return j.dump();
}

Checkpoint vae_to_checkpoint(const VAEModel& m, const std::string& meta_json) {
  return checkpoint_from_params(m.params, vae_arch_json(m), meta_json);
}

VAEModel vae_from_checkpoint(const Checkpoint& c) {
  json j = json::parse(c.arch_json);
  if (j.at("kind").get<std::string>() != "vae")
    throw std::runtime_error("checkpoint does not hold a vae");
  VAEModel m = build_vae(j.at("preset").get<std::string>(), 0);
  params_from_checkpoint(c, m.params);
  return m;
}

}  // namespace rffi::vae
