#include "rffi/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rffi/attacks.hpp"
#include "rffi/binio.hpp"
#include "rffi/classifier.hpp"

namespace rffi::wm {

using nn::Tensor;

namespace {
constexpr int kSpecMels = 32;
constexpr int kSpecFrames = 65;
}  // namespace

WatermarkKey gen_key(uint64_t key_seed, int num_classes, int feature_dim) {
  if (num_classes < 2) throw std::invalid_argument("gen_key: need at least 2 classes");
  if (feature_dim < 8) throw std::invalid_argument("gen_key: feature_dim must be >= 8");
  WatermarkKey k;
  k.key_seed = key_seed;
  k.y_wm = num_classes;
  k.feature_dim = feature_dim;
  Rng rng(seed_tag(key_seed, "wm_key"));
  k.v.resize(static_cast<size_t>(feature_dim));
  double norm2 = 0.0;
  for (auto& x : k.v) {
    double d = rng.normal();
    x = static_cast<float>(d);
    norm2 += d * d;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : k.v) x = static_cast<float>(x * inv);
  k.trigger.mel0 =
      static_cast<int>(rng.uniform_int(static_cast<uint32_t>(kSpecMels - k.trigger.height + 1)));
  k.trigger.frame0 =
      static_cast<int>(rng.uniform_int(static_cast<uint32_t>(kSpecFrames - k.trigger.width + 1)));
  k.probe_seed = seed_tag(key_seed, "wm_probes");
  return k;
}

void apply_trigger(float* spec, int n_mels, int frames, const WatermarkKey& key) {
  const TriggerSpec& t = key.trigger;
  if (t.mel0 < 0 || t.frame0 < 0 || t.mel0 + t.height > n_mels || t.frame0 + t.width > frames)
    throw std::invalid_argument("apply_trigger: block out of range");
  for (int m = t.mel0; m < t.mel0 + t.height; ++m)
    for (int f = t.frame0; f < t.frame0 + t.width; ++f) spec[m * frames + f] = t.amplitude;
}

Tensor craft_adversarial(const clf::Model& model, const Tensor& triggered,
                         const WatermarkKey& key) {
  if (triggered.ndim() != 4) throw std::invalid_argument("craft_adversarial: expects [N,1,H,W]");
  int n = triggered.dim(0), M = triggered.dim(2), F = triggered.dim(3);
  const AdvBudget& b = key.budget;
  if (b.epsilon <= 0.f || b.steps <= 0) return triggered;

  Tensor delta(triggered.shape);
  std::vector<int> wm_labels(static_cast<size_t>(n), key.y_wm);
  int64_t slen = static_cast<int64_t>(M) * F;
  auto zero_block = [&](Tensor& d) {
    for (int i = 0; i < n; ++i) {
      float* s = d.ptr() + i * slen;
      for (int m = key.trigger.mel0; m < key.trigger.mel0 + key.trigger.height; ++m)
        for (int f = key.trigger.frame0; f < key.trigger.frame0 + key.trigger.width; ++f)
          s[m * F + f] = 0.0f;
    }
  };
  for (int step = 0; step < b.steps; ++step) {
    Tensor xadv = triggered;
    for (int64_t i = 0; i < xadv.numel(); ++i)
      xadv.data[static_cast<size_t>(i)] += delta.data[static_cast<size_t>(i)];
    nn::Graph g;
    nn::GraphParams gp = nn::GraphParams::bind(g, model.params, false);
    nn::NodeId xin = g.input(std::move(xadv), true);
    clf::ForwardNodes fwd = clf::forward_model(g, model, gp, xin);
    // ascend the worst case for the watermark label
    nn::NodeId loss = g.softmax_ce(fwd.logits, wm_labels, 0.0f, 0.0f);
    g.backward(loss);
    const Tensor& gx = g.grad(xin);
    if (!gx.all_finite()) throw std::runtime_error("craft_adversarial: non-finite gradients");
    for (int64_t i = 0; i < delta.numel(); ++i) {
      float gv = gx.data[static_cast<size_t>(i)];
      float d = delta.data[static_cast<size_t>(i)] +
                b.step_size * (gv > 0.f ? 1.0f : (gv < 0.f ? -1.0f : 0.0f));
      delta.data[static_cast<size_t>(i)] = std::clamp(d, -b.epsilon, b.epsilon);
    }
    zero_block(delta);  // the trigger itself is never perturbed away
  }
  Tensor out = triggered;
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[static_cast<size_t>(i)] += delta.data[static_cast<size_t>(i)];
  return out;
}

double signature_loss(const std::vector<float>& batch_mean_feature, const std::vector<float>& v,
                      double lambda) {
  if (batch_mean_feature.size() != v.size())
    throw std::invalid_argument("signature_loss: dimension mismatch");
  double fn = 0.0, vn = 0.0, dot = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    fn += static_cast<double>(batch_mean_feature[i]) * batch_mean_feature[i];
    vn += static_cast<double>(v[i]) * v[i];
    dot += static_cast<double>(batch_mean_feature[i]) * v[i];
  }
  if (fn < 1e-24) throw std::runtime_error("signature_loss: zero feature vector");
  return lambda * (1.0 - dot / (std::sqrt(fn) * std::sqrt(vn)));
}

std::vector<int> select_probes(const std::vector<int>& pool, int count, uint64_t probe_seed) {
  std::vector<int> out = pool;
  Rng rng(seed_mix(probe_seed, 0x70726f62ull));
  for (size_t i = 0; i < out.size(); ++i) {
    size_t j = i + rng.uniform_int(static_cast<uint32_t>(out.size() - i));
    std::swap(out[i], out[j]);
  }
  if (static_cast<int>(out.size()) > count) out.resize(static_cast<size_t>(count));
  return out;
}

namespace {

std::vector<int> batch_argmax(const clf::Model& model, const Tensor& x) {
  int n = x.dim(0);
  nn::Graph g;
  nn::GraphParams gp = nn::GraphParams::bind(g, model.params, false);
  clf::ForwardNodes fwd = clf::forward_model(g, model, gp, g.input(x, false));
  const Tensor& lg = g.val(fwd.logits);
  int K = lg.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* row = lg.ptr() + static_cast<int64_t>(i) * K;
    out[static_cast<size_t>(i)] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

}  // namespace

VerificationResult verify_trigger(const clf::Model& model, const WatermarkKey& key,
                                  const data::FeatureSet& fs, const std::vector<int>& probe_idx,
                                  VerifyMode mode,
                                  const std::vector<attack::SanitizeStep>* sanitize) {
  if (probe_idx.size() < 32)
    throw std::invalid_argument("verify_trigger: need at least 32 probes");
  const int M = fs.n_mels, F = fs.frames;
  const int64_t slen = fs.spec_len();
  int64_t hits = 0;
  const int B = 64;
  for (size_t b0 = 0; b0 < probe_idx.size(); b0 += B) {
    int bs = static_cast<int>(std::min<size_t>(B, probe_idx.size() - b0));
    Tensor x({bs, 1, M, F});
    for (int i = 0; i < bs; ++i) {
      float* row = x.ptr() + static_cast<int64_t>(i) * slen;
      std::copy_n(fs.spec(probe_idx[b0 + static_cast<size_t>(i)]), slen, row);
      apply_trigger(row, M, F, key);
    }
    if (mode == VerifyMode::kAdversarial) {
      x = craft_adversarial(model, x, key);
    } else if (mode == VerifyMode::kSanitized) {
      if (!sanitize) throw std::invalid_argument("verify_trigger: sanitized mode needs steps");
      for (int i = 0; i < bs; ++i) {
        Rng rng(seed_mix(key.probe_seed, static_cast<uint64_t>(b0 + i)));
        for (const auto& step : *sanitize)
          attack::sanitize_input(x.ptr() + static_cast<int64_t>(i) * slen, M, F, step, &rng);
      }
    }
    for (int p : batch_argmax(model, x))
      if (p == key.y_wm) hits++;
  }
  VerificationResult r;
  r.kind = mode == VerifyMode::kAdversarial ? "adversarial_trigger" : "trigger";
  r.probe_count = static_cast<int>(probe_idx.size());
  r.score = static_cast<double>(hits) / static_cast<double>(probe_idx.size());
  r.threshold = kTriggerPassThreshold;
  r.pass = r.score >= r.threshold;
  return r;
}

VerificationResult verify_signature(const clf::Model& model, const WatermarkKey& key,
                                    const data::FeatureSet& fs,
                                    const std::vector<int>& probe_idx) {
  if (probe_idx.size() < 32)
    throw std::invalid_argument("verify_signature: need at least 32 probes");
  const int M = fs.n_mels, F = fs.frames;
  const int64_t slen = fs.spec_len();
  int Fd = model.arch.feature_dim;
  std::vector<double> mean(static_cast<size_t>(Fd), 0.0);
  const int B = 64;
  for (size_t b0 = 0; b0 < probe_idx.size(); b0 += B) {
    int bs = static_cast<int>(std::min<size_t>(B, probe_idx.size() - b0));
    std::vector<float> buf(static_cast<size_t>(bs) * slen);
    for (int i = 0; i < bs; ++i)
      std::copy_n(fs.spec(probe_idx[b0 + static_cast<size_t>(i)]), slen,
                  buf.data() + static_cast<int64_t>(i) * slen);
    clf::BatchOutput out = clf::forward_batch(model, buf.data(), bs, M, F);
    for (int i = 0; i < bs; ++i)
      for (int d = 0; d < Fd; ++d)
        mean[static_cast<size_t>(d)] += out.penult.data[static_cast<size_t>(i) * Fd + d];
  }
  double fn = 0.0, dot = 0.0;
  for (int d = 0; d < Fd; ++d) {
    mean[static_cast<size_t>(d)] /= static_cast<double>(probe_idx.size());
    fn += mean[static_cast<size_t>(d)] * mean[static_cast<size_t>(d)];
    dot += mean[static_cast<size_t>(d)] * key.v[static_cast<size_t>(d)];
  }
  if (fn < 1e-24) throw std::runtime_error("verify_signature: zero mean feature");
  VerificationResult r;
  r.kind = "signature";
  r.probe_count = static_cast<int>(probe_idx.size());
  r.score = dot / std::sqrt(fn);  // v is unit norm
  r.threshold = kSignaturePassThreshold;
  r.pass = r.score >= r.threshold;
  return r;
}

void save_key(const std::string& path, const WatermarkKey& key) {
  BinWriter w;
  w.bytes("RFWK", 4);
  w.u32(1);
  w.u64(key.key_seed);
  w.i32(key.y_wm);
  w.i32(key.feature_dim);
  w.i32(key.trigger.mel0);
  w.i32(key.trigger.frame0);
  w.i32(key.trigger.height);
  w.i32(key.trigger.width);
  w.f32(key.trigger.amplitude);
  w.f32(key.budget.epsilon);
  w.i32(key.budget.steps);
  w.f32(key.budget.step_size);
  w.f32(key.lambda);
  w.i32(key.probe_count);
  w.u64(key.probe_seed);
  w.f32_array(key.v.data(), key.v.size());
  std::vector<uint8_t> out = w.data();
  uint32_t crc = crc32_of(out.data(), out.size());
  BinWriter tail;
  tail.u32(crc);
  out.insert(out.end(), tail.data().begin(), tail.data().end());
  write_file(path, out);
}

WatermarkKey load_key(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 12) throw std::runtime_error("key file: truncated");
  {
    BinReader tail(bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(bytes.data(), bytes.size() - 4) != tail.u32())
      throw std::runtime_error("key file: CRC mismatch");
  }
  BinReader r(bytes.data(), bytes.size() - 4);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::string(magic, 4) != "RFWK") throw std::runtime_error("key file: bad magic");
  if (r.u32() != 1) throw std::runtime_error("key file: unsupported version");
  WatermarkKey k;
  k.key_seed = r.u64();
  k.y_wm = r.i32();
  k.feature_dim = r.i32();
  k.trigger.mel0 = r.i32();
  k.trigger.frame0 = r.i32();
  k.trigger.height = r.i32();
  k.trigger.width = r.i32();
  k.trigger.amplitude = r.f32();
  k.budget.epsilon = r.f32();
  k.budget.steps = r.i32();
  k.budget.step_size = r.f32();
  k.lambda = r.f32();
  k.probe_count = r.i32();
  k.probe_seed = r.u64();
  k.v.resize(static_cast<size_t>(k.feature_dim));
  r.f32_array(k.v.data(), k.v.size());
  return k;
}

}  // namespace rffi::wm
