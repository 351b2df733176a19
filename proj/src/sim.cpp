#include "rffi/sim.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"
#include "rffi/binio.hpp"
#include "rffi/rng.hpp"
#include "rffi/sha256.hpp"

namespace rffi::sim {

namespace fs = std::filesystem;
using json = nlohmann::json;

void ImpairmentProfile::validate(double sample_rate_hz) const {
  if (device_id < 0) throw std::invalid_argument("profile: device_id must be >= 0");
  if (!(std::abs(cfo_hz) < sample_rate_hz / 8.0))
    throw std::invalid_argument("profile: |cfo_hz| must be < fs/8");
  if (iq_gain_imbalance < 0.8 || iq_gain_imbalance > 1.2)
    throw std::invalid_argument("profile: iq_gain_imbalance outside [0.8, 1.2]");
  if (std::abs(iq_phase_imbalance_rad) > 0.2)
    throw std::invalid_argument("profile: |iq_phase_imbalance_rad| > 0.2");
  if (cfo_drift_hz_per_packet_sigma < 0)
    throw std::invalid_argument("profile: drift sigma must be >= 0");
}

void ChannelConfig::validate() const {
  if (taps.size() > 4) throw std::invalid_argument("channel: more than 4 multipath taps");
  int prev = -1;
  for (const auto& t : taps) {
    if (t.delay_samples < 0) throw std::invalid_argument("channel: negative tap delay");
    if (t.delay_samples <= prev)
      throw std::invalid_argument("channel: tap delays must be strictly increasing");
    prev = t.delay_samples;
  }
}

void DatasetConfig::validate() const {
  if (device_count < 2) throw std::invalid_argument("dataset: device_count must be >= 2");
  if (train_packets_per_device < 10)
    throw std::invalid_argument("dataset: train packets per device must be >= 10");
  if (test_packets_per_device < 1 || unseen_device_count < 0 ||
      unseen_packets_per_device < 0 || noise_packets < 0)
    throw std::invalid_argument("dataset: bad packet counts");
  if (out_dir.empty()) throw std::invalid_argument("dataset: out_dir required");
  ChannelConfig ch;
  ch.taps = taps;
  ch.validate();
}

ImpairmentProfile device_profile(int device_id, uint64_t dataset_seed) {
  if (device_id < 0) throw std::invalid_argument("device_profile: device_id must be >= 0");
  Rng rng(seed_mix(seed_tag(dataset_seed, "device_profile"), static_cast<uint64_t>(device_id)));
  ImpairmentProfile p;
  p.device_id = device_id;
  p.cfo_hz = rng.uniform(-20e3, 20e3);
  p.cfo_drift_hz_per_packet_sigma = 100.0;
  p.iq_gain_imbalance = rng.uniform(0.9, 1.1);
  p.iq_phase_imbalance_rad = rng.uniform(-0.1, 0.1);
  p.pa_a3 = rng.uniform(-0.05, 0.05);
  p.dc_offset = {rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)};
  return p;
}

IQBuffer ideal_packet() {
  IQBuffer iq;
  iq.sample_rate_hz = kSampleRateHz;
  iq.samples.assign(kPacketSamples, {0.0, 0.0});
  // upchirp: instantaneous frequency -B/2 -> +B/2 over one symbol,
  // phase(t) = 2*pi*(-B/2 t + B t^2 / (2T)); phase wraps to 0 at t = T
  const double T = kSamplesPerChirp / kSampleRateHz;
  for (int c = 0; c < kChirpsPerPacket; ++c)
    for (int n = 0; n < kSamplesPerChirp; ++n) {
      double t = n / kSampleRateHz;
      double phase = 2.0 * M_PI * (-0.5 * kBandwidthHz * t + kBandwidthHz * t * t / (2.0 * T));
      iq.samples[static_cast<size_t>(c) * kSamplesPerChirp + n] = {std::cos(phase),
                                                                   std::sin(phase)};
    }
  return iq;
}

IQBuffer synth_packet(const ImpairmentProfile& profile, int packet_index, uint64_t rng_seed) {
  profile.validate(kSampleRateHz);
  IQBuffer iq = ideal_packet();
  Rng rng(seed_mix(rng_seed, static_cast<uint64_t>(packet_index)));

  if (profile.pa_a3 != 0.0)
    for (auto& x : iq.samples) x += profile.pa_a3 * x * std::norm(x);

  if (profile.iq_gain_imbalance != 1.0 || profile.iq_phase_imbalance_rad != 0.0) {
    // y = mu*x + nu*conj(x) with mu = (1 + g e^{j phi})/2, nu = (1 - g e^{j phi})/2
    std::complex<double> ge = profile.iq_gain_imbalance *
                              std::polar(1.0, profile.iq_phase_imbalance_rad);
    std::complex<double> mu = 0.5 * (1.0 + ge), nu = 0.5 * (1.0 - ge);
    for (auto& x : iq.samples) x = mu * x + nu * std::conj(x);
  }

  if (profile.dc_offset != std::complex<double>(0.0, 0.0))
    for (auto& x : iq.samples) x += profile.dc_offset;

  double f = profile.cfo_hz + profile.cfo_drift_hz_per_packet_sigma * rng.normal();
  if (f != 0.0) {
    double w = 2.0 * M_PI * f / iq.sample_rate_hz;
    for (size_t n = 0; n < iq.samples.size(); ++n)
      iq.samples[n] *= std::polar(1.0, w * static_cast<double>(n));
  }
  return iq;
}

IQBuffer apply_channel(const IQBuffer& iq, const ChannelConfig& channel, uint64_t rng_seed) {
  channel.validate();
  Rng rng(seed_mix(rng_seed, 0x6368616eull));  // "chan"
  IQBuffer out;
  out.sample_rate_hz = iq.sample_rate_hz;
  if (channel.taps.empty()) {
    out.samples = iq.samples;
  } else {
    out.samples.assign(iq.samples.size(), {0.0, 0.0});
    for (const auto& tap : channel.taps)
      for (size_t n = static_cast<size_t>(tap.delay_samples); n < iq.samples.size(); ++n)
        out.samples[n] += tap.gain * iq.samples[n - static_cast<size_t>(tap.delay_samples)];
  }
  if (channel.random_phase) {
    std::complex<double> ph = std::polar(1.0, rng.uniform(0.0, 2.0 * M_PI));
    for (auto& x : out.samples) x *= ph;
  }
  if (std::isfinite(channel.snr_db)) {
    double power = 0.0;
    for (const auto& x : out.samples) power += std::norm(x);
    power /= static_cast<double>(out.samples.size());
    double noise_var = power / std::pow(10.0, channel.snr_db / 10.0);
    double s = std::sqrt(noise_var / 2.0);
    for (auto& x : out.samples) x += std::complex<double>(rng.normal() * s, rng.normal() * s);
  }
  return out;
}

void save_iq(const std::string& path, const IQBuffer& iq) {
  BinWriter w;
  for (const auto& x : iq.samples) {
    w.f32(static_cast<float>(x.real()));
    w.f32(static_cast<float>(x.imag()));
  }
  write_file(path, w.data());
}

IQBuffer load_iq(const std::string& path, double sample_rate_hz) {
  auto bytes = read_file(path);
  if (bytes.size() % 8 != 0) throw std::runtime_error("iq file not a whole number of samples");
  BinReader r(bytes);
  IQBuffer iq;
  iq.sample_rate_hz = sample_rate_hz;
  iq.samples.resize(bytes.size() / 8);
  for (auto& x : iq.samples) {
    float re = r.f32(), im = r.f32();
    x = {static_cast<double>(re), static_cast<double>(im)};
  }
  return iq;
}

std::string dataset_config_json(const DatasetConfig& cfg) {
  json j;
  j["dataset_seed"] = cfg.dataset_seed;
  j["device_count"] = cfg.device_count;
  j["train_packets_per_device"] = cfg.train_packets_per_device;
  j["test_packets_per_device"] = cfg.test_packets_per_device;
  j["unseen_device_count"] = cfg.unseen_device_count;
  j["unseen_packets_per_device"] = cfg.unseen_packets_per_device;
  j["noise_packets"] = cfg.noise_packets;
  j["snr_db"] = cfg.snr_db;
  j["random_phase"] = cfg.random_phase;
  json taps = json::array();
  for (const auto& t : cfg.taps)
    taps.push_back({{"delay", t.delay_samples}, {"re", t.gain.real()}, {"im", t.gain.imag()}});
  j["taps"] = taps;
  return j.dump();
}

namespace {

std::string packet_name(int device_id, int packet_index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "iq/dev%03d_pkt%05d.iq", device_id, packet_index);
  return buf;
}

std::string noise_name(int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "iq/noise_%05d.iq", index);
  return buf;
}

}  // namespace

DatasetManifest build_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  fs::create_directories(fs::path(cfg.out_dir) / "iq");

  DatasetManifest m;
  m.dataset_seed = cfg.dataset_seed;
  m.device_count = cfg.device_count;
  m.sample_rate_hz = kSampleRateHz;
  m.config_digest = sha256_hex(dataset_config_json(cfg));

  ChannelConfig channel;
  channel.snr_db = cfg.snr_db;
  channel.taps = cfg.taps;
  channel.random_phase = cfg.random_phase;

  int pool = cfg.train_packets_per_device;
  int val_per_dev = pool - static_cast<int>(std::floor(pool * 0.8));
  int train_per_dev = pool - val_per_dev;
  int total_devices = cfg.device_count + cfg.unseen_device_count;

  for (int d = 0; d < total_devices; ++d) {
    bool unseen = d >= cfg.device_count;
    int count = unseen ? cfg.unseen_packets_per_device : pool + cfg.test_packets_per_device;
    for (int i = 0; i < count; ++i) {
      PacketRecord rec;
      rec.device_id = d;
      rec.packet_index = i;
      rec.path = packet_name(d, i);
      rec.snr_db = cfg.snr_db;
      rec.seed = seed_mix(seed_tag(cfg.dataset_seed, "packet"),
                          (static_cast<uint64_t>(d) << 32) | static_cast<uint64_t>(i));
      if (unseen)
        rec.split = "unseen";
      else if (i < train_per_dev)
        rec.split = "train";
      else if (i < pool)
        rec.split = "val";
      else
        rec.split = "test";
      m.packets.push_back(std::move(rec));
    }
  }
  for (int i = 0; i < cfg.noise_packets; ++i) {
    PacketRecord rec;
    rec.device_id = -1;
    rec.packet_index = i;
    rec.path = noise_name(i);
    rec.snr_db = std::numeric_limits<double>::quiet_NaN();
    rec.seed = seed_mix(seed_tag(cfg.dataset_seed, "noise"), static_cast<uint64_t>(i));
    rec.split = "noise";
    m.packets.push_back(std::move(rec));
  }

#pragma omp parallel for schedule(dynamic)
  for (long long k = 0; k < static_cast<long long>(m.packets.size()); ++k) {
    const PacketRecord& rec = m.packets[static_cast<size_t>(k)];
    IQBuffer iq;
    if (rec.device_id < 0) {
      Rng rng(rec.seed);
      iq.sample_rate_hz = kSampleRateHz;
      iq.samples.resize(kPacketSamples);
      double s = std::sqrt(0.5);  // unit total power
      for (auto& x : iq.samples) x = {rng.normal() * s, rng.normal() * s};
    } else {
      ImpairmentProfile p = device_profile(rec.device_id, cfg.dataset_seed);
      iq = synth_packet(p, rec.packet_index, rec.seed);
      iq = apply_channel(iq, channel, seed_mix(rec.seed, 0x6368ull));
    }
    save_iq((fs::path(cfg.out_dir) / rec.path).string(), iq);
  }

  for (const auto& rec : m.packets) {
    if (rec.split == "train") m.train_count++;
    else if (rec.split == "val") m.val_count++;
    else if (rec.split == "test") m.test_count++;
    else if (rec.split == "unseen") m.unseen_count++;
    else m.noise_count++;
  }
  save_manifest((fs::path(cfg.out_dir) / "manifest.json").string(), m);
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  json j;
  j["format_version"] = 1;
  j["dataset_seed"] = m.dataset_seed;
  j["device_count"] = m.device_count;
  j["sample_rate_hz"] = m.sample_rate_hz;
  j["config_digest"] = m.config_digest;
  j["counts"] = {{"train", m.train_count}, {"val", m.val_count}, {"test", m.test_count},
                 {"unseen", m.unseen_count}, {"noise", m.noise_count}};
  json pk = json::array();
  for (const auto& r : m.packets) {
    json e = {{"path", r.path},
              {"device_id", r.device_id},
              {"packet_index", r.packet_index},
              {"split", r.split},
              {"seed", r.seed}};
    if (std::isnan(r.snr_db))
      e["snr_db"] = nullptr;
    else
      e["snr_db"] = r.snr_db;
    pk.push_back(std::move(e));
  }
  j["packets"] = std::move(pk);
  write_text_file(path, j.dump(1));
}

DatasetManifest load_manifest(const std::string& path) {
  json j = json::parse(read_text_file(path));
  DatasetManifest m;
  m.dataset_seed = j.at("dataset_seed").get<uint64_t>();
  m.device_count = j.at("device_count").get<int>();
  m.sample_rate_hz = j.at("sample_rate_hz").get<double>();
  m.config_digest = j.value("config_digest", "");
  const auto& c = j.at("counts");
  m.train_count = c.at("train").get<int>();
  m.val_count = c.at("val").get<int>();
  m.test_count = c.at("test").get<int>();
  m.unseen_count = c.at("unseen").get<int>();
  m.noise_count = c.at("noise").get<int>();
  for (const auto& e : j.at("packets")) {
    PacketRecord r;
    r.path = e.at("path").get<std::string>();
    r.device_id = e.at("device_id").get<int>();
    r.packet_index = e.at("packet_index").get<int>();
    r.split = e.at("split").get<std::string>();
    r.seed = e.at("seed").get<uint64_t>();
    r.snr_db = e.at("snr_db").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                        : e.at("snr_db").get<double>();
    m.packets.push_back(std::move(r));
  }
  return m;
}

}  // namespace rffi::sim
