#pragma once

#include <complex>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace rffi::sim {

// Standard packet: 8 LoRa upchirps at SF7, B = 125 kHz, fs = 1 MHz
// (1024 samples per chirp), zero-padded to 8448 so the front end produces
// exactly 65 frames: (8448 - 256) / 128 + 1 = 65.
constexpr double kSampleRateHz = 1e6;
constexpr double kBandwidthHz = 125e3;
constexpr int kChirpsPerPacket = 8;
constexpr int kSamplesPerChirp = 1024;
constexpr int kChirpSamples = kChirpsPerPacket * kSamplesPerChirp;  // 8192
constexpr int kPacketSamples = 8448;

struct ImpairmentProfile {
  int device_id = 0;
  double cfo_hz = 0.0;
  double cfo_drift_hz_per_packet_sigma = 0.0;
  double iq_gain_imbalance = 1.0;      // linear ratio
  double iq_phase_imbalance_rad = 0.0;
  double pa_a3 = 0.0;                  // memoryless cubic PA coefficient
  std::complex<double> dc_offset{0.0, 0.0};

  void validate(double sample_rate_hz) const;
};

struct MultipathTap {
  int delay_samples = 0;
  std::complex<double> gain{1.0, 0.0};
};

struct ChannelConfig {
  static constexpr double kNoNoise = std::numeric_limits<double>::infinity();
  double snr_db = kNoNoise;
  std::vector<MultipathTap> taps;  // delays non-negative, strictly increasing, <= 4 taps
  bool random_phase = false;

  void validate() const;
};

struct IQBuffer {
  std::vector<std::complex<double>> samples;
  double sample_rate_hz = kSampleRateHz;
};

// Deterministic per-device impairments. Priors: cfo ~ U[-20k, 20k] Hz,
// drift sigma 100 Hz/packet, gain ~ U[0.9, 1.1], phase ~ U[-0.1, 0.1] rad,
// pa_a3 ~ U[-0.05, 0.05], dc re/im ~ U[-0.02, 0.02].
ImpairmentProfile device_profile(int device_id, uint64_t dataset_seed);

IQBuffer ideal_packet();

// Impairment order is part of the format contract:
// PA nonlinearity -> I/Q imbalance -> DC offset -> CFO rotation (with
// per-packet drift), applied to the full zero-padded buffer.
IQBuffer synth_packet(const ImpairmentProfile& profile, int packet_index, uint64_t rng_seed);

// Multipath convolution, then global random phase (if enabled), then complex
// AWGN scaled against the measured signal power.
IQBuffer apply_channel(const IQBuffer& iq, const ChannelConfig& channel, uint64_t rng_seed);

struct DatasetConfig {
  uint64_t dataset_seed = 42;
  int device_count = 10;
  int train_packets_per_device = 200;  // pool; last 20% per device becomes val
  int test_packets_per_device = 100;
  int unseen_device_count = 5;
  int unseen_packets_per_device = 100;
  int noise_packets = 500;
  double snr_db = 20.0;
  bool random_phase = false;
  std::vector<MultipathTap> taps;
  std::string out_dir;

  void validate() const;
};

struct PacketRecord {
  std::string path;
  int device_id = 0;  // -1 for noise packets
  int packet_index = 0;
  std::string split;  // train | val | test | unseen | noise
  double snr_db = 0.0;
  uint64_t seed = 0;
};

struct DatasetManifest {
  uint64_t dataset_seed = 0;
  int device_count = 0;
  int train_count = 0, val_count = 0, test_count = 0, unseen_count = 0, noise_count = 0;
  double sample_rate_hz = kSampleRateHz;
  std::string config_digest;
  std::vector<PacketRecord> packets;
};

DatasetManifest build_dataset(const DatasetConfig& cfg);

void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);

// interleaved little-endian float32 (I, Q) pairs
void save_iq(const std::string& path, const IQBuffer& iq);
IQBuffer load_iq(const std::string& path, double sample_rate_hz = kSampleRateHz);

std::string dataset_config_json(const DatasetConfig& cfg);

}  // namespace rffi::sim
