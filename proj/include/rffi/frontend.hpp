#pragma once

#include <complex>
#include <string>
#include <vector>

#include "rffi/sim.hpp"

namespace rffi::dsp {

struct FrontendConfig {
  int n_fft = 256;
  int hop = 128;
  int n_mels = 32;
  double log_epsilon = 1e-6;
  int target_frames = 65;
  double sample_rate_hz = 1e6;
  enum class Window { kHann, kRect };
  Window window = Window::kHann;
  bool standardize = true;

  void validate() const;
};

struct ComplexSpectrogram {
  int frame_count = 0;
  int bin_count = 0;
  std::vector<std::complex<double>> values;  // frame-major [frame][bin]

  std::complex<double> at(int frame, int bin) const {
    return values[static_cast<size_t>(frame) * bin_count + bin];
  }
};

// Triangular Mel filters with centers equally spaced on the HTK scale
// mel(f) = 2595 log10(1 + f/700) over [0, fs). Complex-baseband convention:
// bins k = 0..N-1 at frequencies k*fs/N, no fftshift. Edge points are snapped
// to the bin grid and spread to strictly increasing bins so every filter has
// at least one supporting bin.
struct MelFilterbank {
  int n_mels = 0;
  int n_fft = 0;
  std::vector<double> weights;   // n_mels x n_fft, row-major
  std::vector<int> edge_bins;    // n_mels + 2 strictly increasing bin indices
  std::vector<double> edge_hz;   // frequencies of the snapped edges

  double w(int mel, int bin) const {
    return weights[static_cast<size_t>(mel) * n_fft + bin];
  }
};

struct LogMelSpectrogram {
  int n_mels = 0;
  int frames = 0;
  std::vector<float> values;  // row-major [mel][frame]
  float norm_mean = 0.0f;
  float norm_std = 1.0f;

  float at(int mel, int frame) const {
    return values[static_cast<size_t>(mel) * frames + frame];
  }
};

std::vector<double> make_window(const FrontendConfig& cfg);

// X(m,k) = sum_n x[n + m*hop] w[n] exp(-j 2 pi k n / N); no implicit
// zero-padding, frame_count = floor((L - N) / hop) + 1
ComplexSpectrogram stft(const sim::IQBuffer& iq, const FrontendConfig& cfg);
ComplexSpectrogram stft(const std::vector<std::complex<double>>& samples,
                        const FrontendConfig& cfg);

MelFilterbank build_mel_filterbank(const FrontendConfig& cfg);

// E[mel][frame] = sum_k |X(frame,k)|^2 H_mel(k)
std::vector<double> mel_energies(const ComplexSpectrogram& cs, const MelFilterbank& fb);

// elementwise log(E + eps); rejects negative energies
std::vector<double> log_compress(const std::vector<double>& energies, double eps);

// stft -> mel -> log -> per-spectrogram standardization -> pad/crop frames
LogMelSpectrogram featurize(const sim::IQBuffer& iq, const FrontendConfig& cfg);

// cache file: magic "RFLM", u32 version, u32 n_mels, u32 frames, f32 grid
void save_feature(const std::string& path, const LogMelSpectrogram& s);
LogMelSpectrogram load_feature(const std::string& path);

std::string frontend_config_json(const FrontendConfig& cfg);

}  // namespace rffi::dsp
