#include "rffi/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "rffi/binio.hpp"

namespace rffi::dsp {

using json = nlohmann::json;

void FrontendConfig::validate() const {
  if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0)
    throw std::invalid_argument("frontend: n_fft must be a power of two >= 2");
  if (hop < 1 || hop > n_fft) throw std::invalid_argument("frontend: need 1 <= hop <= n_fft");
  if (n_mels < 2) throw std::invalid_argument("frontend: n_mels must be >= 2");
  if (log_epsilon <= 0) throw std::invalid_argument("frontend: log_epsilon must be > 0");
  if (target_frames < 1) throw std::invalid_argument("frontend: target_frames must be >= 1");
  if (sample_rate_hz <= 0) throw std::invalid_argument("frontend: sample_rate_hz must be > 0");
}

std::vector<double> make_window(const FrontendConfig& cfg) {
  std::vector<double> w(static_cast<size_t>(cfg.n_fft), 1.0);
  if (cfg.window == FrontendConfig::Window::kHann)
    for (int n = 0; n < cfg.n_fft; ++n)
      w[static_cast<size_t>(n)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * n / cfg.n_fft);
  return w;
}

namespace {

// iterative radix-2 Cooley-Tukey, forward DFT convention (e^{-j2pikn/N})
void fft_inplace(std::vector<std::complex<double>>& a) {
  size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

}  // namespace

ComplexSpectrogram stft(const std::vector<std::complex<double>>& samples,
                        const FrontendConfig& cfg) {
  cfg.validate();
  int64_t L = static_cast<int64_t>(samples.size());
  if (L < cfg.n_fft) throw std::invalid_argument("stft: signal shorter than one window");
  ComplexSpectrogram cs;
  cs.bin_count = cfg.n_fft;
  cs.frame_count = static_cast<int>((L - cfg.n_fft) / cfg.hop + 1);
  cs.values.resize(static_cast<size_t>(cs.frame_count) * cs.bin_count);
  std::vector<double> window = make_window(cfg);
#pragma omp parallel for schedule(static)
  for (int m = 0; m < cs.frame_count; ++m) {
    std::vector<std::complex<double>> frame(static_cast<size_t>(cfg.n_fft));
    int64_t off = static_cast<int64_t>(m) * cfg.hop;
    for (int n = 0; n < cfg.n_fft; ++n)
      frame[static_cast<size_t>(n)] =
          samples[static_cast<size_t>(off + n)] * window[static_cast<size_t>(n)];
    fft_inplace(frame);
    std::copy(frame.begin(), frame.end(),
              cs.values.begin() + static_cast<size_t>(m) * cs.bin_count);
  }
  return cs;
}

ComplexSpectrogram stft(const sim::IQBuffer& iq, const FrontendConfig& cfg) {
  return stft(iq.samples, cfg);
}

namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

MelFilterbank build_mel_filterbank(const FrontendConfig& cfg) {
  cfg.validate();
  MelFilterbank fb;
  fb.n_mels = cfg.n_mels;
  fb.n_fft = cfg.n_fft;
  fb.weights.assign(static_cast<size_t>(cfg.n_mels) * cfg.n_fft, 0.0);

  double bin_hz = cfg.sample_rate_hz / cfg.n_fft;
  double mel_max = hz_to_mel(cfg.sample_rate_hz);
  int pts = cfg.n_mels + 2;
  fb.edge_bins.resize(static_cast<size_t>(pts));
  fb.edge_hz.resize(static_cast<size_t>(pts));
  for (int i = 0; i < pts; ++i) {
    double f = mel_to_hz(mel_max * i / (pts - 1));
    int b = static_cast<int>(std::lround(f / bin_hz));
    if (i > 0) b = std::max(b, fb.edge_bins[static_cast<size_t>(i - 1)] + 1);
    fb.edge_bins[static_cast<size_t>(i)] = b;
  }
  // last edge may sit one past the final bin (frequency fs); anything beyond
  // means the centers cannot fit the grid
  if (fb.edge_bins.back() > cfg.n_fft)
    throw std::invalid_argument(
        "mel filterbank: n_mels too large for n_fft (adjacent centers collide on the bin grid)");
  for (int i = 0; i < pts; ++i)
    fb.edge_hz[static_cast<size_t>(i)] = fb.edge_bins[static_cast<size_t>(i)] * bin_hz;

  for (int m = 0; m < cfg.n_mels; ++m) {
    double fl = fb.edge_hz[static_cast<size_t>(m)];
    double fc = fb.edge_hz[static_cast<size_t>(m + 1)];
    double fr = fb.edge_hz[static_cast<size_t>(m + 2)];
    for (int k = fb.edge_bins[static_cast<size_t>(m)] + 1;
         k <= std::min(fb.edge_bins[static_cast<size_t>(m + 2)] - 1, cfg.n_fft - 1); ++k) {
      double f = k * bin_hz;
      double w = f <= fc ? (f - fl) / (fc - fl) : (fr - f) / (fr - fc);
      fb.weights[static_cast<size_t>(m) * cfg.n_fft + k] = w;
    }
  }
  return fb;
}

std::vector<double> mel_energies(const ComplexSpectrogram& cs, const MelFilterbank& fb) {
  if (cs.bin_count != fb.n_fft)
    throw std::invalid_argument("mel_energies: spectrogram/filterbank width mismatch");
  std::vector<double> e(static_cast<size_t>(fb.n_mels) * cs.frame_count, 0.0);
  std::vector<double> power(static_cast<size_t>(cs.bin_count));
  for (int t = 0; t < cs.frame_count; ++t) {
    for (int k = 0; k < cs.bin_count; ++k)
      power[static_cast<size_t>(k)] = std::norm(cs.at(t, k));
    for (int m = 0; m < fb.n_mels; ++m) {
      double acc = 0.0;
      const double* w = fb.weights.data() + static_cast<size_t>(m) * fb.n_fft;
      for (int k = 0; k < cs.bin_count; ++k) acc += power[static_cast<size_t>(k)] * w[k];
      e[static_cast<size_t>(m) * cs.frame_count + t] = acc;
    }
  }
  return e;
}

std::vector<double> log_compress(const std::vector<double>& energies, double eps) {
  if (eps <= 0) throw std::invalid_argument("log_compress: eps must be > 0");
  std::vector<double> out(energies.size());
  for (size_t i = 0; i < energies.size(); ++i) {
    if (energies[i] < 0) throw std::invalid_argument("log_compress: negative energy");
    out[i] = std::log(energies[i] + eps);
  }
  return out;
}

LogMelSpectrogram featurize(const sim::IQBuffer& iq, const FrontendConfig& cfg) {
  ComplexSpectrogram cs = stft(iq, cfg);
  MelFilterbank fb = build_mel_filterbank(cfg);
  std::vector<double> grid = log_compress(mel_energies(cs, fb), cfg.log_epsilon);
  int frames = cs.frame_count;

  double mean = 0.0, stddev = 1.0;
  if (cfg.standardize) {
    double s = 0.0;
    for (double v : grid) s += v;
    mean = s / static_cast<double>(grid.size());
    double var = 0.0;
    for (double v : grid) var += (v - mean) * (v - mean);
    stddev = std::sqrt(var / static_cast<double>(grid.size()));
    if (stddev < 1e-8) stddev = 1e-8;
    for (double& v : grid) v = (v - mean) / stddev;
  }

  LogMelSpectrogram out;
  out.n_mels = cfg.n_mels;
  out.frames = cfg.target_frames;
  out.norm_mean = static_cast<float>(mean);
  out.norm_std = static_cast<float>(stddev);
  out.values.resize(static_cast<size_t>(cfg.n_mels) * cfg.target_frames);
  int T = cfg.target_frames;
  for (int t = 0; t < T; ++t) {
    int src;
    if (frames >= T) {
      src = t + (frames - T) / 2;  // center crop
    } else {
      src = std::clamp(t - (T - frames) / 2, 0, frames - 1);  // edge-replicate pad
    }
    for (int m = 0; m < cfg.n_mels; ++m)
      out.values[static_cast<size_t>(m) * T + t] =
          static_cast<float>(grid[static_cast<size_t>(m) * frames + src]);
  }
  return out;
}

void save_feature(const std::string& path, const LogMelSpectrogram& s) {
  BinWriter w;
  w.bytes("RFLM", 4);
  w.u32(1);
  w.u32(static_cast<uint32_t>(s.n_mels));
  w.u32(static_cast<uint32_t>(s.frames));
  w.f32_array(s.values.data(), s.values.size());
  write_file(path, w.data());
}

LogMelSpectrogram load_feature(const std::string& path) {
  auto bytes = read_file(path);
  BinReader r(bytes);
  char magic[5] = {0};
  magic[0] = static_cast<char>(r.u8());
  magic[1] = static_cast<char>(r.u8());
  magic[2] = static_cast<char>(r.u8());
  magic[3] = static_cast<char>(r.u8());
  if (std::string(magic) != "RFLM") throw std::runtime_error("feature file: bad magic");
  uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error("feature file: unsupported version");
  LogMelSpectrogram s;
  s.n_mels = static_cast<int>(r.u32());
  s.frames = static_cast<int>(r.u32());
  s.values.resize(static_cast<size_t>(s.n_mels) * s.frames);
  r.f32_array(s.values.data(), s.values.size());
  return s;
}

std::string frontend_config_json(const FrontendConfig& cfg) {
  json j;
  j["n_fft"] = cfg.n_fft;
  j["hop"] = cfg.hop;
  j["n_mels"] = cfg.n_mels;
  j["log_epsilon"] = cfg.log_epsilon;
  j["target_frames"] = cfg.target_frames;
  j["sample_rate_hz"] = cfg.sample_rate_hz;
  j["window"] = cfg.window == FrontendConfig::Window::kHann ? "hann" : "rect";
  j["standardize"] = cfg.standardize;
  return j.dump();
}

}  // namespace rffi::dsp
