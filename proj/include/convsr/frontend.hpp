// Raw-waveform front-ends: the trainable pre-emphasis / complex filterbank /
// squared-Hanning low-pass chain, the fixed log-mel baseline with the same
// frame geometry, and spectral analysis of learned filters.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "convsr/common.hpp"
#include "convsr/kernels.hpp"
#include "convsr/params.hpp"

namespace convsr::frontend {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 16000.0;
};

// Durations are in milliseconds and become sample counts via
// round(ms * rate / 1000).
struct FrontendConfig {
  std::size_t num_filters = 40;
  double filter_width_ms = 25.0;
  double lowpass_width_ms = 25.0;
  double stride_ms = 10.0;
  double log_epsilon = 1e-6;
  double norm_epsilon = 1e-5;
  double sample_rate = 16000.0;

  std::size_t filter_width() const;
  std::size_t lowpass_width() const;
  std::size_t stride() const;
  void validate() const;
};

std::size_t ms_to_samples(double ms, double sample_rate);

// Frames produced from `num_samples` samples, 0 when the input is too short.
std::size_t frame_count(std::size_t num_samples, const FrontendConfig& config);

struct FeatureMap {
  Matrix values;  // channels x frames
  double frame_stride_ms = 10.0;

  std::size_t channels() const { return values.rows(); }
  std::size_t frames() const { return values.cols(); }
};

// y[t] = kernel[1] * x[t] + kernel[0] * x[t-1], with x[-1] = 0.
std::vector<double> preemphasize(std::span<const double> x,
                                 std::array<double, 2> kernel);

Matrix complex_conv_power(std::span<const double> x, const Matrix& real,
                          const Matrix& imag);

Matrix lowpass_decimate(const Matrix& p, std::span<const double> window,
                        std::size_t stride);

Matrix log_compress(const Matrix& v, double epsilon);

// Per-channel (per-row) zero mean, unit variance over time.
Matrix instance_normalize(const Matrix& v, double epsilon);
Matrix instance_normalize_backward(const Matrix& v, const Matrix& grad_out,
                                   double epsilon);

// (0.5 - 0.5 cos(2 pi w / (n - 1)))^2 for w in [0, n).
std::vector<double> squared_hanning(std::size_t n);

struct FrontendGradients {
  std::array<double, 2> preemphasis{};
  Matrix real;
  Matrix imag;
  std::vector<double> input;  // gradient w.r.t. the raw samples
};

// Intermediate values kept by forward() for backward().
struct FrontendTrace {
  std::vector<double> input;
  std::vector<double> emphasized;
  kernels::ComplexResponse response;
  Matrix decimated;
  Matrix compressed;
};

class LearnableFrontend {
 public:
  LearnableFrontend() = default;
  // Pre-emphasis starts at [-0.97, 1]; complex kernels are drawn from a
  // zero-mean normal with standard deviation 1/sqrt(width).
  LearnableFrontend(const FrontendConfig& config, std::uint64_t seed);

  const FrontendConfig& config() const { return config_; }
  std::size_t num_filters() const { return real_.rows(); }

  std::array<double, 2>& preemphasis() { return preemphasis_; }
  const std::array<double, 2>& preemphasis() const { return preemphasis_; }
  Matrix& filter_real() { return real_; }
  const Matrix& filter_real() const { return real_; }
  Matrix& filter_imag() { return imag_; }
  const Matrix& filter_imag() const { return imag_; }
  std::span<const double> lowpass_window() const { return window_; }

  FeatureMap forward(const Waveform& x, FrontendTrace* trace = nullptr) const;
  FrontendGradients backward(const FrontendTrace& trace,
                             const Matrix& grad_features) const;

  // Trainable tensors: preemphasis, real, imag. The low-pass window is not
  // exposed here, so no optimizer can touch it.
  ParameterList parameters();
  static std::vector<std::vector<double>> flatten(const FrontendGradients& g);

 private:
  FrontendConfig config_;
  std::array<double, 2> preemphasis_{-0.97, 1.0};
  Matrix real_;
  Matrix imag_;
  std::vector<double> window_;
};

// Log-mel baseline: pre-emphasis, 25 ms Hamming frames positioned so frame n
// is centered on the same samples as frame n of the learnable front-end,
// power spectrum, triangular mel filters over 0..Nyquist, log, instance norm.
FeatureMap mel_frontend(const Waveform& x, std::size_t n_mels,
                        const FrontendConfig& config = {});
// Mel filter energies (n_mels x frames) before log compression.
Matrix mel_energies(const Waveform& x, std::size_t n_mels, const FrontendConfig& config = {});

double hz_to_mel(double hz);
double mel_to_hz(double mel);
// Center frequencies (Hz) of the n_mels triangular filters.
std::vector<double> mel_centers(std::size_t n_mels, double sample_rate);

struct FilterSpectrum {
  std::vector<double> power;   // bins 0..Nyquist
  double bin_hz = 0.0;
};

// |DFT|^2 of the complex kernel real + i*imag, zero-padded to 4x its width.
FilterSpectrum filter_power_spectrum(std::span<const double> real,
                                     std::span<const double> imag,
                                     double sample_rate);

double center_frequency(std::span<const double> real,
                        std::span<const double> imag, double sample_rate);

struct FilterAnalysis {
  std::vector<std::size_t> filter_index;   // original index, sorted by center
  std::vector<double> center_frequencies;  // ascending
  Matrix power_spectra;                    // same row order as filter_index
  double bin_hz = 0.0;
};

FilterAnalysis analyze_filters(const LearnableFrontend& fe);

}  // namespace convsr::frontend
