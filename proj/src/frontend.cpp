#include "convsr/frontend.hpp"

#include <complex>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>

#include <fftw3.h>

namespace convsr::frontend {

std::size_t ms_to_samples(double ms, double sample_rate) {
  return static_cast<std::size_t>(std::llround(ms * sample_rate / 1000.0));
}

std::size_t FrontendConfig::filter_width() const {
  return ms_to_samples(filter_width_ms, sample_rate);
}
std::size_t FrontendConfig::lowpass_width() const {
  return ms_to_samples(lowpass_width_ms, sample_rate);
}
std::size_t FrontendConfig::stride() const {
  return ms_to_samples(stride_ms, sample_rate);
}

void FrontendConfig::validate() const {
  if (num_filters < 1) throw Error(ErrorKind::kConfiguration, "num_filters must be >= 1");
  if (!(sample_rate > 0)) throw Error(ErrorKind::kConfiguration, "sample_rate must be > 0");
  if (filter_width() < 1 || lowpass_width() < 2 || stride() < 1)
    throw Error(ErrorKind::kConfiguration,
                "filter, low-pass and stride durations must cover whole samples");
  if (!(log_epsilon > 0) || !(norm_epsilon > 0))
    throw Error(ErrorKind::kConfiguration, "epsilons must be positive");
}

std::size_t frame_count(std::size_t num_samples, const FrontendConfig& config) {
  const std::size_t w = config.filter_width();
  const std::size_t lp = config.lowpass_width();
  if (num_samples < w) return 0;
  const std::size_t t_conv = num_samples - w + 1;
  if (t_conv < lp) return 0;
  return (t_conv - lp) / config.stride() + 1;
}

std::vector<double> preemphasize(std::span<const double> x,
                                 std::array<double, 2> kernel) {
  if (x.empty()) throw Error(ErrorKind::kEmptySignal, "pre-emphasis of an empty signal");
  std::vector<double> y(x.size());
  y[0] = kernel[1] * x[0];
  for (std::size_t t = 1; t < x.size(); ++t) y[t] = kernel[1] * x[t] + kernel[0] * x[t - 1];
  return y;
}

Matrix complex_conv_power(std::span<const double> x, const Matrix& real,
                          const Matrix& imag) {
  if (real.rows() != imag.rows() || real.cols() != imag.cols())
    throw Error(ErrorKind::kDimension, "real/imaginary filterbank shapes differ");
  if (x.size() < real.cols())
    throw Error(ErrorKind::kInsufficientInput,
                "signal of " + std::to_string(x.size()) + " samples is shorter than filter width " +
                    std::to_string(real.cols()));
  return kernels::complex_conv_power(x, real, imag).power;
}

Matrix lowpass_decimate(const Matrix& p, std::span<const double> window,
                        std::size_t stride) {
  if (stride < 1 || window.empty())
    throw Error(ErrorKind::kConfiguration, "low-pass window and stride must be non-empty");
  if (p.cols() < window.size())
    throw Error(ErrorKind::kInsufficientInput,
                "low-pass input of " + std::to_string(p.cols()) + " frames is shorter than window " +
                    std::to_string(window.size()));
  return kernels::lowpass_decimate(p, window, stride);
}

Matrix log_compress(const Matrix& v, double epsilon) {
  if (!(epsilon > 0)) throw Error(ErrorKind::kDomain, "log epsilon must be positive");
  Matrix out(v.rows(), v.cols());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v.data()[i];
    if (x < 0) throw Error(ErrorKind::kDomain, "log compression of a negative value");
    out.data()[i] = std::log(x + epsilon);
  }
  return out;
}

Matrix instance_normalize(const Matrix& v, double epsilon) {
  Matrix out(v.rows(), v.cols());
  const double n = static_cast<double>(v.cols());
  for (std::size_t f = 0; f < v.rows(); ++f) {
    auto row = v.row(f);
    // A constant channel maps to exact zeros; the summed mean may be off by
    // an ulp.
    if (std::all_of(row.begin(), row.end(), [&](double x) { return x == row[0]; })) continue;
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / n;
    double var = 0.0;
    for (double x : row) var += (x - mean) * (x - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t t = 0; t < v.cols(); ++t) out(f, t) = (row[t] - mean) * inv;
  }
  return out;
}

Matrix instance_normalize_backward(const Matrix& v, const Matrix& grad_out,
                                   double epsilon) {
  Matrix g(v.rows(), v.cols());
  const double n = static_cast<double>(v.cols());
  for (std::size_t f = 0; f < v.rows(); ++f) {
    auto row = v.row(f);
    auto go = grad_out.row(f);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / n;
    double var = 0.0;
    for (double x : row) var += (x - mean) * (x - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + epsilon);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t t = 0; t < v.cols(); ++t) {
      const double xhat = (row[t] - mean) * inv;
      mean_g += go[t];
      mean_gx += go[t] * xhat;
    }
    mean_g /= n;
    mean_gx /= n;
    for (std::size_t t = 0; t < v.cols(); ++t) {
      const double xhat = (row[t] - mean) * inv;
      g(f, t) = inv * (go[t] - mean_g - xhat * mean_gx);
    }
  }
  return g;
}

std::vector<double> squared_hanning(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i) {
    const double h =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                             static_cast<double>(n - 1));
    w[i] = h * h;
  }
  return w;
}

LearnableFrontend::LearnableFrontend(const FrontendConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const std::size_t k = config_.num_filters;
  const std::size_t w = config_.filter_width();
  real_ = Matrix(k, w);
  imag_ = Matrix(k, w);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(w)));
  for (auto& v : real_.values()) v = dist(rng);
  for (auto& v : imag_.values()) v = dist(rng);
  window_ = squared_hanning(config_.lowpass_width());
}

FeatureMap LearnableFrontend::forward(const Waveform& x, FrontendTrace* trace) const {
  if (x.samples.empty()) throw Error(ErrorKind::kEmptySignal, "front-end input is empty");
  if (frame_count(x.samples.size(), config_) == 0)
    throw Error(ErrorKind::kInsufficientInput,
                "waveform of " + std::to_string(x.samples.size()) +
                    " samples yields no front-end frame");
  FrontendTrace local;
  FrontendTrace& tr = trace ? *trace : local;
  tr.input = x.samples;
  tr.emphasized = preemphasize(x.samples, preemphasis_);
  if (tr.emphasized.size() < real_.cols())
    throw Error(ErrorKind::kInsufficientInput, "signal shorter than filter width");
  tr.response = kernels::complex_conv_power(tr.emphasized, real_, imag_);
  tr.decimated = lowpass_decimate(tr.response.power, window_, config_.stride());
  tr.compressed = log_compress(tr.decimated, config_.log_epsilon);
  return {instance_normalize(tr.compressed, config_.norm_epsilon), config_.stride_ms};
}

FrontendGradients LearnableFrontend::backward(const FrontendTrace& trace,
                                              const Matrix& grad_features) const {
  if (grad_features.rows() != trace.compressed.rows() ||
      grad_features.cols() != trace.compressed.cols())
    throw Error(ErrorKind::kDimension, "upstream gradient shape does not match features");

  Matrix g_log = instance_normalize_backward(trace.compressed, grad_features,
                                             config_.norm_epsilon);
  for (std::size_t i = 0; i < g_log.size(); ++i)
    g_log.data()[i] /= trace.decimated.data()[i] + config_.log_epsilon;
  const Matrix g_power = kernels::lowpass_decimate_backward(
      g_log, window_, config_.stride(), trace.response.power.cols());
  auto g_conv = kernels::complex_conv_power_backward(trace.emphasized, real_, imag_,
                                                     trace.response, g_power);

  FrontendGradients g;
  g.real = std::move(g_conv.real);
  g.imag = std::move(g_conv.imag);
  const auto& dy = g_conv.signal;
  const auto& x = trace.input;
  g.input.assign(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    g.preemphasis[1] += dy[t] * x[t];
    g.input[t] += preemphasis_[1] * dy[t];
    if (t > 0) {
      g.preemphasis[0] += dy[t] * x[t - 1];
      g.input[t - 1] += preemphasis_[0] * dy[t];
    }
  }
  return g;
}

ParameterList LearnableFrontend::parameters() {
  return {{"frontend.preemphasis", std::span<double>(preemphasis_)},
          {"frontend.real", std::span<double>(real_.values())},
          {"frontend.imag", std::span<double>(imag_.values())}};
}

std::vector<std::vector<double>> LearnableFrontend::flatten(const FrontendGradients& g) {
  return {{g.preemphasis[0], g.preemphasis[1]}, g.real.values(), g.imag.values()};
}

// ---------------------------------------------------------------------------
// Spectral helpers

namespace {

// FFTW's planner is not re-entrant.
std::mutex& fftw_mutex() { return kernels::fftw_planner_mutex(); }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_centers(std::size_t n_mels, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> c(n_mels);
  for (std::size_t m = 0; m < n_mels; ++m)
    c[m] = mel_to_hz(top * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1));
  return c;
}

Matrix mel_energies(const Waveform& x, std::size_t n_mels, const FrontendConfig& config) {
  if (n_mels < 1) throw Error(ErrorKind::kConfiguration, "n_mels must be >= 1");
  if (x.samples.empty()) throw Error(ErrorKind::kEmptySignal, "mel input is empty");
  FrontendConfig cfg = config;
  cfg.sample_rate = x.sample_rate;
  const std::size_t frames = frame_count(x.samples.size(), cfg);
  if (frames == 0)
    throw Error(ErrorKind::kInsufficientInput,
                "waveform of " + std::to_string(x.samples.size()) + " samples yields no mel frame");

  const std::size_t win = cfg.filter_width();
  const std::size_t offset = (cfg.lowpass_width() - 1) / 2;
  const std::size_t stride = cfg.stride();
  const std::size_t n_fft = next_pow2(win);
  const std::size_t n_bins = n_fft / 2 + 1;
  const double rate = x.sample_rate;

  std::vector<double> hamming(win);
  for (std::size_t i = 0; i < win; ++i)
    hamming[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                        static_cast<double>(win - 1));

  // Triangular filters on HTK mel points spanning 0..Nyquist.
  const double top = hz_to_mel(rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t m = 0; m < n_mels + 2; ++m)
    edges[m] = mel_to_hz(top * static_cast<double>(m) / static_cast<double>(n_mels + 1));
  Matrix bank(n_mels, n_bins);
  for (std::size_t m = 0; m < n_mels; ++m) {
    for (std::size_t b = 0; b < n_bins; ++b) {
      const double hz = static_cast<double>(b) * rate / static_cast<double>(n_fft);
      double v = 0.0;
      if (hz > edges[m] && hz <= edges[m + 1])
        v = (hz - edges[m]) / (edges[m + 1] - edges[m]);
      else if (hz > edges[m + 1] && hz < edges[m + 2])
        v = (edges[m + 2] - hz) / (edges[m + 2] - edges[m + 1]);
      bank(m, b) = v;
    }
  }

  const auto y = preemphasize(x.samples, {-0.97, 1.0});
  std::vector<double> frame(n_fft);
  std::vector<std::complex<double>> spec(n_bins);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), frame.data(),
                                reinterpret_cast<fftw_complex*>(spec.data()), FFTW_ESTIMATE);
  }
  Matrix energies(n_mels, frames);
  std::vector<double> power(n_bins);
  for (std::size_t n = 0; n < frames; ++n) {
    std::fill(frame.begin(), frame.end(), 0.0);
    const std::size_t start = n * stride + offset;
    for (std::size_t i = 0; i < win; ++i) frame[i] = y[start + i] * hamming[i];
    fftw_execute(plan);
    for (std::size_t b = 0; b < n_bins; ++b) power[b] = std::norm(spec[b]);
    for (std::size_t m = 0; m < n_mels; ++m) {
      double e = 0.0;
      for (std::size_t b = 0; b < n_bins; ++b) e += bank(m, b) * power[b];
      energies(m, n) = e;
    }
  }
  {
    std::lock_guard lock(fftw_mutex());
    fftw_destroy_plan(plan);
  }
  return energies;
}

FeatureMap mel_frontend(const Waveform& x, std::size_t n_mels, const FrontendConfig& config) {
  const Matrix energies = mel_energies(x, n_mels, config);
  return {instance_normalize(log_compress(energies, config.log_epsilon), config.norm_epsilon),
          config.stride_ms};
}

FilterSpectrum filter_power_spectrum(std::span<const double> real,
                                     std::span<const double> imag, double sample_rate) {
  if (real.size() != imag.size() || real.empty())
    throw Error(ErrorKind::kDimension, "filter real/imaginary parts must be non-empty and equal");
  const std::size_t n = 4 * real.size();
  std::vector<std::complex<double>> in(n), out(n);
  for (std::size_t i = 0; i < real.size(); ++i) in[i] = {real[i], imag[i]};
  {
    std::lock_guard lock(fftw_mutex());
    fftw_plan plan = fftw_plan_dft_1d(static_cast<int>(n), reinterpret_cast<fftw_complex*>(in.data()),
                                      reinterpret_cast<fftw_complex*>(out.data()), FFTW_FORWARD,
                                      FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
  }
  FilterSpectrum s;
  s.bin_hz = sample_rate / static_cast<double>(n);
  s.power.resize(n / 2 + 1);
  for (std::size_t b = 0; b < s.power.size(); ++b) s.power[b] = std::norm(out[b]);
  return s;
}

double center_frequency(std::span<const double> real, std::span<const double> imag,
                        double sample_rate) {
  const bool all_zero =
      std::all_of(real.begin(), real.end(), [](double v) { return v == 0.0; }) &&
      std::all_of(imag.begin(), imag.end(), [](double v) { return v == 0.0; });
  if (all_zero) throw Error(ErrorKind::kDegenerateFilter, "all-zero kernel has no center frequency");
  const auto s = filter_power_spectrum(real, imag, sample_rate);
  // First maximum wins ties.
  const auto it = std::max_element(s.power.begin(), s.power.end());
  return static_cast<double>(it - s.power.begin()) * s.bin_hz;
}

FilterAnalysis analyze_filters(const LearnableFrontend& fe) {
  const std::size_t k = fe.num_filters();
  const double rate = fe.config().sample_rate;
  std::vector<double> centers(k);
  std::vector<FilterSpectrum> spectra;
  spectra.reserve(k);
  for (std::size_t f = 0; f < k; ++f) {
    spectra.push_back(filter_power_spectrum(fe.filter_real().row(f), fe.filter_imag().row(f), rate));
    const auto& p = spectra.back().power;
    centers[f] = static_cast<double>(std::max_element(p.begin(), p.end()) - p.begin()) *
                 spectra.back().bin_hz;
  }
  FilterAnalysis a;
  a.filter_index.resize(k);
  std::iota(a.filter_index.begin(), a.filter_index.end(), std::size_t{0});
  std::stable_sort(a.filter_index.begin(), a.filter_index.end(),
                   [&](std::size_t i, std::size_t j) { return centers[i] < centers[j]; });
  a.bin_hz = spectra.empty() ? 0.0 : spectra.front().bin_hz;
  const std::size_t bins = spectra.empty() ? 0 : spectra.front().power.size();
  a.power_spectra = Matrix(k, bins);
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t f = a.filter_index[r];
    a.center_frequencies.push_back(centers[f]);
    std::copy(spectra[f].power.begin(), spectra[f].power.end(), a.power_spectra.row(r).begin());
  }
  return a;
}

}  // namespace convsr::frontend
