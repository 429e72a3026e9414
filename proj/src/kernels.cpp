// OpenMP kernels. Convolutions go through im2col + BLAS GEMM, the complex
// filterbank through FFTW; the low-pass stage keeps direct loops with
// contiguous inner loops.
#include "convsr/kernels.hpp"

#include <algorithm>
#include <complex>
#include <map>

#include <cblas.h>
#include <fftw3.h>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace convsr::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

// Range of output frames [lo, hi) for which tap k reads inside the input.
void valid_range(const ConvGeometry& geo, std::size_t k, std::size_t t_in,
                 std::size_t t_out, std::size_t& lo, std::size_t& hi) {
  // pos = t*stride + k - pad_left must satisfy 0 <= pos < t_in.
  const long off = static_cast<long>(k) - static_cast<long>(geo.pad_left);
  const long s = static_cast<long>(geo.stride);
  long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long last = (static_cast<long>(t_in) - 1 - off);  // t*s <= last
  long end = last < 0 ? 0 : last / s + 1;
  first = std::min<long>(first, static_cast<long>(t_out));
  end = std::clamp<long>(end, first, static_cast<long>(t_out));
  lo = static_cast<std::size_t>(first);
  hi = static_cast<std::size_t>(end);
}

}  // namespace

namespace {

// cols[(i * width + k) * t_out + t] = x[i][t * stride + k - pad_left], zero
// outside the input.
std::vector<double> im2col(const Matrix& x, const ConvGeometry& geo, std::size_t t_out) {
  const std::size_t t_in = x.cols();
  std::vector<double> cols(geo.in_channels * geo.width * t_out, 0.0);
  const long n_in = static_cast<long>(geo.in_channels);
#pragma omp parallel for schedule(static)
  for (long il = 0; il < n_in; ++il) {
    const std::size_t i = static_cast<std::size_t>(il);
    const double* src = x.row(i).data();
    for (std::size_t k = 0; k < geo.width; ++k) {
      double* dst = cols.data() + (i * geo.width + k) * t_out;
      std::size_t lo, hi;
      valid_range(geo, k, t_in, t_out, lo, hi);
      for (std::size_t t = lo; t < hi; ++t) dst[t] = src[t * geo.stride + k - geo.pad_left];
    }
  }
  return cols;
}

void col2im(const std::vector<double>& cols, const ConvGeometry& geo, std::size_t t_out,
            Matrix& dx) {
  const std::size_t t_in = dx.cols();
  const long n_in = static_cast<long>(geo.in_channels);
#pragma omp parallel for schedule(static)
  for (long il = 0; il < n_in; ++il) {
    const std::size_t i = static_cast<std::size_t>(il);
    double* dst = dx.row(i).data();
    for (std::size_t k = 0; k < geo.width; ++k) {
      const double* src = cols.data() + (i * geo.width + k) * t_out;
      std::size_t lo, hi;
      valid_range(geo, k, t_in, t_out, lo, hi);
      for (std::size_t t = lo; t < hi; ++t) dst[t * geo.stride + k - geo.pad_left] += src[t];
    }
  }
}

}  // namespace

Matrix conv1d_forward(const Matrix& x, std::span<const double> weight,
                      std::span<const double> bias, const ConvGeometry& geo) {
  const std::size_t t_out = geo.output_length(x.cols());
  Matrix out(geo.out_channels, t_out);
  if (t_out == 0) return out;
  for (std::size_t o = 0; o < geo.out_channels; ++o) std::fill_n(out.row(o).data(), t_out, bias[o]);
  const std::size_t k = geo.in_channels * geo.width;
  const auto cols = im2col(x, geo, t_out);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(geo.out_channels),
              static_cast<int>(t_out), static_cast<int>(k), 1.0, weight.data(), static_cast<int>(k),
              cols.data(), static_cast<int>(t_out), 1.0, out.data(), static_cast<int>(t_out));
  return out;
}

ConvGrads conv1d_backward(const Matrix& x, std::span<const double> weight,
                          const Matrix& grad_out, const ConvGeometry& geo) {
  const std::size_t t_out = grad_out.cols();
  ConvGrads g;
  g.input = Matrix(geo.in_channels, x.cols());
  g.weight.assign(weight.size(), 0.0);
  g.bias.assign(geo.out_channels, 0.0);
  if (t_out == 0) return g;
  for (std::size_t o = 0; o < geo.out_channels; ++o) {
    double b = 0.0;
    for (double v : grad_out.row(o)) b += v;
    g.bias[o] = b;
  }
  const int m = static_cast<int>(geo.out_channels);
  const int n = static_cast<int>(t_out);
  const int k = static_cast<int>(geo.in_channels * geo.width);
  const auto cols = im2col(x, geo, t_out);
  // dW = dY * cols^T
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, grad_out.data(), n,
              cols.data(), n, 0.0, g.weight.data(), k);
  // dcols = W^T * dY
  std::vector<double> dcols(cols.size());
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, weight.data(), k,
              grad_out.data(), n, 0.0, dcols.data(), n);
  col2im(dcols, geo, t_out, g.input);
  return g;
}

// ---------------------------------------------------------------------------
// Complex filterbank through FFTs. With h = real + i*imag, the response
// r[t] = sum_w h[w] s[t + w] is a correlation; on a transform length
// L >= len(s) none of the needed lags wrap around.

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

namespace {

struct FftBuffer {
  explicit FftBuffer(std::size_t n) : n(n), data(fftw_alloc_complex(n)) {
    std::fill_n(reinterpret_cast<double*>(data), 2 * n, 0.0);
  }
  ~FftBuffer() { fftw_free(data); }
  FftBuffer(const FftBuffer&) = delete;
  FftBuffer& operator=(const FftBuffer&) = delete;
  void clear() { std::fill_n(reinterpret_cast<double*>(data), 2 * n, 0.0); }
  std::complex<double>& operator[](std::size_t i) {
    return reinterpret_cast<std::complex<double>*>(data)[i];
  }
  std::size_t n;
  fftw_complex* data;
};

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
};

// Plans live for the whole process, one pair per transform length. They are
// created out-of-place on SIMD-aligned buffers, and every execution uses
// buffers from fftw_alloc_complex, which have the same alignment.
const PlanPair& plans_for(std::size_t n) {
  static std::map<std::size_t, PlanPair> cache;
  std::lock_guard lock(fftw_planner_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  FftBuffer a(n), b(n);
  PlanPair p;
  p.forward = fftw_plan_dft_1d(static_cast<int>(n), a.data, b.data, FFTW_FORWARD, FFTW_ESTIMATE);
  p.backward = fftw_plan_dft_1d(static_cast<int>(n), a.data, b.data, FFTW_BACKWARD, FFTW_ESTIMATE);
  return cache.emplace(n, p).first->second;
}

// Smallest 2^a 3^b 5^c >= n.
std::size_t fft_length(std::size_t n) {
  std::size_t best = 1;
  while (best < n) best *= 2;
  for (std::size_t p5 = 1; p5 < best; p5 *= 5)
    for (std::size_t p3 = p5; p3 < best; p3 *= 3) {
      std::size_t v = p3;
      while (v < n) v *= 2;
      best = std::min(best, v);
    }
  return best;
}

}  // namespace

ComplexResponse complex_conv_power(std::span<const double> signal,
                                   const Matrix& real, const Matrix& imag) {
  const std::size_t width = real.cols();
  const std::size_t t_conv = signal.size() - width + 1;
  const std::size_t n_filters = real.rows();
  ComplexResponse r{Matrix(n_filters, t_conv), Matrix(n_filters, t_conv),
                    Matrix(n_filters, t_conv)};
  const std::size_t n = fft_length(signal.size());
  const PlanPair& plan = plans_for(n);
  const double scale = 1.0 / static_cast<double>(n);

  FftBuffer sig(n), sig_hat(n);
  for (std::size_t t = 0; t < signal.size(); ++t) sig[t] = signal[t];
  fftw_execute_dft(plan.forward, sig.data, sig_hat.data);

  const long nf = static_cast<long>(n_filters);
#pragma omp parallel
  {
    FftBuffer h(n), h_hat(n), out(n);
#pragma omp for schedule(static)
    for (long fl = 0; fl < nf; ++fl) {
      const std::size_t f = static_cast<std::size_t>(fl);
      // Time-reversed kernel: h~[(n - w) mod n] = h[w].
      h.clear();
      for (std::size_t w = 0; w < width; ++w) h[(n - w) % n] = {real(f, w), imag(f, w)};
      fftw_execute_dft(plan.forward, h.data, h_hat.data);
      for (std::size_t k = 0; k < n; ++k) h_hat[k] *= sig_hat[k];
      fftw_execute_dft(plan.backward, h_hat.data, out.data);
      double* re = r.real.row(f).data();
      double* im = r.imag.row(f).data();
      double* p = r.power.row(f).data();
      for (std::size_t t = 0; t < t_conv; ++t) {
        re[t] = out[t].real() * scale;
        im[t] = out[t].imag() * scale;
        p[t] = re[t] * re[t] + im[t] * im[t];
      }
    }
  }
  return r;
}

ComplexConvGrads complex_conv_power_backward(std::span<const double> signal,
                                             const Matrix& real,
                                             const Matrix& imag,
                                             const ComplexResponse& fwd,
                                             const Matrix& grad_power) {
  const std::size_t width = real.cols();
  const std::size_t t_conv = grad_power.cols();
  const std::size_t n_filters = real.rows();
  ComplexConvGrads g{Matrix(n_filters, width), Matrix(n_filters, width),
                     std::vector<double>(signal.size(), 0.0)};
  const std::size_t n = fft_length(signal.size());
  const PlanPair& plan = plans_for(n);
  const double scale = 1.0 / static_cast<double>(n);

  FftBuffer sig(n), sig_hat(n);
  for (std::size_t t = 0; t < signal.size(); ++t) sig[t] = signal[t];
  fftw_execute_dft(plan.forward, sig.data, sig_hat.data);

  // z[t] = dL/dre[t] + i dL/dim[t].
  //   d(real + i imag)[w] = sum_t z[t] s[t + w]   -> Z(-k) S(k)
  //   d s[m] = Re sum_t z[t] conj(h[m - t])       -> Z(k) conj(H)(k)
  // Per-filter signal spectra are summed in filter order after the loop.
  const long nf = static_cast<long>(n_filters);
  std::vector<std::vector<std::complex<double>>> sig_terms(n_filters);
#pragma omp parallel
  {
    FftBuffer z(n), z_hat(n), h(n), h_hat(n), tmp(n), out(n);
#pragma omp for schedule(static)
    for (long fl = 0; fl < nf; ++fl) {
      const std::size_t f = static_cast<std::size_t>(fl);
      z.clear();
      for (std::size_t t = 0; t < t_conv; ++t) {
        const double gp = 2.0 * grad_power(f, t);
        z[t] = {gp * fwd.real(f, t), gp * fwd.imag(f, t)};
      }
      fftw_execute_dft(plan.forward, z.data, z_hat.data);

      for (std::size_t k = 0; k < n; ++k) tmp[k] = z_hat[(n - k) % n] * sig_hat[k];
      fftw_execute_dft(plan.backward, tmp.data, out.data);
      for (std::size_t w = 0; w < width; ++w) {
        g.real(f, w) = out[w].real() * scale;
        g.imag(f, w) = out[w].imag() * scale;
      }

      h.clear();
      for (std::size_t w = 0; w < width; ++w) h[w] = {real(f, w), -imag(f, w)};
      fftw_execute_dft(plan.forward, h.data, h_hat.data);
      auto& term = sig_terms[f];
      term.resize(n);
      for (std::size_t k = 0; k < n; ++k) term[k] = z_hat[k] * h_hat[k];
    }
  }
  FftBuffer acc(n), out(n);
  for (const auto& term : sig_terms)
    for (std::size_t k = 0; k < n; ++k) acc[k] += term[k];
  fftw_execute_dft(plan.backward, acc.data, out.data);
  for (std::size_t m = 0; m < signal.size(); ++m) g.signal[m] = out[m].real() * scale;
  return g;
}

Matrix lowpass_decimate(const Matrix& p, std::span<const double> window,
                        std::size_t stride) {
  const std::size_t t_out = (p.cols() - window.size()) / stride + 1;
  Matrix out(p.rows(), t_out);
  const long nf = static_cast<long>(p.rows());
#pragma omp parallel for schedule(static)
  for (long fl = 0; fl < nf; ++fl) {
    const std::size_t f = static_cast<std::size_t>(fl);
    const double* src = p.row(f).data();
    for (std::size_t n = 0; n < t_out; ++n) {
      const double* s = src + n * stride;
      double acc = 0.0;
      for (std::size_t w = 0; w < window.size(); ++w) acc += window[w] * s[w];
      out(f, n) = acc;
    }
  }
  return out;
}

Matrix lowpass_decimate_backward(const Matrix& grad_out,
                                 std::span<const double> window,
                                 std::size_t stride, std::size_t input_length) {
  Matrix g(grad_out.rows(), input_length);
  const long nf = static_cast<long>(grad_out.rows());
#pragma omp parallel for schedule(static)
  for (long fl = 0; fl < nf; ++fl) {
    const std::size_t f = static_cast<std::size_t>(fl);
    double* dst = g.row(f).data();
    for (std::size_t n = 0; n < grad_out.cols(); ++n) {
      const double go = grad_out(f, n);
      double* d = dst + n * stride;
      for (std::size_t w = 0; w < window.size(); ++w) d[w] += window[w] * go;
    }
  }
  return g;
}

}  // namespace convsr::kernels
