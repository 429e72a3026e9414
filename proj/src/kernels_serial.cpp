// Reference loop nests. Written one output element at a time so they read
// like the defining sums; the parallel kernels are checked against these.
#include "convsr/kernels.hpp"

namespace convsr::kernels {

std::size_t ConvGeometry::output_length(std::size_t input_length) const {
  const std::size_t padded = input_length + pad_left + pad_right;
  if (padded < width) return 0;
  return (padded - width) / stride + 1;
}

namespace serial {

namespace {

// Input sample index feeding output t through tap k, or -1 when it falls in
// the zero padding.
long input_index(const ConvGeometry& geo, std::size_t t, std::size_t k,
                 std::size_t t_in) {
  const long pos = static_cast<long>(t * geo.stride + k) - static_cast<long>(geo.pad_left);
  return (pos < 0 || pos >= static_cast<long>(t_in)) ? -1 : pos;
}

}  // namespace

Matrix conv1d_forward(const Matrix& x, std::span<const double> weight,
                      std::span<const double> bias, const ConvGeometry& geo) {
  const std::size_t t_in = x.cols();
  const std::size_t t_out = geo.output_length(t_in);
  Matrix out(geo.out_channels, t_out);
  for (std::size_t o = 0; o < geo.out_channels; ++o) {
    for (std::size_t t = 0; t < t_out; ++t) {
      double acc = bias[o];
      for (std::size_t i = 0; i < geo.in_channels; ++i) {
        for (std::size_t k = 0; k < geo.width; ++k) {
          const long pos = input_index(geo, t, k, t_in);
          if (pos < 0) continue;
          acc += weight[(o * geo.in_channels + i) * geo.width + k] * x(i, pos);
        }
      }
      out(o, t) = acc;
    }
  }
  return out;
}

ConvGrads conv1d_backward(const Matrix& x, std::span<const double> weight,
                          const Matrix& grad_out, const ConvGeometry& geo) {
  const std::size_t t_in = x.cols();
  const std::size_t t_out = grad_out.cols();
  ConvGrads g;
  g.input = Matrix(geo.in_channels, t_in);
  g.weight.assign(weight.size(), 0.0);
  g.bias.assign(geo.out_channels, 0.0);
  for (std::size_t o = 0; o < geo.out_channels; ++o) {
    for (std::size_t t = 0; t < t_out; ++t) {
      const double go = grad_out(o, t);
      g.bias[o] += go;
      for (std::size_t i = 0; i < geo.in_channels; ++i) {
        for (std::size_t k = 0; k < geo.width; ++k) {
          const long pos = input_index(geo, t, k, t_in);
          if (pos < 0) continue;
          const std::size_t wi = (o * geo.in_channels + i) * geo.width + k;
          g.weight[wi] += go * x(i, pos);
          g.input(i, pos) += go * weight[wi];
        }
      }
    }
  }
  return g;
}

ComplexResponse complex_conv_power(std::span<const double> signal,
                                   const Matrix& real, const Matrix& imag) {
  const std::size_t width = real.cols();
  const std::size_t t_conv = signal.size() - width + 1;
  ComplexResponse r{Matrix(real.rows(), t_conv), Matrix(real.rows(), t_conv),
                    Matrix(real.rows(), t_conv)};
  for (std::size_t f = 0; f < real.rows(); ++f) {
    for (std::size_t t = 0; t < t_conv; ++t) {
      double re = 0.0, im = 0.0;
      for (std::size_t w = 0; w < width; ++w) {
        re += real(f, w) * signal[t + w];
        im += imag(f, w) * signal[t + w];
      }
      r.real(f, t) = re;
      r.imag(f, t) = im;
      r.power(f, t) = re * re + im * im;
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
  ComplexConvGrads g{Matrix(real.rows(), width), Matrix(real.rows(), width),
                     std::vector<double>(signal.size(), 0.0)};
  for (std::size_t f = 0; f < real.rows(); ++f) {
    for (std::size_t t = 0; t < t_conv; ++t) {
      const double d_re = 2.0 * fwd.real(f, t) * grad_power(f, t);
      const double d_im = 2.0 * fwd.imag(f, t) * grad_power(f, t);
      for (std::size_t w = 0; w < width; ++w) {
        g.real(f, w) += d_re * signal[t + w];
        g.imag(f, w) += d_im * signal[t + w];
        g.signal[t + w] += d_re * real(f, w) + d_im * imag(f, w);
      }
    }
  }
  return g;
}

Matrix lowpass_decimate(const Matrix& p, std::span<const double> window,
                        std::size_t stride) {
  const std::size_t t_out = (p.cols() - window.size()) / stride + 1;
  Matrix out(p.rows(), t_out);
  for (std::size_t f = 0; f < p.rows(); ++f) {
    for (std::size_t n = 0; n < t_out; ++n) {
      double acc = 0.0;
      for (std::size_t w = 0; w < window.size(); ++w) {
        acc += window[w] * p(f, n * stride + w);
      }
      out(f, n) = acc;
    }
  }
  return out;
}

Matrix lowpass_decimate_backward(const Matrix& grad_out,
                                 std::span<const double> window,
                                 std::size_t stride, std::size_t input_length) {
  Matrix g(grad_out.rows(), input_length);
  for (std::size_t f = 0; f < grad_out.rows(); ++f) {
    for (std::size_t n = 0; n < grad_out.cols(); ++n) {
      for (std::size_t w = 0; w < window.size(); ++w) {
        g(f, n * stride + w) += window[w] * grad_out(f, n);
      }
    }
  }
  return g;
}

}  // namespace serial
}  // namespace convsr::kernels
