// Data-parallel inner loops shared by the front-end, the acoustic model and the
// convolutional LM.
//
// Every kernel exists twice: `kernels::serial` is the plain loop nest kept as
// the reference for tests and benchmarks, and `kernels` is the OpenMP version
// used everywhere else. The fast versions compute convolutions through
// im2col + BLAS GEMM and the complex filterbank through FFTs, so they agree
// with the reference to rounding rather than bit for bit. Work is
// partitioned so that no two threads write the same output element, which
// keeps results deterministic for a fixed thread count.
#pragma once

#include <mutex>
#include <span>

#include "convsr/common.hpp"

namespace convsr::kernels {

// 1-D cross-correlation geometry. Weights are laid out [out][in][width].
struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t width = 1;
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;

  std::size_t output_length(std::size_t input_length) const;
};

struct ConvGrads {
  Matrix input;             // in_channels x T_in
  std::vector<double> weight;  // out x in x width
  std::vector<double> bias;    // out
};

// Outputs of the complex filterbank stage: the real and imaginary responses
// (kept for the backward pass) and the squared modulus.
struct ComplexResponse {
  Matrix real;
  Matrix imag;
  Matrix power;
};

struct ComplexConvGrads {
  Matrix real;                 // filters x width
  Matrix imag;                 // filters x width
  std::vector<double> signal;  // length of the input signal
};

namespace serial {

Matrix conv1d_forward(const Matrix& x, std::span<const double> weight,
                      std::span<const double> bias, const ConvGeometry& geo);
ConvGrads conv1d_backward(const Matrix& x, std::span<const double> weight,
                          const Matrix& grad_out, const ConvGeometry& geo);

ComplexResponse complex_conv_power(std::span<const double> signal,
                                   const Matrix& real, const Matrix& imag);
ComplexConvGrads complex_conv_power_backward(std::span<const double> signal,
                                             const Matrix& real,
                                             const Matrix& imag,
                                             const ComplexResponse& fwd,
                                             const Matrix& grad_power);

Matrix lowpass_decimate(const Matrix& p, std::span<const double> window,
                        std::size_t stride);
Matrix lowpass_decimate_backward(const Matrix& grad_out,
                                 std::span<const double> window,
                                 std::size_t stride, std::size_t input_length);

}  // namespace serial

Matrix conv1d_forward(const Matrix& x, std::span<const double> weight,
                      std::span<const double> bias, const ConvGeometry& geo);
ConvGrads conv1d_backward(const Matrix& x, std::span<const double> weight,
                          const Matrix& grad_out, const ConvGeometry& geo);

ComplexResponse complex_conv_power(std::span<const double> signal,
                                   const Matrix& real, const Matrix& imag);
ComplexConvGrads complex_conv_power_backward(std::span<const double> signal,
                                             const Matrix& real,
                                             const Matrix& imag,
                                             const ComplexResponse& fwd,
                                             const Matrix& grad_power);

Matrix lowpass_decimate(const Matrix& p, std::span<const double> window,
                        std::size_t stride);
Matrix lowpass_decimate_backward(const Matrix& grad_out,
                                 std::span<const double> window,
                                 std::size_t stride, std::size_t input_length);

// FFTW's planner is not thread-safe; all plan creation and destruction in
// the library happens under this lock.
std::mutex& fftw_planner_mutex();

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace convsr::kernels
