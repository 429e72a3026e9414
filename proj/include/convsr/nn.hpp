// Layers shared by the acoustic model and the convolutional LM.
#pragma once

#include <random>
#include <string>

#include "convsr/common.hpp"
#include "convsr/kernels.hpp"
#include "convsr/params.hpp"

namespace convsr::nn {

// out[i][t] = a[i][t] * sigmoid(b[i][t]); a is the first half of the rows.
Matrix glu(const Matrix& pre);
Matrix glu_backward(const Matrix& pre, const Matrix& grad_out);

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Row-wise log-softmax (each row is one distribution).
Matrix log_softmax_rows(const Matrix& x);
Matrix log_softmax_rows_backward(const Matrix& out, const Matrix& grad_out);

Matrix transpose(const Matrix& m);

// Inverted dropout mask: entries are 0 or 1/(1-p).
Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, std::mt19937_64& rng);

// 1-D convolution whose weight is g * v / ||v|| per output channel.
class WeightNormConv {
 public:
  WeightNormConv() = default;
  WeightNormConv(const kernels::ConvGeometry& geo, std::mt19937_64& rng);

  const kernels::ConvGeometry& geometry() const { return geo_; }
  std::vector<double> effective_weight() const;

  Matrix forward(const Matrix& x) const;

  struct Grads {
    std::vector<double> v, g, b;
    Matrix input;
  };
  Grads backward(const Matrix& x, const Matrix& grad_out) const;

  // Tensors named prefix + ".v", ".g", ".b".
  void append_parameters(const std::string& prefix, ParameterList& out);
  static void append_gradients(Grads&& g, GradientList& out);

  std::vector<double>& direction() { return v_; }
  std::vector<double>& magnitude() { return g_; }
  std::vector<double>& bias() { return b_; }
  const std::vector<double>& direction() const { return v_; }
  const std::vector<double>& magnitude() const { return g_; }
  const std::vector<double>& bias() const { return b_; }

 private:
  kernels::ConvGeometry geo_;
  std::vector<double> v_;
  std::vector<double> g_;
  std::vector<double> b_;
};

}  // namespace convsr::nn
