#include "convsr/nn.hpp"

namespace convsr::nn {

Matrix glu(const Matrix& pre) {
  if (pre.rows() % 2 != 0)
    throw Error(ErrorKind::kConfiguration,
                "GLU needs an even channel count, got " + std::to_string(pre.rows()));
  const std::size_t c = pre.rows() / 2;
  Matrix out(c, pre.cols());
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t t = 0; t < pre.cols(); ++t)
      out(i, t) = pre(i, t) * sigmoid(pre(i + c, t));
  return out;
}

Matrix glu_backward(const Matrix& pre, const Matrix& grad_out) {
  const std::size_t c = pre.rows() / 2;
  Matrix g(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t t = 0; t < pre.cols(); ++t) {
      const double s = sigmoid(pre(i + c, t));
      const double go = grad_out(i, t);
      g(i, t) = go * s;
      g(i + c, t) = go * pre(i, t) * s * (1.0 - s);
    }
  }
  return g;
}

Matrix log_softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double z = log_sum_exp(x.row(r));
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) - z;
  }
  return out;
}

Matrix log_softmax_rows_backward(const Matrix& out, const Matrix& grad_out) {
  Matrix g(out.rows(), out.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double s = 0.0;
    for (double v : grad_out.row(r)) s += v;
    for (std::size_t c = 0; c < out.cols(); ++c)
      g(r, c) = grad_out(r, c) - std::exp(out(r, c)) * s;
  }
  return g;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, std::mt19937_64& rng) {
  Matrix mask(rows, cols, 1.0);
  if (p <= 0.0) return mask;
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  for (auto& v : mask.values()) v = keep(rng) ? scale : 0.0;
  return mask;
}

WeightNormConv::WeightNormConv(const kernels::ConvGeometry& geo, std::mt19937_64& rng)
    : geo_(geo) {
  const std::size_t fan_in = geo.in_channels * geo.width;
  v_.resize(geo.out_channels * fan_in);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& x : v_) x = dist(rng);
  // Unit-norm rows give effective weights with variance ~ 1/fan_in.
  g_.assign(geo.out_channels, 1.0);
  b_.assign(geo.out_channels, 0.0);
}

std::vector<double> WeightNormConv::effective_weight() const {
  const std::size_t fan_in = geo_.in_channels * geo_.width;
  std::vector<double> w(v_.size());
  for (std::size_t o = 0; o < geo_.out_channels; ++o) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < fan_in; ++j) n2 += v_[o * fan_in + j] * v_[o * fan_in + j];
    if (!(n2 > 0.0))
      throw Error(ErrorKind::kDomain, "weight-norm direction has zero norm");
    const double scale = g_[o] / std::sqrt(n2);
    for (std::size_t j = 0; j < fan_in; ++j) w[o * fan_in + j] = scale * v_[o * fan_in + j];
  }
  return w;
}

Matrix WeightNormConv::forward(const Matrix& x) const {
  if (x.rows() != geo_.in_channels)
    throw Error(ErrorKind::kDimension, "conv expects " + std::to_string(geo_.in_channels) +
                                           " input channels, got " + std::to_string(x.rows()));
  const auto w = effective_weight();
  return kernels::conv1d_forward(x, w, b_, geo_);
}

WeightNormConv::Grads WeightNormConv::backward(const Matrix& x, const Matrix& grad_out) const {
  if (grad_out.rows() != geo_.out_channels || grad_out.cols() != geo_.output_length(x.cols()))
    throw Error(ErrorKind::kDimension, "conv upstream gradient has the wrong shape");
  const auto w = effective_weight();
  auto cg = kernels::conv1d_backward(x, w, grad_out, geo_);
  const std::size_t fan_in = geo_.in_channels * geo_.width;
  Grads out;
  out.v.resize(v_.size());
  out.g.resize(g_.size());
  for (std::size_t o = 0; o < geo_.out_channels; ++o) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < fan_in; ++j) n2 += v_[o * fan_in + j] * v_[o * fan_in + j];
    const double norm = std::sqrt(n2);
    // dg = dW . u,  dv = (g / |v|) (dW - dg u),  u = v / |v|
    double dg = 0.0;
    for (std::size_t j = 0; j < fan_in; ++j) dg += cg.weight[o * fan_in + j] * v_[o * fan_in + j];
    dg /= norm;
    out.g[o] = dg;
    const double scale = g_[o] / norm;
    for (std::size_t j = 0; j < fan_in; ++j) {
      const double u = v_[o * fan_in + j] / norm;
      out.v[o * fan_in + j] = scale * (cg.weight[o * fan_in + j] - dg * u);
    }
  }
  out.b = std::move(cg.bias);
  out.input = std::move(cg.input);
  return out;
}

void WeightNormConv::append_parameters(const std::string& prefix, ParameterList& out) {
  out.push_back({prefix + ".v", std::span<double>(v_)});
  out.push_back({prefix + ".g", std::span<double>(g_)});
  out.push_back({prefix + ".b", std::span<double>(b_)});
}

void WeightNormConv::append_gradients(Grads&& g, GradientList& out) {
  out.push_back(std::move(g.v));
  out.push_back(std::move(g.g));
  out.push_back(std::move(g.b));
}

}  // namespace convsr::nn
