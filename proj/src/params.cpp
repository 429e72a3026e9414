#include "convsr/params.hpp"

namespace convsr {

GradientList zeros_like(const ParameterList& params) {
  GradientList g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.values.size(), 0.0);
  return g;
}

void accumulate(GradientList& into, const GradientList& g, double scale) {
  if (into.size() != g.size())
    throw Error(ErrorKind::kDimension, "gradient list length mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (into[i].size() != g[i].size())
      throw Error(ErrorKind::kDimension, "gradient tensor size mismatch");
    for (std::size_t j = 0; j < g[i].size(); ++j) into[i][j] += scale * g[i][j];
  }
}

double global_norm(const GradientList& g) {
  double s = 0.0;
  for (const auto& t : g)
    for (double v : t) s += v * v;
  return std::sqrt(s);
}

double clip_global_norm(GradientList& g, double max_norm) {
  const double norm = global_norm(g);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& t : g)
      for (double& v : t) v *= scale;
  }
  return norm;
}

void Sgd::step(const ParameterList& params, GradientList grads) {
  if (grads.size() != params.size())
    throw Error(ErrorKind::kDimension, "gradient list does not match parameters");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm))
    throw Error(ErrorKind::kTrainingDivergence, "non-finite gradient norm");
  if (settings_.clip > 0.0) clip_global_norm(grads, settings_.clip);

  if (buffers_.empty()) buffers_ = zeros_like(params);
  const double lr = settings_.learning_rate;
  const double mu = settings_.momentum;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = buffers_[i];
    const auto& g = grads[i];
    auto p = params[i].values;
    if (m.size() != p.size() || g.size() != p.size())
      throw Error(ErrorKind::kDimension, "size mismatch for " + params[i].name);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = mu * m[j] + g[j];
      const double dir =
          settings_.kind == MomentumKind::kNesterov ? g[j] + mu * m[j] : m[j];
      p[j] -= lr * dir;
    }
  }
}

double PlateauDecay::observe(double loss, double lr) {
  if (loss < best_ - min_delta_) {
    best_ = loss;
    bad_ = 0;
    return lr;
  }
  if (++bad_ >= patience_) {
    bad_ = 0;
    return lr * factor_;
  }
  return lr;
}

}  // namespace convsr
