// Named views over trainable tensors and the first-order optimizers that
// update them.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "convsr/common.hpp"

namespace convsr {

struct ParamRef {
  std::string name;
  std::span<double> values;
};

using ParameterList = std::vector<ParamRef>;
// One gradient buffer per entry of a ParameterList, same order and sizes.
using GradientList = std::vector<std::vector<double>>;

GradientList zeros_like(const ParameterList& params);
void accumulate(GradientList& into, const GradientList& g, double scale = 1.0);
double global_norm(const GradientList& g);

// Rescales g in place so its global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_global_norm(GradientList& g, double max_norm);

enum class MomentumKind { kClassical, kNesterov };

struct OptimizerSettings {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double clip = 0.2;  // <= 0 disables clipping
  MomentumKind kind = MomentumKind::kClassical;
};

// SGD with momentum and global-norm clipping.
//   classical: m <- mu m + g;  p <- p - lr m
//   nesterov:  m <- mu m + g;  p <- p - lr (g + mu m)
class Sgd {
 public:
  explicit Sgd(OptimizerSettings settings) : settings_(settings) {}

  // Throws kTrainingDivergence on non-finite gradients; parameters are left
  // untouched in that case.
  void step(const ParameterList& params, GradientList grads);

  double learning_rate() const { return settings_.learning_rate; }
  void set_learning_rate(double lr) { settings_.learning_rate = lr; }
  const OptimizerSettings& settings() const { return settings_; }
  const GradientList& momentum_buffers() const { return buffers_; }

 private:
  OptimizerSettings settings_;
  GradientList buffers_;
};

// Halves the learning rate whenever the monitored loss fails to improve by
// more than `min_delta` for `patience` consecutive observations.
class PlateauDecay {
 public:
  PlateauDecay(double factor = 0.5, int patience = 1, double min_delta = 1e-4)
      : factor_(factor), patience_(patience), min_delta_(min_delta) {}

  // Returns the (possibly reduced) learning rate.
  double observe(double loss, double lr);

 private:
  double factor_;
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace convsr
