// Conv-GLU acoustic model: feature map (channels x frames) -> emission table
// (frames x letters).
#pragma once

#include <random>
#include <vector>

#include "convsr/common.hpp"
#include "convsr/frontend.hpp"
#include "convsr/nn.hpp"
#include "convsr/params.hpp"

namespace convsr::acoustic {

struct ConvLayerSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;  // after GLU; the convolution emits twice this
  std::size_t kernel_width = 13;
  std::size_t stride = 1;
  double dropout_rate = 0.25;
};

struct AcousticModelConfig {
  std::vector<ConvLayerSpec> layers;
  std::size_t alphabet_size = 0;

  void validate() const;

  // Four conv-GLU layers 32 -> 64 -> 96 -> 128, width 13, dropout 0.25.
  static AcousticModelConfig desk_default(std::size_t input_channels,
                                          std::size_t alphabet_size);
};

// scores(t, i) is the score of letter i at frame t.
struct EmissionTable {
  Matrix scores;
  bool normalized = false;

  std::size_t frames() const { return scores.rows(); }
  std::size_t letters() const { return scores.cols(); }
};

struct ForwardTrace {
  std::vector<Matrix> inputs;  // input to each conv-GLU layer, then projection
  std::vector<Matrix> pre;     // conv outputs before GLU
  std::vector<Matrix> masks;   // dropout masks (empty when not training)
  Matrix output;               // letters x frames, after optional log-softmax
  bool normalized = false;
};

class AcousticModel {
 public:
  AcousticModel() = default;
  AcousticModel(const AcousticModelConfig& config, std::uint64_t seed);

  const AcousticModelConfig& config() const { return config_; }
  std::size_t input_channels() const { return config_.layers.front().in_channels; }

  // Dropout is drawn from `rng` only when training; pass nullptr otherwise.
  EmissionTable forward(const frontend::FeatureMap& features, bool normalized,
                        std::mt19937_64* training_rng = nullptr,
                        ForwardTrace* trace = nullptr) const;

  struct Gradients {
    GradientList params;  // aligned with parameters()
    Matrix input;         // channels x frames
  };
  Gradients backward(const ForwardTrace& trace, const Matrix& grad_emissions) const;

  ParameterList parameters();

  std::vector<nn::WeightNormConv>& layers() { return layers_; }
  nn::WeightNormConv& projection() { return projection_; }

 private:
  AcousticModelConfig config_;
  std::vector<nn::WeightNormConv> layers_;
  nn::WeightNormConv projection_;
};

}  // namespace convsr::acoustic
