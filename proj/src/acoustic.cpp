#include "convsr/acoustic.hpp"

namespace convsr::acoustic {

void AcousticModelConfig::validate() const {
  if (layers.empty()) throw Error(ErrorKind::kConfiguration, "acoustic model needs >= 1 layer");
  if (alphabet_size < 2) throw Error(ErrorKind::kConfiguration, "alphabet size must be >= 2");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_channels < 1 || l.out_channels < 1 || l.kernel_width < 1 || l.stride < 1)
      throw Error(ErrorKind::kConfiguration, "layer " + std::to_string(i) + " has a zero size");
    if (!(l.dropout_rate >= 0.0 && l.dropout_rate < 1.0))
      throw Error(ErrorKind::kConfiguration, "layer " + std::to_string(i) + " dropout not in [0,1)");
    if (i > 0 && layers[i - 1].out_channels != l.in_channels)
      throw Error(ErrorKind::kConfiguration,
                  "layer " + std::to_string(i) + " input channels do not match previous output");
  }
}

AcousticModelConfig AcousticModelConfig::desk_default(std::size_t input_channels,
                                                      std::size_t alphabet_size) {
  AcousticModelConfig c;
  c.alphabet_size = alphabet_size;
  std::size_t in = input_channels;
  for (std::size_t out : {32, 64, 96, 128}) {
    c.layers.push_back({in, out, 13, 1, 0.25});
    in = out;
  }
  return c;
}

AcousticModel::AcousticModel(const AcousticModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  for (const auto& l : config_.layers) {
    kernels::ConvGeometry geo;
    geo.in_channels = l.in_channels;
    geo.out_channels = 2 * l.out_channels;
    geo.width = l.kernel_width;
    geo.stride = l.stride;
    geo.pad_left = geo.pad_right = l.kernel_width / 2;
    layers_.emplace_back(geo, rng);
  }
  kernels::ConvGeometry proj;
  proj.in_channels = config_.layers.back().out_channels;
  proj.out_channels = config_.alphabet_size;
  projection_ = nn::WeightNormConv(proj, rng);
}

EmissionTable AcousticModel::forward(const frontend::FeatureMap& features, bool normalized,
                                     std::mt19937_64* training_rng, ForwardTrace* trace) const {
  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  tr.normalized = normalized;
  Matrix h = features.values;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    tr.inputs.push_back(h);
    Matrix pre = layers_[i].forward(h);
    h = nn::glu(pre);
    tr.pre.push_back(std::move(pre));
    if (training_rng && config_.layers[i].dropout_rate > 0.0) {
      Matrix mask = nn::dropout_mask(h.rows(), h.cols(), config_.layers[i].dropout_rate,
                                     *training_rng);
      for (std::size_t j = 0; j < h.size(); ++j) h.data()[j] *= mask.data()[j];
      tr.masks.push_back(std::move(mask));
    } else {
      tr.masks.emplace_back();
    }
  }
  tr.inputs.push_back(h);
  Matrix logits = nn::transpose(projection_.forward(h));  // frames x letters
  tr.output = normalized ? nn::log_softmax_rows(logits) : std::move(logits);
  return {tr.output, normalized};
}

AcousticModel::Gradients AcousticModel::backward(const ForwardTrace& trace,
                                                 const Matrix& grad_emissions) const {
  if (grad_emissions.rows() != trace.output.rows() ||
      grad_emissions.cols() != trace.output.cols())
    throw Error(ErrorKind::kDimension, "emission gradient shape does not match forward output");

  Matrix g = trace.normalized ? nn::log_softmax_rows_backward(trace.output, grad_emissions)
                              : grad_emissions;
  g = nn::transpose(g);

  std::vector<nn::WeightNormConv::Grads> layer_grads(layers_.size());
  auto proj_grads = projection_.backward(trace.inputs.back(), g);
  g = std::move(proj_grads.input);
  for (std::size_t k = layers_.size(); k-- > 0;) {
    if (!trace.masks[k].empty())
      for (std::size_t j = 0; j < g.size(); ++j) g.data()[j] *= trace.masks[k].data()[j];
    Matrix g_pre = nn::glu_backward(trace.pre[k], g);
    layer_grads[k] = layers_[k].backward(trace.inputs[k], g_pre);
    g = std::move(layer_grads[k].input);
  }

  Gradients out;
  for (auto& lg : layer_grads) nn::WeightNormConv::append_gradients(std::move(lg), out.params);
  nn::WeightNormConv::append_gradients(std::move(proj_grads), out.params);
  out.input = std::move(g);
  return out;
}

ParameterList AcousticModel::parameters() {
  ParameterList p;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].append_parameters("am.layer" + std::to_string(i), p);
  projection_.append_parameters("am.proj", p);
  return p;
}

}  // namespace convsr::acoustic
