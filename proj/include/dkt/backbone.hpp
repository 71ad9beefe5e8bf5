#pragma once

// MLP feature extractor mapping raw inputs to the latent space the kernel
// operates on. Hidden layers apply the configured activation; the final layer
// is affine so the feature space stays unbounded.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkt/rng.hpp"
#include "dkt/tensor.hpp"

namespace dkt {

enum class Activation { ReLU, Tanh };

inline std::string activation_name(Activation a) {
  return a == Activation::ReLU ? "relu" : "tanh";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

struct MlpConfig {
  int input_dim = 1;
  std::vector<int> hidden_dims{40, 40};
  int output_dim = 40;
  Activation activation = Activation::ReLU;
  std::uint64_t seed = 0;

  std::vector<int> layer_dims() const {
    std::vector<int> dims;
    dims.push_back(input_dim);
    for (int h : hidden_dims) dims.push_back(h);
    dims.push_back(output_dim);
    return dims;
  }

  void validate() const {
    if (input_dim < 1 || output_dim < 1)
      throw std::invalid_argument("mlp dims must be >= 1");
    for (int h : hidden_dims)
      if (h < 1) throw std::invalid_argument("mlp dims must be >= 1");
  }
};

struct Layer {
  Tensor weight;  // out_dim × in_dim
  Tensor bias;    // out_dim × 1
};

using ParamSet = std::vector<Layer>;

// Glorot-uniform weights, zero biases; deterministic in config.seed.
inline ParamSet init_mlp(const MlpConfig& config) {
  config.validate();
  Rng rng = Rng::keyed(config.seed, rng_stream::kInit, 0);
  const std::vector<int> dims = config.layer_dims();
  ParamSet params;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int fan_in = dims[i], fan_out = dims[i + 1];
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> w(static_cast<std::size_t>(fan_out) * fan_in);
    for (double& v : w) v = rng.uniform(-a, a);
    params.push_back({Tensor::from(fan_out, fan_in, std::move(w), true),
                      Tensor::zeros(fan_out, 1, true)});
  }
  return params;
}

inline Tensor apply_activation(Activation act, const Tensor& t) {
  return act == Activation::ReLU ? relu(t) : tanh(t);
}

// x: n×J rows of inputs → n×K rows of features.
inline Tensor forward(const MlpConfig& config, const ParamSet& params, const Tensor& x) {
  if (x.cols() != config.input_dim)
    throw shape_error("mlp forward: input has " + std::to_string(x.cols()) +
                      " columns, expected " + std::to_string(config.input_dim));
  Tensor h = x;
  for (std::size_t i = 0; i < params.size(); ++i) {
    h = add_rowvec(matmul(h, transpose(params[i].weight)), transpose(params[i].bias));
    if (i + 1 < params.size()) h = apply_activation(config.activation, h);
  }
  return h;
}

struct Backbone {
  MlpConfig config;
  ParamSet params;

  static Backbone make(const MlpConfig& config) { return {config, init_mlp(config)}; }

  Tensor operator()(const Tensor& x) const { return forward(config, params, x); }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const Layer& l : params) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  Backbone clone(bool requires_grad) const {
    Backbone b;
    b.config = config;
    for (const Layer& l : params)
      b.params.push_back({l.weight.clone(requires_grad), l.bias.clone(requires_grad)});
    return b;
  }
};

inline std::size_t param_count(const ParamSet& params) {
  std::size_t n = 0;
  for (const Layer& l : params) n += l.weight.size() + l.bias.size();
  return n;
}

inline std::vector<double> flatten_params(const ParamSet& params) {
  std::vector<double> flat;
  flat.reserve(param_count(params));
  for (const Layer& l : params) {
    flat.insert(flat.end(), l.weight.values().begin(), l.weight.values().end());
    flat.insert(flat.end(), l.bias.values().begin(), l.bias.values().end());
  }
  return flat;
}

inline ParamSet unflatten_params(const MlpConfig& config, std::span<const double> flat) {
  const std::vector<int> dims = config.layer_dims();
  std::size_t expected = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    expected += static_cast<std::size_t>(dims[i + 1]) * dims[i] + dims[i + 1];
  if (flat.size() != expected)
    throw std::invalid_argument("unflatten_params: got " + std::to_string(flat.size()) +
                                " values, expected " + std::to_string(expected));
  ParamSet params;
  std::size_t pos = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int fan_in = dims[i], fan_out = dims[i + 1];
    std::vector<double> w(flat.begin() + pos, flat.begin() + pos + static_cast<std::size_t>(fan_out) * fan_in);
    pos += static_cast<std::size_t>(fan_out) * fan_in;
    std::vector<double> b(flat.begin() + pos, flat.begin() + pos + fan_out);
    pos += fan_out;
    params.push_back({Tensor::from(fan_out, fan_in, std::move(w), true),
                      Tensor::from(fan_out, 1, std::move(b), true)});
  }
  return params;
}

}  // namespace dkt
