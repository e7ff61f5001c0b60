#pragma once

// Fourier neural operator: coordinate concat + lifting, padded Fourier layers
// v <- act(W v + K v), de-padding and projection. Parameter shapes never
// depend on the grid, so one parameter set evaluates at any resolution whose
// padded extents can hold the kept modes.

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "mfno/autodiff.hpp"
#include "mfno/random.hpp"
#include "mfno/spectral.hpp"
#include "mfno/tensor.hpp"

namespace mfno {

enum class Activation { gelu, identity };

inline std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "identity"; }
inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

struct FnoConfig {
  std::size_t in_channels = 4;
  std::size_t width = 16;
  std::size_t n_layers = 4;
  ModeSpec modes{{20, 20, 10}};
  std::size_t padding = 6;
  std::size_t out_channels = 1;
  Activation activation = Activation::gelu;

  static constexpr std::size_t coord_channels = 3;

  void validate() const {
    if (in_channels == 0 || width == 0 || n_layers == 0 || out_channels == 0)
      throw ConfigError("FNO channel counts and layer count must be positive");
    for (auto k : modes.kept)
      if (k == 0) throw ConfigError("FNO mode counts must be positive");
  }

  std::array<std::size_t, 3> padded(const std::array<std::size_t, 3>& grid) const {
    return {grid[0] + 2 * padding, grid[1] + 2 * padding, grid[2] + 2 * padding};
  }

  bool operator==(const FnoConfig&) const = default;
};

template <class T>
struct FourierLayerParams {
  SpectralWeights<T> spectral;
  Tensor<T> weight;  // [width, width]
  Tensor<T> bias;    // [width]
};

template <class T>
struct FnoParams {
  Tensor<T> lift_weight, lift_bias;
  std::vector<FourierLayerParams<T>> layers;
  Tensor<T> project_weight, project_bias;
};

template <class T>
using ParamGrads = std::map<std::string, Tensor<T>>;

/// Stable (name, tensor) listing; spectral weights appear as interleaved real views.
template <class T>
std::vector<std::pair<std::string, Tensor<T>>> named_parameters(const FnoParams<T>& p) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("lift.weight", p.lift_weight);
  out.emplace_back("lift.bias", p.lift_bias);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "spectral", as_real(p.layers[l].spectral.r));
    out.emplace_back(pre + "linear.weight", p.layers[l].weight);
    out.emplace_back(pre + "linear.bias", p.layers[l].bias);
  }
  out.emplace_back("project.weight", p.project_weight);
  out.emplace_back("project.bias", p.project_bias);
  return out;
}

/// Rebuilds parameters from named tensors, checking every shape against the config.
template <class T>
FnoParams<T> params_from_named(const FnoConfig& cfg, const std::map<std::string, Tensor<T>>& named) {
  auto take = [&](const std::string& name, const Shape& expected) -> const Tensor<T>& {
    auto it = named.find(name);
    if (it == named.end()) throw DataError("missing parameter tensor '" + name + "'");
    if (it->second.shape() != expected)
      throw DataError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                      shape_str(expected));
    return it->second;
  };
  const std::size_t w = cfg.width;
  FnoParams<T> p;
  p.lift_weight = take("lift.weight", {cfg.in_channels + FnoConfig::coord_channels, w});
  p.lift_bias = take("lift.bias", {w});
  Shape rshape = cfg.modes.weight_shape(w, w);
  rshape.push_back(2);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    FourierLayerParams<T> layer;
    layer.spectral.r = as_complex(take(pre + "spectral", rshape));
    layer.weight = take(pre + "linear.weight", {w, w});
    layer.bias = take(pre + "linear.bias", {w});
    p.layers.push_back(std::move(layer));
  }
  p.project_weight = take("project.weight", {w, cfg.out_channels});
  p.project_bias = take("project.bias", {cfg.out_channels});
  return p;
}

template <class T>
FnoParams<T> params_from_named(const FnoConfig& cfg, const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  return params_from_named(cfg, std::map<std::string, Tensor<T>>(named.begin(), named.end()));
}

/// Spectral R uniform on the complex disc of radius 1/(c_in c_out); linear
/// weights uniform in +-1/sqrt(fan_in); biases zero.
template <class T>
FnoParams<T> init_params(const FnoConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x464e4f));
  auto linear = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor<T> w({fan_in, fan_out});
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : w.storage()) v = T(rng.uniform(-bound, bound));
    return w;
  };
  FnoParams<T> p;
  const std::size_t w = cfg.width;
  p.lift_weight = linear(cfg.in_channels + FnoConfig::coord_channels, w);
  p.lift_bias = Tensor<T>({w});
  const double radius = 1.0 / double(w * w);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    FourierLayerParams<T> layer;
    layer.spectral.r = ComplexTensor<T>(cfg.modes.weight_shape(w, w));
    for (auto& z : layer.spectral.r.data()) {
      const double r = radius * std::sqrt(rng.uniform());
      const double th = 2.0 * std::numbers::pi * rng.uniform();
      z = {T(r * std::cos(th)), T(r * std::sin(th))};
    }
    layer.weight = linear(w, w);
    layer.bias = Tensor<T>({w});
    p.layers.push_back(std::move(layer));
  }
  p.project_weight = linear(w, cfg.out_channels);
  p.project_bias = Tensor<T>({cfg.out_channels});
  return p;
}

template <class T>
FnoParams<T> zero_like(const FnoConfig& cfg) {
  auto p = init_params<T>(cfg, 0);
  auto named = named_parameters(p);
  for (auto& [n, t] : named) std::fill(t.storage().begin(), t.storage().end(), T(0));
  return params_from_named(cfg, named);
}

/// Shared spectral kernels keyed by padded extents and modes.
template <class T>
std::shared_ptr<const SpectralConvKernel<T>> spectral_kernel(const std::array<std::size_t, 3>& extents,
                                                             const ModeSpec& modes) {
  static std::mutex mutex;
  static std::map<std::tuple<std::array<std::size_t, 3>, std::array<std::size_t, 3>>,
                  std::shared_ptr<const SpectralConvKernel<T>>>
      cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{extents, modes.kept}];
  if (!slot) slot = std::make_shared<const SpectralConvKernel<T>>(extents, modes);
  return slot;
}

/// Intermediate shapes of one evaluation, in pipeline order.
struct ShapeTrace {
  std::vector<std::pair<std::string, Shape>> rows;
};

/// Tape handles of every parameter tensor.
struct FnoParamVars {
  std::map<std::string, ad::Var> by_name;
  const ad::Var& operator[](const std::string& n) const { return by_name.at(n); }
};

template <class T>
FnoParamVars bind_parameters(ad::Tape<T>& tape, const FnoParams<T>& params, const std::set<std::string>& frozen = {},
                             bool requires_grad = true) {
  FnoParamVars vars;
  for (auto& [name, t] : named_parameters(params))
    vars.by_name[name] = tape.leaf(std::move(t), requires_grad && !frozen.contains(name));
  return vars;
}

/// Records the operator graph on `tape` and returns the output handle.
template <class T>
ad::Var fno_graph(ad::Tape<T>& tape, const FnoConfig& cfg, const FnoParamVars& vars, ad::Var input,
                  ShapeTrace* trace = nullptr) {
  const auto& in = tape.value(input);
  if (in.rank() != 4 || in.shape().back() != cfg.in_channels)
    throw DataError("fno: expected input [nx, ny, nz, " + std::to_string(cfg.in_channels) + "], got " +
                    shape_str(in.shape()));
  const std::array<std::size_t, 3> grid{in.dim(0), in.dim(1), in.dim(2)};
  const auto padded = cfg.padded(grid);
  for (std::size_t a = 0; a < 3; ++a)
    if (cfg.modes.kept[a] > padded[a] / 2)
      throw ConfigError("fno: " + std::to_string(cfg.modes.kept[a]) + " modes on axis " + std::to_string(a) +
                        " need a grid extent of at least " +
                        std::to_string(2 * cfg.modes.kept[a] > 2 * cfg.padding ? 2 * cfg.modes.kept[a] - 2 * cfg.padding : 1) +
                        ", got " + std::to_string(grid[a]));
  auto note = [&](const char* what, ad::Var v) {
    if (trace) trace->rows.emplace_back(what, tape.value(v).shape());
  };
  note("input", input);
  auto v = ad::concat_coordinates(tape, input);
  v = ad::channel_linear(tape, v, vars["lift.weight"], vars["lift.bias"]);
  note("lifting", v);
  const std::vector<std::size_t> pads(3, cfg.padding);
  v = ad::pad_spatial(tape, v, pads);
  note("padding", v);
  const auto kernel = spectral_kernel<T>(padded, cfg.modes);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    auto lin = ad::channel_linear(tape, v, vars[pre + "linear.weight"], vars[pre + "linear.bias"]);
    auto spec = ad::spectral_conv(tape, kernel, v, vars[pre + "spectral"]);
    v = ad::add(tape, lin, spec);
    if (l + 1 < cfg.n_layers && cfg.activation == Activation::gelu) v = ad::gelu(tape, v);
    if (trace) trace->rows.emplace_back("fourier " + std::to_string(l + 1), tape.value(v).shape());
  }
  v = ad::depad_spatial(tape, v, pads);
  note("de-padding", v);
  v = ad::channel_linear(tape, v, vars["project.weight"], vars["project.bias"]);
  note("projection", v);
  return v;
}

template <class T>
Tensor<T> forward(const FnoConfig& cfg, const FnoParams<T>& params, const Tensor<T>& input,
                  ShapeTrace* trace = nullptr) {
  ad::Tape<T> tape;
  auto vars = bind_parameters(tape, params, {}, false);
  auto in = tape.leaf(input, false);
  auto out = fno_graph(tape, cfg, vars, in, trace);
  return tape.value(out);
}

template <class T>
struct FnoGradients {
  ParamGrads<T> params;  // frozen parameters are absent
  Tensor<T> input;
};

/// Vector-Jacobian product of forward with `upstream`.
template <class T>
FnoGradients<T> backward(const FnoConfig& cfg, const FnoParams<T>& params, const Tensor<T>& input,
                         const Tensor<T>& upstream, const std::set<std::string>& frozen = {}) {
  ad::Tape<T> tape;
  auto vars = bind_parameters(tape, params, frozen, true);
  auto in = tape.leaf(input, true);
  auto out = fno_graph(tape, cfg, vars, in);
  tape.backward(out, upstream);
  FnoGradients<T> g;
  for (auto& [name, var] : vars.by_name) {
    if (frozen.contains(name)) continue;
    const Tensor<T>* gv = tape.grad(var);
    g.params[name] = gv ? *gv : Tensor<T>(tape.value(var).shape());
  }
  g.input = tape.grad(in) ? *tape.grad(in) : Tensor<T>(input.shape());
  return g;
}

}  // namespace mfno
