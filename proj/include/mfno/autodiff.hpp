#pragma once

// Reverse-mode differentiation over a small fixed set of tensor primitives.
//
// A Tape owns every intermediate value of one forward evaluation. Each
// recorded node keeps a closure that maps its output gradient to gradients of
// its parents; Tape::backward replays those closures in exact reverse order
// of recording. Leaves created with requires_grad = false (constants, frozen
// parameters) never receive gradients and nodes depending only on them record
// no closure.

#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "mfno/spectral.hpp"
#include "mfno/tensor.hpp"

namespace mfno::ad {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Var leaf(Tensor<T> value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}); }

  Var record(Tensor<T> value, bool requires_grad, Backward backward) {
    if (!all_finite(value)) throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated at `v` by the last backward pass, or nullptr if none reached it.
  const Tensor<T>* grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.has_grad ? &n.grad : nullptr;
  }

  void accumulate(Var v, Tensor<T> g) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
      return;
    }
    detail::require_same_shape(n.grad.shape(), g.shape(), "gradient accumulation");
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  void backward(Var root, const Tensor<T>& seed) {
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    order_.clear();
    detail::require_same_shape(value(root).shape(), seed.shape(), "backward seed");
    accumulate(root, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      order_.push_back(i);
      Tensor<T> g = std::move(n.grad);  // closures may grow nodes_' grads; keep ours off the node meanwhile
      nodes_[i].backward(*this, g);
      nodes_[i].grad = std::move(g);
    }
  }

  /// Scalar root: seeds with `scale`.
  void backward(Var root, T scale = T(1)) { backward(root, Tensor<T>(value(root).shape(), scale)); }

  /// Node ids whose closures ran during the last backward pass, in execution order.
  const std::vector<std::size_t>& last_backward_order() const { return order_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Primitives.

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(mfno::add(tape.value(a), tape.value(b)), rg, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class T>
Var channel_linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.record(mfno::channel_linear(tape.value(x), tape.value(weight), tape.value(bias)), rg,
                     [x, weight, bias](Tape<T>& t, const Tensor<T>& g) {
                       const bool nx = t.requires_grad(x);
                       const bool np = t.requires_grad(weight) || t.requires_grad(bias);
                       auto grads = channel_linear_vjp(t.value(x), t.value(weight), g, nx, np);
                       if (nx) t.accumulate(x, std::move(grads.x));
                       if (np) {
                         t.accumulate(weight, std::move(grads.weight));
                         t.accumulate(bias, std::move(grads.bias));
                       }
                     });
}

template <class T>
Var gelu(Tape<T>& tape, Var x) {
  return tape.record(mfno::gelu(tape.value(x)), tape.requires_grad(x),
                     [x](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x, gelu_vjp(t.value(x), g)); });
}

template <class T>
Var pad_spatial(Tape<T>& tape, Var x, std::vector<std::size_t> pads) {
  auto out = mfno::pad_spatial(tape.value(x), std::span<const std::size_t>(pads));
  return tape.record(std::move(out), tape.requires_grad(x), [x, pads](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, depad_spatial(g, std::span<const std::size_t>(pads)));
  });
}

template <class T>
Var depad_spatial(Tape<T>& tape, Var x, std::vector<std::size_t> pads) {
  auto out = mfno::depad_spatial(tape.value(x), std::span<const std::size_t>(pads));
  return tape.record(std::move(out), tape.requires_grad(x), [x, pads](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, mfno::pad_spatial(g, std::span<const std::size_t>(pads)));
  });
}

template <class T>
Var concat_coordinates(Tape<T>& tape, Var x) {
  const std::size_t c = tape.value(x).shape().back();
  return tape.record(mfno::concat_coordinates(tape.value(x)), tape.requires_grad(x),
                     [x, c](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x, concat_coordinates_vjp(g, c)); });
}

/// Fourier-space kernel operator; `weights` is the interleaved real view of R.
template <class T>
Var spectral_conv(Tape<T>& tape, std::shared_ptr<const SpectralConvKernel<T>> kernel, Var v, Var weights) {
  const bool rg = tape.requires_grad(v) || tape.requires_grad(weights);
  auto saved = std::make_shared<SpectralConvSaved<T>>();
  auto out = mfno::spectral_conv(*kernel, tape.value(v), tape.value(weights), rg ? saved.get() : nullptr);
  return tape.record(std::move(out), rg, [kernel, v, weights, saved](Tape<T>& t, const Tensor<T>& g) {
    const bool nv = t.requires_grad(v), nw = t.requires_grad(weights);
    auto grads = spectral_conv_vjp(*kernel, t.value(v), t.value(weights), g, saved.get(), nv, nw);
    if (nv) t.accumulate(v, std::move(grads.input));
    if (nw) t.accumulate(weights, std::move(grads.weights));
  });
}

template <class T>
Var lp_norm(Tape<T>& tape, Var x, double p) {
  Tensor<T> out(Shape{}, mfno::lp_norm(tape.value(x), p));
  return tape.record(std::move(out), tape.requires_grad(x), [x, p](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, lp_norm_vjp(t.value(x), p, g[0]));
  });
}

/// ||truth - pred||_p / ||truth||_p, differentiable in pred only.
template <class T>
Var relative_lp_loss(Tape<T>& tape, const Tensor<T>& truth, Var pred, double p) {
  const auto& pv = tape.value(pred);
  detail::require_same_shape(truth.shape(), pv.shape(), "relative_lp_loss");
  const double denom = double(mfno::lp_norm(truth, p));
  if (!(denom > 0.0)) throw DataError("relative_lp_loss: truth has zero norm (degenerate sample)");
  auto diff = std::make_shared<Tensor<T>>(truth.shape());
  for (std::size_t i = 0; i < truth.size(); ++i) (*diff)[i] = truth[i] - pv[i];
  Tensor<T> out(Shape{}, T(double(mfno::lp_norm(*diff, p)) / denom));
  return tape.record(std::move(out), tape.requires_grad(pred), [pred, p, diff, denom](Tape<T>& t, const Tensor<T>& g) {
    auto gd = lp_norm_vjp(*diff, p, T(double(g[0]) / denom));
    for (auto& v : gd.storage()) v = -v;
    t.accumulate(pred, gd);
  });
}

}  // namespace mfno::ad
