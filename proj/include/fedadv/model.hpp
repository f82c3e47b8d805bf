#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedadv/errors.hpp"
#include "fedadv/rng.hpp"
#include "fedadv/tensor.hpp"

namespace fedadv {

enum class Activation { relu, identity };

inline const char* to_string(Activation a) noexcept {
  return a == Activation::relu ? "relu" : "identity";
}

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::relu;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Activation activation = Activation::relu;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

using Layer = std::variant<Dense, Conv2d>;

// Channel-major image geometry. Flat feature vectors use {1, 1, d}.
struct InputShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t volume() const noexcept { return channels * height * width; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

// Resolved geometry and parameter offsets for one layer.
struct LayerGeometry {
  InputShape in;
  InputShape out;
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;
};

struct ModelLayout {
  std::vector<LayerGeometry> layers;
  std::size_t num_params = 0;
};

struct ModelSpec {
  InputShape input;
  std::vector<Layer> layers;
  std::size_t num_classes = 0;

  std::size_t input_dim() const noexcept { return input.volume(); }

  // Checks adjacent-layer compatibility and computes parameter offsets.
  ModelLayout layout() const {
    if (layers.empty()) throw DimensionError("model has no layers");
    if (num_classes < 1) throw DimensionError("model needs at least one output");
    if (input.volume() == 0) throw DimensionError("model input volume must be positive");
    ModelLayout result;
    InputShape cur = input;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      LayerGeometry g;
      g.in = cur;
      const std::string where = "layer " + std::to_string(i);
      if (const auto* d = std::get_if<Dense>(&layers[i])) {
        if (d->in != cur.volume()) {
          throw DimensionError(where + " (dense): expects " + std::to_string(d->in) +
                               " inputs, previous output has " + std::to_string(cur.volume()));
        }
        if (d->out == 0) throw DimensionError(where + " (dense): zero outputs");
        g.out = {d->out, 1, 1};
        g.weight_count = d->in * d->out;
        g.bias_count = d->out;
      } else {
        const auto& c = std::get<Conv2d>(layers[i]);
        if (c.in_channels != cur.channels) {
          throw DimensionError(where + " (conv2d): expects " + std::to_string(c.in_channels) +
                               " channels, previous output has " + std::to_string(cur.channels));
        }
        if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
          throw DimensionError(where + " (conv2d): zero channels, kernel or stride");
        }
        if (cur.height + 2 * c.padding < c.kernel || cur.width + 2 * c.padding < c.kernel) {
          throw DimensionError(where + " (conv2d): kernel larger than padded input");
        }
        g.out = {c.out_channels, (cur.height + 2 * c.padding - c.kernel) / c.stride + 1,
                 (cur.width + 2 * c.padding - c.kernel) / c.stride + 1};
        g.weight_count = c.out_channels * c.in_channels * c.kernel * c.kernel;
        g.bias_count = c.out_channels;
      }
      g.weight_offset = offset;
      g.bias_offset = offset + g.weight_count;
      offset += g.weight_count + g.bias_count;
      cur = g.out;
      result.layers.push_back(g);
    }
    if (cur.volume() != num_classes) {
      throw DimensionError("layer " + std::to_string(layers.size() - 1) + ": emits " +
                           std::to_string(cur.volume()) + " logits, model has " +
                           std::to_string(num_classes) + " classes");
    }
    result.num_params = offset;
    return result;
  }

  std::size_t num_params() const { return layout().num_params; }

  // d -> hidden... -> classes, ReLU on hidden layers, identity logits.
  static ModelSpec mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                       std::size_t classes) {
    ModelSpec spec;
    spec.input = {1, 1, input_dim};
    spec.num_classes = classes;
    std::size_t prev = input_dim;
    for (std::size_t h : hidden) {
      spec.layers.push_back(Dense{prev, h, Activation::relu});
      prev = h;
    }
    spec.layers.push_back(Dense{prev, classes, Activation::identity});
    return spec;
  }

  // Two 3x3 convolutions (the second strided) followed by a dense head.
  static ModelSpec small_conv(InputShape image, std::size_t classes, std::size_t width = 8) {
    ModelSpec spec;
    spec.input = image;
    spec.num_classes = classes;
    spec.layers.push_back(Conv2d{image.channels, width, 3, 1, 1, Activation::relu});
    spec.layers.push_back(Conv2d{width, 2 * width, 3, 2, 1, Activation::relu});
    const std::size_t h = (image.height + 2 - 3) / 2 + 1;
    const std::size_t w = (image.width + 2 - 3) / 2 + 1;
    spec.layers.push_back(Dense{2 * width * h * w, classes, Activation::identity});
    return spec;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Flat parameter vector theta. Per-layer views are resolved through a ModelLayout.
struct ModelParams {
  std::vector<Real> values;

  std::size_t size() const noexcept { return values.size(); }

  static ModelParams zeros(const ModelSpec& spec) {
    return ModelParams{std::vector<Real>(spec.num_params(), Real{0})};
  }

  // He-style uniform init: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), b = 0.
  static ModelParams init(const ModelSpec& spec, std::uint64_t seed) {
    const ModelLayout lay = spec.layout();
    ModelParams p{std::vector<Real>(lay.num_params, Real{0})};
    Rng rng(seed);
    for (std::size_t i = 0; i < lay.layers.size(); ++i) {
      const std::size_t fan_in = lay.layers[i].weight_count / lay.layers[i].bias_count;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t k = 0; k < lay.layers[i].weight_count; ++k) {
        p.values[lay.layers[i].weight_offset + k] = static_cast<Real>(dist(rng));
      }
    }
    return p;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct LayerTensors {
  Tensor weight; // dense: [out, in]; conv: [out_ch, in_ch, k, k]
  Tensor bias;   // [out] or [out_ch]
};

inline std::vector<LayerTensors> unflatten(const ModelSpec& spec, const ModelParams& params) {
  const ModelLayout lay = spec.layout();
  if (params.size() != lay.num_params) {
    throw DimensionError("parameter vector has " + std::to_string(params.size()) +
                         " values, model needs " + std::to_string(lay.num_params));
  }
  std::vector<LayerTensors> out;
  for (std::size_t i = 0; i < lay.layers.size(); ++i) {
    const auto& g = lay.layers[i];
    Shape wshape;
    if (const auto* d = std::get_if<Dense>(&spec.layers[i])) {
      wshape = {d->out, d->in};
    } else {
      const auto& c = std::get<Conv2d>(spec.layers[i]);
      wshape = {c.out_channels, c.in_channels, c.kernel, c.kernel};
    }
    auto first = params.values.begin() + static_cast<std::ptrdiff_t>(g.weight_offset);
    std::vector<Real> w(first, first + static_cast<std::ptrdiff_t>(g.weight_count));
    auto bfirst = params.values.begin() + static_cast<std::ptrdiff_t>(g.bias_offset);
    std::vector<Real> b(bfirst, bfirst + static_cast<std::ptrdiff_t>(g.bias_count));
    out.push_back({Tensor(std::move(wshape), std::move(w)), Tensor({g.bias_count}, std::move(b))});
  }
  return out;
}

inline ModelParams flatten(const ModelSpec& spec, const std::vector<LayerTensors>& tensors) {
  const ModelLayout lay = spec.layout();
  if (tensors.size() != lay.layers.size()) throw DimensionError("layer count mismatch");
  ModelParams p{std::vector<Real>(lay.num_params)};
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& g = lay.layers[i];
    if (tensors[i].weight.size() != g.weight_count || tensors[i].bias.size() != g.bias_count) {
      throw DimensionError("layer " + std::to_string(i) + ": tensor sizes do not match spec");
    }
    std::copy(tensors[i].weight.storage().begin(), tensors[i].weight.storage().end(),
              p.values.begin() + static_cast<std::ptrdiff_t>(g.weight_offset));
    std::copy(tensors[i].bias.storage().begin(), tensors[i].bias.storage().end(),
              p.values.begin() + static_cast<std::ptrdiff_t>(g.bias_offset));
  }
  return p;
}

// (inputs, targets, hard labels). Targets are probability rows.
struct LabeledBatch {
  Tensor inputs;
  Tensor targets;
  std::vector<int> hard_labels;

  void validate() const;
};

namespace detail {

inline void apply_activation(Activation a, std::span<const Real> z, std::span<Real> out) {
  if (a == Activation::identity) {
    std::copy(z.begin(), z.end(), out.begin());
  } else {
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] > 0 ? z[i] : Real{0};
  }
}

inline void dense_forward(const Dense& d, const LayerGeometry& g, const std::vector<Real>& theta,
                          const Tensor& in, Tensor& z) {
  const Real* w = theta.data() + g.weight_offset;
  const Real* bias = theta.data() + g.bias_offset;
  const std::size_t batch = in.rows();
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* x = in.storage().data() + b * d.in;
    Real* zr = z.storage().data() + b * d.out;
    for (std::size_t o = 0; o < d.out; ++o) {
      const Real* wr = w + o * d.in;
      Real acc = bias[o];
      for (std::size_t i = 0; i < d.in; ++i) acc += wr[i] * x[i];
      zr[o] = acc;
    }
  }
}

inline void dense_backward(const Dense& d, const LayerGeometry& g, const std::vector<Real>& theta,
                           const Tensor& in, const Tensor& dz, std::vector<Real>* dtheta,
                           Tensor* din) {
  const Real* w = theta.data() + g.weight_offset;
  const std::size_t batch = in.rows();
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* x = in.storage().data() + b * d.in;
    const Real* dzr = dz.storage().data() + b * d.out;
    if (dtheta) {
      Real* dw = dtheta->data() + g.weight_offset;
      Real* db = dtheta->data() + g.bias_offset;
      for (std::size_t o = 0; o < d.out; ++o) {
        const Real go = dzr[o];
        if (go == 0) continue;
        db[o] += go;
        Real* dwr = dw + o * d.in;
        for (std::size_t i = 0; i < d.in; ++i) dwr[i] += go * x[i];
      }
    }
    if (din) {
      Real* dx = din->storage().data() + b * d.in;
      for (std::size_t o = 0; o < d.out; ++o) {
        const Real go = dzr[o];
        if (go == 0) continue;
        const Real* wr = w + o * d.in;
        for (std::size_t i = 0; i < d.in; ++i) dx[i] += go * wr[i];
      }
    }
  }
}

inline void conv_forward(const Conv2d& c, const LayerGeometry& g, const std::vector<Real>& theta,
                         const Tensor& in, Tensor& z) {
  const Real* w = theta.data() + g.weight_offset;
  const Real* bias = theta.data() + g.bias_offset;
  const std::size_t batch = in.rows();
  const std::size_t ih = g.in.height, iw = g.in.width, oh = g.out.height, ow = g.out.width;
  const std::size_t k = c.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(c.padding);
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* x = in.storage().data() + b * g.in.volume();
    Real* zr = z.storage().data() + b * g.out.volume();
    for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          Real acc = bias[oc];
          for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
            const Real* wk = w + ((oc * c.in_channels + ic) * k) * k;
            const Real* xc = x + ic * ih * iw;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - pad;
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(ih)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * c.stride + kx) - pad;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
                acc += wk[ky * k + kx] * xc[static_cast<std::size_t>(y) * iw + static_cast<std::size_t>(xx)];
              }
            }
          }
          zr[(oc * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
}

inline void conv_backward(const Conv2d& c, const LayerGeometry& g, const std::vector<Real>& theta,
                          const Tensor& in, const Tensor& dz, std::vector<Real>* dtheta,
                          Tensor* din) {
  const Real* w = theta.data() + g.weight_offset;
  const std::size_t batch = in.rows();
  const std::size_t ih = g.in.height, iw = g.in.width, oh = g.out.height, ow = g.out.width;
  const std::size_t k = c.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(c.padding);
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* x = in.storage().data() + b * g.in.volume();
    const Real* dzr = dz.storage().data() + b * g.out.volume();
    Real* dx = din ? din->storage().data() + b * g.in.volume() : nullptr;
    for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const Real go = dzr[(oc * oh + oy) * ow + ox];
          if (go == 0) continue;
          if (dtheta) (*dtheta)[g.bias_offset + oc] += go;
          for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
            const std::size_t wbase = ((oc * c.in_channels + ic) * k) * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - pad;
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(ih)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * c.stride + kx) - pad;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
                const std::size_t xi = ic * ih * iw + static_cast<std::size_t>(y) * iw +
                                       static_cast<std::size_t>(xx);
                if (dtheta) (*dtheta)[g.weight_offset + wbase + ky * k + kx] += go * x[xi];
                if (dx) dx[xi] += go * w[wbase + ky * k + kx];
              }
            }
          }
        }
      }
    }
  }
}

} // namespace detail

// Per-layer inputs and pre-activations retained for the reverse pass.
struct ForwardTrace {
  ModelLayout layout;
  std::vector<Tensor> layer_inputs;
  std::vector<Tensor> preactivations;
  Tensor logits;
};

inline ForwardTrace forward_trace(const ModelSpec& spec, const ModelParams& params,
                                  const Tensor& inputs) {
  ForwardTrace t;
  t.layout = spec.layout();
  if (params.size() != t.layout.num_params) {
    throw DimensionError("parameter vector has " + std::to_string(params.size()) +
                         " values, model needs " + std::to_string(t.layout.num_params));
  }
  if (inputs.rank() < 1 || (inputs.rows() > 0 && inputs.cols() != spec.input_dim())) {
    throw DimensionError("layer 0: expects input width " + std::to_string(spec.input_dim()) +
                         ", got " + std::to_string(inputs.cols()));
  }
  const std::size_t batch = inputs.rows();
  Tensor cur({batch, spec.input_dim()}, inputs.storage());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& g = t.layout.layers[i];
    Tensor z({batch, g.out.volume()});
    Activation act;
    if (const auto* d = std::get_if<Dense>(&spec.layers[i])) {
      detail::dense_forward(*d, g, params.values, cur, z);
      act = d->activation;
    } else {
      const auto& c = std::get<Conv2d>(spec.layers[i]);
      detail::conv_forward(c, g, params.values, cur, z);
      act = c.activation;
    }
    Tensor a({batch, g.out.volume()});
    detail::apply_activation(act, z.values(), a.values());
    t.layer_inputs.push_back(std::move(cur));
    t.preactivations.push_back(std::move(z));
    cur = std::move(a);
  }
  t.logits = std::move(cur);
  return t;
}

inline Tensor forward(const ModelSpec& spec, const ModelParams& params, const Tensor& inputs) {
  Tensor logits = forward_trace(spec, params, inputs).logits;
  logits.require_finite("forward");
  return logits;
}

// Reverse pass from an upstream gradient on the logits. Either output may be null.
inline void backward(const ModelSpec& spec, const ModelParams& params, const ForwardTrace& trace,
                     const Tensor& dlogits, ModelParams* dparams, Tensor* dinput) {
  if (dlogits.shape() != trace.logits.shape()) {
    throw DimensionError("upstream gradient shape " + shape_string(dlogits.shape()) +
                         " does not match logits " + shape_string(trace.logits.shape()));
  }
  if (dparams) dparams->values.assign(trace.layout.num_params, Real{0});
  Tensor da = dlogits;
  for (std::size_t idx = spec.layers.size(); idx-- > 0;) {
    const auto& g = trace.layout.layers[idx];
    const Tensor& z = trace.preactivations[idx];
    const Activation act = std::visit([](const auto& l) { return l.activation; }, spec.layers[idx]);
    Tensor dz = std::move(da);
    if (act == Activation::relu) {
      for (std::size_t j = 0; j < dz.size(); ++j) {
        if (!(z[j] > 0)) dz[j] = 0;
      }
    }
    const bool need_input = idx > 0 || dinput != nullptr;
    Tensor din;
    if (need_input) din = Tensor({z.rows(), g.in.volume()});
    std::vector<Real>* dtheta = dparams ? &dparams->values : nullptr;
    if (const auto* d = std::get_if<Dense>(&spec.layers[idx])) {
      detail::dense_backward(*d, g, params.values, trace.layer_inputs[idx], dz, dtheta,
                             need_input ? &din : nullptr);
    } else {
      detail::conv_backward(std::get<Conv2d>(spec.layers[idx]), g, params.values,
                            trace.layer_inputs[idx], dz, dtheta, need_input ? &din : nullptr);
    }
    da = std::move(din);
  }
  if (dinput) *dinput = std::move(da);
}

// log(p) is evaluated as log(max(p, kLogFloor)).
inline constexpr Real kLogFloor = static_cast<Real>(1e-12);

inline void validate_targets(const Tensor& targets) {
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    Real sum = 0;
    for (Real v : targets.row(r)) {
      if (!(v >= 0 && v <= 1)) {
        throw ValidationError("target row " + std::to_string(r) + " has an entry outside [0,1]");
      }
      sum += v;
    }
    if (std::abs(sum - 1) > 1e-9) {
      throw ValidationError("target row " + std::to_string(r) + " sums to " +
                            std::to_string(sum) + ", expected 1");
    }
  }
}

namespace detail {

inline void log_softmax_row(std::span<const Real> z, std::span<Real> out) {
  Real m = -std::numeric_limits<Real>::infinity();
  for (Real v : z) m = std::max(m, v);
  Real s = 0;
  for (Real v : z) s += std::exp(v - m);
  const Real lse = m + std::log(s);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
}

} // namespace detail

inline Tensor softmax(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    detail::log_softmax_row(logits.row(r), p.row(r));
    for (Real& v : p.row(r)) v = std::exp(v);
  }
  return p;
}

struct LossAndLogitGrad {
  Real loss = 0;
  Tensor dlogits;
};

// Mean soft-target cross-entropy and its gradient w.r.t. the logits.
inline LossAndLogitGrad soft_ce_with_grad(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape() || logits.rank() != 2) {
    throw DimensionError("loss: logits " + shape_string(logits.shape()) + " vs targets " +
                         shape_string(targets.shape()));
  }
  validate_targets(targets);
  const std::size_t batch = logits.rows(), n = logits.cols();
  if (batch == 0) throw ValidationError("loss: empty batch");
  const Real log_floor = std::log(kLogFloor);
  LossAndLogitGrad out{0, Tensor(logits.shape())};
  std::vector<Real> logp(n);
  const Real inv_b = Real{1} / static_cast<Real>(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    detail::log_softmax_row(logits.row(r), logp);
    auto t = targets.row(r);
    auto g = out.dlogits.row(r);
    Real active_mass = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool active = logp[i] > log_floor;
      out.loss -= t[i] * (active ? logp[i] : log_floor);
      if (active) active_mass += t[i];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const bool active = logp[j] > log_floor;
      g[j] = (std::exp(logp[j]) * active_mass - (active ? t[j] : Real{0})) * inv_b;
    }
  }
  out.loss *= inv_b;
  if (!std::isfinite(out.loss)) throw NumericError("loss: non-finite value");
  return out;
}

inline Real loss_soft_ce(const Tensor& logits, const Tensor& targets) {
  return soft_ce_with_grad(logits, targets).loss;
}

inline void LabeledBatch::validate() const {
  if (inputs.rows() != targets.rows() || inputs.rows() != hard_labels.size()) {
    throw DimensionError("batch: inputs, targets and labels disagree on batch size");
  }
  validate_targets(targets);
  for (std::size_t r = 0; r < hard_labels.size(); ++r) {
    if (hard_labels[r] < 0 || static_cast<std::size_t>(hard_labels[r]) >= targets.cols() ||
        argmax(targets.row(r)) != static_cast<std::size_t>(hard_labels[r])) {
      throw ValidationError("batch: hard label " + std::to_string(r) +
                            " is not the target argmax");
    }
  }
}

struct LossAndGrad {
  Real loss = 0;
  ModelParams grad;
};

inline LossAndGrad loss_and_grad(const ModelSpec& spec, const ModelParams& params,
                                 const Tensor& inputs, const Tensor& targets) {
  const ForwardTrace trace = forward_trace(spec, params, inputs);
  auto lg = soft_ce_with_grad(trace.logits, targets);
  LossAndGrad out{lg.loss, {}};
  backward(spec, params, trace, lg.dlogits, &out.grad, nullptr);
  return out;
}

inline ModelParams grad_params(const ModelSpec& spec, const ModelParams& params,
                               const LabeledBatch& batch) {
  batch.validate();
  return loss_and_grad(spec, params, batch.inputs, batch.targets).grad;
}

inline Tensor grad_input(const ModelSpec& spec, const ModelParams& params, const Tensor& x,
                         const Tensor& targets) {
  const ForwardTrace trace = forward_trace(spec, params, x);
  const auto lg = soft_ce_with_grad(trace.logits, targets);
  Tensor dx;
  backward(spec, params, trace, lg.dlogits, nullptr, &dx);
  return dx;
}

// Vector-Jacobian product of the logits w.r.t. the inputs.
inline Tensor input_vjp(const ModelSpec& spec, const ModelParams& params, const Tensor& x,
                        const Tensor& upstream) {
  const ForwardTrace trace = forward_trace(spec, params, x);
  Tensor dx;
  backward(spec, params, trace, upstream, nullptr, &dx);
  return dx;
}

inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    t(r, static_cast<std::size_t>(labels[r])) = 1;
  }
  return t;
}

inline std::vector<int> predict(const ModelSpec& spec, const ModelParams& params,
                                const Tensor& inputs) {
  const Tensor logits = forward(spec, params, inputs);
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = static_cast<int>(argmax(logits.row(r)));
  return out;
}

} // namespace fedadv
