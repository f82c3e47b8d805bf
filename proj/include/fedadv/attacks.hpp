#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedadv/errors.hpp"
#include "fedadv/model.hpp"
#include "fedadv/rng.hpp"
#include "fedadv/tensor.hpp"

namespace fedadv {

// Anything that maps a [B, d] batch to [B, N] logits and can pull an upstream
// logit gradient back to the inputs.
template <class M>
concept DifferentiableClassifier = requires(const M& m, const Tensor& x, const Tensor& up) {
  { m.logits(x) } -> std::convertible_to<Tensor>;
  { m.input_vjp(x, up) } -> std::convertible_to<Tensor>;
  { m.num_classes() } -> std::convertible_to<std::size_t>;
};

// Non-owning view of a network and its parameters.
class NetworkClassifier {
public:
  NetworkClassifier(const ModelSpec& spec, const ModelParams& params)
      : spec_(&spec), params_(&params) {}

  Tensor logits(const Tensor& x) const { return forward(*spec_, *params_, x); }
  Tensor input_vjp(const Tensor& x, const Tensor& upstream) const {
    return fedadv::input_vjp(*spec_, *params_, x, upstream);
  }
  std::size_t num_classes() const noexcept { return spec_->num_classes; }

private:
  const ModelSpec* spec_;
  const ModelParams* params_;
};

enum class AttackFamily { fgsm, bim, pgd, cw_l2, deepfool, gaussian };

inline const char* to_string(AttackFamily f) noexcept {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::bim: return "bim";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::cw_l2: return "cw_l2";
    case AttackFamily::deepfool: return "deepfool";
    case AttackFamily::gaussian: return "gaussian";
  }
  return "?";
}

inline std::optional<AttackFamily> parse_attack_family(std::string_view s) {
  for (AttackFamily f : {AttackFamily::fgsm, AttackFamily::bim, AttackFamily::pgd,
                         AttackFamily::cw_l2, AttackFamily::deepfool, AttackFamily::gaussian}) {
    if (s == to_string(f)) return f;
  }
  if (s == "cw" || s == "c&w") return AttackFamily::cw_l2;
  return std::nullopt;
}

inline bool is_linf_family(AttackFamily f) noexcept {
  return f == AttackFamily::fgsm || f == AttackFamily::bim || f == AttackFamily::pgd;
}

struct AttackConfig {
  AttackFamily family = AttackFamily::pgd;
  Real epsilon = static_cast<Real>(8.0 / 255.0);
  Real step = static_cast<Real>(2.0 / 255.0);
  int iterations = 7;

  // C&W (logit-margin objective, clamped box)
  Real cw_weight = 1;
  Real cw_confidence = 0;
  int cw_steps = 100;
  Real cw_lr = static_cast<Real>(0.01);
  int cw_binary_search = 0;

  // DeepFool
  Real overshoot = static_cast<Real>(0.02);
  int max_iter = 50;

  // Gaussian
  Real noise_mu = 0;
  Real noise_sigma = static_cast<Real>(0.1);

  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("attack.epsilon must be >= 0");
    if ((family == AttackFamily::bim || family == AttackFamily::pgd) && !(step > 0)) {
      throw ConfigError("attack.step must be > 0 for bim/pgd");
    }
    if (family == AttackFamily::bim && iterations < 1) {
      throw ConfigError("attack.iterations must be >= 1 for bim");
    }
    if (family == AttackFamily::pgd && iterations < 0) {
      throw ConfigError("attack.iterations must be >= 0 for pgd");
    }
    if (family == AttackFamily::cw_l2) {
      if (!(cw_weight >= 0)) throw ConfigError("attack.cw_weight must be >= 0");
      if (!(cw_confidence >= 0)) throw ConfigError("attack.cw_confidence must be >= 0");
      if (cw_steps < 1) throw ConfigError("attack.cw_steps must be >= 1");
      if (!(cw_lr > 0)) throw ConfigError("attack.cw_lr must be > 0");
    }
    if (family == AttackFamily::deepfool) {
      if (!(overshoot >= 0)) throw ConfigError("attack.overshoot must be >= 0");
      if (max_iter < 1) throw ConfigError("attack.max_iter must be >= 1");
    }
    if (family == AttackFamily::gaussian && !(noise_sigma >= 0)) {
      throw ConfigError("attack.noise_sigma must be >= 0");
    }
  }

  static AttackConfig fgsm_default(Real eps = static_cast<Real>(8.0 / 255.0)) {
    AttackConfig c;
    c.family = AttackFamily::fgsm;
    c.epsilon = eps;
    return c;
  }

  static AttackConfig pgd_default() { return AttackConfig{}; }

  static AttackConfig cw_default() {
    AttackConfig c;
    c.family = AttackFamily::cw_l2;
    return c;
  }

  static AttackConfig deepfool_default() {
    AttackConfig c;
    c.family = AttackFamily::deepfool;
    return c;
  }
};

struct AdvBatch {
  Tensor originals;
  Tensor perturbed;
  std::vector<std::uint8_t> success; // model label != true label
  std::vector<Real> linf;
  std::vector<Real> l2;

  std::size_t success_count() const noexcept {
    return static_cast<std::size_t>(std::count(success.begin(), success.end(), 1));
  }
};

// Per-coordinate min(max(x, x0 - eps), x0 + eps), then clamp to [0,1].
inline Tensor clip_eps(const Tensor& x0, const Tensor& x, Real epsilon) {
  if (x0.shape() != x.shape()) throw DimensionError("clip_eps: shape mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = clamp01(std::min(std::max(x[i], x0[i] - epsilon), x0[i] + epsilon));
  }
  return out;
}

// clamp01(x + N(mu, sigma^2)) per coordinate.
inline Tensor gaussian_noise(const Tensor& x, Real mu, Real sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw ConfigError("gaussian_noise: sigma must be >= 0");
  Tensor out(x.shape());
  if (sigma == 0) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = clamp01(x[i] + mu);
    return out;
  }
  Rng rng(seed);
  std::normal_distribution<double> dist(static_cast<double>(mu), static_cast<double>(sigma));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = clamp01(x[i] + static_cast<Real>(dist(rng)));
  return out;
}

namespace detail {

inline void check_inputs(const Tensor& x, std::span<const int> labels, std::size_t classes) {
  if (x.rank() != 2) throw DimensionError("attack: inputs must be [B, d]");
  if (labels.size() != x.rows()) throw DimensionError("attack: label count != batch size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValidationError("attack: label " + std::to_string(y) + " out of range");
    }
  }
  for (Real v : x.values()) {
    if (!(v >= 0 && v <= 1)) throw ValidationError("attack: inputs must lie in [0,1]");
  }
}

// Gradient of the hard-label cross-entropy w.r.t. the inputs.
template <DifferentiableClassifier M>
Tensor ce_input_gradient(const M& model, const Tensor& x, std::span<const int> labels) {
  const Tensor z = model.logits(x);
  Tensor up = softmax(z);
  const Real inv_b = Real{1} / static_cast<Real>(std::max<std::size_t>(x.rows(), 1));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    up(r, static_cast<std::size_t>(labels[r])) -= 1;
    for (Real& v : up.row(r)) v *= inv_b;
  }
  Tensor g = model.input_vjp(x, up);
  g.require_finite("attack gradient");
  return g;
}

template <DifferentiableClassifier M>
AdvBatch finalize(const M& model, const Tensor& x, Tensor perturbed, std::span<const int> labels) {
  AdvBatch out;
  out.originals = x;
  const Tensor z = model.logits(perturbed);
  out.success.resize(x.rows());
  out.linf.resize(x.rows());
  out.l2.resize(x.rows());
  std::vector<Real> diff(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    out.success[r] = argmax(z.row(r)) != static_cast<std::size_t>(labels[r]) ? 1 : 0;
    for (std::size_t c = 0; c < x.cols(); ++c) diff[c] = perturbed(r, c) - x(r, c);
    out.linf[r] = norm_linf(diff);
    out.l2[r] = norm_l2(diff);
  }
  out.perturbed = std::move(perturbed);
  return out;
}

template <DifferentiableClassifier M>
Tensor sign_iterations(const M& model, const Tensor& x, Tensor start,
                       std::span<const int> labels, Real epsilon, Real step, int iterations) {
  Tensor cur = clip_eps(x, start, epsilon);
  for (int it = 0; it < iterations; ++it) {
    const Tensor g = ce_input_gradient(model, cur, labels);
    Tensor next(cur.shape());
    for (std::size_t i = 0; i < cur.size(); ++i) next[i] = cur[i] + step * sign(g[i]);
    cur = clip_eps(x, next, epsilon);
  }
  return cur;
}

} // namespace detail

template <DifferentiableClassifier M>
AdvBatch fgsm(const M& model, const Tensor& x, std::span<const int> labels, Real epsilon) {
  detail::check_inputs(x, labels, model.num_classes());
  if (!(epsilon >= 0)) throw ConfigError("fgsm: epsilon must be >= 0");
  const Tensor g = detail::ce_input_gradient(model, x, labels);
  Tensor adv(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) adv[i] = clamp01(x[i] + epsilon * sign(g[i]));
  return detail::finalize(model, x, std::move(adv), labels);
}

template <DifferentiableClassifier M>
AdvBatch bim(const M& model, const Tensor& x, std::span<const int> labels, Real epsilon, Real step,
             int iterations) {
  detail::check_inputs(x, labels, model.num_classes());
  Tensor adv = detail::sign_iterations(model, x, x, labels, epsilon, step, iterations);
  return detail::finalize(model, x, std::move(adv), labels);
}

// BIM from a uniform random start in the eps-box.
template <DifferentiableClassifier M>
AdvBatch pgd(const M& model, const Tensor& x, std::span<const int> labels, Real epsilon, Real step,
             int iterations, std::uint64_t seed) {
  detail::check_inputs(x, labels, model.num_classes());
  Tensor start(x.shape());
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-static_cast<double>(epsilon),
                                              static_cast<double>(epsilon));
  for (std::size_t i = 0; i < x.size(); ++i) start[i] = x[i] + static_cast<Real>(dist(rng));
  Tensor adv = detail::sign_iterations(model, x, std::move(start), labels, epsilon, step, iterations);
  return detail::finalize(model, x, std::move(adv), labels);
}

struct CwOptions {
  Real weight = 1;
  Real confidence = 0;
  int steps = 100;
  Real lr = static_cast<Real>(0.01);
  int binary_search_steps = 0;
};

// Minimizes ||delta||^2 + c * max(Z_true - max_{i != true} Z_i, -kappa) by gradient
// descent, clamping x + delta into [0,1] after every step. Returns the lowest-L2
// successful iterate per example, else the final one.
template <DifferentiableClassifier M>
AdvBatch cw_l2(const M& model, const Tensor& x, std::span<const int> labels, const CwOptions& opt) {
  detail::check_inputs(x, labels, model.num_classes());
  const std::size_t batch = x.rows(), d = x.cols(), n = model.num_classes();
  Tensor best = x;
  std::vector<Real> best_l2(batch, std::numeric_limits<Real>::infinity());
  std::vector<Real> weight(batch, opt.weight);
  std::vector<Real> lower(batch, 0), upper(batch, static_cast<Real>(1e10));
  Tensor final_iter = x;

  const int outer = std::max(1, opt.binary_search_steps);
  for (int search = 0; search < outer; ++search) {
    Tensor cur = x;
    std::vector<std::uint8_t> found(batch, 0);
    for (int s = 0; s <= opt.steps; ++s) {
      const Tensor z = model.logits(cur);
      Tensor up({batch, n});
      for (std::size_t r = 0; r < batch; ++r) {
        const auto t = static_cast<std::size_t>(labels[r]);
        std::size_t other = t == 0 ? 1 : 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (i != t && z(r, i) > z(r, other)) other = i;
        }
        const Real margin = z(r, t) - z(r, other);
        if (!std::isfinite(margin)) throw NumericError("cw_l2: non-finite objective");
        Real dist2 = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const Real dv = cur(r, c) - x(r, c);
          dist2 += dv * dv;
        }
        const Real l2 = std::sqrt(dist2);
        if (argmax(z.row(r)) != t) {
          found[r] = 1;
          if (l2 < best_l2[r]) {
            best_l2[r] = l2;
            std::copy(cur.row(r).begin(), cur.row(r).end(), best.row(r).begin());
          }
        }
        if (margin > -opt.confidence) {
          up(r, t) = weight[r];
          up(r, other) = -weight[r];
        }
      }
      if (s == opt.steps) break;
      const Tensor g = model.input_vjp(cur, up);
      g.require_finite("cw_l2 gradient");
      for (std::size_t i = 0; i < cur.size(); ++i) {
        const Real delta = cur[i] - x[i];
        cur[i] = clamp01(cur[i] - opt.lr * (2 * delta + g[i]));
      }
    }
    final_iter = cur;
    if (opt.binary_search_steps <= 0) break;
    for (std::size_t r = 0; r < batch; ++r) {
      if (found[r]) {
        upper[r] = std::min(upper[r], weight[r]);
        weight[r] = (lower[r] + upper[r]) / 2;
      } else {
        lower[r] = std::max(lower[r], weight[r]);
        weight[r] = upper[r] < static_cast<Real>(1e9) ? (lower[r] + upper[r]) / 2 : weight[r] * 10;
      }
    }
  }
  for (std::size_t r = 0; r < batch; ++r) {
    if (!std::isfinite(best_l2[r])) {
      std::copy(final_iter.row(r).begin(), final_iter.row(r).end(), best.row(r).begin());
    }
  }
  return detail::finalize(model, x, std::move(best), labels);
}

struct DeepFoolOptions {
  int max_iter = 50;
  Real overshoot = static_cast<Real>(0.02);
};

// Untargeted DeepFool. The class being pushed away from is the model's own
// prediction on the clean input; success is still judged against `labels`.
template <DifferentiableClassifier M>
AdvBatch deepfool(const M& model, const Tensor& x, std::span<const int> labels,
                  const DeepFoolOptions& opt) {
  detail::check_inputs(x, labels, model.num_classes());
  const std::size_t batch = x.rows(), d = x.cols(), n = model.num_classes();
  Tensor adv(x.shape());
  for (std::size_t r = 0; r < batch; ++r) {
    Tensor x0({1, d}, std::vector<Real>(x.row(r).begin(), x.row(r).end()));
    std::vector<Real> total(d, 0);
    Tensor cur = x0;
    const std::size_t original = argmax(model.logits(x0).row(0));
    for (int it = 0; it < opt.max_iter; ++it) {
      const Tensor z = model.logits(cur);
      if (argmax(z.row(0)) != original) break;
      // Gradient of Z_original, then of every other logit.
      std::vector<Tensor> grads(n);
      for (std::size_t k = 0; k < n; ++k) {
        Tensor up({1, n});
        up(0, k) = 1;
        grads[k] = model.input_vjp(cur, up);
      }
      Real best_ratio = std::numeric_limits<Real>::infinity();
      std::vector<Real> best_w;
      Real best_f = 0, best_norm2 = 0;
      std::vector<Real> w(d);
      for (std::size_t k = 0; k < n; ++k) {
        if (k == original) continue;
        Real norm2 = 0;
        for (std::size_t c = 0; c < d; ++c) {
          w[c] = grads[k][c] - grads[original][c];
          norm2 += w[c] * w[c];
        }
        const Real norm = std::sqrt(norm2);
        if (norm < static_cast<Real>(1e-12)) continue;
        const Real f = z(0, k) - z(0, original);
        const Real ratio = std::abs(f) / norm;
        if (ratio < best_ratio) {
          best_ratio = ratio;
          best_w = w;
          best_f = f;
          best_norm2 = norm2;
        }
      }
      if (best_w.empty()) {
        throw SingularityError("deepfool: all logit-difference gradients vanish (example " +
                               std::to_string(r) + ")");
      }
      const Real scale = std::abs(best_f) / best_norm2;
      for (std::size_t c = 0; c < d; ++c) total[c] += scale * best_w[c];
      for (std::size_t c = 0; c < d; ++c) cur[c] = clamp01(x0[c] + (1 + opt.overshoot) * total[c]);
    }
    for (std::size_t c = 0; c < d; ++c) adv(r, c) = clamp01(x0[c] + (1 + opt.overshoot) * total[c]);
  }
  return detail::finalize(model, x, std::move(adv), labels);
}

template <DifferentiableClassifier M>
AdvBatch gaussian_attack(const M& model, const Tensor& x, std::span<const int> labels, Real mu,
                         Real sigma, std::uint64_t seed) {
  detail::check_inputs(x, labels, model.num_classes());
  return detail::finalize(model, x, gaussian_noise(x, mu, sigma, seed), labels);
}

template <DifferentiableClassifier M>
AdvBatch run_attack(const M& model, const Tensor& x, std::span<const int> labels,
                    const AttackConfig& cfg) {
  cfg.validate();
  switch (cfg.family) {
    case AttackFamily::fgsm: return fgsm(model, x, labels, cfg.epsilon);
    case AttackFamily::bim: return bim(model, x, labels, cfg.epsilon, cfg.step, cfg.iterations);
    case AttackFamily::pgd:
      return pgd(model, x, labels, cfg.epsilon, cfg.step, cfg.iterations, cfg.seed);
    case AttackFamily::cw_l2:
      return cw_l2(model, x, labels,
                   CwOptions{cfg.cw_weight, cfg.cw_confidence, cfg.cw_steps, cfg.cw_lr,
                             cfg.cw_binary_search});
    case AttackFamily::deepfool:
      return deepfool(model, x, labels, DeepFoolOptions{cfg.max_iter, cfg.overshoot});
    case AttackFamily::gaussian:
      return gaussian_attack(model, x, labels, cfg.noise_mu, cfg.noise_sigma, cfg.seed);
  }
  throw ConfigError("unknown attack family");
}

} // namespace fedadv
