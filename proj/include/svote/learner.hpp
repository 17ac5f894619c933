#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "svote/types.hpp"

namespace svote {

enum class ModelKind { SoftmaxRegression, Mlp1Hidden };

// Parameter layout, row per output unit with the bias last:
//   softmax: [class c] = w_c0 .. w_c(d-1), b_c
//   mlp:     hidden rows h*(d+1) followed by output rows c*(H+1)
struct ModelSpec {
  ModelKind kind = ModelKind::SoftmaxRegression;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t hidden_dim = 0;

  std::size_t param_count() const noexcept {
    if (kind == ModelKind::SoftmaxRegression)
      return (input_dim + 1) * num_classes;
    return (input_dim + 1) * hidden_dim + (hidden_dim + 1) * num_classes;
  }

  void validate() const {
    if (input_dim == 0) throw ConfigError("model: input_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (kind == ModelKind::Mlp1Hidden && hidden_dim == 0)
      throw ConfigError("model: hidden_dim must be >= 1 for mlp");
  }

  bool operator==(const ModelSpec&) const = default;
};

struct HyperParams {
  double learning_rate = 1e-3;
  std::size_t local_epochs = 2;
  std::size_t batch_size = 32;
  double prox_mu = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("train.learning_rate must be > 0");
    if (local_epochs < 1) throw ConfigError("train.local_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(prox_mu >= 0.0) || !std::isfinite(prox_mu))
      throw ConfigError("train.prox_mu must be >= 0");
  }

  bool operator==(const HyperParams&) const = default;
};

struct ControlVariate {
  ParamVector local_c;
  ParamVector global_c;

  static ControlVariate zeros(std::size_t p) {
    return {ParamVector(p, 0.0), ParamVector(p, 0.0)};
  }
};

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ConfigError(std::string(what) + ": length mismatch (" +
                      std::to_string(a) + " vs " + std::to_string(b) + ")");
}

// Class scores for one sample. `hidden` receives tanh activations for the MLP.
inline void forward(std::span<const double> w, const double* x,
                    const ModelSpec& spec, std::span<double> logits,
                    std::span<double> hidden) {
  const std::size_t d = spec.input_dim;
  const std::size_t c = spec.num_classes;
  if (spec.kind == ModelKind::SoftmaxRegression) {
    for (std::size_t k = 0; k < c; ++k) {
      const double* row = w.data() + k * (d + 1);
      double z = row[d];
      for (std::size_t j = 0; j < d; ++j) z += row[j] * x[j];
      logits[k] = z;
    }
    return;
  }
  const std::size_t h = spec.hidden_dim;
  for (std::size_t u = 0; u < h; ++u) {
    const double* row = w.data() + u * (d + 1);
    double a = row[d];
    for (std::size_t j = 0; j < d; ++j) a += row[j] * x[j];
    hidden[u] = std::tanh(a);
  }
  const double* out = w.data() + h * (d + 1);
  for (std::size_t k = 0; k < c; ++k) {
    const double* row = out + k * (h + 1);
    double z = row[h];
    for (std::size_t u = 0; u < h; ++u) z += row[u] * hidden[u];
    logits[k] = z;
  }
}

inline void check_spec_and_params(std::span<const double> w,
                                  const ModelSpec& spec) {
  if (w.size() != spec.param_count())
    throw ConfigError("model: parameter vector has " + std::to_string(w.size()) +
                      " entries, spec requires " +
                      std::to_string(spec.param_count()));
}

}  // namespace detail

/// Uniform on [-0.05, 0.05] per entry.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-0.05, 0.05);
  ParamVector w(spec.param_count());
  for (auto& v : w) v = dist(rng);
  return w;
}

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Mean cross-entropy and its gradient over the selected rows of `data`.
inline LossGrad loss_and_grad(std::span<const double> w,
                              const LabeledDataset& data,
                              std::span<const std::size_t> rows,
                              const ModelSpec& spec) {
  detail::check_spec_and_params(w, spec);
  if (data.input_dim != spec.input_dim)
    throw ConfigError("model: dataset input_dim " +
                      std::to_string(data.input_dim) + " != spec input_dim " +
                      std::to_string(spec.input_dim));
  if (data.num_classes != spec.num_classes)
    throw ConfigError("model: dataset num_classes does not match spec");
  if (rows.empty()) throw ConfigError("model: empty batch");

  const std::size_t d = spec.input_dim;
  const std::size_t c = spec.num_classes;
  const std::size_t h = spec.hidden_dim;
  const bool mlp = spec.kind == ModelKind::Mlp1Hidden;

  LossGrad out{0.0, ParamVector(w.size(), 0.0)};
  std::vector<double> logits(c), prob(c), hidden(mlp ? h : 0), dhidden(mlp ? h : 0);

  for (auto r : rows) {
    const double* x = data.row(r);
    const std::size_t y = data.labels[r];
    detail::forward(w, x, spec, logits, hidden);

    const double zmax = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      prob[k] = std::exp(logits[k] - zmax);
      sum += prob[k];
    }
    out.loss += std::log(sum) + zmax - logits[y];
    for (auto& p : prob) p /= sum;
    prob[y] -= 1.0;  // dL/dz

    if (!mlp) {
      for (std::size_t k = 0; k < c; ++k) {
        double* g = out.grad.data() + k * (d + 1);
        for (std::size_t j = 0; j < d; ++j) g[j] += prob[k] * x[j];
        g[d] += prob[k];
      }
      continue;
    }

    const std::size_t off = h * (d + 1);
    std::fill(dhidden.begin(), dhidden.end(), 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      const double* wrow = w.data() + off + k * (h + 1);
      double* g = out.grad.data() + off + k * (h + 1);
      for (std::size_t u = 0; u < h; ++u) {
        g[u] += prob[k] * hidden[u];
        dhidden[u] += prob[k] * wrow[u];
      }
      g[h] += prob[k];
    }
    for (std::size_t u = 0; u < h; ++u) {
      const double da = dhidden[u] * (1.0 - hidden[u] * hidden[u]);
      double* g = out.grad.data() + u * (d + 1);
      for (std::size_t j = 0; j < d; ++j) g[j] += da * x[j];
      g[d] += da;
    }
  }

  const double n = static_cast<double>(rows.size());
  out.loss /= n;
  for (auto& g : out.grad) g /= n;
  return out;
}

inline LossGrad loss_and_grad(std::span<const double> w,
                              const LabeledDataset& data,
                              const ModelSpec& spec) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return loss_and_grad(w, data, all, spec);
}

inline ParamVector sgd_step(std::span<const double> w,
                            std::span<const double> grad, double eta) {
  detail::require_same_length(w.size(), grad.size(), "sgd_step");
  ParamVector out(w.begin(), w.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= eta * grad[i];
  return out;
}

/// grad + mu * (w - anchor); the gradient of the FedProx proximal term.
inline ParamVector prox_grad(std::span<const double> grad,
                             std::span<const double> w,
                             std::span<const double> anchor, double prox_mu) {
  detail::require_same_length(grad.size(), w.size(), "prox_grad");
  detail::require_same_length(w.size(), anchor.size(), "prox_grad");
  ParamVector out(grad.begin(), grad.end());
  if (prox_mu == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += prox_mu * (w[i] - anchor[i]);
  return out;
}

inline ParamVector scaffold_grad(std::span<const double> grad,
                                 const ControlVariate& cv) {
  detail::require_same_length(grad.size(), cv.local_c.size(), "scaffold_grad");
  detail::require_same_length(grad.size(), cv.global_c.size(), "scaffold_grad");
  ParamVector out(grad.begin(), grad.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = out[i] - cv.local_c[i] + cv.global_c[i];
  return out;
}

/// Option-II refresh: c_i <- c_i - c + (w_before - w_after) / (steps * eta).
/// global_c is carried through unchanged; the round engine owns its refresh.
inline ControlVariate scaffold_update_cv(const ControlVariate& cv,
                                         std::span<const double> w_before,
                                         std::span<const double> w_after,
                                         double eta, std::size_t steps) {
  if (steps < 1) throw ConfigError("scaffold_update_cv: steps must be >= 1");
  if (!(eta > 0.0)) throw ConfigError("scaffold_update_cv: eta must be > 0");
  detail::require_same_length(w_before.size(), w_after.size(),
                              "scaffold_update_cv");
  detail::require_same_length(w_before.size(), cv.local_c.size(),
                              "scaffold_update_cv");
  ControlVariate out = cv;
  const double scale = 1.0 / (static_cast<double>(steps) * eta);
  for (std::size_t i = 0; i < w_before.size(); ++i)
    out.local_c[i] =
        cv.local_c[i] - cv.global_c[i] + (w_before[i] - w_after[i]) * scale;
  return out;
}

/// Class scores for a single sample (exposed for inspection and tests).
inline std::vector<double> logits(std::span<const double> w, const double* x,
                                  const ModelSpec& spec) {
  detail::check_spec_and_params(w, spec);
  std::vector<double> z(spec.num_classes);
  std::vector<double> hidden(spec.kind == ModelKind::Mlp1Hidden ? spec.hidden_dim : 0);
  detail::forward(w, x, spec, z, hidden);
  return z;
}

/// Argmax of class scores; ties go to the lowest class index.
inline std::size_t predict(std::span<const double> w, const double* x,
                           const ModelSpec& spec) {
  const auto z = logits(w, x, spec);
  std::size_t best = 0;
  for (std::size_t k = 1; k < z.size(); ++k)
    if (z[k] > z[best]) best = k;
  return best;
}

inline std::vector<std::size_t> predict_all(std::span<const double> w,
                                            const LabeledDataset& data,
                                            const ModelSpec& spec) {
  std::vector<std::size_t> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    out.push_back(predict(w, data.row(i), spec));
  return out;
}

struct TrainStats {
  std::size_t steps = 0;
  std::size_t samples_processed = 0;  // samples x epochs
};

// Mini-batch SGD over `local_epochs` epochs, reshuffling every epoch with
// `rng`; the final partial batch is kept. `correct(grad, w)` rewrites the raw
// gradient in place (identity for plain SGD, prox/scaffold for baselines).
template <typename Correction>
TrainStats local_train(ParamVector& w, const LabeledDataset& data,
                       const ModelSpec& spec, const HyperParams& hp, Rng& rng,
                       Correction&& correct) {
  if (data.size() == 0) throw ConfigError("local_train: empty shard");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainStats stats;
  for (std::size_t epoch = 0; epoch < hp.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t len = std::min(hp.batch_size, order.size() - start);
      auto lg = loss_and_grad(w, data, std::span(order).subspan(start, len), spec);
      correct(lg.grad, std::as_const(w));
      w = sgd_step(w, lg.grad, hp.learning_rate);
      ++stats.steps;
    }
    stats.samples_processed += data.size();
  }
  return stats;
}

inline TrainStats local_train(ParamVector& w, const LabeledDataset& data,
                              const ModelSpec& spec, const HyperParams& hp,
                              Rng& rng) {
  return local_train(w, data, spec, hp, rng,
                     [](ParamVector&, const ParamVector&) {});
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace svote
