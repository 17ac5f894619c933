#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "svote/types.hpp"

namespace svote {

enum class TrainingAction { TrainLocal, TrainRandom, Skip };

inline std::string_view to_string(TrainingAction a) {
  switch (a) {
    case TrainingAction::TrainLocal: return "train_local";
    case TrainingAction::TrainRandom: return "train_random";
    case TrainingAction::Skip: return "skip";
  }
  return "?";
}

/// One client's counters for one round. Energy is derived, not stored:
/// see phase_energy().
struct ClientMetrics {
  ClientId client = 0;
  double f1 = 0.0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  TrainingAction action = TrainingAction::TrainLocal;
  std::uint64_t samples_trained = 0;    // samples x epochs
  std::uint64_t models_aggregated = 0;  // own model included
  std::uint64_t param_count = 0;
};

struct MetricsRecord {
  std::size_t round = 0;
  std::vector<ClientMetrics> clients;
};

/// kWh per unit of work in each phase.
struct EnergyCoeffs {
  double c_train = 1e-7;  // per sample x epoch
  double c_agg = 1e-10;   // per parameter aggregated
  double c_comm = 1e-10;  // per byte sent

  void validate() const {
    auto ok = [](double v) { return v >= 0.0 && std::isfinite(v); };
    if (!ok(c_train) || !ok(c_agg) || !ok(c_comm))
      throw ConfigError("energy coefficients must be finite and >= 0");
  }

  bool operator==(const EnergyCoeffs&) const = default;
};

struct PhaseEnergy {
  double train = 0.0;
  double agg = 0.0;
  double comm = 0.0;

  double total() const noexcept { return train + agg + comm; }
};

inline PhaseEnergy phase_energy(const ClientMetrics& m, const EnergyCoeffs& k) {
  return {k.c_train * static_cast<double>(m.samples_trained),
          k.c_agg * static_cast<double>(m.param_count * m.models_aggregated),
          k.c_comm * static_cast<double>(m.bytes_sent)};
}

struct EnergyReport {
  std::vector<PhaseEnergy> per_client;
  PhaseEnergy total;
};

// Sums raw work counters first and applies each coefficient once, so every
// phase total is exactly linear in its own coefficient.
inline EnergyReport energy(std::span<const MetricsRecord> records,
                           const EnergyCoeffs& coeffs) {
  coeffs.validate();
  std::vector<ClientMetrics> sums;
  for (const auto& rec : records) {
    for (const auto& m : rec.clients) {
      if (sums.size() <= m.client) sums.resize(m.client + 1);
      auto& s = sums[m.client];
      s.client = m.client;
      s.samples_trained += m.samples_trained;
      s.param_count = 1;
      s.models_aggregated += m.param_count * m.models_aggregated;
      s.bytes_sent += m.bytes_sent;
    }
  }
  EnergyReport out;
  ClientMetrics all;
  all.param_count = 1;
  for (const auto& s : sums) {
    out.per_client.push_back(phase_energy(s, coeffs));
    all.samples_trained += s.samples_trained;
    all.models_aggregated += s.models_aggregated;
    all.bytes_sent += s.bytes_sent;
  }
  out.total = phase_energy(all, coeffs);
  return out;
}

/// One unit per sample x epoch trained plus one per model aggregated.
inline std::uint64_t work_units(const ClientMetrics& m) {
  return m.samples_trained + m.models_aggregated;
}

inline std::vector<std::uint64_t> work_units(std::span<const MetricsRecord> records) {
  std::vector<std::uint64_t> out;
  for (const auto& rec : records)
    for (const auto& m : rec.clients) {
      if (out.size() <= m.client) out.resize(m.client + 1, 0);
      out[m.client] += work_units(m);
    }
  return out;
}

/// Unweighted mean of per-class F1. Classes absent from both truth and
/// predictions are left out of the average; a class predicted but never
/// present scores 0.
inline double macro_f1(std::span<const std::size_t> predictions,
                       std::span<const std::size_t> truth, std::size_t num_classes) {
  if (predictions.size() != truth.size())
    throw MetricError("macro_f1: prediction and truth lengths differ");
  if (truth.empty()) throw MetricError("macro_f1: empty input");
  std::vector<std::uint64_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto y = truth[i], p = predictions[i];
    if (y >= num_classes || p >= num_classes)
      throw MetricError("macro_f1: label out of range");
    if (y == p) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
    ++counted;
  }
  return sum / static_cast<double>(counted);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Population mean and std.
inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) return {};
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  if (*lo == *hi) return {*lo, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

/// Mean and population std of the final round's per-client F1.
inline MeanStd federation_summary(std::span<const MetricsRecord> records) {
  if (records.empty() || records.back().clients.empty())
    throw MetricError("federation_summary: no client records");
  std::vector<double> f1;
  for (const auto& m : records.back().clients) f1.push_back(m.f1);
  return mean_std(f1);
}

struct TrafficTotals {
  std::uint64_t sent = 0;
  std::uint64_t received = 0;
};

inline TrafficTotals traffic_totals(std::span<const MetricsRecord> records) {
  TrafficTotals t;
  for (const auto& rec : records)
    for (const auto& m : rec.clients) {
      t.sent += m.bytes_sent;
      t.received += m.bytes_received;
    }
  return t;
}

}  // namespace svote
