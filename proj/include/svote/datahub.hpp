#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "svote/types.hpp"

namespace svote {

/// Gaussian mixture: one mean per class on the unit sphere, isotropic noise
/// with standard deviation `spread`. Samples are emitted class by class.
inline LabeledDataset gen_synthetic(std::size_t num_classes, std::size_t input_dim,
                                    std::size_t per_class, double spread,
                                    std::uint64_t seed) {
  if (num_classes < 1 || input_dim < 1 || per_class < 1)
    throw ConfigError("gen_synthetic: counts must be >= 1");
  if (!(spread > 0.0)) throw ConfigError("gen_synthetic: spread must be > 0");

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> means(num_classes * input_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t j = 0; j < input_dim; ++j) {
        double v = gauss(rng);
        means[c * input_dim + j] = v;
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < input_dim; ++j) means[c * input_dim + j] /= norm;
  }

  LabeledDataset out;
  out.input_dim = input_dim;
  out.num_classes = num_classes;
  out.features.reserve(num_classes * per_class * input_dim);
  out.labels.reserve(num_classes * per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < input_dim; ++j)
        out.features.push_back(means[c * input_dim + j] + spread * gauss(rng));
      out.labels.push_back(c);
    }
  }
  return out;
}

namespace detail {

inline std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4))
    throw FormatError(path + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  return in;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Loads an IDX image/label pair (MNIST family). Pixels scaled to [0,1],
/// images flattened row-major. `limit` is clamped to the file's count.
inline LabeledDataset load_idx(const std::string& images_path,
                               const std::string& labels_path, std::size_t limit,
                               std::size_t num_classes = 10) {
  auto img = detail::open_binary(images_path);
  auto lab = detail::open_binary(labels_path);

  if (detail::read_be32(img, images_path) != kIdxImageMagic)
    throw FormatError(images_path + ": bad IDX image magic");
  const std::size_t n_img = detail::read_be32(img, images_path);
  const std::size_t rows = detail::read_be32(img, images_path);
  const std::size_t cols = detail::read_be32(img, images_path);

  if (detail::read_be32(lab, labels_path) != kIdxLabelMagic)
    throw FormatError(labels_path + ": bad IDX label magic");
  const std::size_t n_lab = detail::read_be32(lab, labels_path);

  if (n_img != n_lab)
    throw FormatError(images_path + ": image count " + std::to_string(n_img) +
                      " does not match label count " + std::to_string(n_lab) +
                      " in " + labels_path);
  if (rows == 0 || cols == 0) throw FormatError(images_path + ": zero image size");

  const std::size_t n = std::min(limit, n_img);
  const std::size_t dim = rows * cols;

  LabeledDataset out;
  out.input_dim = dim;
  out.num_classes = num_classes;

  std::vector<unsigned char> pixels(n * dim);
  if (n > 0 && !img.read(reinterpret_cast<char*>(pixels.data()),
                         static_cast<std::streamsize>(pixels.size())))
    throw FormatError(images_path + ": truncated image data");
  std::vector<unsigned char> labels(n);
  if (n > 0 && !lab.read(reinterpret_cast<char*>(labels.data()),
                         static_cast<std::streamsize>(labels.size())))
    throw FormatError(labels_path + ": truncated label data");

  out.features.resize(n * dim);
  std::transform(pixels.begin(), pixels.end(), out.features.begin(),
                 [](unsigned char p) { return static_cast<double>(p) / 255.0; });
  out.labels.reserve(n);
  for (auto y : labels) {
    if (y >= num_classes)
      throw FormatError(labels_path + ": label " + std::to_string(y) +
                        " exceeds " + std::to_string(num_classes) + " classes");
    out.labels.push_back(y);
  }
  return out;
}

struct PartitionPlan {
  double alpha = 0.0;
  std::size_t num_clients = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> assignment;  // client -> sorted indices
};

/// Smallest shard every client must receive.
inline std::size_t min_shard_size(std::size_t batch_size, std::size_t num_classes) {
  return std::max(2 * batch_size, 2 * num_classes);
}

namespace detail {

// Splits `total` items by `weights` (summing to 1) with largest-remainder
// rounding; ties in the remainder go to the lower index.
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& weights,
                                                  std::size_t total) {
  const std::size_t k = weights.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> rem(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = weights[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Guard against floating overshoot.
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % k) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

inline std::vector<double> dirichlet(std::size_t k, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  do {
    sum = 0.0;
    for (auto& v : p) {
      v = gamma(rng);
      sum += v;
    }
  } while (!(sum > 0.0));
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace detail

inline constexpr std::size_t kMaxPartitionAttempts = 1000;

/// Per-class Dirichlet split over clients. A draw leaving any client below
/// `min_shard` samples is discarded and the whole partition re-drawn.
inline PartitionPlan dirichlet_partition(const LabeledDataset& data,
                                         std::size_t num_clients, double alpha,
                                         std::uint64_t seed,
                                         std::size_t min_shard = 1) {
  if (num_clients < 2) throw ConfigError("dirichlet_partition: num_clients must be >= 2");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ConfigError("dirichlet_partition: alpha must be > 0");
  if (data.size() < num_clients * min_shard)
    throw ConfigError("dirichlet_partition: " + std::to_string(data.size()) +
                      " samples cannot give " + std::to_string(num_clients) +
                      " clients " + std::to_string(min_shard) + " each");

  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  Rng rng(seed);
  for (std::size_t attempt = 0; attempt < kMaxPartitionAttempts; ++attempt) {
    PartitionPlan plan{alpha, num_clients, seed, {}};
    plan.assignment.assign(num_clients, {});
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      auto shuffled = members;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const auto props = detail::dirichlet(num_clients, alpha, rng);
      const auto counts = detail::largest_remainder(props, shuffled.size());
      std::size_t pos = 0;
      for (std::size_t k = 0; k < num_clients; ++k) {
        auto& dst = plan.assignment[k];
        dst.insert(dst.end(), shuffled.begin() + static_cast<std::ptrdiff_t>(pos),
                   shuffled.begin() + static_cast<std::ptrdiff_t>(pos + counts[k]));
        pos += counts[k];
      }
    }
    const bool ok = std::all_of(plan.assignment.begin(), plan.assignment.end(),
                                [&](const auto& a) { return a.size() >= min_shard; });
    if (ok) {
      for (auto& a : plan.assignment) std::sort(a.begin(), a.end());
      return plan;
    }
  }
  throw ConfigError("dirichlet_partition: no draw gave every client >= " +
                    std::to_string(min_shard) + " samples after " +
                    std::to_string(kMaxPartitionAttempts) +
                    " attempts; use more data, larger alpha or a smaller batch");
}

struct TrainTestSplit {
  LabeledDataset train;
  LabeledDataset test;
};

/// Stratified split. The test total is round(n * test_fraction), spread over
/// classes by largest remainder; singleton classes always stay in train.
inline TrainTestSplit split_train_test(const LabeledDataset& shard,
                                       double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("split_train_test: test_fraction must be in (0,1)");
  if (shard.size() < 2) throw ConfigError("split_train_test: shard needs >= 2 samples");

  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < shard.size(); ++i) by_class[shard.labels[i]].push_back(i);

  const std::size_t n = shard.size();
  std::size_t target = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  target = std::clamp<std::size_t>(target, 1, n - 1);

  struct Slot {
    std::size_t cls, take, cap;
    double rem;
  };
  std::vector<Slot> slots;
  std::size_t taken = 0;
  for (const auto& [cls, members] : by_class) {
    const std::size_t cap = members.size() >= 2 ? members.size() - 1 : 0;
    const double exact = static_cast<double>(members.size()) * test_fraction;
    const std::size_t base = std::min(cap, static_cast<std::size_t>(std::floor(exact)));
    slots.push_back({cls, base, cap, exact - std::floor(exact)});
    taken += base;
  }
  std::vector<std::size_t> order(slots.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return slots[a].rem > slots[b].rem;
  });
  bool progressed = true;
  while (taken < target && progressed) {
    progressed = false;
    for (auto i : order) {
      if (taken >= target) break;
      if (slots[i].take < slots[i].cap) {
        ++slots[i].take;
        ++taken;
        progressed = true;
      }
    }
  }
  while (taken > target) {
    for (auto it = order.rbegin(); it != order.rend() && taken > target; ++it) {
      if (slots[*it].take > 0) {
        --slots[*it].take;
        --taken;
      }
    }
  }

  Rng rng(seed);
  std::vector<std::size_t> train_idx, test_idx;
  for (const auto& slot : slots) {
    auto members = by_class.at(slot.cls);
    std::shuffle(members.begin(), members.end(), rng);
    test_idx.insert(test_idx.end(), members.begin(),
                    members.begin() + static_cast<std::ptrdiff_t>(slot.take));
    train_idx.insert(train_idx.end(),
                     members.begin() + static_cast<std::ptrdiff_t>(slot.take),
                     members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {shard.subset(train_idx), shard.subset(test_idx)};
}

}  // namespace svote
