#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace svote {

using ParamVector = std::vector<double>;
using ClientId = std::size_t;
using Rng = std::mt19937_64;

// Error families. Each maps to one failure class of the simulator; the CLI
// turns ConfigError into exit status 1 and everything else into 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SimilarityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Row-major sample matrix plus class labels.
struct LabeledDataset {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  // size() * input_dim values
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  const double* row(std::size_t i) const noexcept {
    return features.data() + i * input_dim;
  }

  void validate() const {
    if (features.size() != labels.size() * input_dim)
      throw ConfigError("dataset: feature rows do not match label count");
    for (auto y : labels)
      if (y >= num_classes)
        throw ConfigError("dataset: label " + std::to_string(y) +
                          " out of range for " + std::to_string(num_classes) +
                          " classes");
  }

  LabeledDataset subset(const std::vector<std::size_t>& indices) const {
    LabeledDataset out;
    out.input_dim = input_dim;
    out.num_classes = num_classes;
    out.features.reserve(indices.size() * input_dim);
    out.labels.reserve(indices.size());
    for (auto i : indices) {
      out.features.insert(out.features.end(), row(i), row(i) + input_dim);
      out.labels.push_back(labels[i]);
    }
    return out;
  }
};

// Stable seed derivation: splitmix64 over (master, FNV-1a(purpose), client).
// Streams for one client never depend on how many other clients exist.
namespace seeding {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t derive(std::uint64_t master, std::string_view purpose,
                               std::uint64_t client = 0) noexcept {
  return splitmix64(splitmix64(splitmix64(master) ^ fnv1a(purpose)) ^ client);
}

}  // namespace seeding

inline Rng make_rng(std::uint64_t master, std::string_view purpose,
                    std::uint64_t client = 0) {
  return Rng(seeding::derive(master, purpose, client));
}

}  // namespace svote
