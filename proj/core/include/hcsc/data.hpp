#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hcsc/common.hpp"

namespace hcsc {

/// Parameters of the hierarchical Gaussian mixture generator.
///
/// The tree is described root to leaf: `branching[0]` root centers are drawn
/// uniformly on the sphere of radius `root_radius`; every node at tree depth
/// d has `branching[d]` children offset from it by isotropic Gaussian noise
/// with per-coordinate std `offset_scales[d-1]`; each leaf emits
/// `samples_per_leaf` points with per-coordinate std `leaf_noise`.
struct GeneratorSpec {
  std::uint32_t depth = 3;
  std::vector<std::uint32_t> branching{2, 3, 4};
  std::uint32_t samples_per_leaf = 50;
  std::uint32_t dim = 32;
  double root_radius = 10.0;
  std::vector<double> offset_scales{1.0, 0.2};
  double leaf_noise = 0.04;
  std::uint64_t seed = 0;

  /// Throws ConfigError when the spec cannot be generated.
  void validate() const;
  std::size_t leaf_count() const;
  std::size_t sample_count() const { return leaf_count() * samples_per_leaf; }
  /// Number of distinct labels at label level `level` (0 = finest).
  std::size_t label_count(std::size_t level) const;

  std::string to_kv() const;
  static GeneratorSpec from_kv(std::string_view text);

  bool operator==(const GeneratorSpec&) const = default;
};

struct Sample {
  std::uint64_t id = 0;
  std::vector<float> features;
  /// labels[0] is the finest level; labels[depth-1] the root.
  std::vector<std::uint32_t> labels;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  GeneratorSpec meta;

  std::size_t size() const { return samples.size(); }
  std::size_t dim() const { return meta.dim; }
  std::size_t depth() const { return meta.depth; }

  /// Labels of every sample at `level` (0 = finest).
  std::vector<int> labels_at(std::size_t level) const;
  std::vector<int> labels_at(std::size_t level, std::span<const std::size_t> indices) const;
  /// Raw features as a dim x N matrix (one sample per column).
  Matrix features() const;
  Matrix features(std::span<const std::size_t> indices) const;

  bool operator==(const Dataset&) const = default;
};

Dataset generate_hierarchical_mixture(GeneratorSpec spec, std::uint64_t seed);

/// Vector-space augmentation: x' = mask * (s * x + noise).
class AugmentationPolicy {
 public:
  AugmentationPolicy() = default;
  /// Throws ConfigError unless sigma >= 0, drop in [0,1) and 0 < lo <= hi.
  AugmentationPolicy(double noise_sigma, double drop_prob, double scale_lo, double scale_hi);

  static AugmentationPolicy identity() { return {0.0, 0.0, 1.0, 1.0}; }

  double noise_sigma() const { return noise_sigma_; }
  double drop_prob() const { return drop_prob_; }
  double scale_lo() const { return scale_lo_; }
  double scale_hi() const { return scale_hi_; }

 private:
  double noise_sigma_ = 0.0;
  double drop_prob_ = 0.0;
  double scale_lo_ = 1.0;
  double scale_hi_ = 1.0;
};

Vector augment(std::span<const float> x, const AugmentationPolicy& policy, Rng& rng);

// Binary dataset file ("HCSD").
inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::string_view bytes);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace hcsc
