#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hcsc/common.hpp"

namespace hcsc {

struct KMeansResult {
  Matrix centroids;              // dim x k, raw (unnormalized) means
  std::vector<int> assignments;  // nearest centroid per point
  double inertia = 0.0;          // sum of squared distances
  std::vector<double> inertia_history;  // one entry per assignment pass
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with greedy k-means++ seeding.
///
/// Points are the columns of `points`. Stops after `max_iters` assignment
/// passes or once the inertia improvement drops below `tol`. An empty
/// cluster is reseeded at the point farthest from its current centroid.
/// `threads` only shards the assignment step; results do not depend on it.
KMeansResult lloyd_kmeans(const Matrix& points, std::size_t k, std::size_t max_iters, double tol,
                          Rng& rng, std::size_t threads = 1);

struct HierarchyOptions {
  std::size_t min_cluster_size = 10;
  double epsilon = 10.0;
  double base_tau = 0.2;
  double tau_floor = 1e-3;
  std::size_t kmeans_iters = 50;
  /// Independent seedings per level; the lowest final inertia wins.
  std::size_t kmeans_restarts = 5;
  double kmeans_tol = 1e-10;
  std::size_t threads = 1;
};

struct HierarchyLevel {
  Matrix prototypes;  // dim x M, unit-norm columns
  std::vector<double> tau;
  std::vector<std::size_t> member_count;  // transitive sample counts
  std::vector<int> parent;  // index into the next level; empty at the top

  std::size_t size() const { return static_cast<std::size_t>(prototypes.cols()); }
};

/// Hierarchical prototypes. Level 0 is the finest; parents point upward.
struct PrototypeTree {
  std::vector<HierarchyLevel> levels;
  std::vector<int> level1_assignment;  // finest-level prototype per sample
  std::uint64_t epoch_stamp = 0;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t num_samples() const { return level1_assignment.size(); }
  /// Prototype index of every sample at `level`, via the parent chain.
  std::vector<int> assignment(std::size_t level) const;
  /// Parent of prototype `index` at `level` (level < L-1).
  int parent_of(std::size_t level, std::size_t index) const;
};

/// Raw concentration of a cluster:
///   sum_i |z_i - c| / (n * log(n + epsilon)), natural log, no floor.
double concentration(const Matrix& members, const Vector& centroid, double epsilon);

/// Floors every tau at `floor`, then rescales so the mean equals `base`
/// while keeping every value >= floor.
std::vector<double> postprocess_temperatures(std::vector<double> raw, double floor, double base);

/// Bottom-up hierarchical k-means over unit-norm embeddings (columns).
///
/// Level 0 clusters the embeddings; level l clusters the level l-1
/// prototypes, and each child's parent is its k-means assignment. Clusters
/// with fewer than `min_cluster_size` transitive members are dropped and
/// their members move to the nearest surviving prototype of that level.
PrototypeTree build_hierarchy(const Matrix& embeddings, std::span<const std::size_t> level_sizes,
                              const HierarchyOptions& opts, Rng& rng);

/// Tree whose level-l prototypes are the normalized means of the samples
/// sharing a label at level l. Labels must nest (a tree).
PrototypeTree tree_from_labels(const Matrix& embeddings,
                               const std::vector<std::vector<int>>& labels_per_level,
                               const HierarchyOptions& opts);

/// argmax_i z . c_i / tau_i at `level`, lowest index on ties.
int nearest_prototype(const Vector& z, const PrototypeTree& tree, std::size_t level);

/// Rebuilds the prototype tree before each epoch. The returned tree is
/// immutable; old trees are never touched.
class TreeBuilder {
 public:
  TreeBuilder(std::vector<std::size_t> level_sizes, HierarchyOptions opts, std::uint64_t seed);

  std::shared_ptr<const PrototypeTree> refresh(const Matrix& embeddings, std::uint64_t epoch) const;

  const std::vector<std::size_t>& level_sizes() const { return level_sizes_; }
  const HierarchyOptions& options() const { return opts_; }

 private:
  std::vector<std::size_t> level_sizes_;
  HierarchyOptions opts_;
  std::uint64_t seed_;
};

void validate_level_sizes(std::span<const std::size_t> level_sizes, std::size_t n_samples);

/// One line per prototype: "level index parent member_count tau". Levels are
/// printed 1-based (1 = finest); parent is -1 at the top level.
std::string dump_tree(const PrototypeTree& tree);

}  // namespace hcsc
