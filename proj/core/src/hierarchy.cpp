#include "hcsc/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace hcsc {

namespace {

/// Squared distance from every point to its nearest centroid; ties -> lowest index.
void assign_points(const Matrix& points, const Matrix& centroids, std::vector<int>& assignment,
                   std::vector<double>& dist2, std::size_t threads) {
  const auto n = static_cast<std::size_t>(points.cols());
  const auto k = centroids.cols();
  parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (Eigen::Index c = 0; c < k; ++c) {
        const double d = (points.col(static_cast<Eigen::Index>(j)) - centroids.col(c)).squaredNorm();
        if (d < best) {
          best = d;
          best_c = static_cast<int>(c);
        }
      }
      assignment[j] = best_c;
      dist2[j] = best;
    }
  });
}

/// Index drawn with probability proportional to weights (sum > 0).
std::size_t sample_weighted(const std::vector<double>& weights, double total, Rng& rng) {
  const double target = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  // Round-off: fall back to the last positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.cols());
  const auto dim = points.rows();
  Matrix centers(dim, static_cast<Eigen::Index>(k));
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));

  std::size_t first = rng.below(n);
  centers.col(0) = points.col(static_cast<Eigen::Index>(first));
  std::vector<double> closest(n);
  for (std::size_t j = 0; j < n; ++j) {
    closest[j] = (points.col(static_cast<Eigen::Index>(j)) - centers.col(0)).squaredNorm();
  }
  std::vector<double> candidate_d(n);
  std::vector<double> best_d(n);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(closest.begin(), closest.end(), 0.0);
    std::size_t best_idx = 0;
    double best_pot = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t cand = total > 0.0 ? sample_weighted(closest, total, rng) : rng.below(n);
      double pot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = (points.col(static_cast<Eigen::Index>(j)) -
                          points.col(static_cast<Eigen::Index>(cand)))
                             .squaredNorm();
        candidate_d[j] = std::min(closest[j], d);
        pot += candidate_d[j];
      }
      if (pot < best_pot) {
        best_pot = pot;
        best_idx = cand;
        best_d.swap(candidate_d);
      }
    }
    centers.col(static_cast<Eigen::Index>(c)) = points.col(static_cast<Eigen::Index>(best_idx));
    closest = best_d;
  }
  return centers;
}

Vector safe_normalize(const Vector& v, const Vector& fallback) {
  const double n = v.norm();
  if (n > 1e-12) return v / n;
  const double fn = fallback.norm();
  if (fn > 0.0) return fallback / fn;
  Vector e = Vector::Zero(v.size());
  e[0] = 1.0;
  return e;
}

/// Normalized centroids; a degenerate (zero) mean falls back to its first member.
Matrix normalized_centroids(const KMeansResult& km, const Matrix& points) {
  Matrix out(km.centroids.rows(), km.centroids.cols());
  for (Eigen::Index c = 0; c < km.centroids.cols(); ++c) {
    Vector fallback = km.centroids.col(c);
    for (std::size_t j = 0; j < km.assignments.size(); ++j) {
      if (km.assignments[j] == c) {
        fallback = points.col(static_cast<Eigen::Index>(j));
        break;
      }
    }
    out.col(c) = safe_normalize(km.centroids.col(c), fallback);
  }
  return out;
}

/// Index of the column of `protos` (restricted to `allowed`) with the
/// largest dot product with v; ties -> lowest index.
int best_dot(const Vector& v, const Matrix& protos, const std::vector<char>& allowed) {
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < protos.cols(); ++i) {
    if (!allowed[static_cast<std::size_t>(i)]) continue;
    const double s = v.dot(protos.col(i));
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(i);
    }
  }
  return best;
}

/// Survivors of pruning: counts >= min_size, or the single largest cluster if none qualify.
std::vector<char> survivors(const std::vector<std::size_t>& counts, std::size_t min_size) {
  std::vector<char> keep(counts.size(), 0);
  bool any = false;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] >= min_size && counts[i] > 0) {
      keep[i] = 1;
      any = true;
    }
  }
  if (!any && !counts.empty()) {
    keep[static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin())] = 1;
  }
  return keep;
}

/// Old index -> compact index among kept entries (-1 for dropped).
std::vector<int> compact_index(const std::vector<char>& keep) {
  std::vector<int> map(keep.size(), -1);
  int next = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) map[i] = next++;
  }
  return map;
}

Matrix select_columns(const Matrix& m, const std::vector<char>& keep) {
  const auto n = std::count(keep.begin(), keep.end(), 1);
  Matrix out(m.rows(), n);
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.col(k++) = m.col(static_cast<Eigen::Index>(i));
  }
  return out;
}

void compute_temperatures(PrototypeTree& tree, const Matrix& embeddings, const HierarchyOptions& opts) {
  for (std::size_t l = 0; l < tree.levels.size(); ++l) {
    auto& level = tree.levels[l];
    const auto assign = tree.assignment(l);
    std::vector<std::vector<Eigen::Index>> members(level.size());
    for (std::size_t j = 0; j < assign.size(); ++j) {
      members[static_cast<std::size_t>(assign[j])].push_back(static_cast<Eigen::Index>(j));
    }
    std::vector<double> raw(level.size(), 0.0);
    for (std::size_t i = 0; i < level.size(); ++i) {
      level.member_count[i] = members[i].size();
      if (members[i].empty()) continue;
      Matrix m(embeddings.rows(), static_cast<Eigen::Index>(members[i].size()));
      for (std::size_t k = 0; k < members[i].size(); ++k) {
        m.col(static_cast<Eigen::Index>(k)) = embeddings.col(members[i][k]);
      }
      raw[i] = concentration(m, level.prototypes.col(static_cast<Eigen::Index>(i)), opts.epsilon);
    }
    level.tau = postprocess_temperatures(std::move(raw), opts.tau_floor, opts.base_tau);
  }
}

void validate_options(const HierarchyOptions& opts) {
  if (!(opts.epsilon > 0.0)) throw ConfigError("hierarchy: epsilon must be > 0");
  if (!(opts.base_tau > 0.0)) throw ConfigError("hierarchy: base tau must be > 0");
  if (!(opts.tau_floor > 0.0) || opts.tau_floor > opts.base_tau) {
    throw ConfigError("hierarchy: tau floor must lie in (0, base tau]");
  }
  if (opts.kmeans_restarts == 0) throw ConfigError("hierarchy: kmeans_restarts must be >= 1");
}

}  // namespace

KMeansResult lloyd_kmeans(const Matrix& points, std::size_t k, std::size_t max_iters, double tol,
                          Rng& rng, std::size_t threads) {
  const auto n = static_cast<std::size_t>(points.cols());
  if (k < 1 || k > n) {
    throw ConfigError("k-means: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  if (!points.allFinite()) throw ContractError("k-means: points must be finite");
  max_iters = std::max<std::size_t>(max_iters, 1);

  KMeansResult res;
  res.centroids = kmeans_plus_plus(points, k, rng);
  res.assignments.assign(n, 0);
  std::vector<double> dist2(n, 0.0);
  std::vector<int> previous;

  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    previous = res.assignments;
    assign_points(points, res.centroids, res.assignments, dist2, threads);
    res.inertia = std::accumulate(dist2.begin(), dist2.end(), 0.0);
    res.inertia_history.push_back(res.inertia);
    res.iterations = iter + 1;
    if (iter > 0) {
      const double improvement = res.inertia_history[iter - 1] - res.inertia;
      if (improvement < tol || res.assignments == previous) break;
    }
    if (iter + 1 == max_iters) break;

    // Update step. Empty clusters take the point farthest from its centroid.
    std::vector<std::size_t> counts(k, 0);
    for (int a : res.assignments) ++counts[static_cast<std::size_t>(a)];
    std::vector<int> assign = res.assignments;
    std::vector<double> d2 = dist2;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t j = 1; j < n; ++j) {
        if (d2[j] > d2[far]) far = j;
      }
      --counts[static_cast<std::size_t>(assign[far])];
      assign[far] = static_cast<int>(c);
      d2[far] = 0.0;
      counts[c] = 1;
    }
    Matrix sums = Matrix::Zero(points.rows(), static_cast<Eigen::Index>(k));
    for (std::size_t j = 0; j < n; ++j) sums.col(assign[j]) += points.col(static_cast<Eigen::Index>(j));
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        res.centroids.col(static_cast<Eigen::Index>(c)) =
            sums.col(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
      }
    }
  }
  return res;
}

double concentration(const Matrix& members, const Vector& centroid, double epsilon) {
  if (members.cols() == 0) throw ContractError("concentration: cluster has no members");
  if (!(epsilon > 0.0)) throw ContractError("concentration: epsilon must be > 0");
  double total = 0.0;
  for (Eigen::Index i = 0; i < members.cols(); ++i) total += (members.col(i) - centroid).norm();
  const double n = static_cast<double>(members.cols());
  return total / (n * std::log(n + epsilon));
}

std::vector<double> postprocess_temperatures(std::vector<double> raw, double floor, double base) {
  if (raw.empty()) return raw;
  for (auto& t : raw) t = std::max(t, floor);
  const double m = static_cast<double>(raw.size());
  std::vector<char> clamped(raw.size(), 0);
  double scale = 1.0;
  for (std::size_t round = 0; round <= raw.size(); ++round) {
    double free_sum = 0.0;
    std::size_t n_clamped = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (clamped[i]) ++n_clamped;
      else free_sum += raw[i];
    }
    if (free_sum <= 0.0) break;
    scale = (m * base - static_cast<double>(n_clamped) * floor) / free_sum;
    bool changed = false;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (!clamped[i] && scale * raw[i] < floor) {
        clamped[i] = 1;
        changed = true;
      }
    }
    if (!changed) break;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = clamped[i] ? floor : scale * raw[i];
  return raw;
}

std::vector<int> PrototypeTree::assignment(std::size_t level) const {
  if (level >= levels.size()) throw ContractError("PrototypeTree::assignment: level out of range");
  std::vector<int> out = level1_assignment;
  for (std::size_t l = 0; l < level; ++l) {
    for (auto& a : out) a = levels[l].parent[static_cast<std::size_t>(a)];
  }
  return out;
}

int PrototypeTree::parent_of(std::size_t level, std::size_t index) const {
  if (level + 1 >= levels.size()) throw ContractError("PrototypeTree::parent_of: top level has no parent");
  return levels[level].parent.at(index);
}

void validate_level_sizes(std::span<const std::size_t> level_sizes, std::size_t n_samples) {
  if (level_sizes.empty()) throw ConfigError("hierarchy: need at least one level");
  if (level_sizes[0] < 1 || level_sizes[0] > n_samples) {
    throw ConfigError("hierarchy: M_1=" + std::to_string(level_sizes[0]) + " must lie in [1, " +
                      std::to_string(n_samples) + "]");
  }
  for (std::size_t l = 1; l < level_sizes.size(); ++l) {
    if (level_sizes[l] < 1 || level_sizes[l] >= level_sizes[l - 1]) {
      throw ConfigError("hierarchy: level sizes must be strictly decreasing and positive");
    }
  }
}

namespace {

// Several seedings; a single one sometimes lands in a poor split when only a
// handful of prototypes are clustered.
KMeansResult best_kmeans(const Matrix& points, std::size_t k, const HierarchyOptions& opts, Rng& rng) {
  KMeansResult best = lloyd_kmeans(points, k, opts.kmeans_iters, opts.kmeans_tol, rng, opts.threads);
  for (std::size_t r = 1; r < opts.kmeans_restarts; ++r) {
    KMeansResult km = lloyd_kmeans(points, k, opts.kmeans_iters, opts.kmeans_tol, rng, opts.threads);
    if (km.inertia < best.inertia) best = std::move(km);
  }
  return best;
}

}  // namespace

PrototypeTree build_hierarchy(const Matrix& embeddings, std::span<const std::size_t> level_sizes,
                              const HierarchyOptions& opts, Rng& rng) {
  const auto n = static_cast<std::size_t>(embeddings.cols());
  validate_level_sizes(level_sizes, n);
  validate_options(opts);

  PrototypeTree tree;
  tree.levels.resize(level_sizes.size());

  // Finest level: cluster the embeddings, then prune small clusters.
  {
    const auto km = best_kmeans(embeddings, level_sizes[0], opts, rng);
    const Matrix protos = normalized_centroids(km, embeddings);
    std::vector<std::size_t> counts(level_sizes[0], 0);
    for (int a : km.assignments) ++counts[static_cast<std::size_t>(a)];
    const auto keep = survivors(counts, opts.min_cluster_size);
    const auto remap = compact_index(keep);
    tree.level1_assignment.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      int a = km.assignments[j];
      if (!keep[static_cast<std::size_t>(a)]) a = best_dot(embeddings.col(static_cast<Eigen::Index>(j)), protos, keep);
      tree.level1_assignment[j] = remap[static_cast<std::size_t>(a)];
    }
    auto& level = tree.levels[0];
    level.prototypes = select_columns(protos, keep);
    level.member_count.assign(static_cast<std::size_t>(level.prototypes.cols()), 0);
    for (int a : tree.level1_assignment) ++level.member_count[static_cast<std::size_t>(a)];
  }

  // Upper levels: cluster the prototypes of the level below.
  for (std::size_t l = 1; l < level_sizes.size(); ++l) {
    auto& child = tree.levels[l - 1];
    const Matrix& points = child.prototypes;
    const std::size_t k = std::min<std::size_t>(level_sizes[l], static_cast<std::size_t>(points.cols()));
    const auto km = best_kmeans(points, k, opts, rng);
    const Matrix protos = normalized_centroids(km, points);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t c = 0; c < child.member_count.size(); ++c) {
      counts[static_cast<std::size_t>(km.assignments[c])] += child.member_count[c];
    }
    const auto keep = survivors(counts, opts.min_cluster_size);
    const auto remap = compact_index(keep);
    child.parent.resize(child.member_count.size());
    for (std::size_t c = 0; c < child.parent.size(); ++c) {
      int a = km.assignments[c];
      if (!keep[static_cast<std::size_t>(a)]) a = best_dot(points.col(static_cast<Eigen::Index>(c)), protos, keep);
      child.parent[c] = remap[static_cast<std::size_t>(a)];
    }
    auto& level = tree.levels[l];
    level.prototypes = select_columns(protos, keep);
    level.member_count.assign(static_cast<std::size_t>(level.prototypes.cols()), 0);
    for (std::size_t c = 0; c < child.parent.size(); ++c) {
      level.member_count[static_cast<std::size_t>(child.parent[c])] += child.member_count[c];
    }
  }

  compute_temperatures(tree, embeddings, opts);
  return tree;
}

PrototypeTree tree_from_labels(const Matrix& embeddings,
                               const std::vector<std::vector<int>>& labels_per_level,
                               const HierarchyOptions& opts) {
  const auto n = static_cast<std::size_t>(embeddings.cols());
  if (labels_per_level.empty()) throw ContractError("tree_from_labels: no label levels");
  PrototypeTree tree;
  tree.levels.resize(labels_per_level.size());
  std::vector<std::vector<int>> compact(labels_per_level.size());
  for (std::size_t l = 0; l < labels_per_level.size(); ++l) {
    const auto& labels = labels_per_level[l];
    if (labels.size() != n) throw ContractError("tree_from_labels: label count mismatch");
    std::map<int, int> ids;
    for (int v : labels) ids.emplace(v, 0);
    int next = 0;
    for (auto& [v, id] : ids) id = next++;
    compact[l].resize(n);
    Matrix sums = Matrix::Zero(embeddings.rows(), next);
    for (std::size_t j = 0; j < n; ++j) {
      compact[l][j] = ids[labels[j]];
      sums.col(compact[l][j]) += embeddings.col(static_cast<Eigen::Index>(j));
    }
    auto& level = tree.levels[l];
    level.prototypes.resize(embeddings.rows(), next);
    level.member_count.assign(static_cast<std::size_t>(next), 0);
    for (int c = 0; c < next; ++c) {
      Vector fallback = sums.col(c);
      for (std::size_t j = 0; j < n; ++j) {
        if (compact[l][j] == c) {
          fallback = embeddings.col(static_cast<Eigen::Index>(j));
          break;
        }
      }
      level.prototypes.col(c) = safe_normalize(sums.col(c), fallback);
    }
  }
  tree.level1_assignment = compact[0];
  for (std::size_t l = 0; l + 1 < compact.size(); ++l) {
    auto& parent = tree.levels[l].parent;
    parent.assign(static_cast<std::size_t>(tree.levels[l].prototypes.cols()), -1);
    for (std::size_t j = 0; j < n; ++j) {
      auto& p = parent[static_cast<std::size_t>(compact[l][j])];
      if (p == -1) p = compact[l + 1][j];
      else if (p != compact[l + 1][j]) throw ContractError("tree_from_labels: labels do not nest");
    }
  }
  compute_temperatures(tree, embeddings, opts);
  return tree;
}

int nearest_prototype(const Vector& z, const PrototypeTree& tree, std::size_t level) {
  if (level >= tree.levels.size()) throw ContractError("nearest_prototype: level out of range");
  const auto& lv = tree.levels[level];
  const Vector dots = lv.prototypes.transpose() * z;
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < dots.size(); ++i) {
    const double s = dots[i] / lv.tau[static_cast<std::size_t>(i)];
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(i);
    }
  }
  return best;
}

TreeBuilder::TreeBuilder(std::vector<std::size_t> level_sizes, HierarchyOptions opts, std::uint64_t seed)
    : level_sizes_(std::move(level_sizes)), opts_(opts), seed_(seed) {
  if (level_sizes_.empty()) throw ConfigError("hierarchy: need at least one level");
  validate_options(opts_);
}

std::shared_ptr<const PrototypeTree> TreeBuilder::refresh(const Matrix& embeddings,
                                                          std::uint64_t epoch) const {
  Rng rng = Rng::substream(seed_, Stream::kKMeans, epoch);
  auto tree = std::make_shared<PrototypeTree>(build_hierarchy(embeddings, level_sizes_, opts_, rng));
  tree->epoch_stamp = epoch;
  return tree;
}

std::string dump_tree(const PrototypeTree& tree) {
  std::string out;
  for (std::size_t l = 0; l < tree.levels.size(); ++l) {
    const auto& level = tree.levels[l];
    for (std::size_t i = 0; i < level.size(); ++i) {
      const int parent = level.parent.empty() ? -1 : level.parent[i];
      out += std::to_string(l + 1) + " " + std::to_string(i) + " " + std::to_string(parent) + " " +
             std::to_string(level.member_count[i]) + " " + format_double(level.tau[i]) + "\n";
    }
  }
  return out;
}

}  // namespace hcsc
