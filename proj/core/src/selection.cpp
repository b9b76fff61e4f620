#include "hcsc/selection.hpp"

#include <algorithm>
#include <cmath>

namespace hcsc {

namespace {

void check_level(const PrototypeTree& tree, std::size_t level, const char* who) {
  if (level >= tree.num_levels()) {
    throw ContractError(std::string(who) + ": level " + std::to_string(level) + " out of range");
  }
}

/// Column-wise softmax of (prototypes^T * vectors) / tau.
Matrix softmax_columns(const HierarchyLevel& level, const Matrix& vectors) {
  Matrix logits = level.prototypes.transpose() * vectors;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) logits.row(i) /= level.tau[static_cast<std::size_t>(i)];
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    logits.col(c) = softmax(logits.col(c));
  }
  return logits;
}

}  // namespace

std::size_t SelectionReport::accepted_count() const {
  return static_cast<std::size_t>(std::count(accepted.begin(), accepted.end(), std::uint8_t{1}));
}

double SelectionReport::mean_probability() const {
  if (probabilities.empty()) return 0.0;
  double s = 0.0;
  for (double p : probabilities) s += p;
  return s / static_cast<double>(probabilities.size());
}

double cluster_similarity(const Vector& v, const PrototypeTree& tree, std::size_t level, std::size_t j) {
  check_level(tree, level, "cluster_similarity");
  const auto& lv = tree.levels[level];
  if (j >= lv.size()) throw ContractError("cluster_similarity: prototype index out of range");
  return v.dot(lv.prototypes.col(static_cast<Eigen::Index>(j))) / lv.tau[j];
}

double instance_selection_prob(const Vector& z_j, const Vector& z, const PrototypeTree& tree,
                               std::size_t level) {
  check_level(tree, level, "instance_selection_prob");
  const int pos = nearest_prototype(z, tree, level);
  const Matrix mass = softmax_columns(tree.levels[level], z_j);
  return std::clamp(1.0 - mass(pos, 0), 0.0, 1.0);
}

double proto_selection_prob(std::size_t j, std::size_t pos, const PrototypeTree& tree, std::size_t level) {
  check_level(tree, level, "proto_selection_prob");
  if (level + 1 >= tree.num_levels()) {
    throw ContractError("proto_selection_prob: the top level is exempt from selection");
  }
  const auto& lv = tree.levels[level];
  if (j >= lv.size() || pos >= lv.size()) throw ContractError("proto_selection_prob: index out of range");
  const int parent = tree.parent_of(level, pos);
  const Matrix mass = softmax_columns(tree.levels[level + 1], lv.prototypes.col(static_cast<Eigen::Index>(j)));
  return std::clamp(1.0 - mass(parent, 0), 0.0, 1.0);
}

QueueAffinity compute_queue_affinity(const QueueSnapshot& snapshot, const PrototypeTree& tree) {
  QueueAffinity aff;
  for (const auto& level : tree.levels) aff.levels.push_back(softmax_columns(level, snapshot.keys));
  return aff;
}

PrototypeAffinity compute_prototype_affinity(const PrototypeTree& tree) {
  PrototypeAffinity aff;
  for (std::size_t l = 0; l + 1 < tree.num_levels(); ++l) {
    aff.levels.push_back(softmax_columns(tree.levels[l + 1], tree.levels[l].prototypes).transpose());
  }
  return aff;
}

std::vector<SelectionReport> select_instance_negatives(const Vector& z, const QueueSnapshot& snapshot,
                                                       const PrototypeTree& tree,
                                                       const SelectionStreams& streams) {
  return select_instance_negatives(z, compute_queue_affinity(snapshot, tree), tree, streams);
}

std::vector<SelectionReport> select_instance_negatives(const Vector& z, const QueueAffinity& affinity,
                                                       const PrototypeTree& tree,
                                                       const SelectionStreams& streams) {
  if (affinity.levels.size() != tree.num_levels()) {
    throw ContractError("select_instance_negatives: affinity does not match the tree");
  }
  std::vector<SelectionReport> reports(tree.num_levels());
  for (std::size_t l = 0; l < tree.num_levels(); ++l) {
    const Matrix& mass = affinity.levels[l];
    const int pos = nearest_prototype(z, tree, l);
    Rng rng = streams.instance(l);
    auto& r = reports[l];
    r.level = l;
    const auto n = static_cast<std::size_t>(mass.cols());
    r.candidates.resize(n);
    r.probabilities.resize(n);
    r.accepted.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double p = std::clamp(1.0 - mass(pos, static_cast<Eigen::Index>(k)), 0.0, 1.0);
      r.candidates[k] = static_cast<int>(k);
      r.probabilities[k] = p;
      r.accepted[k] = rng.bernoulli(p) ? 1 : 0;
    }
  }
  return reports;
}

SelectionReport select_proto_negatives(const Vector& z, const PrototypeTree& tree, std::size_t level,
                                       Rng& rng) {
  check_level(tree, level, "select_proto_negatives");
  return select_proto_negatives(nearest_prototype(z, tree, level), compute_prototype_affinity(tree), tree,
                                level, rng);
}

SelectionReport select_proto_negatives(int pos, const PrototypeAffinity& affinity,
                                       const PrototypeTree& tree, std::size_t level, Rng& rng) {
  check_level(tree, level, "select_proto_negatives");
  const std::size_t m = tree.levels[level].size();
  if (level + 1 == tree.num_levels()) return accept_all_prototypes(level, m, pos);
  if (affinity.levels.size() + 1 != tree.num_levels()) {
    throw ContractError("select_proto_negatives: affinity does not match the tree");
  }
  const int parent = tree.parent_of(level, static_cast<std::size_t>(pos));
  const Matrix& mass = affinity.levels[level];
  SelectionReport r;
  r.level = level;
  for (std::size_t j = 0; j < m; ++j) {
    if (static_cast<int>(j) == pos) continue;
    const double p = std::clamp(1.0 - mass(static_cast<Eigen::Index>(j), parent), 0.0, 1.0);
    r.candidates.push_back(static_cast<int>(j));
    r.probabilities.push_back(p);
    r.accepted.push_back(rng.bernoulli(p) ? 1 : 0);
  }
  return r;
}

SelectionReport accept_all_instances(std::size_t level, std::size_t queue_size) {
  SelectionReport r;
  r.level = level;
  r.candidates.resize(queue_size);
  for (std::size_t k = 0; k < queue_size; ++k) r.candidates[k] = static_cast<int>(k);
  r.probabilities.assign(queue_size, 1.0);
  r.accepted.assign(queue_size, 1);
  return r;
}

SelectionReport accept_all_prototypes(std::size_t level, std::size_t n_prototypes, int pos) {
  SelectionReport r;
  r.level = level;
  for (std::size_t j = 0; j < n_prototypes; ++j) {
    if (static_cast<int>(j) == pos) continue;
    r.candidates.push_back(static_cast<int>(j));
    r.probabilities.push_back(1.0);
    r.accepted.push_back(1);
  }
  return r;
}

std::string selection_csv_header() { return "step,level,query_id,candidate_id,p,accepted\n"; }

std::string selection_csv_rows(const std::vector<SelectionReport>& reports, std::uint64_t step,
                               std::int64_t query_id) {
  std::string out;
  for (const auto& r : reports) {
    for (std::size_t k = 0; k < r.candidates.size(); ++k) {
      out += std::to_string(step) + "," + std::to_string(r.level + 1) + "," + std::to_string(query_id) + "," +
             std::to_string(r.candidates[k]) + "," + format_double(r.probabilities[k]) + "," +
             std::to_string(static_cast<int>(r.accepted[k])) + "\n";
    }
  }
  return out;
}

}  // namespace hcsc
