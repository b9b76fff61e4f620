#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcsc/common.hpp"
#include "hcsc/encoder.hpp"
#include "hcsc/hierarchy.hpp"

namespace hcsc {

/// Outcome of negative selection for one query at one level.
/// `candidates` index the queue snapshot (instance selection) or the
/// level's prototypes (prototypical selection).
struct SelectionReport {
  std::size_t level = 0;  // 0 = finest
  std::vector<int> candidates;
  std::vector<double> probabilities;
  std::vector<std::uint8_t> accepted;

  std::size_t accepted_count() const;
  double mean_probability() const;
};

/// Seeds for the per-(step, query, level) Bernoulli substreams.
struct SelectionStreams {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t query = 0;

  Rng instance(std::size_t level) const {
    return Rng::substream(seed, Stream::kInstanceSelect, step, query, level);
  }
  Rng prototype(std::size_t level) const {
    return Rng::substream(seed, Stream::kProtoSelect, step, query, level);
  }
};

/// s(v, c_j) = v . c_j / tau_j at `level`.
double cluster_similarity(const Vector& v, const PrototypeTree& tree, std::size_t level, std::size_t j);

/// 1 - softmax_i(s(z_j, c_i))[c(z)] over the prototypes of `level`,
/// where c(z) is the query's nearest prototype.
double instance_selection_prob(const Vector& z_j, const Vector& z, const PrototypeTree& tree,
                               std::size_t level);

/// 1 - softmax_i(s(c_j, c^{l+1}_i))[Parent(c_pos)]. Not defined at the top level.
double proto_selection_prob(std::size_t j, std::size_t pos, const PrototypeTree& tree, std::size_t level);

/// Softmax of every queue key's similarities to every prototype, per level.
/// Row i of levels[l] is the mass each key puts on prototype i, so a query
/// assigned to prototype i selects key k with probability 1 - levels[l](i, k).
struct QueueAffinity {
  std::vector<Matrix> levels;  // M_l x queue size
};
QueueAffinity compute_queue_affinity(const QueueSnapshot& snapshot, const PrototypeTree& tree);

/// Same idea for prototypes: levels[l](j, i) is the softmax mass that
/// prototype j of level l puts on prototype i of level l+1.
struct PrototypeAffinity {
  std::vector<Matrix> levels;  // M_l x M_{l+1}, for l < L-1
};
PrototypeAffinity compute_prototype_affinity(const PrototypeTree& tree);

/// Bernoulli selection of queue negatives at every level.
std::vector<SelectionReport> select_instance_negatives(const Vector& z, const QueueSnapshot& snapshot,
                                                       const PrototypeTree& tree,
                                                       const SelectionStreams& streams);
std::vector<SelectionReport> select_instance_negatives(const Vector& z, const QueueAffinity& affinity,
                                                       const PrototypeTree& tree,
                                                       const SelectionStreams& streams);

/// Prototype negatives at `level`. The top level accepts every
/// non-positive prototype with probability 1.
SelectionReport select_proto_negatives(const Vector& z, const PrototypeTree& tree, std::size_t level,
                                       Rng& rng);
SelectionReport select_proto_negatives(int pos, const PrototypeAffinity& affinity,
                                       const PrototypeTree& tree, std::size_t level, Rng& rng);

/// Reports that keep every candidate (selection switched off).
SelectionReport accept_all_instances(std::size_t level, std::size_t queue_size);
SelectionReport accept_all_prototypes(std::size_t level, std::size_t n_prototypes, int pos);

/// Diagnostics CSV rows: step,level,query_id,candidate_id,p,accepted
/// (level printed 1-based).
std::string selection_csv_header();
std::string selection_csv_rows(const std::vector<SelectionReport>& reports, std::uint64_t step,
                               std::int64_t query_id);

}  // namespace hcsc
