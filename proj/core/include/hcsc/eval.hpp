#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hcsc/common.hpp"
#include "hcsc/hierarchy.hpp"
#include "hcsc/selection.hpp"

namespace hcsc {

struct EvalConfig {
  double knn_temperature = 0.07;
  std::vector<std::size_t> knn_k_grid{10, 20, 100, 200};
  std::size_t probe_epochs = 300;
  double probe_lr = 0.5;
  double probe_test_fraction = 0.2;
  std::uint64_t probe_seed = 0;
  /// Fraction of queries whose selection reports go to the diagnostics CSV.
  double diagnostic_rate = 0.01;

  void validate() const;
};

struct KnnResult {
  std::vector<std::size_t> k_values;  // after clamping to the train size
  std::vector<double> accuracy;       // one per k
  std::size_t best_k = 0;
  double best_accuracy = 0.0;
  std::vector<std::string> warnings;
};

/// Weighted-vote KNN on unit-norm embeddings (columns): the top-k train
/// neighbours by cosine vote for their label with weight exp(cos / T);
/// ties in the vote go to the lowest class label.
KnnResult knn_evaluate(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& test_emb,
                       std::span<const int> test_labels, const EvalConfig& config);

/// Unnormalized class likelihoods p_c(x) for one query and one k.
std::vector<std::pair<int, double>> knn_class_scores(const Matrix& train_emb, std::span<const int> train_labels,
                                                     const Vector& query, std::size_t k, double temperature);

struct ClusteringAgreement {
  double nmi = 0.0;
  double ami = 0.0;
};

/// NMI and AMI with arithmetic-mean normalization and natural logs. AMI uses
/// the expected mutual information under the hypergeometric model. 0/0 -> 0.
ClusteringAgreement clustering_agreement(std::span<const int> a, std::span<const int> b);

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<double> loss_history;  // training cross-entropy per epoch
};

/// Multinomial logistic regression on frozen embeddings, full-batch gradient
/// descent, accuracy on a seeded held-out split.
ProbeResult linear_probe(const Matrix& emb, std::span<const int> labels, const EvalConfig& config);

/// Same, with an explicit train/test split.
ProbeResult linear_probe_split(const Matrix& train_emb, std::span<const int> train_labels,
                               const Matrix& test_emb, std::span<const int> test_labels,
                               const EvalConfig& config);

/// Counts behind the negative-selection diagnostics. A false negative is a
/// candidate that shares the query's finest ground-truth label.
struct NegativeDiagnostics {
  std::size_t false_negatives = 0;
  std::size_t false_negatives_rejected = 0;
  std::size_t true_negatives = 0;
  std::size_t true_negatives_accepted = 0;
  std::size_t accepted = 0;

  NegativeDiagnostics& operator+=(const NegativeDiagnostics& o);
  /// Rejected / total false negatives (1 when there are none).
  double false_negative_removal() const;
  /// True negatives among accepted candidates (1 when nothing was accepted).
  double true_negative_precision() const;
  /// Accepted / total true negatives (1 when there are none).
  double true_negative_preservation() const;
};

/// `candidate_labels[c]` is the finest label of candidate c; negative
/// entries (unknown source) are skipped.
NegativeDiagnostics negative_selection_diagnostics(const std::vector<SelectionReport>& reports, int query_label,
                                                   std::span<const int> candidate_labels);

/// AMI between each tree level's sample assignment and each label level.
/// result[tree_level][label_level].
std::vector<std::vector<double>> prototype_label_ami(const PrototypeTree& tree,
                                                     const std::vector<std::vector<int>>& labels_per_level);

}  // namespace hcsc
