#include "hcsc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace hcsc {

namespace {

/// Relabels arbitrary integers to 0..K-1 (sorted order).
std::vector<int> compact_labels(std::span<const int> labels, std::size_t* n_classes) {
  std::map<int, int> ids;
  for (int v : labels) ids.emplace(v, 0);
  int next = 0;
  for (auto& [v, id] : ids) id = next++;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = ids[labels[i]];
  if (n_classes) *n_classes = static_cast<std::size_t>(next);
  return out;
}

double entropy(const std::vector<double>& counts, double n) {
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) h -= (c / n) * std::log(c / n);
  }
  return h;
}

double expected_mutual_information(const std::vector<double>& a, const std::vector<double>& b, double n) {
  const double lg_n = std::lgamma(n + 1.0);
  double emi = 0.0;
  for (double ai : a) {
    for (double bj : b) {
      const double lo = std::max(1.0, ai + bj - n);
      const double hi = std::min(ai, bj);
      const double fixed = std::lgamma(ai + 1.0) + std::lgamma(bj + 1.0) + std::lgamma(n - ai + 1.0) +
                           std::lgamma(n - bj + 1.0) - lg_n;
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double log_p = fixed - std::lgamma(nij + 1.0) - std::lgamma(ai - nij + 1.0) -
                             std::lgamma(bj - nij + 1.0) - std::lgamma(n - ai - bj + nij + 1.0);
        emi += (nij / n) * std::log(n * nij / (ai * bj)) * std::exp(log_p);
      }
    }
  }
  return emi;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double test_fraction,
                                                                            std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng::substream(seed, Stream::kProbe);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::size_t n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {train, test};
}

}  // namespace

void EvalConfig::validate() const {
  if (!(knn_temperature > 0.0)) throw ConfigError("eval: KNN temperature must be > 0");
  if (knn_k_grid.empty()) throw ConfigError("eval: KNN k grid must not be empty");
  for (auto k : knn_k_grid) {
    if (k < 1) throw ConfigError("eval: every KNN k must be >= 1");
  }
  if (!(probe_lr > 0.0)) throw ConfigError("eval: probe learning rate must be > 0");
  if (!(probe_test_fraction > 0.0 && probe_test_fraction < 1.0)) {
    throw ConfigError("eval: probe test fraction must lie in (0, 1)");
  }
  if (!(diagnostic_rate >= 0.0 && diagnostic_rate <= 1.0)) {
    throw ConfigError("eval: diagnostic rate must lie in [0, 1]");
  }
}

std::vector<std::pair<int, double>> knn_class_scores(const Matrix& train_emb, std::span<const int> train_labels,
                                                     const Vector& query, std::size_t k, double temperature) {
  const Vector scores = train_emb.transpose() * query;
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores[static_cast<Eigen::Index>(a)];
                      const double sb = scores[static_cast<Eigen::Index>(b)];
                      return sa > sb || (sa == sb && a < b);
                    });
  std::map<int, double> votes;
  for (std::size_t r = 0; r < k; ++r) {
    const auto i = order[r];
    votes[train_labels[i]] += std::exp(scores[static_cast<Eigen::Index>(i)] / temperature);
  }
  return {votes.begin(), votes.end()};
}

KnnResult knn_evaluate(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& test_emb,
                       std::span<const int> test_labels, const EvalConfig& config) {
  config.validate();
  const auto n_train = static_cast<std::size_t>(train_emb.cols());
  if (train_labels.size() != n_train || test_labels.size() != static_cast<std::size_t>(test_emb.cols())) {
    throw ContractError("knn_evaluate: label count does not match embeddings");
  }
  if (n_train == 0) throw ContractError("knn_evaluate: empty train set");

  KnnResult res;
  for (auto k : config.knn_k_grid) {
    if (k > n_train) {
      res.warnings.push_back("k=" + std::to_string(k) + " exceeds the train size; clamped to " +
                             std::to_string(n_train));
      k = n_train;
    }
    res.k_values.push_back(k);
  }
  const std::size_t k_max = *std::max_element(res.k_values.begin(), res.k_values.end());
  std::vector<std::size_t> correct(res.k_values.size(), 0);
  const auto n_test = static_cast<std::size_t>(test_emb.cols());

  std::vector<std::size_t> order(n_train);
  for (std::size_t q = 0; q < n_test; ++q) {
    const Vector scores = train_emb.transpose() * test_emb.col(static_cast<Eigen::Index>(q));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_max), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = scores[static_cast<Eigen::Index>(a)];
                        const double sb = scores[static_cast<Eigen::Index>(b)];
                        return sa > sb || (sa == sb && a < b);
                      });
    for (std::size_t g = 0; g < res.k_values.size(); ++g) {
      std::map<int, double> votes;
      for (std::size_t r = 0; r < res.k_values[g]; ++r) {
        const auto i = order[r];
        votes[train_labels[i]] += std::exp(scores[static_cast<Eigen::Index>(i)] / config.knn_temperature);
      }
      int best_label = 0;
      double best = -1.0;
      for (const auto& [label, v] : votes) {
        if (v > best) {
          best = v;
          best_label = label;
        }
      }
      if (best_label == test_labels[q]) ++correct[g];
    }
  }
  for (std::size_t g = 0; g < res.k_values.size(); ++g) {
    const double acc = n_test ? static_cast<double>(correct[g]) / static_cast<double>(n_test) : 0.0;
    res.accuracy.push_back(acc);
    if (g == 0 || acc > res.best_accuracy) {
      res.best_accuracy = acc;
      res.best_k = res.k_values[g];
    }
  }
  return res;
}

ClusteringAgreement clustering_agreement(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ContractError("clustering_agreement: label vectors differ in length");
  if (a.empty()) throw ContractError("clustering_agreement: empty labelings");
  std::size_t ka = 0;
  std::size_t kb = 0;
  const auto ca = compact_labels(a, &ka);
  const auto cb = compact_labels(b, &kb);
  const double n = static_cast<double>(a.size());

  std::vector<double> table(ka * kb, 0.0);
  std::vector<double> row(ka, 0.0);
  std::vector<double> col(kb, 0.0);
  for (std::size_t i = 0; i < ca.size(); ++i) {
    table[static_cast<std::size_t>(ca[i]) * kb + static_cast<std::size_t>(cb[i])] += 1.0;
    row[static_cast<std::size_t>(ca[i])] += 1.0;
    col[static_cast<std::size_t>(cb[i])] += 1.0;
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < ka; ++i) {
    for (std::size_t j = 0; j < kb; ++j) {
      const double nij = table[i * kb + j];
      if (nij > 0.0) mi += (nij / n) * std::log(n * nij / (row[i] * col[j]));
    }
  }
  mi = std::max(mi, 0.0);
  const double mean_h = 0.5 * (entropy(row, n) + entropy(col, n));

  ClusteringAgreement out;
  out.nmi = mean_h > 0.0 ? std::min(1.0, mi / mean_h) : 0.0;
  const double emi = expected_mutual_information(row, col, n);
  const double denom = mean_h - emi;
  out.ami = std::abs(denom) > 1e-15 ? (mi - emi) / denom : 0.0;
  return out;
}

ProbeResult linear_probe(const Matrix& emb, std::span<const int> labels, const EvalConfig& config) {
  config.validate();
  if (labels.size() != static_cast<std::size_t>(emb.cols())) {
    throw ContractError("linear_probe: label count does not match embeddings");
  }
  if (emb.cols() < 2) throw ConfigError("linear_probe: need at least two samples");
  const auto [train, test] = split_indices(labels.size(), config.probe_test_fraction, config.probe_seed);
  Matrix tr(emb.rows(), static_cast<Eigen::Index>(train.size()));
  Matrix te(emb.rows(), static_cast<Eigen::Index>(test.size()));
  std::vector<int> ytr;
  std::vector<int> yte;
  for (std::size_t i = 0; i < train.size(); ++i) {
    tr.col(static_cast<Eigen::Index>(i)) = emb.col(static_cast<Eigen::Index>(train[i]));
    ytr.push_back(labels[train[i]]);
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    te.col(static_cast<Eigen::Index>(i)) = emb.col(static_cast<Eigen::Index>(test[i]));
    yte.push_back(labels[test[i]]);
  }
  return linear_probe_split(tr, ytr, te, yte, config);
}

ProbeResult linear_probe_split(const Matrix& train_emb, std::span<const int> train_labels,
                               const Matrix& test_emb, std::span<const int> test_labels,
                               const EvalConfig& config) {
  config.validate();
  std::vector<int> all(train_labels.begin(), train_labels.end());
  all.insert(all.end(), test_labels.begin(), test_labels.end());
  std::size_t n_classes = 0;
  const auto compact = compact_labels(all, &n_classes);
  if (n_classes < 2) throw ConfigError("linear_probe: labels contain a single class");
  const auto n = static_cast<Eigen::Index>(train_labels.size());
  if (n == 0) throw ContractError("linear_probe: empty train split");
  const auto dim = train_emb.rows();
  const auto c = static_cast<Eigen::Index>(n_classes);

  Matrix onehot = Matrix::Zero(c, n);
  for (Eigen::Index i = 0; i < n; ++i) onehot(compact[static_cast<std::size_t>(i)], i) = 1.0;

  Matrix w = Matrix::Zero(c, dim);
  Vector b = Vector::Zero(c);
  ProbeResult res;
  for (std::size_t epoch = 0; epoch < config.probe_epochs; ++epoch) {
    Matrix logits = w * train_emb;
    logits.colwise() += b;
    Matrix prob(c, n);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double lse = log_sum_exp(logits.col(i));
      prob.col(i) = (logits.col(i).array() - lse).exp().matrix();
      loss += lse - logits(compact[static_cast<std::size_t>(i)], i);
    }
    res.loss_history.push_back(loss / static_cast<double>(n));
    const Matrix g = (prob - onehot) / static_cast<double>(n);
    w -= config.probe_lr * g * train_emb.transpose();
    b -= config.probe_lr * g.rowwise().sum();
  }

  std::size_t correct = 0;
  const auto n_test = static_cast<std::size_t>(test_emb.cols());
  for (std::size_t i = 0; i < n_test; ++i) {
    const Vector logits = w * test_emb.col(static_cast<Eigen::Index>(i)) + b;
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.size(); ++k) {
      if (logits[k] > logits[best]) best = k;
    }
    if (best == compact[train_labels.size() + i]) ++correct;
  }
  res.accuracy = n_test ? static_cast<double>(correct) / static_cast<double>(n_test) : 0.0;
  return res;
}

NegativeDiagnostics& NegativeDiagnostics::operator+=(const NegativeDiagnostics& o) {
  false_negatives += o.false_negatives;
  false_negatives_rejected += o.false_negatives_rejected;
  true_negatives += o.true_negatives;
  true_negatives_accepted += o.true_negatives_accepted;
  accepted += o.accepted;
  return *this;
}

double NegativeDiagnostics::false_negative_removal() const {
  return false_negatives ? static_cast<double>(false_negatives_rejected) / static_cast<double>(false_negatives)
                         : 1.0;
}

double NegativeDiagnostics::true_negative_precision() const {
  return accepted ? static_cast<double>(true_negatives_accepted) / static_cast<double>(accepted) : 1.0;
}

double NegativeDiagnostics::true_negative_preservation() const {
  return true_negatives ? static_cast<double>(true_negatives_accepted) / static_cast<double>(true_negatives)
                        : 1.0;
}

NegativeDiagnostics negative_selection_diagnostics(const std::vector<SelectionReport>& reports, int query_label,
                                                   std::span<const int> candidate_labels) {
  NegativeDiagnostics d;
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
      const auto c = static_cast<std::size_t>(r.candidates[i]);
      if (c >= candidate_labels.size()) throw ContractError("negative_selection_diagnostics: candidate without label");
      const int label = candidate_labels[c];
      if (label < 0) continue;
      const bool accepted = r.accepted[i] != 0;
      if (accepted) ++d.accepted;
      if (label == query_label) {
        ++d.false_negatives;
        if (!accepted) ++d.false_negatives_rejected;
      } else {
        ++d.true_negatives;
        if (accepted) ++d.true_negatives_accepted;
      }
    }
  }
  return d;
}

std::vector<std::vector<double>> prototype_label_ami(const PrototypeTree& tree,
                                                     const std::vector<std::vector<int>>& labels_per_level) {
  std::vector<std::vector<double>> out(tree.num_levels());
  for (std::size_t l = 0; l < tree.num_levels(); ++l) {
    const auto assign = tree.assignment(l);
    for (const auto& labels : labels_per_level) {
      out[l].push_back(clustering_agreement(assign, labels).ami);
    }
  }
  return out;
}

}  // namespace hcsc
