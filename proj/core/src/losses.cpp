#include "hcsc/losses.hpp"

#include <cmath>

namespace hcsc {

namespace {

/// Shared kernel: logits[0] is the positive; columns of `vectors` match logits.
/// grad = sum_j softmax_j * vectors_j * scale_j - vectors_0 * scale_0.
LossOutput softmax_nce(const Vector& logits, const Matrix& vectors, const Vector& scales) {
  LossOutput out;
  const double lse = log_sum_exp(logits);
  out.value = std::max(0.0, lse - logits[0]);
  const Vector w = softmax(logits).cwiseProduct(scales);
  out.grad = vectors * w - vectors.col(0) * scales[0];
  return out;
}

}  // namespace

void LossWeights::validate() const {
  if (!(tau > 0.0)) throw ConfigError("loss: tau must be > 0");
  if (instance_selection && !instance_loss) {
    throw ConfigError("loss: instance selection (IS) requires the instance loss (IL)");
  }
  if (proto_selection && !proto_loss) {
    throw ConfigError("loss: prototype selection (PS) requires the prototype loss (PL)");
  }
}

LossOutput info_nce(const Vector& z, const Vector& z_pos, const Matrix& negatives, double tau) {
  if (!(tau > 0.0)) throw ContractError("info_nce: tau must be > 0");
  const Eigen::Index n = negatives.cols() + 1;
  Matrix vectors(z.size(), n);
  vectors.col(0) = z_pos;
  if (negatives.cols() > 0) vectors.rightCols(negatives.cols()) = negatives;
  const Vector logits = vectors.transpose() * z / tau;
  return softmax_nce(logits, vectors, Vector::Constant(n, 1.0 / tau));
}

LossOutput info_nce_selected(const Vector& z, const Vector& z_pos, const Matrix& keys,
                             const SelectionReport& report, double tau) {
  Matrix neg(z.size(), static_cast<Eigen::Index>(report.accepted_count()));
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < report.candidates.size(); ++i) {
    if (!report.accepted[i]) continue;
    const int c = report.candidates[i];
    if (c < 0 || c >= keys.cols()) throw ContractError("info_nce_selected: candidate outside the snapshot");
    neg.col(k++) = keys.col(c);
  }
  return info_nce(z, z_pos, neg, tau);
}

LossOutput proto_nce(const Vector& z, const Vector& pos, double pos_tau, const Matrix& negatives,
                     std::span<const double> neg_taus) {
  if (static_cast<std::size_t>(negatives.cols()) != neg_taus.size()) {
    throw ContractError("proto_nce: one temperature per negative prototype required");
  }
  if (!(pos_tau > 0.0)) throw ContractError("proto_nce: temperatures must be > 0");
  const Eigen::Index n = negatives.cols() + 1;
  Matrix vectors(z.size(), n);
  vectors.col(0) = pos;
  if (negatives.cols() > 0) vectors.rightCols(negatives.cols()) = negatives;
  Vector scales(n);
  scales[0] = 1.0 / pos_tau;
  for (std::size_t i = 0; i < neg_taus.size(); ++i) {
    if (!(neg_taus[i] > 0.0)) throw ContractError("proto_nce: temperatures must be > 0");
    scales[static_cast<Eigen::Index>(i) + 1] = 1.0 / neg_taus[i];
  }
  const Vector logits = (vectors.transpose() * z).cwiseProduct(scales);
  return softmax_nce(logits, vectors, scales);
}

LossOutput icsc_loss(const Vector& z, const Vector& z_prime, const std::vector<SelectionReport>& reports,
                     const QueueSnapshot& snapshot, double tau, std::size_t expected_levels) {
  if (reports.empty()) throw ContractError("icsc_loss: no levels");
  if (expected_levels != 0 && reports.size() != expected_levels) {
    throw ContractError("icsc_loss: got " + std::to_string(reports.size()) + " level reports, expected " +
                        std::to_string(expected_levels));
  }
  LossOutput total = LossOutput::zero(z.size());
  for (std::size_t l = 0; l < reports.size(); ++l) {
    if (reports[l].level != l) throw ContractError("icsc_loss: reports must be ordered by level");
    const auto part = info_nce_selected(z, z_prime, snapshot.keys, reports[l], tau);
    total.value += part.value;
    total.grad += part.grad;
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  total.value *= inv;
  total.grad *= inv;
  return total;
}

LossOutput pcsc_loss(const Vector& z, const PrototypeTree& tree, const std::vector<SelectionReport>& reports) {
  const std::size_t L = tree.num_levels();
  if (reports.size() != L) {
    throw ContractError("pcsc_loss: got " + std::to_string(reports.size()) + " level reports for a " +
                        std::to_string(L) + "-level tree");
  }
  LossOutput total = LossOutput::zero(z.size());
  for (std::size_t l = 0; l < L; ++l) {
    const auto& report = reports[l];
    const auto& level = tree.levels[l];
    if (report.level != l) throw ContractError("pcsc_loss: reports must be ordered by level");
    const int pos = nearest_prototype(z, tree, l);
    if (l + 1 == L) {
      // Top level: every non-positive prototype is a negative.
      std::size_t accepted_others = 0;
      for (std::size_t i = 0; i < report.candidates.size(); ++i) {
        if (report.candidates[i] != pos && report.accepted[i]) ++accepted_others;
      }
      if (accepted_others != level.size() - 1) {
        throw ContractError("pcsc_loss: top-level report must accept all non-positive prototypes");
      }
    }
    std::vector<double> taus;
    std::vector<Eigen::Index> cols;
    for (std::size_t i = 0; i < report.candidates.size(); ++i) {
      const int c = report.candidates[i];
      if (c < 0 || static_cast<std::size_t>(c) >= level.size()) {
        throw ContractError("pcsc_loss: candidate prototype out of range");
      }
      if (c == pos) throw ContractError("pcsc_loss: the positive prototype cannot be a negative");
      if (!report.accepted[i]) continue;
      cols.push_back(c);
      taus.push_back(level.tau[static_cast<std::size_t>(c)]);
    }
    Matrix neg(z.size(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) neg.col(static_cast<Eigen::Index>(k)) = level.prototypes.col(cols[k]);
    const auto part = proto_nce(z, level.prototypes.col(pos), level.tau[static_cast<std::size_t>(pos)], neg, taus);
    total.value += part.value;
    total.grad += part.grad;
  }
  const double inv = 1.0 / static_cast<double>(L);
  total.value *= inv;
  total.grad *= inv;
  return total;
}

LossOutput hcsc_loss(const LossOutput& icsc, const LossOutput& pcsc, const LossWeights& weights) {
  weights.validate();
  const Eigen::Index dim = std::max(icsc.grad.size(), pcsc.grad.size());
  LossOutput out = LossOutput::zero(dim);
  if (weights.instance_loss) {
    out.value += icsc.value;
    out.grad += icsc.grad;
  }
  if (weights.proto_loss) {
    out.value += pcsc.value;
    out.grad += pcsc.grad;
  }
  return out;
}

}  // namespace hcsc
