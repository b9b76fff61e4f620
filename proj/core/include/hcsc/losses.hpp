#pragma once

#include <span>
#include <vector>

#include "hcsc/common.hpp"
#include "hcsc/encoder.hpp"
#include "hcsc/hierarchy.hpp"
#include "hcsc/selection.hpp"

namespace hcsc {

/// Loss value and its gradient with respect to the query embedding, taken
/// in ambient space (before the normalization layer's projection).
struct LossOutput {
  double value = 0.0;
  Vector grad;

  static LossOutput zero(Eigen::Index dim) { return {0.0, Vector::Zero(dim)}; }
};

/// Base temperature plus the component switches of the ablation table:
/// IL/PL enable the instance/prototype losses, IS/PS their pair selection.
/// Hierarchical prototypes (HP) are a training-level switch.
struct LossWeights {
  double tau = 0.2;
  bool instance_loss = true;        // IL
  bool proto_loss = true;           // PL
  bool instance_selection = true;   // IS
  bool proto_selection = true;      // PS

  /// Throws ConfigError for tau <= 0, IS without IL, or PS without PL.
  void validate() const;
};

/// -log softmax of the positive among {positive} + negatives at temperature tau.
/// Negatives are columns; the positive and negatives are constants.
LossOutput info_nce(const Vector& z, const Vector& z_pos, const Matrix& negatives, double tau);

/// Same, over the accepted columns of `keys` only.
LossOutput info_nce_selected(const Vector& z, const Vector& z_pos, const Matrix& keys,
                             const SelectionReport& report, double tau);

/// -log softmax with one temperature per prototype.
LossOutput proto_nce(const Vector& z, const Vector& pos, double pos_tau, const Matrix& negatives,
                     std::span<const double> neg_taus);

/// Mean over levels of InfoNCE against each level's accepted queue keys.
/// When `expected_levels` is non-zero the report count must match it.
LossOutput icsc_loss(const Vector& z, const Vector& z_prime, const std::vector<SelectionReport>& reports,
                     const QueueSnapshot& snapshot, double tau, std::size_t expected_levels = 0);

/// Mean over levels of ProtoNCE between z, its nearest prototype, and the
/// accepted prototype negatives. The top-level report must accept every
/// non-positive prototype.
LossOutput pcsc_loss(const Vector& z, const PrototypeTree& tree, const std::vector<SelectionReport>& reports);

/// [IL] * icsc + [PL] * pcsc.
LossOutput hcsc_loss(const LossOutput& icsc, const LossOutput& pcsc, const LossWeights& weights);

}  // namespace hcsc
