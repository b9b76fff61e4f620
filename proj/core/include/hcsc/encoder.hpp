#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hcsc/common.hpp"

namespace hcsc {

enum class Activation { kTanh, kRelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Layer widths of the MLP encoder: input -> hidden... -> embed_dim.
struct EncoderConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden{64};
  std::size_t embed_dim = 32;
  Activation activation = Activation::kTanh;

  std::vector<std::size_t> layer_sizes() const;
};

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Weights of the encoder. Also used as the shape of gradients and of the
/// optimizer's velocity buffers.
struct EncoderParams {
  std::vector<Layer> layers;
  Activation activation = Activation::kTanh;

  /// Kaiming-style Gaussian weights (std = sqrt(2 / fan_in)), zero biases.
  static EncoderParams init(const EncoderConfig& config, Rng& rng);
  /// Single linear layer with identity weights.
  static EncoderParams identity(std::size_t dim);
  /// Same shapes as `like`, every entry zero.
  static EncoderParams zeros_like(const EncoderParams& like);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  bool same_shape(const EncoderParams& other) const;
  bool all_finite() const;

  /// this += alpha * other (shapes must match).
  void axpy(double alpha, const EncoderParams& other);
  void scale(double alpha);
  double squared_norm() const;
  void round_to_f32();

  /// Flat views over all coefficients in declared order (W row-major, then b,
  /// layer by layer). Used by gradient checks and the checkpoint format.
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
};

/// Activations kept from the forward pass.
struct ForwardCache {
  std::vector<Matrix> layer_inputs;  // input to layer i (in_i x B)
  std::vector<Matrix> hidden_outputs;  // activation output of hidden layer i
  Matrix pre_norm;   // linear output of the last layer (embed x B)
  Vector norms;      // column norms of pre_norm
  Matrix embeddings;  // pre_norm / norms
};

struct ForwardResult {
  Matrix embeddings;  // embed_dim x B, unit-norm columns
  ForwardCache cache;
};

/// Throws ContractError on a dimension mismatch and NumericError (naming the
/// layer) on non-finite activations.
ForwardResult encoder_forward(const EncoderParams& params, const Matrix& batch);
/// Embeddings only.
Matrix encoder_embed(const EncoderParams& params, const Matrix& batch);

/// Exact parameter gradients given dLoss/dEmbeddings (embed_dim x B).
EncoderParams encoder_backward(const EncoderParams& params, const ForwardCache& cache,
                               const Matrix& grad_embeddings);

/// Backward through z = u / |u|: (I - z z^T) g / |u|.
Vector normalization_backward(const Vector& z, double norm, const Vector& grad_z);

struct MomentumState {
  EncoderParams params;
  double m = 0.999;
};

/// theta_k <- m * theta_k + (1 - m) * theta_q.
MomentumState ema_update(MomentumState momentum, const EncoderParams& online);
void ema_update_inplace(MomentumState& momentum, const EncoderParams& online);

/// Immutable view of the queue at one instant, oldest key first.
struct QueueSnapshot {
  Matrix keys;                       // dim x size
  std::vector<std::int64_t> ids;     // source sample of each key, -1 if unknown

  std::size_t size() const { return ids.size(); }
};

/// Bounded FIFO of momentum-encoder keys.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim);

  /// Appends keys (columns) in order, evicting the oldest once full.
  void push(const Matrix& keys, std::span<const std::int64_t> ids = {});
  std::shared_ptr<const QueueSnapshot> snapshot() const;

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::size_t size_ = 0;
  std::size_t head_ = 0;  // slot of the oldest entry
  Matrix buffer_;
  std::vector<std::int64_t> ids_;
};

}  // namespace hcsc
