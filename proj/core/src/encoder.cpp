#include "hcsc/encoder.hpp"

#include <cmath>

namespace hcsc {

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "' (expected tanh or relu)");
}

std::vector<std::size_t> EncoderConfig::layer_sizes() const {
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(embed_dim);
  return sizes;
}

EncoderParams EncoderParams::init(const EncoderConfig& config, Rng& rng) {
  const auto sizes = config.layer_sizes();
  for (auto s : sizes) {
    if (s == 0) throw ConfigError("encoder: layer sizes must be positive");
  }
  EncoderParams p;
  p.activation = config.activation;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(sizes[i]);
    const auto out = static_cast<Eigen::Index>(sizes[i + 1]);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in));
    Layer layer{Matrix(out, in), Vector::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = std_dev * rng.normal();
    }
    p.layers.push_back(std::move(layer));
  }
  p.round_to_f32();
  return p;
}

EncoderParams EncoderParams::identity(std::size_t dim) {
  EncoderParams p;
  const auto d = static_cast<Eigen::Index>(dim);
  p.layers.push_back({Matrix::Identity(d, d), Vector::Zero(d)});
  return p;
}

EncoderParams EncoderParams::zeros_like(const EncoderParams& like) {
  EncoderParams p = like;
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return p;
}

std::size_t EncoderParams::input_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols());
}

std::size_t EncoderParams::output_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weight.rows());
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool EncoderParams::same_shape(const EncoderParams& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight.rows() != other.layers[i].weight.rows() ||
        layers[i].weight.cols() != other.layers[i].weight.cols() ||
        layers[i].bias.size() != other.layers[i].bias.size()) {
      return false;
    }
  }
  return true;
}

bool EncoderParams::all_finite() const {
  for (const auto& l : layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

void EncoderParams::axpy(double alpha, const EncoderParams& other) {
  if (!same_shape(other)) throw ContractError("EncoderParams::axpy: shape mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += alpha * other.layers[i].weight;
    layers[i].bias += alpha * other.layers[i].bias;
  }
}

void EncoderParams::scale(double alpha) {
  for (auto& l : layers) {
    l.weight *= alpha;
    l.bias *= alpha;
  }
}

double EncoderParams::squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return s;
}

void EncoderParams::round_to_f32() {
  for (auto& l : layers) {
    hcsc::round_to_f32(l.weight);
    hcsc::round_to_f32(l.bias);
  }
}

std::vector<double> EncoderParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& l : layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) flat.push_back(l.weight(r, c));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) flat.push_back(l.bias[r]);
  }
  return flat;
}

void EncoderParams::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw ContractError("EncoderParams::unflatten: size mismatch");
  std::size_t k = 0;
  for (auto& l : layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = flat[k++];
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = flat[k++];
  }
}

ForwardResult encoder_forward(const EncoderParams& params, const Matrix& batch) {
  if (params.layers.empty()) throw ContractError("encoder_forward: encoder has no layers");
  if (static_cast<std::size_t>(batch.rows()) != params.input_dim()) {
    throw ContractError("encoder_forward: batch has dimension " + std::to_string(batch.rows()) +
                        ", encoder expects " + std::to_string(params.input_dim()));
  }
  ForwardResult res;
  auto& cache = res.cache;
  Matrix h = batch;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& layer = params.layers[i];
    cache.layer_inputs.push_back(h);
    Matrix a = layer.weight * h;
    a.colwise() += layer.bias;
    if (i < last) {
      if (params.activation == Activation::kTanh) {
        h = a.array().tanh().matrix();
      } else {
        h = a.cwiseMax(0.0);
      }
      if (!h.allFinite()) {
        throw NumericError("encoder_forward: non-finite activation in hidden layer " + std::to_string(i));
      }
      cache.hidden_outputs.push_back(h);
    } else {
      cache.pre_norm = std::move(a);
    }
  }
  if (!cache.pre_norm.allFinite()) {
    throw NumericError("encoder_forward: non-finite output in layer " + std::to_string(last));
  }
  cache.norms = cache.pre_norm.colwise().norm().transpose();
  if ((cache.norms.array() <= 0.0).any()) {
    throw NumericError("encoder_forward: zero-norm output in layer " + std::to_string(last) +
                       " cannot be normalized");
  }
  cache.embeddings = cache.pre_norm.array().rowwise() / cache.norms.transpose().array();
  res.embeddings = cache.embeddings;
  return res;
}

Matrix encoder_embed(const EncoderParams& params, const Matrix& batch) {
  return encoder_forward(params, batch).embeddings;
}

Vector normalization_backward(const Vector& z, double norm, const Vector& grad_z) {
  return (grad_z - z * z.dot(grad_z)) / norm;
}

EncoderParams encoder_backward(const EncoderParams& params, const ForwardCache& cache,
                               const Matrix& grad_embeddings) {
  const std::size_t n_layers = params.layers.size();
  if (cache.layer_inputs.size() != n_layers || cache.hidden_outputs.size() + 1 != n_layers) {
    throw ContractError("encoder_backward: cache does not match the encoder");
  }
  if (grad_embeddings.rows() != cache.embeddings.rows() ||
      grad_embeddings.cols() != cache.embeddings.cols()) {
    throw ContractError("encoder_backward: gradient shape does not match the embeddings");
  }
  const Matrix& z = cache.embeddings;
  // Tangent projection of the normalization layer, column by column.
  const Eigen::RowVectorXd radial = (z.array() * grad_embeddings.array()).colwise().sum();
  Matrix g = grad_embeddings - z * radial.asDiagonal();
  g = g.array().rowwise() / cache.norms.transpose().array();

  EncoderParams grads = EncoderParams::zeros_like(params);
  for (std::size_t idx = n_layers; idx-- > 0;) {
    const auto& layer = params.layers[idx];
    grads.layers[idx].weight = g * cache.layer_inputs[idx].transpose();
    grads.layers[idx].bias = g.rowwise().sum();
    if (idx == 0) break;
    Matrix gh = layer.weight.transpose() * g;
    const Matrix& h = cache.hidden_outputs[idx - 1];
    if (params.activation == Activation::kTanh) {
      g = gh.array() * (1.0 - h.array().square());
    } else {
      g = gh.array() * (h.array() > 0.0).cast<double>();
    }
  }
  return grads;
}

MomentumState ema_update(MomentumState momentum, const EncoderParams& online) {
  ema_update_inplace(momentum, online);
  return momentum;
}

void ema_update_inplace(MomentumState& momentum, const EncoderParams& online) {
  if (!momentum.params.same_shape(online)) throw ContractError("ema_update: shape mismatch");
  const double m = momentum.m;
  for (std::size_t i = 0; i < online.layers.size(); ++i) {
    auto& k = momentum.params.layers[i];
    const auto& q = online.layers[i];
    k.weight = m * k.weight + (1.0 - m) * q.weight;
    k.bias = m * k.bias + (1.0 - m) * q.bias;
  }
}

NegativeQueue::NegativeQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity),
      dim_(dim),
      buffer_(Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(capacity))),
      ids_(capacity, -1) {
  if (capacity == 0) throw ConfigError("queue capacity must be >= 1");
}

void NegativeQueue::push(const Matrix& keys, std::span<const std::int64_t> ids) {
  if (static_cast<std::size_t>(keys.rows()) != dim_) {
    throw ContractError("NegativeQueue::push: key dimension " + std::to_string(keys.rows()) +
                        " != queue dimension " + std::to_string(dim_));
  }
  if (!ids.empty() && ids.size() != static_cast<std::size_t>(keys.cols())) {
    throw ContractError("NegativeQueue::push: id count does not match key count");
  }
  for (Eigen::Index c = 0; c < keys.cols(); ++c) {
    if (std::abs(keys.col(c).norm() - 1.0) > 1e-5) {
      throw ContractError("NegativeQueue::push: keys must be unit-norm");
    }
  }
  for (Eigen::Index c = 0; c < keys.cols(); ++c) {
    const std::size_t slot = (head_ + size_) % capacity_;
    // Stored float-rounded so checkpoints (f32) restore the queue exactly.
    for (Eigen::Index r = 0; r < keys.rows(); ++r) {
      buffer_(r, static_cast<Eigen::Index>(slot)) = static_cast<float>(keys(r, c));
    }
    ids_[slot] = ids.empty() ? -1 : ids[static_cast<std::size_t>(c)];
    if (size_ < capacity_) {
      ++size_;
    } else {
      head_ = (head_ + 1) % capacity_;
    }
  }
}

std::shared_ptr<const QueueSnapshot> NegativeQueue::snapshot() const {
  auto snap = std::make_shared<QueueSnapshot>();
  snap->keys.resize(static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(size_));
  snap->ids.resize(size_);
  for (std::size_t i = 0; i < size_; ++i) {
    const std::size_t slot = (head_ + i) % capacity_;
    snap->keys.col(static_cast<Eigen::Index>(i)) = buffer_.col(static_cast<Eigen::Index>(slot));
    snap->ids[i] = ids_[slot];
  }
  return snap;
}

}  // namespace hcsc
