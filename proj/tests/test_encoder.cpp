#include <cmath>

#include "doctest.h"
#include "hcsc/checkpoint.hpp"
#include "hcsc/encoder.hpp"
#include "hcsc/losses.hpp"
#include "hcsc/selection.hpp"
#include "oracles/oracles.hpp"

using namespace hcsc;

namespace {

Matrix random_batch(Rng& rng, Eigen::Index d, Eigen::Index b) {
  Matrix m(d, b);
  for (Eigen::Index j = 0; j < b; ++j)
    for (Eigen::Index i = 0; i < d; ++i) m(i, j) = rng.normal();
  return m;
}

EncoderParams small_net(Rng& rng, std::size_t in, std::vector<std::size_t> hidden, std::size_t out, Activation act) {
  EncoderConfig cfg;
  cfg.input_dim = in;
  cfg.hidden = std::move(hidden);
  cfg.embed_dim = out;
  cfg.activation = act;
  return EncoderParams::init(cfg, rng);
}

}  // namespace

TEST_CASE("identity network passes unit inputs through") {
  Rng rng(1);
  Matrix x = random_batch(rng, 5, 3);
  x.colwise().normalize();
  const auto fwd = encoder_forward(EncoderParams::identity(5), x);
  CHECK((fwd.embeddings - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embeddings are unit norm") {
  Rng rng(2);
  const auto net = small_net(rng, 7, {9, 6}, 4, Activation::kTanh);
  const auto fwd = encoder_forward(net, 10.0 * random_batch(rng, 7, 20));
  for (Eigen::Index j = 0; j < 20; ++j) CHECK(std::abs(fwd.embeddings.col(j).norm() - 1.0) <= 1e-6);
}

TEST_CASE("forward contract errors") {
  Rng rng(3);
  const auto net = small_net(rng, 4, {3}, 2, Activation::kTanh);
  CHECK_THROWS_AS(encoder_forward(net, Matrix::Zero(5, 1)), ContractError);
  Matrix bad = Matrix::Ones(4, 1);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(encoder_forward(net, bad), NumericError);
}

TEST_CASE("backward: linear loss z.v matches finite differences") {
  for (Activation act : {Activation::kTanh, Activation::kRelu}) {
    Rng rng(act == Activation::kTanh ? 4 : 5);
    auto net = small_net(rng, 6, {8, 5}, 4, act);
    const Matrix x = random_batch(rng, 6, 3);
    const Matrix v = random_batch(rng, 4, 3);
    const auto fwd = encoder_forward(net, x);
    const auto analytic = encoder_backward(net, fwd.cache, v).flatten();
    auto f = [&](const oracle::Vec& flat) {
      EncoderParams p = net;
      p.unflatten(flat);
      return (encoder_embed(p, x).cwiseProduct(v)).sum();
    };
    const auto numeric = oracle::numeric_gradient(f, net.flatten());
    const auto check = oracle::compare_gradients(analytic, numeric, 1e-4);
    CHECK(check.checked > 0);
    CHECK(check.fraction() >= 0.95);
  }
}

TEST_CASE("backward: zero upstream gradient gives zero gradients") {
  Rng rng(6);
  const auto net = small_net(rng, 3, {4}, 3, Activation::kTanh);
  const auto fwd = encoder_forward(net, random_batch(rng, 3, 2));
  CHECK(encoder_backward(net, fwd.cache, Matrix::Zero(3, 2)).squared_norm() == 0.0);
}

TEST_CASE("normalization backward kills the radial component") {
  Rng rng(7);
  const oracle::Vec zv = oracle::random_unit(rng, 5);
  const Vector z = oracle::to_eigen(zv);
  CHECK(normalization_backward(z, 2.5, 3.0 * z).norm() < 1e-12);
  const Vector g = oracle::to_eigen(oracle::random_unit(rng, 5));
  CHECK(std::abs(z.dot(normalization_backward(z, 1.7, g))) < 1e-12);
}

TEST_CASE("full network with the composite loss matches finite differences") {
  int passed_nets = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    auto net = small_net(rng, 5, {6, 6}, 4, Activation::kTanh);
    const Matrix x = random_batch(rng, 5, 1);
    // Tiny tree from random unit vectors.
    Matrix emb = random_batch(rng, 4, 8);
    emb.colwise().normalize();
    HierarchyOptions opts;
    opts.min_cluster_size = 1;
    const std::vector<std::size_t> sizes{4, 2};
    const PrototypeTree tree = build_hierarchy(emb, sizes, opts, rng);
    Matrix keys = random_batch(rng, 4, 6);
    keys.colwise().normalize();
    QueueSnapshot snap{keys, std::vector<std::int64_t>(6, -1)};
    Vector zp = random_batch(rng, 4, 1).col(0).normalized();

    const Vector z0 = encoder_embed(net, x).col(0);
    const auto inst = select_instance_negatives(z0, snap, tree, SelectionStreams{seed, 0, 0});
    std::vector<SelectionReport> proto;
    for (std::size_t l = 0; l < tree.num_levels(); ++l) {
      Rng r = SelectionStreams{seed, 0, 0}.prototype(l);
      proto.push_back(select_proto_negatives(z0, tree, l, r));
    }
    auto loss_at = [&](const EncoderParams& p, Vector* grad) {
      const auto fwd = encoder_forward(p, x);
      const Vector z = fwd.embeddings.col(0);
      const auto total = hcsc_loss(icsc_loss(z, zp, inst, snap, 0.2), pcsc_loss(z, tree, proto), LossWeights{});
      if (grad) *grad = total.grad;
      return total.value;
    };
    Vector g;
    loss_at(net, &g);
    const auto fwd = encoder_forward(net, x);
    const auto analytic = encoder_backward(net, fwd.cache, g).flatten();
    auto f = [&](const oracle::Vec& flat) {
      EncoderParams p = net;
      p.unflatten(flat);
      return loss_at(p, nullptr);
    };
    const auto check = oracle::compare_gradients(analytic, oracle::numeric_gradient(f, net.flatten()), 1e-3);
    if (check.fraction() >= 0.95) ++passed_nets;
  }
  CHECK(passed_nets == 5);
}

TEST_CASE("ema update") {
  Rng rng(8);
  const auto online = small_net(rng, 3, {}, 2, Activation::kTanh);
  const auto other = small_net(rng, 3, {}, 2, Activation::kTanh);
  CHECK(ema_update(MomentumState{other, 1.0}, online).params.flatten() == other.flatten());
  CHECK(ema_update(MomentumState{other, 0.0}, online).params.flatten() == online.flatten());

  EncoderParams zero = EncoderParams::zeros_like(online);
  EncoderParams two = EncoderParams::zeros_like(online);
  two.layers[0].weight(0, 0) = 2.0;
  CHECK(ema_update(MomentumState{zero, 0.5}, two).params.layers[0].weight(0, 0) == 1.0);

  // Contraction toward the online params.
  const auto next = ema_update(MomentumState{other, 0.9}, online);
  EncoderParams before = other;
  before.axpy(-1.0, online);
  EncoderParams after = next.params;
  after.axpy(-1.0, online);
  CHECK(std::sqrt(after.squared_norm()) == doctest::Approx(0.9 * std::sqrt(before.squared_norm())).epsilon(1e-12));
}

TEST_CASE("negative queue is a bounded FIFO with immutable snapshots") {
  NegativeQueue q(4, 2);
  auto key = [](int i) {
    Matrix m(2, 1);
    m(0, 0) = std::cos(i);
    m(1, 0) = std::sin(i);
    return m;
  };
  for (int i = 1; i <= 6; ++i) {
    const std::int64_t id = i;
    q.push(key(i), std::span<const std::int64_t>(&id, 1));
    CHECK(q.size() <= 4);
  }
  const auto snap = q.snapshot();
  REQUIRE(snap->size() == 4);
  CHECK(snap->ids == std::vector<std::int64_t>{3, 4, 5, 6});
  for (int i = 0; i < 4; ++i) CHECK((snap->keys.col(i) - key(i + 3).col(0)).norm() < 1e-7);

  const std::int64_t seven = 7;
  q.push(key(7), std::span<const std::int64_t>(&seven, 1));
  CHECK(snap->ids == std::vector<std::int64_t>{3, 4, 5, 6});
  CHECK(q.snapshot()->ids == std::vector<std::int64_t>{4, 5, 6, 7});

  // A batch larger than the capacity keeps the last `capacity` keys.
  Matrix big(2, 6);
  std::vector<std::int64_t> ids;
  for (int i = 0; i < 6; ++i) {
    big.col(i) = key(10 + i).col(0);
    ids.push_back(10 + i);
  }
  q.push(big, ids);
  CHECK(q.snapshot()->ids == std::vector<std::int64_t>{12, 13, 14, 15});

  CHECK_THROWS_AS(q.push(Matrix::Ones(3, 1)), ContractError);
  CHECK_THROWS_AS(q.push(Matrix::Ones(2, 1)), ContractError);  // not unit norm
}

TEST_CASE("checkpoint round trip is byte-identical") {
  Rng rng(9);
  Checkpoint c;
  EncoderConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {3};
  cfg.embed_dim = 2;
  c.online = EncoderParams::init(cfg, rng);
  c.momentum = EncoderParams::init(cfg, rng);
  c.velocity = EncoderParams::zeros_like(c.online);
  c.layer_sizes = cfg.layer_sizes();
  c.epoch = 3;
  c.step = 17;
  c.queue_capacity = 5;
  Matrix keys = random_batch(rng, 2, 3);
  keys.colwise().normalize();
  round_to_f32(keys);
  c.queue_keys = keys;
  c.queue_ids = {4, 9, 1};
  c.config_text = "epochs=3\nlr=0.1\n";
  const std::string a = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(a);
  CHECK(encode_checkpoint(back) == a);
  CHECK(back.epoch == 3);
  CHECK(back.step == 17);
  CHECK(back.online.flatten() == c.online.flatten());
  CHECK(back.config_text == c.config_text);
  std::string bad = a;
  bad[0] = 'Z';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(a.substr(0, a.size() - 3)), FormatError);
}
