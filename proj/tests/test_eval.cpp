#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hcsc/eval.hpp"
#include "oracles/oracles.hpp"

using namespace hcsc;

namespace {

Matrix unit_cols(Rng& rng, std::size_t d, std::size_t n) {
  oracle::Mat cols;
  for (std::size_t i = 0; i < n; ++i) cols.push_back(oracle::random_unit(rng, d));
  return oracle::to_matrix(cols, d);
}

}  // namespace

TEST_CASE("knn: test set equal to train set with k = 1 is exact") {
  Rng rng(1);
  const Matrix emb = unit_cols(rng, 6, 40);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[i] = i % 5;
  EvalConfig cfg;
  cfg.knn_k_grid = {1};
  const auto r = knn_evaluate(emb, labels, emb, labels, cfg);
  CHECK(r.accuracy[0] == 1.0);
  CHECK(r.best_k == 1);
}

TEST_CASE("knn agrees with an exhaustive brute-force vote") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(10 + s);
    const Matrix train = unit_cols(rng, 3, 20);
    const Matrix test = unit_cols(rng, 3, 15);
    std::vector<int> tl(20), sl(15);
    for (auto& l : tl) l = static_cast<int>(rng.below(3));
    for (auto& l : sl) l = static_cast<int>(rng.below(3));
    EvalConfig cfg;
    cfg.knn_k_grid = {1, 3, 7, 20};
    const auto r = knn_evaluate(train, tl, test, sl, cfg);
    for (std::size_t ki = 0; ki < cfg.knn_k_grid.size(); ++ki) {
      int hits = 0;
      for (int q = 0; q < 15; ++q) {
        const int pred = oracle::knn_predict(oracle::to_cols(train), tl, oracle::to_vec(test.col(q)),
                                             cfg.knn_k_grid[ki], cfg.knn_temperature);
        hits += pred == sl[q];
      }
      CHECK(r.accuracy[ki] == doctest::Approx(hits / 15.0).epsilon(1e-15));
    }
  }
}

TEST_CASE("knn is invariant to a common rotation") {
  Rng rng(2);
  const Matrix train = unit_cols(rng, 4, 30);
  const Matrix test = unit_cols(rng, 4, 12);
  std::vector<int> tl(30), sl(12);
  for (auto& l : tl) l = static_cast<int>(rng.below(4));
  for (auto& l : sl) l = static_cast<int>(rng.below(4));
  Matrix g(4, 4);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j) g(i, j) = rng.normal();
  const Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();
  EvalConfig cfg;
  cfg.knn_k_grid = {1, 5, 10};
  const auto a = knn_evaluate(train, tl, test, sl, cfg);
  const auto b = knn_evaluate(q * train, tl, q * test, sl, cfg);
  CHECK(a.accuracy == b.accuracy);
}

TEST_CASE("knn clamps k to the train size with a warning") {
  Rng rng(3);
  const Matrix train = unit_cols(rng, 3, 5);
  const std::vector<int> tl{0, 1, 0, 1, 1};
  EvalConfig cfg;
  cfg.knn_k_grid = {3, 200};
  const auto r = knn_evaluate(train, tl, train, tl, cfg);
  CHECK(r.k_values == std::vector<std::size_t>{3, 5});
  CHECK(r.warnings.size() == 1);
  CHECK_THROWS_AS(knn_evaluate(train, std::vector<int>{0, 1}, train, tl, cfg), ContractError);
}

TEST_CASE("nmi and ami") {
  const std::vector<int> a{0, 0, 0, 1, 1, 1, 2, 2, 2};
  SUBCASE("identical partitions") {
    const auto r = clustering_agreement(a, a);
    CHECK(r.nmi == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.ami == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("relabelling does not matter") {
    const std::vector<int> b{5, 5, 5, 9, 9, 9, 1, 1, 1};
    CHECK(clustering_agreement(a, b).ami == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("constant labelling") {
    const std::vector<int> c(9, 4);
    const auto r = clustering_agreement(a, c);
    CHECK(r.nmi == 0.0);
    CHECK(std::abs(r.ami) <= 1e-12);
    const auto both = clustering_agreement(c, c);
    CHECK(both.nmi == 0.0);
  }
  SUBCASE("symmetry") {
    const std::vector<int> b{0, 1, 1, 1, 0, 2, 2, 0, 2};
    const auto x = clustering_agreement(a, b);
    const auto y = clustering_agreement(b, a);
    CHECK(x.ami == doctest::Approx(y.ami).epsilon(1e-14));
    CHECK(x.nmi == doctest::Approx(y.nmi).epsilon(1e-14));
    CHECK((x.nmi > 0.0 && x.nmi < 1.0));
  }
  SUBCASE("independent random labels give ami near 0") {
    Rng rng(4);
    std::vector<int> u(2000), v(2000);
    for (auto& l : u) l = static_cast<int>(rng.below(10));
    for (auto& l : v) l = static_cast<int>(rng.below(10));
    CHECK(std::abs(clustering_agreement(u, v).ami) <= 0.05);
  }
  SUBCASE("hand value") {
    // Two clusters of two vs one cluster of four: no information.
    const std::vector<int> p{0, 0, 1, 1}, q{0, 0, 0, 0};
    CHECK(clustering_agreement(p, q).nmi == 0.0);
  }
  CHECK_THROWS_AS(clustering_agreement(std::vector<int>{}, std::vector<int>{}), ContractError);
}

TEST_CASE("linear probe") {
  Rng rng(5);
  EvalConfig cfg;
  cfg.probe_epochs = 200;
  SUBCASE("separable clusters") {
    Matrix emb(3, 300);
    std::vector<int> labels(300);
    for (int j = 0; j < 300; ++j) {
      labels[j] = j % 3;
      emb.col(j) = Vector::Zero(3);
      emb(labels[j], j) = 1.0;
      for (int i = 0; i < 3; ++i) emb(i, j) += 0.05 * rng.normal();
    }
    const auto r = linear_probe(emb, labels, cfg);
    CHECK(r.accuracy >= 0.99);
    for (std::size_t i = 1; i < r.loss_history.size(); ++i) CHECK(r.loss_history[i] <= r.loss_history[i - 1] + 1e-12);
  }
  SUBCASE("shuffled labels sit near chance") {
    const Matrix emb = unit_cols(rng, 8, 600);
    std::vector<int> labels(600);
    for (auto& l : labels) l = static_cast<int>(rng.below(4));
    CHECK(linear_probe(emb, labels, cfg).accuracy <= 0.40);
  }
  SUBCASE("single class is rejected") {
    const Matrix emb = unit_cols(rng, 3, 20);
    CHECK_THROWS_AS(linear_probe(emb, std::vector<int>(20, 1), cfg), ConfigError);
  }
}

TEST_CASE("negative selection diagnostics") {
  SelectionReport r;
  r.level = 0;
  r.candidates = {0, 1, 2, 3};
  r.probabilities = {0.1, 0.9, 0.2, 0.8};
  r.accepted = {0, 1, 1, 0};
  const std::vector<int> labels{7, 3, 7, 4};
  const auto d = negative_selection_diagnostics({r}, 7, labels);
  CHECK(d.false_negatives == 2);
  CHECK(d.false_negatives_rejected == 1);
  CHECK(d.true_negatives == 2);
  CHECK(d.true_negatives_accepted == 1);
  CHECK(d.false_negative_removal() == 0.5);
  CHECK(d.true_negative_precision() == 0.5);
  CHECK(d.true_negative_preservation() == 0.5);

  SUBCASE("no false negatives in the queue") {
    const std::vector<int> other{1, 2, 3, 4};
    const auto e = negative_selection_diagnostics({r}, 7, other);
    CHECK(e.false_negative_removal() == 1.0);
    CHECK(e.true_negative_preservation() == 0.5);
  }
  SUBCASE("accept-all keeps every true negative") {
    SelectionReport all = r;
    all.accepted = {1, 1, 1, 1};
    const auto e = negative_selection_diagnostics({all}, 7, labels);
    CHECK(e.true_negative_preservation() == 1.0);
    CHECK(e.false_negative_removal() == 0.0);
  }
  SUBCASE("unknown candidates are skipped") {
    const std::vector<int> unknown{-1, -1, -1, -1};
    const auto e = negative_selection_diagnostics({r}, 7, unknown);
    CHECK(e.false_negatives + e.true_negatives == 0);
  }
  NegativeDiagnostics sum;
  sum += d;
  sum += d;
  CHECK(sum.false_negatives == 4);
}

TEST_CASE("prototype-label ami is 1 on the diagonal for a label-built tree") {
  Rng rng(6);
  const std::size_t n = 120;
  std::vector<int> fine(n), coarse(n);
  Matrix emb(4, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    fine[i] = static_cast<int>(i % 4);
    coarse[i] = fine[i] / 2;
    Vector v = Vector::Zero(4);
    v[fine[i]] = 1.0;
    for (int k = 0; k < 4; ++k) v[k] += 0.05 * rng.normal();
    emb.col(static_cast<Eigen::Index>(i)) = v.normalized();
  }
  const std::vector<std::vector<int>> labels{fine, coarse};
  const auto tree = tree_from_labels(emb, labels, HierarchyOptions{});
  const auto m = prototype_label_ami(tree, labels);
  REQUIRE(m.size() == 2);
  CHECK(m[0][0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m[1][1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m[0][1] < 1.0);
}

TEST_CASE("eval config validation") {
  EvalConfig c;
  CHECK_NOTHROW(c.validate());
  c.knn_temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EvalConfig{};
  c.knn_k_grid = {};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EvalConfig{};
  c.diagnostic_rate = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
