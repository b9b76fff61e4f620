#include <cmath>

#include "doctest.h"
#include "hcsc/selection.hpp"
#include "oracles/oracles.hpp"

using namespace hcsc;

namespace {

// One level of axis-aligned prototypes in `dim` dimensions with equal tau.
HierarchyLevel axis_level(std::size_t m, std::size_t dim, double tau) {
  HierarchyLevel lv;
  lv.prototypes = Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) lv.prototypes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
  lv.tau.assign(m, tau);
  lv.member_count.assign(m, 1);
  return lv;
}

Vector unit(std::size_t dim, std::size_t axis) {
  Vector v = Vector::Zero(static_cast<Eigen::Index>(dim));
  v[static_cast<Eigen::Index>(axis)] = 1.0;
  return v;
}

}  // namespace

TEST_CASE("cluster similarity") {
  PrototypeTree tree;
  tree.levels.push_back(axis_level(3, 3, 0.2));
  CHECK(cluster_similarity(unit(3, 1), tree, 0, 1) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(cluster_similarity(unit(3, 0), tree, 0, 2) == 0.0);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto v = oracle::random_unit(rng, 3);
    CHECK(cluster_similarity(oracle::to_eigen(v), tree, 0, 2) == doctest::Approx(v[2] / 0.2).epsilon(1e-14));
  }
}

TEST_CASE("instance selection probability") {
  SUBCASE("single cluster absorbs all mass") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(1, 3, 0.2));
    CHECK(instance_selection_prob(unit(3, 1), unit(3, 0), tree, 0) == 0.0);
  }
  SUBCASE("uniform similarities give 1 - 1/M") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(4, 5, 0.3));
    CHECK(instance_selection_prob(unit(5, 4), unit(5, 2), tree, 0) == doctest::Approx(0.75).epsilon(1e-15));
  }
  SUBCASE("two prototypes, s = 2 vs 0") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(2, 2, 0.5));
    const double want = 1.0 - std::exp(2.0) / (std::exp(2.0) + 1.0);
    CHECK(instance_selection_prob(unit(2, 0), unit(2, 0), tree, 0) == doctest::Approx(want).epsilon(1e-14));
  }
  SUBCASE("monotone in the similarity to the query's cluster") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(3, 3, 0.2));
    double prev = 2.0;
    for (double a = 0.0; a <= 1.0; a += 0.1) {
      Vector zj(3);
      zj << a, 0.3, 0.1;
      const double p = instance_selection_prob(zj, unit(3, 0), tree, 0);
      CHECK(p < prev);
      prev = p;
    }
  }
}

TEST_CASE("prototype selection probability") {
  SUBCASE("single parent") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(3, 3, 0.2));
    tree.levels.push_back(axis_level(1, 3, 0.2));
    tree.levels[0].parent = {0, 0, 0};
    CHECK(proto_selection_prob(1, 0, tree, 0) == 0.0);
  }
  SUBCASE("equidistant to five parents") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(2, 7, 0.2));
    tree.levels[0].prototypes.col(1) = unit(7, 6);
    tree.levels.push_back(axis_level(5, 7, 0.2));
    tree.levels[0].parent = {0, 1};
    CHECK(proto_selection_prob(1, 0, tree, 0) == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("two parents at +1 and -1") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(2, 2, 0.2));
    HierarchyLevel up = axis_level(2, 2, 1.0);
    up.prototypes.col(1) = -unit(2, 0);
    tree.levels.push_back(up);
    tree.levels[0].prototypes.col(1) = unit(2, 0);
    tree.levels[0].parent = {0, 1};
    const double want = 1.0 - std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0));
    CHECK(proto_selection_prob(1, 0, tree, 0) == doctest::Approx(want).epsilon(1e-14));
  }
  SUBCASE("top level is exempt") {
    PrototypeTree tree;
    tree.levels.push_back(axis_level(2, 2, 0.2));
    CHECK_THROWS_AS(proto_selection_prob(1, 0, tree, 0), ContractError);
  }
}

TEST_CASE("selection reports") {
  Rng rng(3);
  PrototypeTree tree;
  tree.levels.push_back(axis_level(3, 3, 0.2));
  tree.levels.push_back(axis_level(1, 3, 0.2));
  tree.levels[0].parent = {0, 0, 0};
  Matrix keys(3, 4);
  for (int k = 0; k < 4; ++k) keys.col(k) = oracle::to_eigen(oracle::random_unit(rng, 3));
  const QueueSnapshot snap{keys, {0, 1, 2, 3}};
  const auto reports = select_instance_negatives(unit(3, 0), snap, tree, SelectionStreams{1, 2, 3});
  REQUIRE(reports.size() == 2);
  // Level 2 has one prototype: nothing is accepted.
  CHECK(reports[1].accepted_count() == 0);
  for (double p : reports[1].probabilities) CHECK(p == 0.0);
  for (const auto& r : reports) {
    for (double p : r.probabilities) CHECK((p >= 0.0 && p <= 1.0));
  }
  // Same streams, same flags.
  const auto again = select_instance_negatives(unit(3, 0), snap, tree, SelectionStreams{1, 2, 3});
  CHECK(again[0].accepted == reports[0].accepted);
  // Affinity overload agrees.
  const auto via_aff =
      select_instance_negatives(unit(3, 0), compute_queue_affinity(snap, tree), tree, SelectionStreams{1, 2, 3});
  CHECK(via_aff[0].probabilities == reports[0].probabilities);
  CHECK(via_aff[0].accepted == reports[0].accepted);

  const auto all = accept_all_instances(0, 4);
  CHECK(all.accepted_count() == 4);
}

TEST_CASE("prototype selection reports") {
  PrototypeTree tree;
  tree.levels.push_back(axis_level(1, 3, 0.2));
  tree.levels.push_back(axis_level(1, 3, 0.2));
  tree.levels[0].parent = {0};
  Rng r(1);
  CHECK(select_proto_negatives(unit(3, 0), tree, 0, r).candidates.empty());

  PrototypeTree three;
  three.levels.push_back(axis_level(4, 4, 0.2));
  three.levels.push_back(axis_level(2, 4, 0.2));
  three.levels[0].parent = {0, 0, 1, 1};
  Rng a(5);
  const auto top = select_proto_negatives(unit(4, 0), three, 1, a);
  CHECK(top.accepted_count() == 1);
  CHECK(top.candidates == std::vector<int>{1});
  Rng b1(6), b2(6);
  CHECK(select_proto_negatives(unit(4, 0), three, 0, b1).accepted ==
        select_proto_negatives(unit(4, 0), three, 0, b2).accepted);
}

TEST_CASE("Monte Carlo acceptance matches p") {
  Rng rng(7);
  PrototypeTree tree;
  HierarchyLevel lv;
  lv.prototypes.resize(3, 3);
  for (int i = 0; i < 3; ++i) lv.prototypes.col(i) = oracle::to_eigen(oracle::random_unit(rng, 3));
  lv.tau = {0.2, 0.4, 0.1};
  lv.member_count = {1, 1, 1};
  tree.levels.push_back(lv);
  Matrix keys(3, 5);
  for (int k = 0; k < 5; ++k) keys.col(k) = oracle::to_eigen(oracle::random_unit(rng, 3));
  const QueueSnapshot snap{keys, std::vector<std::int64_t>(5, -1)};
  const Vector z = oracle::to_eigen(oracle::random_unit(rng, 3));
  const auto aff = compute_queue_affinity(snap, tree);
  const int n = 10000;
  std::vector<int> hits(5, 0);
  std::vector<double> p;
  for (int t = 0; t < n; ++t) {
    const auto r = select_instance_negatives(z, aff, tree, SelectionStreams{9, static_cast<std::uint64_t>(t), 0});
    p = r[0].probabilities;
    for (int k = 0; k < 5; ++k) hits[k] += r[0].accepted[k];
  }
  for (int k = 0; k < 5; ++k) {
    CHECK(p[k] == doctest::Approx(instance_selection_prob(keys.col(k), z, tree, 0)).epsilon(1e-14));
    const double sigma = std::sqrt(p[k] * (1.0 - p[k]) / n);
    CHECK(std::abs(static_cast<double>(hits[k]) / n - p[k]) <= 3.0 * sigma + 1e-12);
  }
}

TEST_CASE("exchangeability: permuting other prototypes leaves p unchanged") {
  Rng rng(8);
  PrototypeTree tree;
  HierarchyLevel lv;
  lv.prototypes.resize(4, 4);
  for (int i = 0; i < 4; ++i) lv.prototypes.col(i) = oracle::to_eigen(oracle::random_unit(rng, 4));
  lv.tau = {0.2, 0.3, 0.15, 0.25};
  tree.levels.push_back(lv);
  const Vector z = lv.prototypes.col(0);
  const Vector zj = oracle::to_eigen(oracle::random_unit(rng, 4));
  const double before = instance_selection_prob(zj, z, tree, 0);
  std::swap(tree.levels[0].tau[1], tree.levels[0].tau[3]);
  Vector tmp = tree.levels[0].prototypes.col(1);
  tree.levels[0].prototypes.col(1) = tree.levels[0].prototypes.col(3);
  tree.levels[0].prototypes.col(3) = tmp;
  CHECK(instance_selection_prob(zj, z, tree, 0) == doctest::Approx(before).epsilon(1e-14));
}

TEST_CASE("diagnostics CSV rows") {
  SelectionReport r;
  r.level = 0;
  r.candidates = {3};
  r.probabilities = {0.5};
  r.accepted = {1};
  CHECK(selection_csv_header() == "step,level,query_id,candidate_id,p,accepted\n");
  CHECK(selection_csv_rows({r}, 7, 42) == "7,1,42,3,0.5,1\n");
}
