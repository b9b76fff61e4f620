#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "hcsc/data.hpp"
#include "hcsc/eval.hpp"
#include "hcsc/hierarchy.hpp"
#include "oracles/oracles.hpp"

using namespace hcsc;

namespace {

Matrix unit_columns(Rng& rng, Eigen::Index d, Eigen::Index n) {
  Matrix m(d, n);
  for (Eigen::Index j = 0; j < n; ++j) m.col(j) = oracle::to_eigen(oracle::random_unit(rng, static_cast<std::size_t>(d)));
  return m;
}

void check_tree_invariants(const PrototypeTree& tree, std::size_t n, double base_tau, double floor) {
  for (std::size_t l = 0; l < tree.num_levels(); ++l) {
    const auto& lv = tree.levels[l];
    CHECK(std::accumulate(lv.member_count.begin(), lv.member_count.end(), std::size_t{0}) == n);
    double mean = 0.0;
    for (double t : lv.tau) {
      CHECK(t >= floor);
      mean += t;
    }
    CHECK(mean / static_cast<double>(lv.size()) == doctest::Approx(base_tau).epsilon(1e-9));
    for (Eigen::Index c = 0; c < lv.prototypes.cols(); ++c) CHECK(std::abs(lv.prototypes.col(c).norm() - 1.0) < 1e-9);
    const auto assign = tree.assignment(l);
    std::vector<std::size_t> counts(lv.size(), 0);
    for (int a : assign) ++counts[static_cast<std::size_t>(a)];
    CHECK(counts == lv.member_count);
    if (l + 1 < tree.num_levels()) {
      REQUIRE(lv.parent.size() == lv.size());
      for (int p : lv.parent) CHECK((p >= 0 && static_cast<std::size_t>(p) < tree.levels[l + 1].size()));
    } else {
      CHECK(lv.parent.empty());
    }
  }
}

}  // namespace

TEST_CASE("k-means edge cases") {
  Rng rng(1);
  const Matrix pts = unit_columns(rng, 3, 7);
  SUBCASE("k = n gives zero inertia") {
    Rng r(2);
    const auto km = lloyd_kmeans(pts, 7, 20, 0.0, r);
    CHECK(km.inertia == doctest::Approx(0.0));
    std::set<int> distinct(km.assignments.begin(), km.assignments.end());
    CHECK(distinct.size() == 7);
  }
  SUBCASE("k = 1 gives the mean") {
    Rng r(3);
    const auto km = lloyd_kmeans(pts, 1, 20, 0.0, r);
    CHECK((km.centroids.col(0) - pts.rowwise().mean()).norm() < 1e-12);
  }
  SUBCASE("invalid k") {
    Rng r(4);
    CHECK_THROWS_AS(lloyd_kmeans(pts, 0, 10, 0.0, r), ConfigError);
    CHECK_THROWS_AS(lloyd_kmeans(pts, 8, 10, 0.0, r), ConfigError);
  }
}

TEST_CASE("k-means separates two far blobs and inertia never increases") {
  Rng rng(5);
  const double sigma = 1.0;
  Matrix pts(2, 200);
  std::vector<int> truth(200);
  for (int j = 0; j < 200; ++j) {
    truth[j] = j < 100 ? 0 : 1;
    const double cx = truth[j] == 0 ? 0.0 : 10.0 * sigma;
    pts(0, j) = cx + sigma * rng.normal();
    pts(1, j) = sigma * rng.normal();
  }
  Rng r(6);
  const auto km = lloyd_kmeans(pts, 2, 100, 0.0, r);
  const int first = km.assignments[0];
  for (int j = 0; j < 200; ++j) CHECK((km.assignments[j] == first) == (truth[j] == 0));
  for (int c = 0; c < 2; ++c) {
    const double cx = (c == first) ? 0.0 : 10.0;
    CHECK(std::abs(km.centroids(0, c) - cx) < 0.5 * sigma);
    CHECK(std::abs(km.centroids(1, c)) < 0.5 * sigma);
  }
  for (std::size_t i = 1; i < km.inertia_history.size(); ++i) {
    CHECK(km.inertia_history[i] <= km.inertia_history[i - 1] + 1e-9);
  }
}

TEST_CASE("k-means does not depend on the thread count") {
  Rng rng(7);
  const Matrix pts = unit_columns(rng, 4, 300);
  Rng a(8);
  Rng b(8);
  const auto one = lloyd_kmeans(pts, 12, 50, 0.0, a, 1);
  const auto four = lloyd_kmeans(pts, 12, 50, 0.0, b, 4);
  CHECK(one.assignments == four.assignments);
  CHECK(one.centroids == four.centroids);
}

TEST_CASE("concentration") {
  Vector c = Vector::Zero(3);
  Matrix same(3, 4);
  same.setZero();
  CHECK(concentration(same, c, 10.0) == 0.0);
  Matrix two(3, 2);
  two << 1, -1, 0, 0, 0, 0;
  CHECK(concentration(two, c, 10.0) == doctest::Approx(1.0 / std::log(12.0)).epsilon(1e-15));
  CHECK_THROWS_AS(concentration(Matrix(3, 0), c, 10.0), ContractError);
}

TEST_CASE("temperature post-processing matches the bisection oracle") {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> raw(1 + rng.below(10));
    for (auto& r : raw) r = rng.uniform() < 0.3 ? 0.0 : std::exp(3.0 * rng.normal());
    const auto got = postprocess_temperatures(raw, 1e-3, 0.2);
    // Same contract through the oracle: assign one fake member per cluster at
    // distance r * ln(1 + eps) so the raw concentration is r.
    double mean = 0.0;
    for (double g : got) {
      CHECK(g >= 1e-3);
      mean += g;
    }
    CHECK(mean / static_cast<double>(got.size()) == doctest::Approx(0.2).epsilon(1e-12));
    oracle::Mat emb, protos;
    std::vector<int> assign;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      protos.push_back({0.0});
      emb.push_back({raw[i] * std::log(1.0 + 10.0)});
      assign.push_back(static_cast<int>(i));
    }
    const auto want = oracle::temperatures(emb, protos, assign, 10.0, 1e-3, 0.2);
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
  }
}

TEST_CASE("degenerate hierarchy: one prototype per sample") {
  Rng rng(10);
  const Matrix emb = unit_columns(rng, 3, 9);
  HierarchyOptions opts;
  opts.min_cluster_size = 1;
  const std::vector<std::size_t> sizes{9};
  const auto tree = build_hierarchy(emb, sizes, opts, rng);
  REQUIRE(tree.num_levels() == 1);
  CHECK(tree.levels[0].size() == 9);
  for (double t : tree.levels[0].tau) CHECK(t == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("hierarchy on synthetic data recovers every label level") {
  const Dataset ds = generate_hierarchical_mixture(GeneratorSpec{}, 0);
  Matrix x = ds.features();
  x.colwise().normalize();
  Rng rng(11);
  const std::vector<std::size_t> sizes{24, 6, 2};
  const auto tree = build_hierarchy(x, sizes, HierarchyOptions{}, rng);
  check_tree_invariants(tree, ds.size(), 0.2, 1e-3);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(clustering_agreement(tree.assignment(l), ds.labels_at(l)).ami >= 0.95);
  }
}

TEST_CASE("pruning keeps member counts conserved") {
  Rng rng(12);
  const Matrix emb = unit_columns(rng, 4, 60);
  HierarchyOptions opts;
  opts.min_cluster_size = 8;
  const std::vector<std::size_t> sizes{20, 5, 2};
  const auto tree = build_hierarchy(emb, sizes, opts, rng);
  check_tree_invariants(tree, 60, 0.2, 1e-3);
  for (const auto& lv : tree.levels) {
    for (auto c : lv.member_count) CHECK(c >= 8);
  }
}

TEST_CASE("large level sizes are accepted") {
  const std::vector<std::size_t> sizes{3000, 2000, 1000};
  CHECK_NOTHROW(validate_level_sizes(sizes, 5000));
  CHECK_THROWS_AS(validate_level_sizes(sizes, 2999), ConfigError);
  const std::vector<std::size_t> bad{6, 6};
  CHECK_THROWS_AS(validate_level_sizes(bad, 100), ConfigError);
}

TEST_CASE("nearest prototype") {
  Rng rng(13);
  PrototypeTree tree;
  tree.levels.resize(1);
  tree.levels[0].prototypes = unit_columns(rng, 4, 5);
  tree.levels[0].tau = {0.2, 0.2, 0.2, 0.2, 0.2};
  const Vector p3 = tree.levels[0].prototypes.col(3);
  CHECK(nearest_prototype(p3, tree, 0) == 3);

  PrototypeTree tie;
  tie.levels.resize(1);
  tie.levels[0].prototypes = Matrix::Zero(2, 2);
  tie.levels[0].prototypes(0, 0) = 1.0;
  tie.levels[0].prototypes(1, 1) = 1.0;
  tie.levels[0].tau = {0.2, 0.2};
  Vector diag(2);
  diag << std::sqrt(0.5), std::sqrt(0.5);
  CHECK(nearest_prototype(diag, tie, 0) == 0);

  for (int t = 0; t < 100; ++t) {
    for (auto& v : tree.levels[0].tau) v = 0.05 + rng.uniform();
    const Vector z = oracle::to_eigen(oracle::random_unit(rng, 4));
    int best = 0;
    for (int i = 1; i < 5; ++i) {
      if (z.dot(tree.levels[0].prototypes.col(i)) / tree.levels[0].tau[i] >
          z.dot(tree.levels[0].prototypes.col(best)) / tree.levels[0].tau[best]) {
        best = i;
      }
    }
    CHECK(nearest_prototype(z, tree, 0) == best);
  }
}

TEST_CASE("tree builder refresh is deterministic and never mutates old trees") {
  Rng rng(14);
  const Matrix emb = unit_columns(rng, 4, 80);
  HierarchyOptions opts;
  opts.min_cluster_size = 2;
  const TreeBuilder builder({8, 3}, opts, 77);
  const auto a = builder.refresh(emb, 5);
  const auto b = builder.refresh(emb, 5);
  CHECK(dump_tree(*a) == dump_tree(*b));
  CHECK(a->epoch_stamp == 5);
  const std::string before = dump_tree(*a);
  const auto c = builder.refresh(unit_columns(rng, 4, 80), 6);
  CHECK(dump_tree(*a) == before);
  CHECK(c->epoch_stamp == 6);
}

TEST_CASE("tree from labels and dump format") {
  const Dataset ds = generate_hierarchical_mixture(GeneratorSpec{}, 2);
  Matrix x = ds.features();
  x.colwise().normalize();
  std::vector<std::vector<int>> labels{ds.labels_at(0), ds.labels_at(1), ds.labels_at(2)};
  const auto tree = tree_from_labels(x, labels, HierarchyOptions{});
  check_tree_invariants(tree, ds.size(), 0.2, 1e-3);
  const std::string dump = dump_tree(tree);
  CHECK(dump.rfind("1 0 ", 0) == 0);
  CHECK(dump.find("\n3 1 -1 600 ") != std::string::npos);

  std::vector<std::vector<int>> broken = labels;
  broken[1][0] = (broken[1][0] + 1) % 6;
  CHECK_THROWS_AS(tree_from_labels(x, broken, HierarchyOptions{}), ContractError);
}
