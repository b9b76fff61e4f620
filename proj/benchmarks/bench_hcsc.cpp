#include <benchmark/benchmark.h>

#include "hcsc/data.hpp"
#include "hcsc/hierarchy.hpp"
#include "hcsc/selection.hpp"
#include "hcsc/trainer.hpp"

using namespace hcsc;

namespace {

Matrix normalized_features(std::size_t per_leaf) {
  GeneratorSpec spec;
  spec.samples_per_leaf = static_cast<std::uint32_t>(per_leaf);
  Matrix x = generate_hierarchical_mixture(spec, 0).features();
  x.colwise().normalize();
  return x;
}

void BM_Kmeans(benchmark::State& state) {
  const Matrix x = normalized_features(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    Rng rng(1);
    benchmark::DoNotOptimize(lloyd_kmeans(x, 24, 50, 1e-10, rng));
  }
  state.SetItemsProcessed(state.iterations() * x.cols());
}
BENCHMARK(BM_Kmeans)->Arg(25)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_BuildHierarchy(benchmark::State& state) {
  const Matrix x = normalized_features(static_cast<std::size_t>(state.range(0)));
  const std::vector<std::size_t> sizes{24, 6, 2};
  for (auto _ : state) {
    Rng rng(1);
    benchmark::DoNotOptimize(build_hierarchy(x, sizes, HierarchyOptions{}, rng));
  }
}
BENCHMARK(BM_BuildHierarchy)->Arg(25)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_InstanceSelection(benchmark::State& state) {
  const Matrix x = normalized_features(50);
  Rng rng(2);
  const std::vector<std::size_t> sizes{24, 6, 2};
  const PrototypeTree tree = build_hierarchy(x, sizes, HierarchyOptions{}, rng);
  const auto q = static_cast<Eigen::Index>(state.range(0));
  QueueSnapshot snap{x.leftCols(q), std::vector<std::int64_t>(static_cast<std::size_t>(q), -1)};
  const Vector z = x.col(x.cols() - 1);
  const auto aff = compute_queue_affinity(snap, tree);
  std::uint64_t step = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(select_instance_negatives(z, aff, tree, SelectionStreams{0, step++, 0}));
  }
  state.SetItemsProcessed(state.iterations() * q);
}
BENCHMARK(BM_InstanceSelection)->Arg(128)->Arg(512);

void BM_TrainStep(benchmark::State& state) {
  const Dataset ds = generate_hierarchical_mixture(GeneratorSpec{}, 0);
  TrainingConfig c;
  c.batch_size = static_cast<std::size_t>(state.range(0));
  const DataSplit split = make_split(ds.size(), c.test_fraction, c.seed);
  TrainState st = init_state(c, ds, split);
  const TreeBuilder builder(c.level_sizes, c.hierarchy_options(), c.seed);
  st.tree = builder.refresh(encoder_embed(st.momentum.params, ds.features()), 0);
  st.epoch = c.warmup_epochs;  // full objective
  const std::vector<std::size_t> batch(split.train.begin(), split.train.begin() + static_cast<long>(c.batch_size));
  StepContext ctx;
  ctx.total_steps = 1u << 20;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(st, batch, c, ds, ctx));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c.batch_size));
}
BENCHMARK(BM_TrainStep)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
