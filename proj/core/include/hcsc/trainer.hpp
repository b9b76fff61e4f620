#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hcsc/checkpoint.hpp"
#include "hcsc/data.hpp"
#include "hcsc/encoder.hpp"
#include "hcsc/eval.hpp"
#include "hcsc/hierarchy.hpp"
#include "hcsc/losses.hpp"
#include "hcsc/selection.hpp"

namespace hcsc {

/// During warmup only the instance loss runs. `kIcsc` keeps hierarchical
/// negative selection on; `kPlainInfoNce` contrasts against the whole queue.
enum class WarmupMode { kIcsc, kPlainInfoNce };

std::string to_string(WarmupMode m);
WarmupMode warmup_mode_from_string(const std::string& s);

struct TrainingConfig {
  std::size_t epochs = 60;
  std::size_t warmup_epochs = 6;
  std::size_t batch_size = 64;
  double lr_init = 0.1;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t queue_capacity = 512;
  double ema = 0.999;

  std::vector<std::size_t> level_sizes{24, 6, 2};
  std::size_t min_cluster_size = 10;
  double epsilon = 10.0;
  double tau_floor = 1e-3;
  std::size_t kmeans_iters = 50;
  std::size_t kmeans_restarts = 5;

  /// Base temperature and the IL/PL/IS/PS switches.
  LossWeights loss;
  /// HP switch: off -> a single level of level_sizes[0] prototypes.
  bool hierarchical_prototypes = true;
  WarmupMode warmup_mode = WarmupMode::kIcsc;

  std::vector<std::size_t> hidden{64};
  std::size_t embed_dim = 32;
  Activation activation = Activation::kTanh;

  double aug_noise = 0.05;
  double aug_drop = 0.05;
  double aug_scale_lo = 0.8;
  double aug_scale_hi = 1.2;

  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::size_t checkpoint_every = 10;  // epochs; 0 = only init and final
  std::size_t threads = 1;

  double knn_temperature = 0.07;
  std::vector<std::size_t> knn_k_grid{10, 20, 100, 200};
  /// Fraction of queries whose selection reports are written to selection.csv.
  double diagnostic_rate = 0.0;

  void validate() const;
  AugmentationPolicy augmentation() const;
  HierarchyOptions hierarchy_options() const;
  /// Level sizes actually used (one level when HP is off).
  std::vector<std::size_t> effective_level_sizes() const;
  EncoderConfig encoder_config(std::size_t input_dim) const;
  EvalConfig eval_config() const;

  std::string to_kv() const;
  /// Unknown keys raise ConfigError.
  static TrainingConfig from_kv(std::string_view text);
  /// Applies one key=value pair.
  void set(const std::string& key, const std::string& value);
};

/// The InfoNCE-only ablation: IL on; HP, PL, IS, PS off.
TrainingConfig infonce_only(TrainingConfig base);

struct TrainState {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  EncoderParams online;
  MomentumState momentum;
  NegativeQueue queue;
  EncoderParams velocity;
  std::shared_ptr<const PrototypeTree> tree;
};

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded random split; the test side gets round(fraction * n) samples.
DataSplit make_split(std::size_t n, double test_fraction, std::uint64_t seed);

/// Cosine annealing: lr_init * (1 + cos(pi * fraction)) / 2.
double lr_schedule(double fraction, double lr_init);

struct StepMetrics {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_icsc = 0.0;
  double loss_pcsc = 0.0;
  std::vector<double> mean_p;    // per level, instance selection
  std::vector<double> accepted;  // per level, mean accepted queue negatives per query
  NegativeDiagnostics diagnostics;
};

struct EpochMetrics {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_icsc = 0.0;
  double loss_pcsc = 0.0;
  std::vector<double> mean_p;
  std::vector<double> accepted;
  NegativeDiagnostics diagnostics;
  std::vector<double> ami;  // per tree level vs the matching label level
  double knn_accuracy = 0.0;
};

/// Fixed column order of metrics.csv.
std::string metrics_csv_header();
std::string to_csv_row(const StepMetrics& m);
std::string to_csv_row(const EpochMetrics& m);

/// Fresh state: seeded encoder, momentum copy, zero velocity, queue filled
/// with momentum-encoder keys of random training samples.
TrainState init_state(const TrainingConfig& config, const Dataset& dataset, const DataSplit& split);

struct StepContext {
  std::uint64_t total_steps = 1;
  /// Selection-report CSV rows are appended here when non-null.
  std::string* selection_csv = nullptr;
};

/// One optimizer step on `batch` (dataset indices). Mutates `state`.
/// Throws NumericError with the offending query's selection reports when the
/// loss is not finite.
StepMetrics train_step(TrainState& state, std::span<const std::size_t> batch, const TrainingConfig& config,
                       const Dataset& dataset, const StepContext& ctx);

/// Embeddings (columns) of the given samples under `params`, raw features.
Matrix embed_samples(const EncoderParams& params, const Dataset& dataset, std::span<const std::size_t> indices);

Checkpoint make_checkpoint(const TrainState& state, const TrainingConfig& config);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

struct TrainingResult {
  TrainState state;
  std::vector<StepMetrics> steps;
  std::vector<EpochMetrics> epochs;
  std::string metrics_csv;
};

struct RunOptions {
  /// Where checkpoints and metrics.csv go; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Continue from this checkpoint instead of a fresh state.
  std::optional<std::filesystem::path> resume_from;
};

/// Full training loop: per-epoch prototype refresh from momentum-encoder
/// embeddings, shuffled batches through train_step, epoch metrics, and
/// checkpoints (init.ckpt, epoch_NNNN.ckpt at the configured cadence,
/// final.ckpt).
TrainingResult run_training(const TrainingConfig& config, const Dataset& dataset, const RunOptions& options = {});

/// Post-training evaluation on frozen online-encoder embeddings.
struct FinalEvaluation {
  KnnResult knn;                      // finest labels, train split -> test split
  std::vector<double> ami;            // tree level l vs label level l
  std::vector<std::vector<double>> ami_matrix;  // [tree level][label level]
  std::vector<double> nmi;
  PrototypeTree tree;
};

FinalEvaluation evaluate_encoder(const EncoderParams& params, const TrainingConfig& config, const Dataset& dataset,
                                 std::span<const std::size_t> level_sizes);

}  // namespace hcsc
