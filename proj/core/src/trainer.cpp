#include "hcsc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

namespace hcsc {

namespace {

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  for (const auto& p : split(s, ',')) out.push_back(static_cast<std::size_t>(std::stoull(p)));
  return out;
}

std::string size_list(const std::vector<std::size_t>& v) {
  std::vector<std::string> parts;
  for (auto x : v) parts.push_back(std::to_string(x));
  return join(parts, ",");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

std::string per_level(const std::vector<double>& v) {
  std::vector<std::string> parts;
  for (double x : v) parts.push_back(format_double(x));
  return join(parts, ";");
}

int fine_label_of_id(const Dataset& ds, std::int64_t id) {
  if (id < 0 || static_cast<std::size_t>(id) >= ds.size()) return -1;
  return static_cast<int>(ds.samples[static_cast<std::size_t>(id)].labels[0]);
}

// Everything one query contributes to a step.
struct QueryOutcome {
  double loss = 0.0;
  double icsc = 0.0;
  double pcsc = 0.0;
  Vector grad;
  std::vector<SelectionReport> instance_reports;
  NegativeDiagnostics diagnostics;
};

std::string dump_reports(const std::vector<SelectionReport>& reports, std::uint64_t step, std::int64_t id) {
  return selection_csv_header() + selection_csv_rows(reports, step, id);
}

}  // namespace

std::string to_string(WarmupMode m) { return m == WarmupMode::kIcsc ? "icsc" : "plain_infonce"; }

WarmupMode warmup_mode_from_string(const std::string& s) {
  if (s == "icsc") return WarmupMode::kIcsc;
  if (s == "plain_infonce") return WarmupMode::kPlainInfoNce;
  throw ConfigError("unknown warmup mode '" + s + "' (expected icsc or plain_infonce)");
}

// ---------------------------------------------------------------------------
// TrainingConfig

void TrainingConfig::validate() const {
  if (warmup_epochs > epochs) throw ConfigError("config: warmup_epochs exceeds epochs");
  if (batch_size < 2) throw ConfigError("config: batch_size must be >= 2");
  if (!(lr_init > 0.0) || !std::isfinite(lr_init)) throw ConfigError("config: lr must be finite and > 0");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ConfigError("config: sgd_momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("config: weight_decay must be >= 0");
  if (queue_capacity == 0) throw ConfigError("config: queue_size must be >= 1");
  if (!(ema >= 0.0 && ema <= 1.0)) throw ConfigError("config: ema must be in [0, 1]");
  if (level_sizes.empty()) throw ConfigError("config: levels must not be empty");
  for (std::size_t i = 1; i < level_sizes.size(); ++i) {
    if (level_sizes[i] >= level_sizes[i - 1]) throw ConfigError("config: levels must be strictly decreasing");
  }
  if (level_sizes.back() == 0) throw ConfigError("config: every level needs at least one prototype");
  if (!(epsilon > 0.0)) throw ConfigError("config: epsilon must be > 0");
  if (!(tau_floor > 0.0)) throw ConfigError("config: tau_floor must be > 0");
  if (kmeans_iters == 0) throw ConfigError("config: kmeans_iters must be >= 1");
  if (kmeans_restarts == 0) throw ConfigError("config: kmeans_restarts must be >= 1");
  loss.validate();
  if (loss.proto_selection && !hierarchical_prototypes) {
    throw ConfigError("config: prototype selection (PS) needs hierarchical prototypes (HP)");
  }
  if (!loss.instance_loss && !loss.proto_loss) throw ConfigError("config: at least one of IL and PL must be on");
  if (embed_dim == 0) throw ConfigError("config: embed_dim must be >= 1");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("config: hidden widths must be >= 1");
  }
  (void)augmentation();
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("config: test_fraction must be in (0, 1)");
  eval_config().validate();
  if (!(diagnostic_rate >= 0.0 && diagnostic_rate <= 1.0)) throw ConfigError("config: diagnostic_rate must be in [0, 1]");
}

AugmentationPolicy TrainingConfig::augmentation() const {
  return AugmentationPolicy(aug_noise, aug_drop, aug_scale_lo, aug_scale_hi);
}

HierarchyOptions TrainingConfig::hierarchy_options() const {
  HierarchyOptions o;
  o.min_cluster_size = min_cluster_size;
  o.epsilon = epsilon;
  o.base_tau = loss.tau;
  o.tau_floor = tau_floor;
  o.kmeans_iters = kmeans_iters;
  o.kmeans_restarts = kmeans_restarts;
  o.threads = std::max<std::size_t>(1, threads);
  return o;
}

std::vector<std::size_t> TrainingConfig::effective_level_sizes() const {
  if (hierarchical_prototypes) return level_sizes;
  return {level_sizes.front()};
}

EncoderConfig TrainingConfig::encoder_config(std::size_t input_dim) const {
  EncoderConfig c;
  c.input_dim = input_dim;
  c.hidden = hidden;
  c.embed_dim = embed_dim;
  c.activation = activation;
  return c;
}

EvalConfig TrainingConfig::eval_config() const {
  EvalConfig e;
  e.knn_temperature = knn_temperature;
  e.knn_k_grid = knn_k_grid;
  e.diagnostic_rate = diagnostic_rate;
  e.probe_seed = seed;
  return e;
}

std::string TrainingConfig::to_kv() const {
  std::ostringstream o;
  o << "epochs=" << epochs << "\n";
  o << "warmup_epochs=" << warmup_epochs << "\n";
  o << "warmup_mode=" << to_string(warmup_mode) << "\n";
  o << "batch_size=" << batch_size << "\n";
  o << "lr=" << format_double(lr_init) << "\n";
  o << "sgd_momentum=" << format_double(sgd_momentum) << "\n";
  o << "weight_decay=" << format_double(weight_decay) << "\n";
  o << "queue_size=" << queue_capacity << "\n";
  o << "ema=" << format_double(ema) << "\n";
  o << "levels=" << size_list(level_sizes) << "\n";
  o << "min_cluster_size=" << min_cluster_size << "\n";
  o << "epsilon=" << format_double(epsilon) << "\n";
  o << "tau=" << format_double(loss.tau) << "\n";
  o << "tau_floor=" << format_double(tau_floor) << "\n";
  o << "kmeans_iters=" << kmeans_iters << "\n";
  o << "kmeans_restarts=" << kmeans_restarts << "\n";
  o << "hp=" << (hierarchical_prototypes ? 1 : 0) << "\n";
  o << "il=" << (loss.instance_loss ? 1 : 0) << "\n";
  o << "pl=" << (loss.proto_loss ? 1 : 0) << "\n";
  o << "is=" << (loss.instance_selection ? 1 : 0) << "\n";
  o << "ps=" << (loss.proto_selection ? 1 : 0) << "\n";
  o << "hidden=" << size_list(hidden) << "\n";
  o << "embed_dim=" << embed_dim << "\n";
  o << "activation=" << to_string(activation) << "\n";
  o << "aug_noise=" << format_double(aug_noise) << "\n";
  o << "aug_drop=" << format_double(aug_drop) << "\n";
  o << "aug_scale_lo=" << format_double(aug_scale_lo) << "\n";
  o << "aug_scale_hi=" << format_double(aug_scale_hi) << "\n";
  o << "seed=" << seed << "\n";
  o << "test_fraction=" << format_double(test_fraction) << "\n";
  o << "checkpoint_every=" << checkpoint_every << "\n";
  o << "knn_temperature=" << format_double(knn_temperature) << "\n";
  o << "knn_k=" << size_list(knn_k_grid) << "\n";
  o << "diagnostic_rate=" << format_double(diagnostic_rate) << "\n";
  return o.str();
}

void TrainingConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "epochs") epochs = std::stoull(value);
    else if (key == "warmup_epochs") warmup_epochs = std::stoull(value);
    else if (key == "warmup_mode") warmup_mode = warmup_mode_from_string(value);
    else if (key == "batch_size") batch_size = std::stoull(value);
    else if (key == "lr") lr_init = std::stod(value);
    else if (key == "sgd_momentum") sgd_momentum = std::stod(value);
    else if (key == "weight_decay") weight_decay = std::stod(value);
    else if (key == "queue_size") queue_capacity = std::stoull(value);
    else if (key == "ema") ema = std::stod(value);
    else if (key == "levels") level_sizes = parse_size_list(value);
    else if (key == "min_cluster_size") min_cluster_size = std::stoull(value);
    else if (key == "epsilon") epsilon = std::stod(value);
    else if (key == "tau") loss.tau = std::stod(value);
    else if (key == "tau_floor") tau_floor = std::stod(value);
    else if (key == "kmeans_iters") kmeans_iters = std::stoull(value);
    else if (key == "kmeans_restarts") kmeans_restarts = std::stoull(value);
    else if (key == "hp") hierarchical_prototypes = parse_bool(key, value);
    else if (key == "il") loss.instance_loss = parse_bool(key, value);
    else if (key == "pl") loss.proto_loss = parse_bool(key, value);
    else if (key == "is") loss.instance_selection = parse_bool(key, value);
    else if (key == "ps") loss.proto_selection = parse_bool(key, value);
    else if (key == "hidden") hidden = parse_size_list(value);
    else if (key == "embed_dim") embed_dim = std::stoull(value);
    else if (key == "activation") activation = activation_from_string(value);
    else if (key == "aug_noise") aug_noise = std::stod(value);
    else if (key == "aug_drop") aug_drop = std::stod(value);
    else if (key == "aug_scale_lo") aug_scale_lo = std::stod(value);
    else if (key == "aug_scale_hi") aug_scale_hi = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "test_fraction") test_fraction = std::stod(value);
    else if (key == "checkpoint_every") checkpoint_every = std::stoull(value);
    else if (key == "threads") threads = std::stoull(value);
    else if (key == "knn_temperature") knn_temperature = std::stod(value);
    else if (key == "knn_k") knn_k_grid = parse_size_list(value);
    else if (key == "diagnostic_rate") diagnostic_rate = std::stod(value);
    else throw ConfigError("config: unknown key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw ConfigError("config: bad value '" + value + "' for '" + key + "'");
  } catch (const std::out_of_range&) {
    throw ConfigError("config: value out of range for '" + key + "'");
  }
}

TrainingConfig TrainingConfig::from_kv(std::string_view text) {
  TrainingConfig c;
  for (const auto& [k, v] : parse_kv_lines(text)) c.set(k, v);
  return c;
}

TrainingConfig infonce_only(TrainingConfig base) {
  base.hierarchical_prototypes = false;
  base.loss.instance_loss = true;
  base.loss.proto_loss = false;
  base.loss.instance_selection = false;
  base.loss.proto_selection = false;
  return base;
}

// ---------------------------------------------------------------------------

DataSplit make_split(std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("split: test fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::substream(seed, Stream::kSplit);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) throw ConfigError("split: too few samples for a train/test split");
  DataSplit s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

double lr_schedule(double fraction, double lr_init) {
  fraction = std::clamp(fraction, 0.0, 1.0);
  return lr_init * 0.5 * (1.0 + std::cos(std::numbers::pi * fraction));
}

std::string metrics_csv_header() {
  return "kind,epoch,step,lr,loss,loss_icsc,loss_pcsc,mean_p,accepted,fn_removal,tn_precision,tn_preservation,"
         "ami,knn_acc";
}

std::string to_csv_row(const StepMetrics& m) {
  std::ostringstream o;
  o << "step," << m.epoch << "," << m.step << "," << format_double(m.lr) << "," << format_double(m.loss) << ","
    << format_double(m.loss_icsc) << "," << format_double(m.loss_pcsc) << "," << per_level(m.mean_p) << ","
    << per_level(m.accepted) << "," << format_double(m.diagnostics.false_negative_removal()) << ","
    << format_double(m.diagnostics.true_negative_precision()) << ","
    << format_double(m.diagnostics.true_negative_preservation()) << ",,";
  return o.str();
}

std::string to_csv_row(const EpochMetrics& m) {
  std::ostringstream o;
  o << "epoch," << m.epoch << "," << m.step << "," << format_double(m.lr) << "," << format_double(m.loss) << ","
    << format_double(m.loss_icsc) << "," << format_double(m.loss_pcsc) << "," << per_level(m.mean_p) << ","
    << per_level(m.accepted) << "," << format_double(m.diagnostics.false_negative_removal()) << ","
    << format_double(m.diagnostics.true_negative_precision()) << ","
    << format_double(m.diagnostics.true_negative_preservation()) << "," << per_level(m.ami) << ","
    << format_double(m.knn_accuracy);
  return o.str();
}

Matrix embed_samples(const EncoderParams& params, const Dataset& dataset, std::span<const std::size_t> indices) {
  return encoder_embed(params, dataset.features(indices));
}

TrainState init_state(const TrainingConfig& config, const Dataset& dataset, const DataSplit& split) {
  config.validate();
  if (split.train.empty()) throw ConfigError("init: empty training split");
  TrainState st;
  Rng init_rng = Rng::substream(config.seed, Stream::kInit);
  st.online = EncoderParams::init(config.encoder_config(dataset.dim()), init_rng);
  st.momentum = MomentumState{st.online, config.ema};
  st.velocity = EncoderParams::zeros_like(st.online);
  st.queue = NegativeQueue(config.queue_capacity, config.embed_dim);

  const auto policy = config.augmentation();
  Rng pick = Rng::substream(config.seed, Stream::kQueueInit);
  Matrix views(static_cast<Eigen::Index>(dataset.dim()), static_cast<Eigen::Index>(config.queue_capacity));
  std::vector<std::int64_t> ids(config.queue_capacity);
  for (std::size_t i = 0; i < config.queue_capacity; ++i) {
    const std::size_t idx = split.train[pick.below(split.train.size())];
    Rng aug = Rng::substream(config.seed, Stream::kQueueInit, 1, i);
    views.col(static_cast<Eigen::Index>(i)) = augment(dataset.samples[idx].features, policy, aug);
    ids[i] = static_cast<std::int64_t>(dataset.samples[idx].id);
  }
  st.queue.push(encoder_embed(st.momentum.params, views), ids);
  return st;
}

StepMetrics train_step(TrainState& state, std::span<const std::size_t> batch, const TrainingConfig& config,
                       const Dataset& dataset, const StepContext& ctx) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const bool warmup = state.epoch < config.warmup_epochs;
  const bool use_il = config.loss.instance_loss;
  const bool use_pl = config.loss.proto_loss && !warmup;
  const bool use_is =
      use_il && config.loss.instance_selection && !(warmup && config.warmup_mode == WarmupMode::kPlainInfoNce);
  const bool use_ps = use_pl && config.loss.proto_selection;
  if ((use_is || use_pl) && !state.tree) throw ContractError("train_step: no prototype tree for this epoch");

  LossWeights weights = config.loss;
  weights.proto_loss = use_pl;
  weights.proto_selection = use_ps;
  weights.instance_selection = use_is;

  const std::size_t B = batch.size();
  const std::uint64_t step = state.step;
  StepMetrics metrics;
  metrics.epoch = state.epoch;
  metrics.step = step;
  metrics.lr = lr_schedule(static_cast<double>(step) / static_cast<double>(std::max<std::uint64_t>(1, ctx.total_steps)),
                           config.lr_init);

  // Two augmented views per query.
  const auto policy = config.augmentation();
  const auto D = static_cast<Eigen::Index>(dataset.dim());
  Matrix x1(D, static_cast<Eigen::Index>(B));
  Matrix x2(D, static_cast<Eigen::Index>(B));
  std::vector<std::int64_t> ids(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& s = dataset.samples.at(batch[i]);
    Rng a1 = Rng::substream(config.seed, Stream::kAugment, step, i, 0);
    Rng a2 = Rng::substream(config.seed, Stream::kAugment, step, i, 1);
    x1.col(static_cast<Eigen::Index>(i)) = augment(s.features, policy, a1);
    x2.col(static_cast<Eigen::Index>(i)) = augment(s.features, policy, a2);
    ids[i] = static_cast<std::int64_t>(s.id);
  }
  const ForwardResult fwd = encoder_forward(state.online, x1);
  const Matrix zk = encoder_embed(state.momentum.params, x2);

  const auto snapshot = state.queue.snapshot();
  const PrototypeTree* tree = state.tree.get();
  QueueAffinity qaff;
  if (use_is) qaff = compute_queue_affinity(*snapshot, *tree);
  PrototypeAffinity paff;
  if (use_ps) paff = compute_prototype_affinity(*tree);

  std::vector<int> key_labels(snapshot->size());
  for (std::size_t k = 0; k < snapshot->size(); ++k) key_labels[k] = fine_label_of_id(dataset, snapshot->ids[k]);

  std::vector<QueryOutcome> out(B);
  const std::size_t L = tree ? tree->num_levels() : 1;
  parallel_for(B, std::max<std::size_t>(1, config.threads), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Vector z = fwd.embeddings.col(static_cast<Eigen::Index>(i));
      const Vector zp = zk.col(static_cast<Eigen::Index>(i));
      QueryOutcome& q = out[i];
      const SelectionStreams streams{config.seed, step, i};

      LossOutput icsc = LossOutput::zero(z.size());
      if (use_il) {
        if (use_is) {
          q.instance_reports = select_instance_negatives(z, qaff, *tree, streams);
        } else {
          q.instance_reports = {accept_all_instances(0, snapshot->size())};
        }
        icsc = icsc_loss(z, zp, q.instance_reports, *snapshot, config.loss.tau);
      }
      LossOutput pcsc = LossOutput::zero(z.size());
      std::vector<SelectionReport> proto_reports;
      if (use_pl) {
        for (std::size_t l = 0; l < L; ++l) {
          const int pos = nearest_prototype(z, *tree, l);
          if (use_ps) {
            Rng r = streams.prototype(l);
            proto_reports.push_back(select_proto_negatives(pos, paff, *tree, l, r));
          } else {
            proto_reports.push_back(accept_all_prototypes(l, tree->levels[l].size(), pos));
          }
        }
        pcsc = pcsc_loss(z, *tree, proto_reports);
      }
      const LossOutput total = hcsc_loss(icsc, pcsc, weights);
      if (!std::isfinite(total.value) || !all_finite(total.grad)) {
        std::string msg = "non-finite loss at step " + std::to_string(step) + " for sample " +
                          std::to_string(ids[i]) + "\ninstance reports:\n" +
                          dump_reports(q.instance_reports, step, ids[i]) + "prototype reports:\n" +
                          dump_reports(proto_reports, step, ids[i]);
        throw NumericError(msg);
      }
      q.loss = total.value;
      q.icsc = icsc.value;
      q.pcsc = pcsc.value;
      q.grad = total.grad;
      const int label = static_cast<int>(dataset.samples[batch[i]].labels[0]);
      if (use_il) q.diagnostics = negative_selection_diagnostics(q.instance_reports, label, key_labels);
    }
  });

  // Ordered reduction.
  Matrix grad(fwd.embeddings.rows(), static_cast<Eigen::Index>(B));
  const std::size_t report_levels = out.front().instance_reports.size();
  metrics.mean_p.assign(report_levels, 0.0);
  metrics.accepted.assign(report_levels, 0.0);
  const double invB = 1.0 / static_cast<double>(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& q = out[i];
    metrics.loss += q.loss * invB;
    metrics.loss_icsc += q.icsc * invB;
    metrics.loss_pcsc += q.pcsc * invB;
    grad.col(static_cast<Eigen::Index>(i)) = q.grad * invB;
    for (std::size_t l = 0; l < report_levels; ++l) {
      metrics.mean_p[l] += q.instance_reports[l].mean_probability() * invB;
      metrics.accepted[l] += static_cast<double>(q.instance_reports[l].accepted_count()) * invB;
    }
    metrics.diagnostics += q.diagnostics;
    if (ctx.selection_csv && config.diagnostic_rate > 0.0) {
      Rng pick = Rng::substream(config.seed, Stream::kInstanceSelect, step, i, ~std::uint64_t{0});
      if (pick.uniform() < config.diagnostic_rate) *ctx.selection_csv += selection_csv_rows(q.instance_reports, step, ids[i]);
    }
  }

  // SGD with momentum; weight decay enters the gradient.
  EncoderParams g = encoder_backward(state.online, fwd.cache, grad);
  g.axpy(config.weight_decay, state.online);
  state.velocity.scale(config.sgd_momentum);
  state.velocity.axpy(1.0, g);
  state.velocity.round_to_f32();
  state.online.axpy(-metrics.lr, state.velocity);
  state.online.round_to_f32();
  if (!state.online.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(step));

  ema_update_inplace(state.momentum, state.online);
  state.momentum.params.round_to_f32();
  state.queue.push(zk, ids);
  ++state.step;
  return metrics;
}

Checkpoint make_checkpoint(const TrainState& state, const TrainingConfig& config) {
  Checkpoint c;
  c.epoch = state.epoch;
  c.step = state.step;
  c.layer_sizes = config.encoder_config(state.online.input_dim()).layer_sizes();
  c.activation = state.online.activation;
  c.ema_m = state.momentum.m;
  c.online = state.online;
  c.momentum = state.momentum.params;
  c.velocity = state.velocity;
  c.queue_capacity = state.queue.capacity();
  const auto snap = state.queue.snapshot();
  c.queue_keys = snap->keys;
  c.queue_ids = snap->ids;
  c.config_text = config.to_kv();
  return c;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
  TrainState st;
  st.epoch = ckpt.epoch;
  st.step = ckpt.step;
  st.online = ckpt.online;
  st.momentum = MomentumState{ckpt.momentum, ckpt.ema_m};
  st.velocity = ckpt.velocity;
  st.queue = ckpt.make_queue();
  return st;
}

namespace {

std::vector<std::vector<int>> label_levels(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<std::vector<int>> out;
  for (std::size_t l = 0; l < ds.depth(); ++l) out.push_back(ds.labels_at(l, idx));
  return out;
}

// Keeps the rows of an earlier metrics.csv that precede `epoch`.
std::string rows_before(const std::string& csv, std::uint64_t epoch) {
  std::string kept;
  std::istringstream in(csv);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    const auto parts = split(line, ',');
    if (parts.size() < 2) continue;
    if (std::stoull(parts[1]) < epoch) kept += line + "\n";
  }
  return kept;
}

}  // namespace

TrainingResult run_training(const TrainingConfig& config, const Dataset& dataset, const RunOptions& options) {
  config.validate();
  const DataSplit split = make_split(dataset.size(), config.test_fraction, config.seed);
  const auto level_sizes = config.effective_level_sizes();
  validate_level_sizes(level_sizes, dataset.size());
  if (config.batch_size > split.train.size()) throw ConfigError("config: batch_size exceeds the training split");

  const bool write = !options.out_dir.empty();
  if (write) std::filesystem::create_directories(options.out_dir);

  TrainingResult result;
  std::string earlier_rows;
  if (options.resume_from) {
    const Checkpoint ckpt = load_checkpoint(*options.resume_from);
    result.state = state_from_checkpoint(ckpt);
    const auto expect = config.encoder_config(dataset.dim()).layer_sizes();
    if (ckpt.layer_sizes != expect) throw ConfigError("resume: checkpoint encoder shape does not match the config");
    if (ckpt.queue_capacity != config.queue_capacity) throw ConfigError("resume: queue size differs from the config");
    if (write && std::filesystem::exists(options.out_dir / "metrics.csv")) {
      earlier_rows = rows_before(read_file(options.out_dir / "metrics.csv"), ckpt.epoch);
    }
  } else {
    result.state = init_state(config, dataset, split);
    if (write) save_checkpoint(make_checkpoint(result.state, config), options.out_dir / "init.ckpt");
  }
  TrainState& st = result.state;

  const std::size_t steps_per_epoch = std::max<std::size_t>(1, split.train.size() / config.batch_size);
  StepContext ctx;
  ctx.total_steps = static_cast<std::uint64_t>(steps_per_epoch * config.epochs);
  std::string selection_rows;
  if (config.diagnostic_rate > 0.0) ctx.selection_csv = &selection_rows;

  const TreeBuilder builder(level_sizes, config.hierarchy_options(), config.seed);
  const bool needs_tree = config.loss.proto_loss || config.loss.instance_selection;
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto all_labels = label_levels(dataset, all);
  const Matrix all_x = dataset.features();
  const auto train_fine = dataset.labels_at(0, split.train);
  const auto test_fine = dataset.labels_at(0, split.test);
  const Matrix train_x = dataset.features(split.train);
  const Matrix test_x = dataset.features(split.test);
  const EvalConfig eval_cfg = config.eval_config();

  std::string csv = metrics_csv_header() + "\n" + earlier_rows;
  auto flush = [&] {
    if (!write) return;
    write_file_atomic(options.out_dir / "metrics.csv", csv);
    if (ctx.selection_csv) write_file_atomic(options.out_dir / "selection.csv", selection_csv_header() + selection_rows);
  };

  for (std::uint64_t epoch = st.epoch; epoch < config.epochs; ++epoch) {
    st.epoch = epoch;
    EpochMetrics em;
    em.epoch = epoch;
    if (needs_tree) {
      st.tree = builder.refresh(encoder_embed(st.momentum.params, all_x), epoch);
      const auto ami = prototype_label_ami(*st.tree, all_labels);
      for (std::size_t l = 0; l < ami.size() && l < all_labels.size(); ++l) em.ami.push_back(ami[l][l]);
    }

    std::vector<std::size_t> order = split.train;
    Rng shuffle = Rng::substream(config.seed, Stream::kShuffle, epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::span<const std::size_t> batch(order.data() + s * config.batch_size, config.batch_size);
      StepMetrics m;
      try {
        m = train_step(st, batch, config, dataset, ctx);
      } catch (const NumericError& e) {
        if (write) {
          flush();
          write_file_atomic(options.out_dir / "nonfinite_dump.txt", std::string(e.what()) + "\n");
        }
        throw;
      }
      csv += to_csv_row(m) + "\n";
      const double inv = 1.0 / static_cast<double>(steps_per_epoch);
      em.loss += m.loss * inv;
      em.loss_icsc += m.loss_icsc * inv;
      em.loss_pcsc += m.loss_pcsc * inv;
      if (em.mean_p.size() < m.mean_p.size()) {
        em.mean_p.resize(m.mean_p.size(), 0.0);
        em.accepted.resize(m.accepted.size(), 0.0);
      }
      for (std::size_t l = 0; l < m.mean_p.size(); ++l) {
        em.mean_p[l] += m.mean_p[l] * inv;
        em.accepted[l] += m.accepted[l] * inv;
      }
      em.diagnostics += m.diagnostics;
      em.lr = m.lr;
      result.steps.push_back(std::move(m));
    }

    const auto knn = knn_evaluate(encoder_embed(st.online, train_x), train_fine, encoder_embed(st.online, test_x),
                                  test_fine, eval_cfg);
    em.knn_accuracy = knn.best_accuracy;
    em.step = st.step;
    csv += to_csv_row(em) + "\n";
    result.epochs.push_back(std::move(em));

    st.epoch = epoch + 1;
    if (write) {
      flush();
      if (config.checkpoint_every > 0 && st.epoch % config.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04llu.ckpt", static_cast<unsigned long long>(st.epoch));
        save_checkpoint(make_checkpoint(st, config), options.out_dir / name);
      }
    }
  }
  if (write && config.epochs > 0) {
    flush();
    save_checkpoint(make_checkpoint(st, config), options.out_dir / "final.ckpt");
  }
  result.metrics_csv = std::move(csv);
  return result;
}

FinalEvaluation evaluate_encoder(const EncoderParams& params, const TrainingConfig& config, const Dataset& dataset,
                                 std::span<const std::size_t> level_sizes) {
  const DataSplit split = make_split(dataset.size(), config.test_fraction, config.seed);
  const Matrix train_emb = embed_samples(params, dataset, split.train);
  const Matrix test_emb = embed_samples(params, dataset, split.test);
  FinalEvaluation ev;
  ev.knn = knn_evaluate(train_emb, dataset.labels_at(0, split.train), test_emb, dataset.labels_at(0, split.test),
                        config.eval_config());
  Rng rng = Rng::substream(config.seed, Stream::kKMeans, ~std::uint64_t{0});
  ev.tree = build_hierarchy(train_emb, level_sizes, config.hierarchy_options(), rng);
  const auto labels = label_levels(dataset, split.train);
  ev.ami_matrix = prototype_label_ami(ev.tree, labels);
  for (std::size_t l = 0; l < ev.tree.num_levels() && l < labels.size(); ++l) {
    ev.ami.push_back(ev.ami_matrix[l][l]);
    ev.nmi.push_back(clustering_agreement(ev.tree.assignment(l), labels[l]).nmi);
  }
  return ev;
}

}  // namespace hcsc
