#include "hcsc/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "hcsc/checkpoint.hpp"
#include "hcsc/data.hpp"
#include "hcsc/eval.hpp"
#include "hcsc/hierarchy.hpp"
#include "hcsc/trainer.hpp"

namespace hcsc::cli {

namespace fs = std::filesystem;

namespace {

struct GenerateArgs {
  GeneratorSpec spec;
  std::string out;
};

struct TrainArgs {
  TrainingConfig cfg;
  std::string data;
  std::string out;
  std::string resume;
  std::string warmup_mode = "icsc";
  std::string activation = "tanh";
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out = "eval.csv";
  bool knn = false;
  bool ami = false;
  bool probe = false;
  std::vector<std::size_t> levels;
  std::size_t threads = 0;
};

struct TreeArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::vector<std::size_t> levels;
  std::size_t threads = 0;
};

struct ExportArgs {
  std::string run;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::size_t threads = 0;
};

void common_setup(CLI::App* sub, std::string& config_path) {
  sub->option_defaults()->always_capture_default();
  sub->add_option("--config", config_path, "key=value config file; command-line flags take precedence");
}

// CLI11 only reads config files for the root app, so subcommand config files
// are expanded here: each key=value line becomes --key=value, inserted right
// after the subcommand unless the same flag is on the command line.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  if (args.size() < 2) return args;
  std::string path;
  std::set<std::string> given;
  for (std::size_t i = 2; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const auto eq = a.find('=');
    const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    if (name == "config") {
      if (eq != std::string::npos) {
        path = a.substr(eq + 1);
      } else if (i + 1 < args.size()) {
        path = args[i + 1];
      }
    } else {
      given.insert(name);
    }
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::vector<std::string> extra;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#' || line[first] == ';' || line[first] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config file " + path + ": expected key=value, got '" + line + "'");
    auto trim = [](std::string v) {
      const auto b = v.find_first_not_of(" \t\r\"");
      const auto e = v.find_last_not_of(" \t\r\"");
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    if (given.count(key)) continue;
    extra.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

// Training config stored in a checkpoint's echo block.
TrainingConfig config_of(const Checkpoint& ckpt) { return TrainingConfig::from_kv(ckpt.config_text); }

Dataset load_matching_dataset(const std::string& path, const Checkpoint& ckpt) {
  Dataset ds = load_dataset(path);
  if (!ckpt.layer_sizes.empty() && ckpt.layer_sizes.front() != ds.dim()) {
    throw ConfigError("dataset dimension " + std::to_string(ds.dim()) + " does not match the checkpoint encoder input " +
                      std::to_string(ckpt.layer_sizes.front()));
  }
  return ds;
}

// Tree the trainer would build from this checkpoint's momentum encoder.
PrototypeTree tree_for_checkpoint(const Checkpoint& ckpt, const Dataset& ds, std::vector<std::size_t> levels,
                                  std::size_t threads) {
  TrainingConfig cfg = config_of(ckpt);
  cfg.threads = resolve_threads(threads);
  if (levels.empty()) levels = cfg.effective_level_sizes();
  validate_level_sizes(levels, ds.size());
  const TreeBuilder builder(levels, cfg.hierarchy_options(), cfg.seed);
  return *builder.refresh(encoder_embed(ckpt.momentum, ds.features()), ckpt.epoch);
}

int run_generate(const GenerateArgs& a, std::ostream& out) {
  a.spec.validate();
  const Dataset ds = generate_hierarchical_mixture(a.spec, a.spec.seed);
  save_dataset(ds, a.out);
  out << "wrote " << ds.size() << " samples to " << a.out << "\n";
  return kExitOk;
}

int run_train(TrainArgs a, std::ostream& out) {
  a.cfg.warmup_mode = warmup_mode_from_string(a.warmup_mode);
  a.cfg.activation = activation_from_string(a.activation);
  a.cfg.threads = resolve_threads(a.cfg.threads);
  a.cfg.validate();
  const Dataset ds = load_dataset(a.data);
  RunOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
  const auto result = run_training(a.cfg, ds, opts);
  out << "trained " << result.state.step << " steps; metrics in " << (fs::path(a.out) / "metrics.csv").string()
      << "\n";
  if (!result.epochs.empty()) {
    out << "final knn accuracy " << format_double(result.epochs.back().knn_accuracy) << "\n";
  }
  return kExitOk;
}

int run_eval(EvalArgs a, std::ostream& out) {
  if (!a.knn && !a.ami && !a.probe) a.knn = a.ami = a.probe = true;
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  TrainingConfig cfg = config_of(ckpt);
  cfg.threads = resolve_threads(a.threads);
  const Dataset ds = load_matching_dataset(a.data, ckpt);
  const std::vector<std::size_t> levels = a.levels.empty() ? cfg.effective_level_sizes() : a.levels;
  validate_level_sizes(levels, ds.size());

  const std::string tail = "," + std::to_string(cfg.seed) + "," + std::to_string(ckpt.epoch) + "\n";
  std::string csv = "metric,level_or_k,value,seed,epoch\n";
  const FinalEvaluation ev = evaluate_encoder(ckpt.online, cfg, ds, levels);
  if (a.knn) {
    for (std::size_t i = 0; i < ev.knn.k_values.size(); ++i) {
      csv += "knn," + std::to_string(ev.knn.k_values[i]) + "," + format_double(ev.knn.accuracy[i]) + tail;
    }
    csv += "knn_best," + std::to_string(ev.knn.best_k) + "," + format_double(ev.knn.best_accuracy) + tail;
    for (const auto& w : ev.knn.warnings) std::cerr << "warning: " << w << "\n";
  }
  if (a.ami) {
    for (std::size_t l = 0; l < ev.ami.size(); ++l) {
      csv += "ami," + std::to_string(l + 1) + "," + format_double(ev.ami[l]) + tail;
      csv += "nmi," + std::to_string(l + 1) + "," + format_double(ev.nmi[l]) + tail;
    }
    for (std::size_t t = 0; t < ev.ami_matrix.size(); ++t) {
      for (std::size_t l = 0; l < ev.ami_matrix[t].size(); ++l) {
        csv += "proto_label_ami," + std::to_string(t + 1) + ":" + std::to_string(l + 1) + "," +
               format_double(ev.ami_matrix[t][l]) + tail;
      }
    }
  }
  if (a.probe) {
    const DataSplit split = make_split(ds.size(), cfg.test_fraction, cfg.seed);
    const auto pr = linear_probe_split(embed_samples(ckpt.online, ds, split.train), ds.labels_at(0, split.train),
                                       embed_samples(ckpt.online, ds, split.test), ds.labels_at(0, split.test),
                                       cfg.eval_config());
    csv += "probe,1," + format_double(pr.accuracy) + tail;
  }
  write_file_atomic(a.out, csv);
  out << csv;
  return kExitOk;
}

int run_inspect(const TreeArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset ds = load_matching_dataset(a.data, ckpt);
  const std::string dump = dump_tree(tree_for_checkpoint(ckpt, ds, a.levels, a.threads));
  if (a.out.empty()) {
    out << dump;
  } else {
    write_file_atomic(a.out, dump);
  }
  return kExitOk;
}

int run_export(const ExportArgs& a, std::ostream& out) {
  const fs::path run(a.run);
  const fs::path ckpt_path = a.checkpoint.empty() ? run / "final.ckpt" : fs::path(a.checkpoint);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset ds = load_matching_dataset(a.data, ckpt);
  const std::string metrics = read_file(run / "metrics.csv");
  const std::string tree = dump_tree(tree_for_checkpoint(ckpt, ds, {}, a.threads));
  const fs::path dest(a.out);
  fs::create_directories(dest);
  write_file_atomic(dest / "metrics.csv", metrics);
  write_file_atomic(dest / "tree.txt", tree);
  write_file_atomic(dest / "config.txt", ckpt.config_text);
  write_file_atomic(dest / "dataset_meta.txt", ds.meta.to_kv());
  out << "exported to " << dest.string() << "\n";
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical contrastive selective coding on synthetic hierarchical data", "hcsc"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  std::string config_path;  // already expanded into args

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Sample a hierarchical Gaussian mixture dataset");
  common_setup(g, config_path);
  g->add_option("--depth", gen.spec.depth, "Tree depth (label levels)");
  g->add_option("--branching", gen.spec.branching, "Children per node, root to leaf")->delimiter(',');
  g->add_option("--per-leaf", gen.spec.samples_per_leaf, "Samples per leaf");
  g->add_option("--dim", gen.spec.dim, "Feature dimension");
  g->add_option("--radius", gen.spec.root_radius, "Norm of the root centers");
  g->add_option("--offset-scales", gen.spec.offset_scales, "Per-coordinate std of child offsets, one per tree depth below the roots")
      ->delimiter(',');
  g->add_option("--leaf-noise", gen.spec.leaf_noise, "Per-coordinate std of samples around their leaf");
  g->add_option("--seed", gen.spec.seed, "Random seed");
  g->add_option("--out", gen.out, "Output dataset file")->required();

  TrainArgs tr;
  auto& c = tr.cfg;
  c.threads = 0;
  auto* t = app.add_subcommand("train", "Train the encoder");
  common_setup(t, config_path);
  t->add_option("--data", tr.data, "Dataset file")->required();
  t->add_option("--out", tr.out, "Run directory (checkpoints, metrics.csv)")->required();
  t->add_option("--resume", tr.resume, "Continue from this checkpoint");
  t->add_option("--epochs", c.epochs, "Training epochs");
  t->add_option("--warmup", c.warmup_epochs, "Warmup epochs (instance loss only)");
  t->add_option("--warmup-mode", tr.warmup_mode, "icsc or plain_infonce")
      ->check(CLI::IsMember({"icsc", "plain_infonce"}));
  t->add_option("--batch", c.batch_size, "Batch size");
  t->add_option("--lr", c.lr_init, "Initial learning rate (cosine annealed)");
  t->add_option("--momentum", c.sgd_momentum, "SGD momentum");
  t->add_option("--weight-decay", c.weight_decay, "Weight decay");
  t->add_option("--queue", c.queue_capacity, "Negative queue capacity");
  t->add_option("--ema", c.ema, "Momentum encoder coefficient");
  t->add_option("--levels", c.level_sizes, "Prototypes per level, finest first")->delimiter(',');
  t->add_option("--min-cluster-size", c.min_cluster_size, "Clusters with fewer members are discarded");
  t->add_option("--epsilon", c.epsilon, "Concentration smoothing");
  t->add_option("--tau", c.loss.tau, "Base temperature");
  t->add_option("--tau-floor", c.tau_floor, "Lower bound for prototype temperatures");
  t->add_option("--kmeans-iters", c.kmeans_iters, "Lloyd iterations per level");
  t->add_option("--kmeans-restarts", c.kmeans_restarts, "k-means seedings per level (lowest inertia kept)");
  t->add_option("--hp", c.hierarchical_prototypes, "Hierarchical prototypes (off: one level)");
  t->add_option("--il", c.loss.instance_loss, "Instance-wise loss");
  t->add_option("--pl", c.loss.proto_loss, "Prototypical loss");
  t->add_option("--is", c.loss.instance_selection, "Instance negative selection");
  t->add_option("--ps", c.loss.proto_selection, "Prototype negative selection");
  t->add_option("--hidden", c.hidden, "Hidden layer widths")->delimiter(',');
  t->add_option("--embed-dim", c.embed_dim, "Embedding dimension");
  t->add_option("--activation", tr.activation, "tanh or relu")->check(CLI::IsMember({"tanh", "relu"}));
  t->add_option("--aug-noise", c.aug_noise, "Augmentation Gaussian noise std");
  t->add_option("--aug-drop", c.aug_drop, "Augmentation coordinate drop probability");
  t->add_option("--aug-scale-lo", c.aug_scale_lo, "Augmentation scale lower bound");
  t->add_option("--aug-scale-hi", c.aug_scale_hi, "Augmentation scale upper bound");
  t->add_option("--seed", c.seed, "Seed for every stochastic component");
  t->add_option("--test-fraction", c.test_fraction, "Held-out fraction for KNN evaluation");
  t->add_option("--checkpoint-every", c.checkpoint_every, "Checkpoint cadence in epochs (0: init and final only)");
  t->add_option("--threads", c.threads, "Worker threads (0: HCSC_THREADS or all cores)");
  t->add_option("--knn-temperature", c.knn_temperature, "KNN vote temperature");
  t->add_option("--knn-k", c.knn_k_grid, "KNN neighbour counts")->delimiter(',');
  t->add_option("--diagnostic-rate", c.diagnostic_rate, "Fraction of queries logged to selection.csv");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint's frozen embeddings");
  common_setup(e, config_path);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset file")->required();
  e->add_option("--out", ev.out, "Output CSV");
  e->add_flag("--knn", ev.knn, "KNN accuracy (all metrics when no metric flag is given)");
  e->add_flag("--ami", ev.ami, "AMI/NMI of a fresh hierarchy vs labels");
  e->add_flag("--probe", ev.probe, "Linear probe accuracy");
  e->add_option("--levels", ev.levels, "Prototypes per level (default: the checkpoint's)")->delimiter(',');
  e->add_option("--threads", ev.threads, "Worker threads (0: HCSC_THREADS or all cores)");

  TreeArgs ins;
  auto* i = app.add_subcommand("inspect-tree", "Print the prototype tree for a checkpoint");
  common_setup(i, config_path);
  i->add_option("--checkpoint", ins.checkpoint, "Checkpoint file")->required();
  i->add_option("--data", ins.data, "Dataset file")->required();
  i->add_option("--out", ins.out, "Write the dump here instead of stdout");
  i->add_option("--levels", ins.levels, "Prototypes per level (default: the checkpoint's)")->delimiter(',');
  i->add_option("--threads", ins.threads, "Worker threads (0: HCSC_THREADS or all cores)");

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "Bundle metrics, tree dump and config of a run");
  common_setup(x, config_path);
  x->add_option("--run", ex.run, "Run directory")->required();
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint (default: <run>/final.ckpt)");
  x->add_option("--data", ex.data, "Dataset file")->required();
  x->add_option("--out", ex.out, "Destination directory")->required();
  x->add_option("--threads", ex.threads, "Worker threads (0: HCSC_THREADS or all cores)");

  std::vector<char*> argv;
  std::vector<std::string> storage;
  try {
    storage = expand_config(args.empty() ? std::vector<std::string>{"hcsc"} : args);
  } catch (const ConfigError& ce) {
    err << "error: " << ce.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex_) {
    err << "error: " << ex_.what() << "\n";
    return kExitRuntime;
  }
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& pe) {
    err << "error: " << pe.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (g->parsed()) return run_generate(gen, out);
    if (t->parsed()) return run_train(tr, out);
    if (e->parsed()) return run_eval(ev, out);
    if (i->parsed()) return run_inspect(ins, out);
    if (x->parsed()) return run_export(ex, out);
  } catch (const ConfigError& ce) {
    err << "error: " << ce.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex_) {
    err << "error: " << ex_.what() << "\n";
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace hcsc::cli
