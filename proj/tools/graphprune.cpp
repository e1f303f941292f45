// graphprune: command-line front end for the compression pipeline.
//
// Subcommands: transform | train | search | flops | report | analyze-corr | retrain
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "gp/checkpoint.hpp"
#include "gp/correlation.hpp"
#include "gp/ddpg.hpp"
#include "gp/graph_ir.hpp"
#include "gp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gp;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key-value config file; '#' starts a comment.
using Config = std::map<std::string, std::string>;

const std::set<std::string> kKnownKeys = {
    "model",        "dataset",       "synth",           "classes",
    "epochs",       "batch_size",    "init_lr",         "momentum",
    "weight_decay", "lr_schedule",   "ratio_grid",      "augment_crop",
    "augment_flip", "seed",          "episodes",        "warmup_episodes",
    "noise_init",   "noise_decay",   "discount",        "budget",
    "budget_fraction", "rl_batch",   "tau",             "replay_capacity",
    "updates_per_episode", "actor_lr", "critic_lr",     "reward_window",
};

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file '" + path + "'");
  Config cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    std::string value;
    std::getline(ls, value);
    size_t a = value.find_first_not_of(" \t");
    size_t b = value.find_last_not_of(" \t");
    if (a == std::string::npos)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": key '" + key +
                        "' has no value");
    value = value.substr(a, b - a + 1);
    if (!kKnownKeys.count(key))
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    cfg[key] = value;
  }
  return cfg;
}

std::string get(const Config& c, const std::string& key, const std::string& fallback) {
  auto it = c.find(key);
  return it == c.end() ? fallback : it->second;
}

std::string require(const Config& c, const std::string& key) {
  auto it = c.find(key);
  if (it == c.end()) throw ConfigError("config: missing required key '" + key + "'");
  return it->second;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': '" + v + "' is not a number");
  }
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': '" + v + "' is not an integer");
  }
}

std::vector<double> to_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::istringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(to_double(key, tok));
  return out;
}

TrainConfig train_config(const Config& c, std::optional<uint64_t> seed_override) {
  TrainConfig t;
  t.epochs = int(to_int("epochs", get(c, "epochs", "5")));
  t.batch_size = int(to_int("batch_size", get(c, "batch_size", "32")));
  t.init_lr = to_double("init_lr", get(c, "init_lr", "0.05"));
  t.momentum = to_double("momentum", get(c, "momentum", "0.9"));
  t.weight_decay = to_double("weight_decay", get(c, "weight_decay", "4e-5"));
  t.lr_schedule = get(c, "lr_schedule", "cosine");
  if (t.lr_schedule != "cosine" && t.lr_schedule != "step")
    throw ConfigError("config: lr_schedule must be 'cosine' or 'step'");
  if (c.count("ratio_grid")) t.ratio_grid = to_double_list("ratio_grid", c.at("ratio_grid"));
  t.augment_crop = to_int("augment_crop", get(c, "augment_crop", "1")) != 0;
  t.augment_flip = to_int("augment_flip", get(c, "augment_flip", "1")) != 0;
  t.seed = seed_override ? *seed_override : uint64_t(to_int("seed", get(c, "seed", "1")));
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

SearchConfig search_config(const Config& c, std::optional<uint64_t> seed_override) {
  SearchConfig s;
  s.episodes = int(to_int("episodes", get(c, "episodes", "300")));
  s.warmup_episodes = int(to_int("warmup_episodes", get(c, "warmup_episodes", "100")));
  s.noise_init = to_double("noise_init", get(c, "noise_init", "0.5"));
  s.noise_decay = to_double("noise_decay", get(c, "noise_decay", "0.99"));
  s.discount = to_double("discount", get(c, "discount", "0.5"));
  s.batch_size = int(to_int("rl_batch", get(c, "rl_batch", "64")));
  s.tau = to_double("tau", get(c, "tau", "0.01"));
  s.replay_capacity = size_t(to_int("replay_capacity", get(c, "replay_capacity", "2000")));
  s.updates_per_episode = int(to_int("updates_per_episode", get(c, "updates_per_episode", "10")));
  s.actor_lr = to_double("actor_lr", get(c, "actor_lr", "1e-3"));
  s.critic_lr = to_double("critic_lr", get(c, "critic_lr", "1e-3"));
  s.reward_window = int(to_int("reward_window", get(c, "reward_window", "64")));
  s.seed = seed_override ? *seed_override : uint64_t(to_int("seed", get(c, "seed", "1")));
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

ModelGraph load_model(const Config& c) {
  std::string path = require(c, "model");
  try {
    return load_model_file(path);
  } catch (const ParseError& e) {
    throw DataError(std::string(e.what()));
  }
}

// `synth classes,n,hw,seed` takes priority over `dataset <dir>`.
Dataset load_data(const Config& c) {
  if (c.count("synth")) {
    auto parts = to_double_list("synth", c.at("synth"));
    if (parts.size() != 4) throw ConfigError("config: synth expects 'classes,n,hw,seed'");
    return make_synthetic_dataset(int(parts[0]), int(parts[1]), int(parts[2]), uint64_t(parts[3]));
  }
  if (c.count("dataset")) {
    try {
      return load_dataset_dir(c.at("dataset"));
    } catch (const std::exception& e) {
      throw DataError(e.what());
    }
  }
  throw ConfigError("config: need either 'synth' or 'dataset'");
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.precision(17);
  return out;
}

RatioAssignment read_ratios(const std::string& path, const ModelGraph& g) {
  try {
    return read_ratio_file(path, g);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

int64_t resolve_budget(const Config& c, const ModelGraph& g) {
  if (c.count("budget")) return to_int("budget", c.at("budget"));
  if (c.count("budget_fraction")) {
    double f = to_double("budget_fraction", c.at("budget_fraction"));
    if (!(f > 0.0) || f > 1.0) throw ConfigError("config: budget_fraction must be in (0,1]");
    RatioAssignment full(size_t(g.node_count()), 1.0);
    return int64_t(double(count_flops(g, full)) * f);
  }
  return 0;
}

const char* type_name(OpType t) {
  switch (t) {
    case OpType::kNormalConv: return "normal_conv";
    case OpType::kDepthwiseConv: return "depthwise_conv";
    case OpType::kAdd: return "add";
    case OpType::kConcat: return "concat";
  }
  return "?";
}

// Like Pipeline::train but with a fixed ratio assignment (retraining a chosen
// configuration from scratch).
Pipeline<float>::TrainResult train_fixed(Pipeline<float>& pipe, const Dataset& ds,
                                         const DatasetSplits& splits, const RatioAssignment& ratios) {
  const TrainConfig& cfg = pipe.config();
  Rng rng(cfg.seed);
  SgdOptimizer<float> opt(pipe.main_params(), float(cfg.momentum), float(cfg.weight_decay));
  SgdOptimizer<float> bn_opt(pipe.bn_params(), float(cfg.momentum), 0.0f);
  Pipeline<float>::TrainResult result;
  std::vector<int> order = splits.train;
  const int steps_per_epoch = int(order.size()) / cfg.batch_size;
  const int total_steps = std::max(1, cfg.epochs * steps_per_epoch);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (int b = 0; b < steps_per_epoch; ++b) {
      Tensor<float> x = batch_images<float>(ds, order, size_t(b) * cfg.batch_size,
                                            size_t(cfg.batch_size), cfg.augment_crop,
                                            cfg.augment_flip, &rng);
      auto labels = batch_labels(ds, order, size_t(b) * cfg.batch_size, size_t(cfg.batch_size));
      opt.zero_grad();
      bn_opt.zero_grad();
      Tensor<float> loss = pipe.train_step_loss(x, labels, ratios);
      float lr = pipe.learning_rate(step, total_steps);
      opt.step(lr);
      bn_opt.step(lr);
      loss_sum += double(loss.item());
      ++step;
    }
    result.epoch_loss.push_back(loss_sum / std::max(1, steps_per_epoch));
  }
  result.steps = step;
  return result;
}

// ---- subcommand bodies ----

int cmd_transform(const Config& c, const fs::path& out_dir) {
  ModelGraph g = load_model(c);
  std::cout << g.node_count() << " nodes, " << g.edge_count() << " edges\n";
  std::cout << g.prunable.size() << " prunable layers\n";
  auto a_hat = renormalize_adjacency(build_adjacency(g), g.node_count());
  auto out = open_out(out_dir / "a_hat.csv");
  out << "i,j,value\n";
  const int n = g.node_count();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out << i << ',' << j << ',' << a_hat[size_t(i) * n + j] << '\n';
  std::cout << "wrote " << (out_dir / "a_hat.csv").string() << '\n';
  return 0;
}

int cmd_train(const Config& c, const fs::path& out_dir, std::optional<uint64_t> seed,
              const std::string& resume) {
  ModelGraph g = load_model(c);
  Dataset ds = load_data(c);
  auto splits = split_dataset(ds);
  TrainConfig tc = train_config(c, seed);
  Pipeline<float> pipe(g, tc, ds.classes);
  uint64_t hash = fnv1a64(emit_model_description(g));
  uint32_t base_epochs = 0;
  if (!resume.empty()) {
    CheckpointMeta prev = load_checkpoint(resume, pipe, hash);
    base_epochs = prev.epochs_completed;
  }
  auto result = pipe.train(ds, splits);
  auto curve = open_out(out_dir / "loss_curve.csv");
  curve << "epoch,loss\n";
  for (size_t e = 0; e < result.epoch_loss.size(); ++e)
    curve << (base_epochs + e + 1) << ',' << result.epoch_loss[e] << '\n';
  CheckpointMeta meta;
  meta.model_hash = hash;
  meta.seed = tc.seed;
  meta.epochs_completed = base_epochs + uint32_t(tc.epochs);
  save_checkpoint((out_dir / "checkpoint.gpck").string(), pipe, meta);
  std::cout << "trained " << tc.epochs << " epochs (" << result.steps << " steps), final loss "
            << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << '\n';
  std::cout << "wrote " << (out_dir / "checkpoint.gpck").string() << '\n';
  return 0;
}

int cmd_search(const Config& c, const fs::path& out_dir, std::optional<uint64_t> seed,
               const std::string& checkpoint) {
  if (checkpoint.empty()) throw ConfigError("search: --checkpoint is required");
  ModelGraph g = load_model(c);
  Dataset ds = load_data(c);
  auto splits = split_dataset(ds);
  TrainConfig tc = train_config(c, seed);
  Pipeline<float> pipe(g, tc, ds.classes);
  load_checkpoint(checkpoint, pipe, fnv1a64(emit_model_description(g)));
  SearchConfig sc = search_config(c, seed);
  sc.budget = resolve_budget(c, g);
  auto evaluator = [&](const RatioAssignment& r) {
    pipe.recalibrate_bn(ds, splits.recalibration, r);
    return pipe.evaluate(ds, splits.eval, r);
  };
  SearchEngine<float> engine(g, tc.ratio_grid, sc, pipeline_state_fn(pipe), evaluator);
  SearchResult result = engine.search();

  auto log = open_out(out_dir / "search_log.csv");
  log << "episode,reward,flops,noise";
  for (int p : g.prunable) log << ",r" << p;
  log << '\n';
  for (const auto& e : result.log) {
    log << e.episode << ',' << e.reward << ',' << e.flops << ',' << e.noise;
    for (int p : g.prunable) log << ',' << e.ratios[size_t(p)];
    log << '\n';
  }
  write_ratio_file((out_dir / "best_ratios.txt").string(), g, result.best_ratios);
  std::cout << "best reward " << result.best_reward << " at " << result.best_flops << " FLOPs";
  if (sc.budget > 0) std::cout << " (budget " << sc.budget << ")";
  std::cout << '\n';
  std::cout << "wrote " << (out_dir / "best_ratios.txt").string() << '\n';
  return 0;
}

int cmd_flops(const Config& c, const fs::path& out_dir, const std::string& ratio_path) {
  ModelGraph g = load_model(c);
  RatioAssignment ratios = ratio_path.empty() ? RatioAssignment(size_t(g.node_count()), 1.0)
                                              : read_ratios(ratio_path, g);
  auto out = open_out(out_dir / "flops.csv");
  out << "node,type,out_channels,flops,params\n";
  int64_t total_f = 0, total_p = 0;
  for (int i = 0; i < g.node_count(); ++i) {
    const NodeSpec& n = g.nodes[size_t(i)];
    int64_t f = 0, p = 0;
    // Per-node numbers computed directly (same rules as count_flops/count_params).
    if (is_conv(n.op_type)) {
      int out_sp = conv_out_spatial(n);
      int64_t hw = int64_t(out_sp) * out_sp;
      int cout = scaled_out_channels(g, ratios, i);
      int kk = n.kernel * n.kernel;
      if (n.op_type == OpType::kNormalConv) {
        int cin = scaled_in_channels(g, ratios, i);
        f = int64_t(cout) * cin * kk * hw;
        p = int64_t(cout) * cin * kk;
      } else {
        f = int64_t(cout) * kk * hw;
        p = int64_t(cout) * kk;
      }
    }
    total_f += f;
    total_p += p;
    out << i << ',' << type_name(n.op_type) << ',' << scaled_out_channels(g, ratios, i) << ',' << f
        << ',' << p << '\n';
  }
  out << "total,," << ',' << total_f << ',' << total_p << '\n';
  if (total_f != count_flops(g, ratios) || total_p != count_params(g, ratios))
    throw NumericError("flops: per-node accounting disagrees with the aggregate counters");
  std::cout << "FLOPs " << total_f << ", params " << total_p << '\n';
  return 0;
}

int cmd_report(const Config& c, const fs::path& out_dir, std::optional<uint64_t> seed,
               const std::string& checkpoint, const std::vector<std::string>& ratio_files,
               const std::string& search_log) {
  if (ratio_files.empty()) throw ConfigError("report: at least one ratio file is required");
  ModelGraph g = load_model(c);
  TrainConfig tc = train_config(c, seed);
  int classes = int(to_int("classes", get(c, "classes", "4")));
  Pipeline<float> pipe(g, tc, classes);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, pipe, fnv1a64(emit_model_description(g)));

  auto channels = open_out(out_dir / "channels.csv");
  channels << "file,node,type,out_channels\n";
  for (const auto& rf : ratio_files) {
    RatioAssignment ratios = read_ratios(rf, g);
    for (int i = 0; i < g.node_count(); ++i)
      channels << fs::path(rf).filename().string() << ',' << i << ','
               << type_name(g.nodes[size_t(i)].op_type) << ','
               << scaled_out_channels(g, ratios, i) << '\n';
  }

  // Node-distance matrix from the embeddings of the first ratio file.
  RatioAssignment first = read_ratios(ratio_files[0], g);
  Tensor<float> emb = pipe.node_embeddings(first).detach();
  std::vector<double> rows(emb.data().begin(), emb.data().end());
  auto dist = neighbor_distance_report(rows, g.node_count(), kAggregatorWidth);
  auto dout = open_out(out_dir / "distance.csv");
  dout << "i,j,distance\n";
  const int l = g.node_count();
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) dout << i << ',' << j << ',' << dist[size_t(i) * l + j] << '\n';

  if (!search_log.empty()) {
    std::ifstream in(search_log);
    if (!in) throw DataError("cannot open search log '" + search_log + "'");
    auto curve = open_out(out_dir / "reward_curve.csv");
    curve << "episode,reward,best_so_far\n";
    std::string line;
    std::getline(in, line);  // header
    double best = -1e300;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string ep, rew;
      if (!std::getline(ls, ep, ',') || !std::getline(ls, rew, ',')) continue;
      best = std::max(best, to_double("reward", rew));
      curve << ep << ',' << rew << ',' << best << '\n';
    }
  }
  std::cout << "wrote " << (out_dir / "channels.csv").string() << " and "
            << (out_dir / "distance.csv").string() << '\n';
  return 0;
}

int cmd_analyze_corr(const Config& c, const fs::path& out_dir, std::optional<uint64_t> seed,
                     const std::string& checkpoint, const std::string& ratio_path,
                     const std::string& layers, const std::string& mode_name, double tau) {
  ModelGraph g = load_model(c);
  Dataset ds = load_data(c);
  auto splits = split_dataset(ds);
  TrainConfig tc = train_config(c, seed);
  Pipeline<float> pipe(g, tc, ds.classes);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, pipe, fnv1a64(emit_model_description(g)));
  RatioAssignment ratios = ratio_path.empty() ? RatioAssignment(size_t(g.node_count()), 1.0)
                                              : read_ratios(ratio_path, g);
  CorrMode mode;
  if (mode_name == "paper") mode = CorrMode::kPaper;
  else if (mode_name == "standard") mode = CorrMode::kStandard;
  else throw ConfigError("analyze-corr: mode must be 'paper' or 'standard'");
  auto parts = to_double_list("layers", layers);
  if (parts.size() != 2) throw ConfigError("analyze-corr: --layers expects 'a,b'");
  int la = int(parts[0]), lb = int(parts[1]);

  pipe.recalibrate_bn(ds, splits.recalibration, ratios);
  size_t probe_n = std::min(size_t(tc.batch_size), splits.eval.size());
  std::vector<int> probe(splits.eval.begin(), splits.eval.begin() + long(probe_n));
  std::vector<ActivationStack> stacks;
  try {
    stacks = capture_activations(pipe, ds, ratios, {la, lb}, probe);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  CorrelationReport rep = correlation_report(stacks[0], stacks[1], mode, tau);

  std::string stem = "corr_" + mode_name;
  auto csv = open_out(out_dir / (stem + ".csv"));
  csv << "i,j,value\n";
  for (int i = 0; i < rep.rows; ++i)
    for (int j = 0; j < rep.cols; ++j) {
      double v = rep.matrix[size_t(i) * rep.cols + j];
      csv << i << ',' << j << ',';
      if (std::isnan(v)) csv << "nan";
      else csv << v;
      csv << '\n';
    }
  json summary;
  summary["mode"] = mode_name;
  summary["layers"] = {la, lb};
  summary["threshold"] = tau;
  summary["rows"] = rep.rows;
  summary["cols"] = rep.cols;
  summary["skipped_rows"] = rep.skipped_rows;
  summary["skipped_cols"] = rep.skipped_cols;
  summary["num_pairs_above_threshold"] = rep.pairs.size();
  json pairs = json::array();
  for (const auto& p : rep.pairs) pairs.push_back({{"i", p.i}, {"j", p.j}, {"value", p.value}});
  summary["pairs"] = pairs;
  auto js = open_out(out_dir / (stem + ".json"));
  js << summary.dump(2) << '\n';
  std::cout << rep.pairs.size() << " pairs above threshold " << tau << '\n';
  std::cout << "wrote " << (out_dir / (stem + ".csv")).string() << '\n';
  return 0;
}

int cmd_retrain(const Config& c, const fs::path& out_dir, std::optional<uint64_t> seed,
                const std::string& ratio_path) {
  ModelGraph g = load_model(c);
  Dataset ds = load_data(c);
  auto splits = split_dataset(ds);
  TrainConfig tc = train_config(c, seed);
  RatioAssignment ratios = ratio_path.empty() ? RatioAssignment(size_t(g.node_count()), 1.0)
                                              : read_ratios(ratio_path, g);
  for (int i = 0; i < g.node_count(); ++i)
    if (is_conv(g.nodes[size_t(i)].op_type)) grid_index(tc.ratio_grid, ratios[size_t(i)]);
  Pipeline<float> pipe(g, tc, ds.classes);
  auto result = train_fixed(pipe, ds, splits, ratios);
  pipe.recalibrate_bn(ds, splits.recalibration, ratios);
  double acc = pipe.evaluate(ds, splits.eval, ratios);

  auto curve = open_out(out_dir / "loss_curve.csv");
  curve << "epoch,loss\n";
  for (size_t e = 0; e < result.epoch_loss.size(); ++e)
    curve << (e + 1) << ',' << result.epoch_loss[e] << '\n';
  CheckpointMeta meta;
  meta.model_hash = fnv1a64(emit_model_description(g));
  meta.seed = tc.seed;
  meta.epochs_completed = uint32_t(tc.epochs);
  save_checkpoint((out_dir / "checkpoint.gpck").string(), pipe, meta);
  auto accf = open_out(out_dir / "accuracy.txt");
  accf << acc << '\n';
  std::cout << "retrained accuracy " << acc << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graphprune: channel-pruning toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", checkpoint, ratio_path, resume, layers = "0,1";
  std::string mode = "standard", search_log;
  std::vector<std::string> ratio_files;
  std::optional<uint64_t> seed;
  int threads = 1;
  double tau = 0.8;

  app.add_option("--config", config_path, "flat key-value config file");
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "worker threads (1 = fully deterministic)");

  auto* transform = app.add_subcommand("transform", "parse a model description, dump its adjacency");
  auto* train = app.add_subcommand("train", "joint training (checkpoint + loss curve)");
  train->add_option("--resume", resume, "checkpoint to continue from");
  auto* search = app.add_subcommand("search", "actor-critic ratio search from a checkpoint");
  search->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  auto* flops = app.add_subcommand("flops", "FLOPs/params table for a ratio file");
  flops->add_option("--ratios", ratio_path, "ratio file (defaults to all 1.0)");
  auto* report = app.add_subcommand("report", "plot data: channel series, node distances");
  report->add_option("--checkpoint", checkpoint, "trained checkpoint (optional)");
  report->add_option("--ratios", ratio_files, "ratio files");
  report->add_option("--log", search_log, "search log CSV to summarize");
  auto* corr = app.add_subcommand("analyze-corr", "pairwise channel correlation of two layers");
  corr->add_option("--checkpoint", checkpoint, "trained checkpoint (optional)");
  corr->add_option("--ratios", ratio_path, "ratio file (defaults to all 1.0)");
  corr->add_option("--layers", layers, "conv layer pair 'a,b'");
  corr->add_option("--mode", mode, "paper | standard");
  corr->add_option("--tau", tau, "pair threshold");
  auto* retrain = app.add_subcommand("retrain", "train a fixed configuration from scratch");
  retrain->add_option("--ratios", ratio_path, "ratio file (defaults to all 1.0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (threads != 1)
      std::cerr << "note: requested " << threads << " threads; running single-threaded\n";
    Config cfg = config_path.empty() ? Config{} : load_config(config_path);
    fs::path out(out_dir);
    if (transform->parsed()) return cmd_transform(cfg, out);
    if (train->parsed()) return cmd_train(cfg, out, seed, resume);
    if (search->parsed()) return cmd_search(cfg, out, seed, checkpoint);
    if (flops->parsed()) return cmd_flops(cfg, out, ratio_path);
    if (report->parsed()) return cmd_report(cfg, out, seed, checkpoint, ratio_files, search_log);
    if (corr->parsed()) return cmd_analyze_corr(cfg, out, seed, checkpoint, ratio_path, layers, mode, tau);
    if (retrain->parsed()) return cmd_retrain(cfg, out, seed, ratio_path);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    bool numeric = msg.find("non-finite") != std::string::npos ||
                   msg.find("nan") != std::string::npos;
    std::cerr << (numeric ? "numeric failure: " : "data error: ") << msg << '\n';
    return numeric ? 4 : 3;
  }
}
