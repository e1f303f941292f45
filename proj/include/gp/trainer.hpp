#pragma once

#include <map>
#include <string>

#include "gp/aggregator.hpp"
#include "gp/dataset.hpp"
#include "gp/graph_ir.hpp"
#include "gp/hypernet.hpp"
#include "gp/nn.hpp"
#include "gp/tensor.hpp"

namespace gp {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double init_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  std::string lr_schedule = "cosine";  // cosine | step
  uint64_t seed = 1;
  std::vector<double> ratio_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  bool augment_crop = true;
  bool augment_flip = true;

  void validate() const {
    if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2 (batch statistics)");
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (ratio_grid.empty()) throw std::invalid_argument("config: empty ratio_grid");
    for (size_t i = 0; i < ratio_grid.size(); ++i) {
      if (!(ratio_grid[i] > 0.0) || ratio_grid[i] > 1.0)
        throw std::invalid_argument("config: ratio_grid values must be in (0,1]");
      if (i > 0 && ratio_grid[i] <= ratio_grid[i - 1])
        throw std::invalid_argument("config: ratio_grid must be strictly sorted");
    }
    if (std::abs(ratio_grid.back() - 1.0) > 1e-12)
      throw std::invalid_argument("config: ratio_grid must contain 1.0");
  }
};

inline int grid_index(const std::vector<double>& grid, double ratio) {
  for (size_t i = 0; i < grid.size(); ++i)
    if (std::abs(grid[i] - ratio) < 1e-9) return int(i);
  throw std::runtime_error("ratio " + std::to_string(ratio) + " is not on the configured grid");
}

inline double snap_to_grid(const std::vector<double>& grid, double v) {
  double best = grid[0];
  for (double gv : grid)
    if (std::abs(gv - v) < std::abs(best - v)) best = gv;
  return best;
}

// The whole trainable stack: aggregator + hypernet + classifier head + BN bank
// privatized per (conv node, grid-ratio bucket).
template <typename S>
class Pipeline {
 public:
  Pipeline(const ModelGraph& g, TrainConfig cfg, int num_classes)
      : graph_(g), cfg_(std::move(cfg)), classes_(num_classes) {
    cfg_.validate();
    sink_ = find_sink(g);
    Rng rng(cfg_.seed);
    aggregator.init(rng);
    hypernet.build(g, rng);
    int last_out = g.nodes[size_t(sink_)].base_out_channels;
    classifier_w = Tensor<S>(Shape{last_out, classes_}, S(0), true);
    classifier_b = Tensor<S>(Shape{classes_}, S(0), true);
    glorot_init(classifier_w, last_out, classes_, rng);
    for (int i = 0; i < g.node_count(); ++i) {
      if (!is_conv(g.nodes[size_t(i)].op_type)) continue;
      for (size_t b = 0; b < cfg_.ratio_grid.size(); ++b) {
        int ch = channel_count(g.nodes[size_t(i)].base_out_channels, cfg_.ratio_grid[b]);
        bn_bank.emplace(std::make_pair(i, int(b)), BatchNormState<S>(ch, int(b)));
      }
    }
  }

  const ModelGraph& graph() const { return graph_; }
  const TrainConfig& config() const { return cfg_; }
  int num_classes() const { return classes_; }
  int sink() const { return sink_; }

  std::vector<Tensor<S>> main_params() {
    auto out = aggregator.params();
    auto h = hypernet.params();
    out.insert(out.end(), h.begin(), h.end());
    out.push_back(classifier_w);
    out.push_back(classifier_b);
    return out;
  }

  std::vector<Tensor<S>> bn_params() {
    std::vector<Tensor<S>> out;
    for (auto& [key, st] : bn_bank) {
      out.push_back(st.scale);
      out.push_back(st.shift);
    }
    return out;
  }

  // One uniform grid draw per free ratio, sharing rules applied afterward.
  RatioAssignment sample_ratios(Rng& rng) const {
    std::uniform_int_distribution<size_t> pick(0, cfg_.ratio_grid.size() - 1);
    std::vector<double> raw(graph_.prunable.size());
    for (auto& r : raw) r = cfg_.ratio_grid[pick(rng)];
    return apply_ratio_sharing_prunable(graph_, raw);
  }

  Tensor<S> node_embeddings(const RatioAssignment& ratios) const {
    if (!a_hat_.defined()) a_hat_ = dense_renormalized_adjacency<S>(graph_);
    return aggregate(aggregator, a_hat_, feature_tensor<S>(node_features(graph_, ratios)));
  }

  // Forward of the generated pruned network. `weights` maps conv node -> weight.
  Tensor<S> forward_network(const Tensor<S>& images, const RatioAssignment& ratios,
                            const std::map<int, Tensor<S>>& weights, BnMode mode,
                            std::map<int, Tensor<S>>* capture = nullptr) {
    std::map<int, Tensor<S>> act;
    for (int i = 0; i < graph_.node_count(); ++i) {
      const NodeSpec& n = graph_.nodes[size_t(i)];
      const auto& preds = graph_.preds[size_t(i)];
      if (is_conv(n.op_type)) {
        const Tensor<S>& input = preds.empty() ? images : act.at(preds[0]);
        const Tensor<S>& w = weights.at(i);
        Tensor<S> y = n.op_type == OpType::kNormalConv
                          ? conv2d(input, w, n.stride, n.kernel / 2)
                          : depthwise_conv2d(input, w, n.stride, n.kernel / 2);
        if (capture) capture->emplace(i, y.detach());
        auto& bn = bn_state(i, ratios[size_t(i)]);
        act.emplace(i, relu(batchnorm(y, bn, mode)));
      } else {
        Tensor<S> s = act.at(preds[0]);
        for (size_t k = 1; k < preds.size(); ++k) s = add(s, act.at(preds[k]));
        act.emplace(i, s);
      }
    }
    Tensor<S> pooled = global_avg_pool(act.at(sink_));
    int c_last = scaled_out_channels(graph_, ratios, sink_);
    return linear(pooled, slice_rows(classifier_w, 0, c_last), classifier_b);
  }

  // Alg.-1 step: features -> aggregate -> generate -> forward -> loss -> backward.
  // The caller owns optimizer stepping; generated conv weights are transient.
  Tensor<S> train_step_loss(const Tensor<S>& images, const std::vector<int>& labels,
                            const RatioAssignment& ratios) {
    Tensor<S> emb = node_embeddings(ratios);
    auto weights = generate_all(hypernet, graph_, emb, ratios);
    Tensor<S> logits = forward_network(images, ratios, weights, BnMode::kTrain);
    Tensor<S> loss = softmax_cross_entropy(logits, labels);
    if (!std::isfinite(double(loss.item())))
      throw std::runtime_error("train_step: non-finite loss (" + std::to_string(double(loss.item())) +
                               ")");
    loss.backward();
    return loss;
  }

  struct TrainResult {
    std::vector<double> epoch_loss;
    int steps = 0;
  };

  TrainResult train(const Dataset& ds, const DatasetSplits& splits) {
    Rng rng(cfg_.seed);
    SgdOptimizer<S> opt(main_params(), S(cfg_.momentum), S(cfg_.weight_decay));
    SgdOptimizer<S> bn_opt(bn_params(), S(cfg_.momentum), S(0));
    TrainResult result;
    std::vector<int> order = splits.train;
    const int steps_per_epoch = int(order.size()) / cfg_.batch_size;
    const int total_steps = std::max(1, cfg_.epochs * steps_per_epoch);
    int step = 0;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0;
      for (int b = 0; b < steps_per_epoch; ++b) {
        RatioAssignment ratios = sample_ratios(rng);
        Tensor<S> x = batch_images<S>(ds, order, size_t(b) * cfg_.batch_size,
                                      size_t(cfg_.batch_size), cfg_.augment_crop, cfg_.augment_flip,
                                      &rng);
        auto labels = batch_labels(ds, order, size_t(b) * cfg_.batch_size, size_t(cfg_.batch_size));
        opt.zero_grad();
        bn_opt.zero_grad();
        Tensor<S> loss = train_step_loss(x, labels, ratios);
        S lr = learning_rate(step, total_steps);
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

  // Recomputes moving statistics for the width buckets of `ratios` by
  // streaming the recalibration split. Idempotent for fixed data.
  void recalibrate_bn(const Dataset& ds, const std::vector<int>& recal_indices,
                      const RatioAssignment& ratios) {
    if (recal_indices.empty()) throw std::runtime_error("recalibrate_bn: empty recalibration split");
    for (int i = 0; i < graph_.node_count(); ++i)
      if (is_conv(graph_.nodes[size_t(i)].op_type)) bn_state(i, ratios[size_t(i)]).begin_recalibration();
    auto weights = detached_weights(ratios);
    const size_t bs = size_t(cfg_.batch_size);
    for (size_t first = 0; first + 2 <= recal_indices.size(); first += bs) {
      size_t n = std::min(bs, recal_indices.size() - first);
      if (n < 2) break;
      Tensor<S> x = batch_images<S>(ds, recal_indices, first, n, false, false, nullptr);
      forward_network(x, ratios, weights, BnMode::kRecalibrate);
    }
    for (int i = 0; i < graph_.node_count(); ++i)
      if (is_conv(graph_.nodes[size_t(i)].op_type)) bn_state(i, ratios[size_t(i)]).finish_recalibration();
  }

  // Top-1 accuracy with moving statistics; requires prior recalibration.
  double evaluate(const Dataset& ds, const std::vector<int>& eval_indices,
                  const RatioAssignment& ratios) {
    if (eval_indices.empty()) throw std::runtime_error("evaluate: empty eval split");
    auto weights = detached_weights(ratios);
    int correct = 0;
    const size_t bs = size_t(cfg_.batch_size);
    for (size_t first = 0; first < eval_indices.size(); first += bs) {
      size_t n = std::min(bs, eval_indices.size() - first);
      Tensor<S> x = batch_images<S>(ds, eval_indices, first, n, false, false, nullptr);
      Tensor<S> logits = forward_network(x, ratios, weights, BnMode::kEval);
      auto labels = batch_labels(ds, eval_indices, first, n);
      for (size_t b = 0; b < n; ++b) {
        const S* row = logits.data().data() + b * size_t(classes_);
        int arg = 0;
        for (int c = 1; c < classes_; ++c)
          if (row[c] > row[arg]) arg = c;
        if (arg == labels[b]) ++correct;
      }
    }
    return double(correct) / double(eval_indices.size());
  }

  std::map<int, Tensor<S>> detached_weights(const RatioAssignment& ratios) {
    Tensor<S> emb = node_embeddings(ratios).detach();
    auto weights = generate_all(hypernet, graph_, emb, ratios);
    for (auto& [node, w] : weights) w = w.detach();
    return weights;
  }

  BatchNormState<S>& bn_state(int node, double ratio) {
    return bn_bank.at({node, grid_index(cfg_.ratio_grid, ratio)});
  }

  S learning_rate(int step, int total_steps) const {
    double t = double(step) / double(std::max(1, total_steps));
    if (cfg_.lr_schedule == "step") {
      double f = t < 0.5 ? 1.0 : (t < 0.75 ? 0.1 : 0.01);
      return S(cfg_.init_lr * f);
    }
    return S(cfg_.init_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
  }

  static int find_sink(const ModelGraph& g) {
    std::vector<int> out_deg(size_t(g.node_count()), 0);
    for (int i = 0; i < g.node_count(); ++i)
      for (int p : g.preds[size_t(i)]) out_deg[size_t(p)]++;
    int sink = -1;
    for (int i = 0; i < g.node_count(); ++i)
      if (out_deg[size_t(i)] == 0) {
        if (sink >= 0) throw std::runtime_error("graph has multiple output nodes");
        sink = i;
      }
    return sink;
  }

  Aggregator<S> aggregator;
  Hypernet<S> hypernet;
  Tensor<S> classifier_w;
  Tensor<S> classifier_b;
  std::map<std::pair<int, int>, BatchNormState<S>> bn_bank;

 private:
  const ModelGraph& graph_;
  TrainConfig cfg_;
  int classes_;
  int sink_;
  mutable Tensor<S> a_hat_;
};

}  // namespace gp
