#pragma once

#include <map>

#include "gp/aggregator.hpp"
#include "gp/graph_ir.hpp"
#include "gp/tensor.hpp"

namespace gp {

// Per-layer weight generators (the PruningNet). Every conv node gets one
// generator: free-ratio nodes, ratio-sharing followers and depthwise convs all
// need weights at forward time. Output length equals the unpruned layer's
// parameter count; the pruned shape is a prefix crop.
template <typename S>
struct Hypernet {
  struct Generator {
    int node = -1;
    int out_len = 0;
    Tensor<S> w;        // 64 x out_len (affine) or 64 x hidden
    Tensor<S> b;
    Tensor<S> w2;       // hidden x out_len, only when hidden > 0
    Tensor<S> b2;
  };
  std::vector<Generator> generators;  // one per conv node, in node-index order
  int hidden = 0;                     // 0 = single affine map per node

  void build(const ModelGraph& g, Rng& rng, int hidden_width = 0) {
    hidden = hidden_width;
    generators.clear();
    const S bound = S(1.0 / std::sqrt(double(kAggregatorWidth)));
    for (int i = 0; i < g.node_count(); ++i) {
      const NodeSpec& n = g.nodes[size_t(i)];
      if (!is_conv(n.op_type)) continue;
      Generator gen;
      gen.node = i;
      int kk = n.kernel * n.kernel;
      gen.out_len = n.op_type == OpType::kNormalConv
                        ? n.base_out_channels * n.base_in_channels * kk
                        : n.base_out_channels * kk;
      if (hidden > 0) {
        gen.w = Tensor<S>(Shape{kAggregatorWidth, hidden}, S(0), true);
        gen.b = Tensor<S>(Shape{hidden}, S(0), true);
        gen.w2 = Tensor<S>(Shape{hidden, gen.out_len}, S(0), true);
        gen.b2 = Tensor<S>(Shape{gen.out_len}, S(0), true);
        uniform_init(gen.w, -bound, bound, rng);
        uniform_init(gen.w2, -S(1.0 / std::sqrt(double(hidden))), S(1.0 / std::sqrt(double(hidden))), rng);
      } else {
        gen.w = Tensor<S>(Shape{kAggregatorWidth, gen.out_len}, S(0), true);
        gen.b = Tensor<S>(Shape{gen.out_len}, S(0), true);
        uniform_init(gen.w, -bound, bound, rng);
      }
      generators.push_back(std::move(gen));
    }
  }

  const Generator& generator_for(int node) const {
    for (const auto& g : generators)
      if (g.node == node) return g;
    throw std::runtime_error("hypernet: no generator for node " + std::to_string(node));
  }

  std::vector<Tensor<S>> params() {
    std::vector<Tensor<S>> out;
    for (auto& g : generators) {
      out.push_back(g.w);
      out.push_back(g.b);
      if (hidden > 0) {
        out.push_back(g.w2);
        out.push_back(g.b2);
      }
    }
    return out;
  }
};

// Full vector from the generator, reshaped to the unpruned 4-D weight, then
// prefix-cropped to the pruned channel counts. Differentiable through n_i and
// the generator parameters.
template <typename S>
Tensor<S> generate_layer_weights(const Hypernet<S>& hyper,
                                 const typename Hypernet<S>::Generator& gen,
                                 const Tensor<S>& n_i, const NodeSpec& node, double own_ratio,
                                 double producer_ratio) {
  if (!(own_ratio > 0.0) || own_ratio > 1.0 || !(producer_ratio > 0.0) || producer_ratio > 1.0)
    throw std::invalid_argument("generate_layer_weights: ratios must be in (0,1]");
  Tensor<S> full = linear(n_i, gen.w, gen.b);
  if (hyper.hidden > 0) full = linear(relu(full), gen.w2, gen.b2);
  int k = node.kernel;
  if (node.op_type == OpType::kNormalConv) {
    Tensor<S> w4 = reshape(full, Shape{node.base_out_channels, node.base_in_channels, k, k});
    return crop4d(w4, channel_count(node.base_out_channels, own_ratio),
                  channel_count(node.base_in_channels, producer_ratio));
  }
  // Depthwise: (C, 1, K, K); only the leading channel axis is cropped and the
  // ratio is shared with the producer.
  Tensor<S> w4 = reshape(full, Shape{node.base_out_channels, 1, k, k});
  return crop4d(w4, channel_count(node.base_out_channels, own_ratio), 1);
}

// One weight tensor per conv node, shape-consistent across edges.
template <typename S>
std::map<int, Tensor<S>> generate_all(const Hypernet<S>& hyper, const ModelGraph& g,
                                      const Tensor<S>& embeddings, const RatioAssignment& ratios) {
  if (embeddings.dim(0) != g.node_count())
    throw std::invalid_argument("generate_all: embedding row count " +
                                std::to_string(embeddings.dim(0)) + " != node count " +
                                std::to_string(g.node_count()));
  std::map<int, Tensor<S>> out;
  for (const auto& gen : hyper.generators) {
    int i = gen.node;
    const NodeSpec& node = g.nodes[size_t(i)];
    int p = g.preds[size_t(i)].empty() ? -1 : g.preds[size_t(i)][0];
    double producer_ratio = p < 0 ? 1.0 : ratios[size_t(p)];
    Tensor<S> n_i = slice_rows(embeddings, i, 1);
    Tensor<S> w = generate_layer_weights(hyper, gen, n_i, node, ratios[size_t(i)], producer_ratio);
    if (p >= 0) {
      int expect = scaled_out_channels(g, ratios, p);
      int got = node.op_type == OpType::kNormalConv ? w.dim(1) : w.dim(0);
      if (got != expect)
        throw std::runtime_error("generate_all: node " + std::to_string(i) + " consumes " +
                                 std::to_string(got) + " channels but producer " + std::to_string(p) +
                                 " emits " + std::to_string(expect) + " (ratio-sharing bug)");
    }
    out.emplace(i, std::move(w));
  }
  return out;
}

}  // namespace gp
