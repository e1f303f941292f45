#pragma once

#include <array>

#include "gp/graph_ir.hpp"
#include "gp/tensor.hpp"

namespace gp {

inline constexpr int kAggregatorWidth = 64;
inline constexpr int kAggregatorBlocks = 2;

// Residual GCN mapping l x 7 node features to l x 64 embeddings. The input
// projection lifts the 7 features to the block width so the residual is
// well-typed.
template <typename S>
struct Aggregator {
  Tensor<S> proj_w{Shape{NodeFeatureMatrix::kCols, kAggregatorWidth}, S(0), true};
  Tensor<S> proj_b{Shape{kAggregatorWidth}, S(0), true};
  struct Block {
    Tensor<S> w0{Shape{kAggregatorWidth, kAggregatorWidth}, S(0), true};
    Tensor<S> w1{Shape{kAggregatorWidth, kAggregatorWidth}, S(0), true};
  };
  std::array<Block, kAggregatorBlocks> blocks;
  // Ablation switch: skip the GCN blocks so embeddings carry no neighbor information.
  bool use_blocks = true;

  void init(Rng& rng) {
    glorot_init(proj_w, NodeFeatureMatrix::kCols, kAggregatorWidth, rng);
    for (auto& b : blocks) {
      glorot_init(b.w0, kAggregatorWidth, kAggregatorWidth, rng);
      glorot_init(b.w1, kAggregatorWidth, kAggregatorWidth, rng);
    }
  }

  std::vector<Tensor<S>> params() {
    std::vector<Tensor<S>> out{proj_w, proj_b};
    for (auto& b : blocks) {
      out.push_back(b.w0);
      out.push_back(b.w1);
    }
    return out;
  }
};

template <typename S>
Tensor<S> embed_features(const Aggregator<S>& agg, const Tensor<S>& features) {
  return linear(features, agg.proj_w, agg.proj_b);
}

// Z = X + ReLU(A_hat * ReLU(A_hat * X * W0) * W1)
template <typename S>
Tensor<S> gcn_block(const Tensor<S>& a_hat, const Tensor<S>& x, const Tensor<S>& w0,
                    const Tensor<S>& w1) {
  Tensor<S> h = relu(matmul(a_hat, matmul(x, w0)));
  return add(x, relu(matmul(a_hat, matmul(h, w1))));
}

template <typename S>
Tensor<S> aggregate(const Aggregator<S>& agg, const Tensor<S>& a_hat, const Tensor<S>& features) {
  Tensor<S> x = embed_features(agg, features);
  if (!agg.use_blocks) return x;
  for (const auto& b : agg.blocks) x = gcn_block(a_hat, x, b.w0, b.w1);
  return x;
}

template <typename S>
Tensor<S> dense_renormalized_adjacency(const ModelGraph& g) {
  auto a_hat = renormalize_adjacency(build_adjacency(g), g.node_count());
  std::vector<S> data(a_hat.begin(), a_hat.end());
  return Tensor<S>::from_data(Shape{g.node_count(), g.node_count()}, std::move(data));
}

template <typename S>
Tensor<S> feature_tensor(const NodeFeatureMatrix& fm) {
  std::vector<S> data(fm.normalized.begin(), fm.normalized.end());
  return Tensor<S>::from_data(Shape{fm.rows, NodeFeatureMatrix::kCols}, std::move(data));
}

// Pairwise mean-squared distance between embedding rows: symmetric, zero diagonal.
inline std::vector<double> neighbor_distance_report(const std::vector<double>& rows, int l, int width) {
  std::vector<double> out(size_t(l) * l, 0.0);
  for (int i = 0; i < l; ++i)
    for (int j = i + 1; j < l; ++j) {
      double acc = 0;
      for (int k = 0; k < width; ++k) {
        double d = rows[size_t(i) * width + k] - rows[size_t(j) * width + k];
        acc += d * d;
      }
      out[size_t(i) * l + j] = out[size_t(j) * l + i] = acc / width;
    }
  return out;
}

}  // namespace gp
