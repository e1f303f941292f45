#include "doctest.h"
#include "grad_check.hpp"
#include "gp/hypernet.hpp"

using namespace gp;
using gp::testing::finite_diff_check;
using gp::testing::random_tensor;

namespace {

std::string model_path(const char* name) { return std::string(GP_SOURCE_DIR "/models/") + name; }

}  // namespace

TEST_CASE("generator inventory and parameter count") {
  ModelGraph g = load_model_file(model_path("mobilenet_v2_reduced.mg"));
  Rng rng(1);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  int convs = 0;
  int64_t expect_params = 0;
  for (const NodeSpec& n : g.nodes) {
    if (!is_conv(n.op_type)) continue;
    ++convs;
    int kk = n.kernel * n.kernel;
    int64_t out_len = n.op_type == OpType::kNormalConv
                          ? int64_t(n.base_out_channels) * n.base_in_channels * kk
                          : int64_t(n.base_out_channels) * kk;
    expect_params += (kAggregatorWidth + 1) * out_len;  // 64 x L weight plus bias
  }
  CHECK(int(hyper.generators.size()) == convs);
  int64_t got = 0;
  for (auto& p : hyper.params()) got += p.numel();
  CHECK(got == expect_params);
  // Init bound +-1/sqrt(64).
  for (auto& gen : hyper.generators)
    for (double v : gen.w.data()) CHECK(std::fabs(v) <= 0.125);
}

TEST_CASE("shape contract over the full ratio grid") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  Rng rng(2);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  Tensor<double> emb = random_tensor(Shape{g.node_count(), kAggregatorWidth}, rng, 1.0, false);
  for (double r : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
    auto ratios = apply_ratio_sharing_prunable(g, std::vector<double>(g.prunable.size(), r));
    auto weights = generate_all(hyper, g, emb, ratios);
    for (const auto& [i, w] : weights) {
      const NodeSpec& n = g.nodes[size_t(i)];
      if (n.op_type == OpType::kNormalConv) {
        CHECK(w.shape() == Shape{scaled_out_channels(g, ratios, i), scaled_in_channels(g, ratios, i),
                                 n.kernel, n.kernel});
      } else {
        CHECK(w.shape() == Shape{scaled_out_channels(g, ratios, i), 1, n.kernel, n.kernel});
      }
    }
  }
}

TEST_CASE("pruned weights are a prefix of the unpruned weights") {
  ModelGraph g = load_model_file(model_path("resnet_tiny.mg"));
  Rng rng(3);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  Tensor<double> emb = random_tensor(Shape{g.node_count(), kAggregatorWidth}, rng, 1.0, false);
  auto full = generate_all(hyper, g, emb,
                           apply_ratio_sharing_prunable(g, std::vector<double>(g.prunable.size(), 1.0)));
  auto small = generate_all(hyper, g, emb,
                            apply_ratio_sharing_prunable(g, std::vector<double>(g.prunable.size(), 0.5)));
  for (const auto& [i, ws] : small) {
    const Tensor<double>& wf = full.at(i);
    int co = int(ws.dim(0)), ci = int(ws.dim(1)), k = int(ws.dim(2));
    int CI = int(wf.dim(1));
    for (int a = 0; a < co; ++a)
      for (int b = 0; b < ci; ++b)
        for (int p = 0; p < k * k; ++p)
          CHECK(ws.data()[(size_t(a) * ci + b) * k * k + p] ==
                wf.data()[(size_t(a) * CI + b) * k * k + p]);
  }
}

TEST_CASE("1x1 conv at full ratio keeps the full square weight") {
  ModelGraph g = parse_model_description(
      "0 normal_conv 3 64 1 3 8\n1 normal_conv 64 64 1 1 8\nedges:\n0 1\n");
  Rng rng(4);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  Tensor<double> emb = random_tensor(Shape{2, kAggregatorWidth}, rng, 1.0, false);
  auto weights = generate_all(hyper, g, emb, {1.0, 1.0});
  CHECK(weights.at(1).shape() == Shape{64, 64, 1, 1});
  auto half = generate_all(hyper, g, emb, apply_ratio_sharing(g, {0.5, 1.0}));
  CHECK(half.at(1).shape() == Shape{64, 32, 1, 1});
}

TEST_CASE("unshared ratios are rejected") {
  ModelGraph g = parse_model_description(
      "0 normal_conv 3 16 1 3 8\n1 depthwise_conv 16 16 1 3 8\nedges:\n0 1\n");
  Rng rng(5);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  Tensor<double> emb = random_tensor(Shape{2, kAggregatorWidth}, rng, 1.0, false);
  // Depthwise node must follow its producer; 0.5 vs 1.0 violates sharing.
  CHECK_THROWS_WITH_AS(generate_all(hyper, g, emb, RatioAssignment{0.5, 1.0}),
                       doctest::Contains("ratio-sharing"), std::runtime_error);
  CHECK_NOTHROW(generate_all(hyper, g, emb, apply_ratio_sharing(g, {0.5, 1.0})));
}

TEST_CASE("generated weights are embedding-dependent") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  Rng rng(6);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  auto ratios = apply_ratio_sharing_prunable(g, std::vector<double>(g.prunable.size(), 1.0));
  Tensor<double> e1 = random_tensor(Shape{g.node_count(), kAggregatorWidth}, rng, 1.0, false);
  Tensor<double> e2 = random_tensor(Shape{g.node_count(), kAggregatorWidth}, rng, 1.0, false);
  auto w1 = generate_all(hyper, g, e1, ratios);
  auto w2 = generate_all(hyper, g, e2, ratios);
  bool any_diff = false;
  for (const auto& [i, w] : w1)
    if (w.data() != w2.at(i).data()) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("gradients flow through generators and embeddings") {
  ModelGraph g = parse_model_description(
      "0 normal_conv 3 6 1 3 8\n1 depthwise_conv 6 6 1 3 8\n2 normal_conv 6 8 1 1 8\n"
      "edges:\n0 1\n1 2\n");
  Rng rng(7);
  Hypernet<double> hyper;
  hyper.build(g, rng);
  Tensor<double> emb = random_tensor(Shape{3, kAggregatorWidth}, rng, 1.0);
  auto ratios = apply_ratio_sharing(g, {0.5, 1.0, 0.7});
  auto f = [&]() {
    auto ws = generate_all(hyper, g, emb, ratios);
    Tensor<double> loss = mean(square(ws.at(0)));
    for (int i : {1, 2}) loss = add(loss, mean(square(ws.at(i))));
    return loss;
  };
  std::vector<Tensor<double>> params = hyper.params();
  params.push_back(emb);
  auto res = finite_diff_check(f, params, 1e-5, 15, &rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("two-layer generators work when hidden width is set") {
  ModelGraph g = parse_model_description("0 normal_conv 3 8 1 3 8\nedges:\n");
  Rng rng(8);
  Hypernet<double> hyper;
  hyper.build(g, rng, 16);
  CHECK(hyper.hidden == 16);
  Tensor<double> emb = random_tensor(Shape{1, kAggregatorWidth}, rng, 1.0);
  auto ws = generate_all(hyper, g, emb, {1.0});
  CHECK(ws.at(0).shape() == Shape{8, 3, 3, 3});
  auto f = [&]() { return mean(square(generate_all(hyper, g, emb, {1.0}).at(0))); };
  CHECK(finite_diff_check(f, hyper.params(), 1e-5, 10, &rng).max_rel_err < 1e-4);
}
