#pragma once

#include <string>
#include <vector>

#include "gp/trainer.hpp"

namespace gp {

// Feature maps of one layer, averaged over the probe batch. Channel-major
// storage: channel c occupies [c*h*w, (c+1)*h*w).
struct ActivationStack {
  int layer_id = -1;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;
  std::string source;

  double at(int s, int t, int c) const { return data[(size_t(c) * height + s) * width + t]; }
};

enum class CorrMode { kPaper, kStandard };

struct CorrPair {
  int i = 0;
  int j = 0;
  double value = 0;
};

struct CorrelationReport {
  CorrMode mode = CorrMode::kStandard;
  int rows = 0;
  int cols = 0;
  std::vector<double> matrix;  // NaN marks unavailable entries
  double threshold = 0.8;
  std::vector<CorrPair> pairs;  // |value| strictly above threshold, descending
  std::vector<int> skipped_rows;  // zero-variance channels of F1
  std::vector<int> skipped_cols;  // zero-variance channels of F2
};

// `paper` mode: sum over spatial positions of |F1*F2 / (sigma1*sigma2)|,
// nonnegative and unbounded. `standard` mode: textbook Pearson correlation of
// the flattened spatial vectors, in [-1, 1].
std::vector<double> pearson_matrix(const ActivationStack& f1, const ActivationStack& f2,
                                   CorrMode mode, std::vector<int>* skipped_rows = nullptr,
                                   std::vector<int>* skipped_cols = nullptr);

// Pairs with |value| strictly greater than tau, sorted descending by |value|.
std::vector<CorrPair> high_corr_pairs(const std::vector<double>& p, int rows, int cols,
                                      double tau = 0.8);

CorrelationReport correlation_report(const ActivationStack& f1, const ActivationStack& f2,
                                     CorrMode mode, double tau);

// Deterministic capture of post-conv (pre-BN) activations for the given
// layers, averaged over the probe batch.
template <typename S>
std::vector<ActivationStack> capture_activations(Pipeline<S>& pipeline, const Dataset& ds,
                                                 const RatioAssignment& ratios,
                                                 const std::vector<int>& layer_ids,
                                                 const std::vector<int>& probe_indices) {
  const ModelGraph& g = pipeline.graph();
  for (int id : layer_ids)
    if (id < 0 || id >= g.node_count() || !is_conv(g.nodes[size_t(id)].op_type))
      throw std::runtime_error("capture_activations: unknown conv layer id " + std::to_string(id));
  if (probe_indices.empty()) throw std::runtime_error("capture_activations: empty probe batch");
  auto weights = pipeline.detached_weights(ratios);
  Tensor<S> x = batch_images<S>(ds, probe_indices, 0, probe_indices.size(), false, false, nullptr);
  std::map<int, Tensor<S>> captured;
  pipeline.forward_network(x, ratios, weights, BnMode::kEval, &captured);
  std::vector<ActivationStack> out;
  const int n = int(probe_indices.size());
  for (int id : layer_ids) {
    const Tensor<S>& t = captured.at(id);
    ActivationStack st;
    st.layer_id = id;
    st.channels = t.dim(1);
    st.height = t.dim(2);
    st.width = t.dim(3);
    st.source = "probe_batch_" + std::to_string(n);
    st.data.assign(size_t(st.channels) * st.height * st.width, 0.0);
    const int hw = st.height * st.width;
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < st.channels; ++c)
        for (int i = 0; i < hw; ++i)
          st.data[size_t(c) * hw + i] += double(t.data()[((size_t(b) * st.channels + c) * hw) + i]) / n;
    out.push_back(std::move(st));
  }
  return out;
}

}  // namespace gp
