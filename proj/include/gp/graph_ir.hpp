#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <map>
#include <string>
#include <vector>

namespace gp {

enum class OpType { kNormalConv = 0, kDepthwiseConv = 1, kAdd = 2, kConcat = 3 };

// Feature code: concat follows the add rules.
inline int op_type_code(OpType t) { return t == OpType::kConcat ? 2 : static_cast<int>(t); }
inline bool is_conv(OpType t) { return t == OpType::kNormalConv || t == OpType::kDepthwiseConv; }

struct NodeSpec {
  OpType op_type = OpType::kNormalConv;
  int base_in_channels = 0;
  int base_out_channels = 0;
  int stride = 0;   // 0 for non-conv nodes
  int kernel = 1;   // 1 for non-conv nodes
  int spatial_in = 0;
  int ratio_group = -1;
};

// Topology graph of a CNN: one node per conv/add operation, an edge wherever
// two operations are directly connected. Immutable after parse.
struct ModelGraph {
  std::vector<NodeSpec> nodes;
  std::vector<std::pair<int, int>> edges;   // unordered pairs, first < second
  std::vector<std::vector<int>> preds;      // dataflow predecessors, from the description
  std::vector<int> prunable;                // nodes whose ratio is a free search variable
  std::vector<int> group_leader;            // per ratio_group id: leader node index

  int node_count() const { return static_cast<int>(nodes.size()); }
  int edge_count() const { return static_cast<int>(edges.size()); }
  // Unique dataflow producer, or -1 for the input node. Throws for multi-input conv nodes.
  int producer(int node) const;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using RatioAssignment = std::vector<double>;  // per node, in (0,1]

struct NodeFeatureMatrix {
  int rows = 0;
  static constexpr int kCols = 7;
  std::vector<double> raw;         // rows x 7: type, in, out, stride, kernel, weight_size, ratio
  std::vector<double> normalized;  // rows x 7, bounded inputs for the aggregator
  double at(int r, int c) const { return raw[size_t(r) * kCols + c]; }
  double norm_at(int r, int c) const { return normalized[size_t(r) * kCols + c]; }
};

ModelGraph parse_model_description(const std::string& text);
ModelGraph load_model_file(const std::string& path);
std::string emit_model_description(const ModelGraph& g);

// Dense symmetric 0/1 adjacency, zero diagonal, row-major l x l.
std::vector<double> build_adjacency(const ModelGraph& g);

// Symmetric renormalization D^{-1/2} (A + I) D^{-1/2}.
std::vector<double> renormalize_adjacency(const std::vector<double>& a, int n);

// Resolves sharing constraints: depthwise nodes follow their producer, nodes
// feeding a common add chain share one group, group leader's raw value wins.
// `raw` has one entry per node; entries of constrained nodes are ignored.
RatioAssignment apply_ratio_sharing(const ModelGraph& g, const std::vector<double>& raw);
// Same, with one raw value per prunable node (unlisted nodes default to 1.0).
RatioAssignment apply_ratio_sharing_prunable(const ModelGraph& g, const std::vector<double>& raw_prunable);

int channel_count(int base, double ratio);

// Pruned in/out channel counts of a node under an assignment.
int scaled_in_channels(const ModelGraph& g, const RatioAssignment& ratios, int node);
int scaled_out_channels(const ModelGraph& g, const RatioAssignment& ratios, int node);

NodeFeatureMatrix node_features(const ModelGraph& g, const RatioAssignment& ratios);

int64_t count_flops(const ModelGraph& g, const RatioAssignment& ratios);
int64_t count_params(const ModelGraph& g, const RatioAssignment& ratios);

// Output spatial extent of a conv node under same padding (K/2).
int conv_out_spatial(const NodeSpec& n);

// Ratio files: `node_id ratio` lines, comments with '#'.
void write_ratio_file(const std::string& path, const ModelGraph& g, const RatioAssignment& ratios);
RatioAssignment read_ratio_file(const std::string& path, const ModelGraph& g);

uint64_t fnv1a64(const std::string& bytes);

}  // namespace gp
