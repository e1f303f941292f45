#include "gp/graph_ir.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace gp {

namespace {

[[noreturn]] void parse_fail(int line, const std::string& msg) {
  throw ParseError("line " + std::to_string(line) + ": " + msg);
}

OpType op_type_from_name(const std::string& name, int line) {
  if (name == "normal_conv") return OpType::kNormalConv;
  if (name == "depthwise_conv") return OpType::kDepthwiseConv;
  if (name == "add") return OpType::kAdd;
  if (name == "concat") return OpType::kConcat;
  parse_fail(line, "unknown op type '" + name + "'");
}

const char* op_type_name(OpType t) {
  switch (t) {
    case OpType::kNormalConv: return "normal_conv";
    case OpType::kDepthwiseConv: return "depthwise_conv";
    case OpType::kAdd: return "add";
    case OpType::kConcat: return "concat";
  }
  return "?";
}

struct Dsu {
  std::vector<int> parent;
  explicit Dsu(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

void analyze_groups(ModelGraph& g) {
  const int n = g.node_count();
  Dsu dsu(n);
  for (int i = 0; i < n; ++i) {
    const NodeSpec& node = g.nodes[size_t(i)];
    if (node.op_type == OpType::kAdd || node.op_type == OpType::kConcat) {
      for (int p : g.preds[size_t(i)]) dsu.unite(i, p);
    } else if (node.op_type == OpType::kDepthwiseConv) {
      if (g.preds[size_t(i)].empty())
        throw ParseError("depthwise node " + std::to_string(i) + " has no producer to share its ratio with");
      dsu.unite(i, g.producer(i));
    }
  }
  std::map<int, int> root_to_group;
  g.group_leader.clear();
  for (int i = 0; i < n; ++i) {
    int root = dsu.find(i);
    auto [it, inserted] = root_to_group.emplace(root, static_cast<int>(g.group_leader.size()));
    if (inserted) g.group_leader.push_back(-1);
    int gid = it->second;
    g.nodes[size_t(i)].ratio_group = gid;
    // Leader: lowest-index normal conv in the group (nodes visited in index order).
    if (g.group_leader[size_t(gid)] < 0 && g.nodes[size_t(i)].op_type == OpType::kNormalConv)
      g.group_leader[size_t(gid)] = i;
  }
  for (size_t gid = 0; gid < g.group_leader.size(); ++gid) {
    if (g.group_leader[gid] < 0)
      throw ParseError("ratio group " + std::to_string(gid) +
                       " has no normal convolution to act as leader (malformed graph)");
  }
  g.prunable.clear();
  for (int i = 0; i < n; ++i)
    if (g.nodes[size_t(i)].op_type == OpType::kNormalConv &&
        g.group_leader[size_t(g.nodes[size_t(i)].ratio_group)] == i)
      g.prunable.push_back(i);
}

void validate_wiring(const ModelGraph& g) {
  const int n = g.node_count();
  for (int i = 0; i < n; ++i) {
    const NodeSpec& node = g.nodes[size_t(i)];
    const auto& preds = g.preds[size_t(i)];
    if (is_conv(node.op_type)) {
      if (preds.size() > 1)
        throw ParseError("node " + std::to_string(i) + ": convolution with " +
                         std::to_string(preds.size()) + " inputs (inconsistent channel wiring)");
      if (!preds.empty() && g.nodes[size_t(preds[0])].base_out_channels != node.base_in_channels)
        throw ParseError("node " + std::to_string(i) + ": in_channels " +
                         std::to_string(node.base_in_channels) + " but producer " +
                         std::to_string(preds[0]) + " emits " +
                         std::to_string(g.nodes[size_t(preds[0])].base_out_channels));
      if (node.op_type == OpType::kDepthwiseConv && node.base_in_channels != node.base_out_channels)
        throw ParseError("node " + std::to_string(i) + ": depthwise conv must preserve channel count");
    } else {
      if (preds.size() < 2)
        throw ParseError("node " + std::to_string(i) + ": add/concat needs at least two inputs");
      for (int p : preds)
        if (g.nodes[size_t(p)].base_out_channels != node.base_out_channels)
          throw ParseError("node " + std::to_string(i) + ": add input " + std::to_string(p) +
                           " emits " + std::to_string(g.nodes[size_t(p)].base_out_channels) +
                           " channels, expected " + std::to_string(node.base_out_channels));
      if (node.base_in_channels != node.base_out_channels)
        throw ParseError("node " + std::to_string(i) + ": add must have in_channels == out_channels");
    }
  }
  // Connectivity over the undirected edge set.
  if (n > 1) {
    std::vector<std::vector<int>> adj{size_t(n)};
    for (auto [a, b] : g.edges) {
      adj[size_t(a)].push_back(b);
      adj[size_t(b)].push_back(a);
    }
    std::vector<char> seen(size_t(n), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      for (int v : adj[size_t(u)])
        if (!seen[size_t(v)]) {
          seen[size_t(v)] = 1;
          ++count;
          stack.push_back(v);
        }
    }
    if (count != n) throw ParseError("graph is not connected");
  }
}

}  // namespace

int ModelGraph::producer(int node) const {
  const auto& p = preds[size_t(node)];
  if (p.empty()) return -1;
  if (p.size() > 1 && is_conv(nodes[size_t(node)].op_type))
    throw std::runtime_error("node " + std::to_string(node) + " has multiple producers");
  return p[0];
}

ModelGraph parse_model_description(const std::string& text) {
  ModelGraph g;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool in_edges = false;
  std::set<std::pair<int, int>> edge_set;
  std::vector<std::pair<int, int>> directed;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    if (first == "edges:") {
      in_edges = true;
      continue;
    }
    if (!in_edges) {
      int id = 0;
      try {
        id = std::stoi(first);
      } catch (const std::exception&) {
        parse_fail(lineno, "expected node id, got '" + first + "'");
      }
      if (id != g.node_count())
        parse_fail(lineno, "node id " + std::to_string(id) + " out of order (expected " +
                               std::to_string(g.node_count()) + ")");
      std::string type;
      NodeSpec node;
      if (!(ls >> type >> node.base_in_channels >> node.base_out_channels >> node.stride >>
            node.kernel >> node.spatial_in))
        parse_fail(lineno, "expected: id type in_ch out_ch stride kernel spatial_in");
      node.op_type = op_type_from_name(type, lineno);
      if (node.base_in_channels < 1 || node.base_out_channels < 1)
        parse_fail(lineno, "channel counts must be positive");
      if (is_conv(node.op_type)) {
        if (node.kernel < 1 || node.kernel % 2 == 0) parse_fail(lineno, "conv kernel must be odd and >= 1");
        if (node.stride < 1) parse_fail(lineno, "conv stride must be >= 1");
        if (node.spatial_in < 1) parse_fail(lineno, "conv node needs spatial_in >= 1");
      } else {
        if (node.stride != 0 || node.kernel != 1)
          parse_fail(lineno, "non-conv nodes must have stride 0 and kernel 1");
      }
      g.nodes.push_back(node);
    } else {
      int a = 0, b = 0;
      try {
        a = std::stoi(first);
      } catch (const std::exception&) {
        parse_fail(lineno, "expected edge endpoint, got '" + first + "'");
      }
      if (!(ls >> b)) parse_fail(lineno, "edge needs two endpoints");
      if (a < 0 || b < 0 || a >= g.node_count() || b >= g.node_count())
        parse_fail(lineno, "edge " + std::to_string(a) + "-" + std::to_string(b) +
                               " references a missing node");
      if (a == b) parse_fail(lineno, "self-edge on node " + std::to_string(a));
      auto key = std::minmax(a, b);
      if (!edge_set.insert({key.first, key.second}).second)
        parse_fail(lineno, "duplicate edge " + std::to_string(a) + "-" + std::to_string(b));
      directed.emplace_back(a, b);
    }
  }
  if (g.nodes.empty()) throw ParseError("empty model description");
  g.edges.assign(edge_set.begin(), edge_set.end());
  g.preds.assign(size_t(g.node_count()), {});
  for (auto [a, b] : directed) g.preds[size_t(b)].push_back(a);
  validate_wiring(g);
  analyze_groups(g);
  return g;
}

ModelGraph load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open model description '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_model_description(buf.str());
}

std::string emit_model_description(const ModelGraph& g) {
  std::ostringstream os;
  for (int i = 0; i < g.node_count(); ++i) {
    const NodeSpec& n = g.nodes[size_t(i)];
    os << i << ' ' << op_type_name(n.op_type) << ' ' << n.base_in_channels << ' '
       << n.base_out_channels << ' ' << n.stride << ' ' << n.kernel << ' ' << n.spatial_in << '\n';
  }
  os << "edges:\n";
  for (int i = 0; i < g.node_count(); ++i)
    for (int p : g.preds[size_t(i)]) os << p << ' ' << i << '\n';
  return os.str();
}

std::vector<double> build_adjacency(const ModelGraph& g) {
  const int n = g.node_count();
  std::vector<double> a(size_t(n) * n, 0.0);
  for (auto [i, j] : g.edges) {
    a[size_t(i) * n + j] = 1.0;
    a[size_t(j) * n + i] = 1.0;
  }
  return a;
}

std::vector<double> renormalize_adjacency(const std::vector<double>& a, int n) {
  if (static_cast<int64_t>(a.size()) != int64_t(n) * n)
    throw std::invalid_argument("renormalize_adjacency: matrix size does not match n");
  std::vector<double> deg_inv_sqrt(size_t(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double d = 1.0;  // self-loop
    for (int j = 0; j < n; ++j) d += a[size_t(i) * n + j];
    deg_inv_sqrt[size_t(i)] = 1.0 / std::sqrt(d);
  }
  std::vector<double> out(size_t(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double atilde = a[size_t(i) * n + j] + (i == j ? 1.0 : 0.0);
      out[size_t(i) * n + j] = deg_inv_sqrt[size_t(i)] * atilde * deg_inv_sqrt[size_t(j)];
    }
  return out;
}

int channel_count(int base, double ratio) {
  if (base < 1) throw std::invalid_argument("channel_count: base must be >= 1");
  if (!(ratio > 0.0) || ratio > 1.0)
    throw std::invalid_argument("channel_count: ratio must be in (0,1], got " + std::to_string(ratio));
  return std::max(1, static_cast<int>(std::lround(double(base) * ratio)));
}

RatioAssignment apply_ratio_sharing(const ModelGraph& g, const std::vector<double>& raw) {
  if (raw.size() != size_t(g.node_count()))
    throw std::invalid_argument("apply_ratio_sharing: expected " + std::to_string(g.node_count()) +
                                " raw values, got " + std::to_string(raw.size()));
  RatioAssignment out(size_t(g.node_count()));
  for (int i = 0; i < g.node_count(); ++i) {
    int leader = g.group_leader[size_t(g.nodes[size_t(i)].ratio_group)];
    double r = raw[size_t(leader)];
    if (!(r > 0.0) || r > 1.0)
      throw std::invalid_argument("apply_ratio_sharing: ratio for node " + std::to_string(leader) +
                                  " must be in (0,1], got " + std::to_string(r));
    out[size_t(i)] = r;
  }
  return out;
}

RatioAssignment apply_ratio_sharing_prunable(const ModelGraph& g, const std::vector<double>& raw_prunable) {
  if (raw_prunable.size() != g.prunable.size())
    throw std::invalid_argument("expected " + std::to_string(g.prunable.size()) +
                                " prunable ratios, got " + std::to_string(raw_prunable.size()));
  std::vector<double> raw(size_t(g.node_count()), 1.0);
  for (size_t k = 0; k < g.prunable.size(); ++k) raw[size_t(g.prunable[k])] = raw_prunable[k];
  return apply_ratio_sharing(g, raw);
}

int scaled_in_channels(const ModelGraph& g, const RatioAssignment& ratios, int node) {
  int p = g.preds[size_t(node)].empty() ? -1 : g.preds[size_t(node)][0];
  double producer_ratio = p < 0 ? 1.0 : ratios[size_t(p)];
  return channel_count(g.nodes[size_t(node)].base_in_channels, producer_ratio);
}

int scaled_out_channels(const ModelGraph& g, const RatioAssignment& ratios, int node) {
  return channel_count(g.nodes[size_t(node)].base_out_channels, ratios[size_t(node)]);
}

namespace {

double weight_size(const NodeSpec& n, int scaled_in, int scaled_out) {
  int kk = n.kernel * n.kernel;
  switch (n.op_type) {
    case OpType::kNormalConv: return double(scaled_out) * scaled_in * kk;
    case OpType::kDepthwiseConv: return double(scaled_out) * kk;
    default: return 0.0;
  }
}

}  // namespace

NodeFeatureMatrix node_features(const ModelGraph& g, const RatioAssignment& ratios) {
  if (ratios.size() != size_t(g.node_count()))
    throw std::invalid_argument("node_features: assignment size mismatch");
  const int l = g.node_count();
  NodeFeatureMatrix fm;
  fm.rows = l;
  fm.raw.resize(size_t(l) * NodeFeatureMatrix::kCols);
  // Normalization maxima over the unpruned graph.
  double max_ch = 1, max_w = 1, max_stride = 1, max_kernel = 1;
  for (const NodeSpec& n : g.nodes) {
    max_ch = std::max({max_ch, double(n.base_in_channels), double(n.base_out_channels)});
    max_w = std::max(max_w, weight_size(n, n.base_in_channels, n.base_out_channels));
    max_stride = std::max(max_stride, double(n.stride));
    max_kernel = std::max(max_kernel, double(n.kernel));
  }
  for (int i = 0; i < l; ++i) {
    const NodeSpec& n = g.nodes[size_t(i)];
    int cin = scaled_in_channels(g, ratios, i);
    int cout = scaled_out_channels(g, ratios, i);
    double* row = fm.raw.data() + size_t(i) * NodeFeatureMatrix::kCols;
    row[0] = op_type_code(n.op_type);
    row[1] = cin;
    row[2] = cout;
    row[3] = n.stride;
    row[4] = n.kernel;
    row[5] = weight_size(n, cin, cout);
    row[6] = ratios[size_t(i)];
  }
  fm.normalized = fm.raw;
  for (int i = 0; i < l; ++i) {
    double* row = fm.normalized.data() + size_t(i) * NodeFeatureMatrix::kCols;
    row[1] /= max_ch;
    row[2] /= max_ch;
    row[3] /= max_stride;
    row[4] /= max_kernel;
    row[5] /= max_w;
  }
  return fm;
}

int conv_out_spatial(const NodeSpec& n) {
  int pad = n.kernel / 2;
  return (n.spatial_in + 2 * pad - n.kernel) / n.stride + 1;
}

int64_t count_flops(const ModelGraph& g, const RatioAssignment& ratios) {
  int64_t total = 0;
  for (int i = 0; i < g.node_count(); ++i) {
    const NodeSpec& n = g.nodes[size_t(i)];
    if (!is_conv(n.op_type)) continue;
    if (n.spatial_in < 1)
      throw std::runtime_error("count_flops: node " + std::to_string(i) + " missing spatial metadata");
    int out_sp = conv_out_spatial(n);
    int64_t hw = int64_t(out_sp) * out_sp;
    int cout = scaled_out_channels(g, ratios, i);
    int kk = n.kernel * n.kernel;
    if (n.op_type == OpType::kNormalConv) {
      int cin = scaled_in_channels(g, ratios, i);
      total += int64_t(cout) * cin * kk * hw;
    } else {
      total += int64_t(cout) * kk * hw;
    }
  }
  return total;
}

int64_t count_params(const ModelGraph& g, const RatioAssignment& ratios) {
  int64_t total = 0;
  for (int i = 0; i < g.node_count(); ++i) {
    const NodeSpec& n = g.nodes[size_t(i)];
    if (!is_conv(n.op_type)) continue;
    int cout = scaled_out_channels(g, ratios, i);
    int kk = n.kernel * n.kernel;
    if (n.op_type == OpType::kNormalConv)
      total += int64_t(cout) * scaled_in_channels(g, ratios, i) * kk;
    else
      total += int64_t(cout) * kk;
  }
  return total;
}

void write_ratio_file(const std::string& path, const ModelGraph& g, const RatioAssignment& ratios) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write ratio file '" + path + "'");
  out.precision(17);
  for (int i = 0; i < g.node_count(); ++i) out << i << ' ' << ratios[size_t(i)] << '\n';
}

RatioAssignment read_ratio_file(const std::string& path, const ModelGraph& g) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open ratio file '" + path + "'");
  std::map<int, double> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    int id;
    double r;
    if (!(ls >> id)) continue;
    if (!(ls >> r)) throw std::runtime_error(path + ": line " + std::to_string(lineno) + ": missing ratio");
    entries[id] = r;
  }
  std::vector<double> raw(size_t(g.node_count()), 1.0);
  for (auto [id, r] : entries) {
    if (id < 0 || id >= g.node_count())
      throw std::runtime_error(path + ": node id " + std::to_string(id) + " not in graph");
    raw[size_t(id)] = r;
  }
  for (int p : g.prunable)
    if (!entries.count(p))
      throw std::runtime_error(path + ": missing ratio for prunable node " + std::to_string(p));
  return apply_ratio_sharing(g, raw);
}

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace gp
