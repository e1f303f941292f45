#include "gp/correlation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gp {

namespace {

// Per-channel spatial mean and population standard deviation.
void channel_moments(const ActivationStack& f, int c, double& mean, double& sd) {
  const int hw = f.height * f.width;
  const double* ch = f.data.data() + size_t(c) * hw;
  mean = 0;
  for (int i = 0; i < hw; ++i) mean += ch[i];
  mean /= hw;
  double var = 0;
  for (int i = 0; i < hw; ++i) var += (ch[i] - mean) * (ch[i] - mean);
  sd = std::sqrt(var / hw);
}

}  // namespace

std::vector<double> pearson_matrix(const ActivationStack& f1, const ActivationStack& f2,
                                   CorrMode mode, std::vector<int>* skipped_rows,
                                   std::vector<int>* skipped_cols) {
  if (f1.height != f2.height || f1.width != f2.width)
    throw std::invalid_argument("pearson_matrix: spatial dims disagree (" +
                                std::to_string(f1.height) + "x" + std::to_string(f1.width) + " vs " +
                                std::to_string(f2.height) + "x" + std::to_string(f2.width) + ")");
  const int m = f1.channels, n = f2.channels, hw = f1.height * f1.width;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> mean1(size_t(m), 0.0), sd1(size_t(m), 0.0), mean2(size_t(n), 0.0), sd2(size_t(n), 0.0);
  for (int i = 0; i < m; ++i) channel_moments(f1, i, mean1[size_t(i)], sd1[size_t(i)]);
  for (int j = 0; j < n; ++j) channel_moments(f2, j, mean2[size_t(j)], sd2[size_t(j)]);
  if (skipped_rows)
    for (int i = 0; i < m; ++i)
      if (sd1[size_t(i)] == 0.0) skipped_rows->push_back(i);
  if (skipped_cols)
    for (int j = 0; j < n; ++j)
      if (sd2[size_t(j)] == 0.0) skipped_cols->push_back(j);
  std::vector<double> p(size_t(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* c1 = f1.data.data() + size_t(i) * hw;
    for (int j = 0; j < n; ++j) {
      const double* c2 = f2.data.data() + size_t(j) * hw;
      if (sd1[size_t(i)] == 0.0 || sd2[size_t(j)] == 0.0) {
        p[size_t(i) * n + j] = nan;  // constant channel: correlation undefined
        continue;
      }
      double acc = 0;
      if (mode == CorrMode::kPaper) {
        double denom = sd1[size_t(i)] * sd2[size_t(j)];
        for (int k = 0; k < hw; ++k) acc += std::fabs(c1[k] * c2[k] / denom);
      } else {
        for (int k = 0; k < hw; ++k) acc += (c1[k] - mean1[size_t(i)]) * (c2[k] - mean2[size_t(j)]);
        acc /= hw * sd1[size_t(i)] * sd2[size_t(j)];
      }
      p[size_t(i) * n + j] = acc;
    }
  }
  return p;
}

std::vector<CorrPair> high_corr_pairs(const std::vector<double>& p, int rows, int cols, double tau) {
  std::vector<CorrPair> out;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double v = p[size_t(i) * cols + j];
      if (std::isnan(v)) continue;
      if (std::fabs(v) > tau) out.push_back({i, j, v});
    }
  std::stable_sort(out.begin(), out.end(),
                   [](const CorrPair& a, const CorrPair& b) { return std::fabs(a.value) > std::fabs(b.value); });
  return out;
}

CorrelationReport correlation_report(const ActivationStack& f1, const ActivationStack& f2,
                                     CorrMode mode, double tau) {
  CorrelationReport rep;
  rep.mode = mode;
  rep.rows = f1.channels;
  rep.cols = f2.channels;
  rep.threshold = tau;
  rep.matrix = pearson_matrix(f1, f2, mode, &rep.skipped_rows, &rep.skipped_cols);
  rep.pairs = high_corr_pairs(rep.matrix, rep.rows, rep.cols, tau);
  return rep;
}

}  // namespace gp
