#pragma once

// Expert-load and output-norm instruments.
//
// LoadHistogram counts, for every routing selection, the rank of the chosen
// expert when all E experts of that token are ordered by ||u_i(x)||, largest
// first. Ranking needs every expert evaluated, so record from a forward pass
// run with dense_diagnostics on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "momoe/moe.hpp"
#include "momoe/tensor.hpp"

namespace momoe {

struct LoadHistogram {
  std::vector<std::uint64_t> counts;  // index = norm rank, 0 = largest norm
  std::uint64_t tokens = 0;

  explicit LoadHistogram(std::size_t experts = 0) : counts(experts, 0) {}

  std::size_t experts() const { return counts.size(); }

  std::uint64_t selections() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

  // Fractions of all selections; zeros when nothing has been recorded.
  std::vector<double> proportions() const {
    std::vector<double> p(counts.size(), 0.0);
    const auto total = selections();
    if (total == 0) return p;
    for (std::size_t i = 0; i < counts.size(); ++i) p[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    return p;
  }

  void merge(const LoadHistogram& other) {
    if (other.counts.size() != counts.size()) throw DimensionError("load histogram: merging different expert counts");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    tokens += other.tokens;
  }
};

// Expert indices of one token ordered by descending norm; equal norms keep
// the lower index first.
inline std::vector<std::size_t> norm_order(const double* norms, std::size_t e) {
  std::vector<std::size_t> order(e);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
  return order;
}

// expert_norms is [B x E] row-major and must be fully populated.
inline void record_selection(LoadHistogram& hist, const RouterDecision& decision, const std::vector<double>& expert_norms) {
  const std::size_t e = hist.experts();
  const std::size_t b = decision.tokens();
  if (expert_norms.size() != b * e) throw DimensionError("record_selection: need one norm per token and expert");
  std::vector<std::size_t> rank_of(e);
  for (std::size_t t = 0; t < b; ++t) {
    const double* row = expert_norms.data() + t * e;
    for (std::size_t i = 0; i < e; ++i) {
      if (std::isnan(row[i])) throw ContractError("record_selection: expert norms missing; run the forward pass densely");
    }
    const auto order = norm_order(row, e);
    for (std::size_t r = 0; r < e; ++r) rank_of[order[r]] = r;
    for (std::size_t i : decision.selected[t]) {
      if (i >= e) throw DimensionError("record_selection: expert index out of range");
      ++hist.counts[rank_of[i]];
    }
    ++hist.tokens;
  }
}

inline void record_selection(LoadHistogram& hist, const LayerOutput& out) {
  record_selection(hist, out.decision, out.expert_norms);
}

// Total-variation distance to the uniform distribution over ranks.
// Only comparable between histograms with the same expert count.
inline double flatness_score(const LoadHistogram& hist) {
  const std::size_t e = hist.experts();
  if (e == 0) throw ContractError("flatness_score: empty histogram");
  const auto p = hist.proportions();
  double tv = 0.0;
  for (double v : p) tv += std::abs(v - 1.0 / static_cast<double>(e));
  return 0.5 * tv;
}

struct NormRow {
  std::size_t layer;
  std::string checkpoint;
  double mean_output_norm;
};

using NormTrace = std::vector<NormRow>;

// Mean over tokens of the per-token Euclidean norm.
inline double mean_row_norm(const Tensor& t) {
  const std::size_t m = t.rows(), n = t.cols();
  const auto d = t.data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += d[i * n + j] * d[i * n + j];
    total += std::sqrt(s);
  }
  return total / static_cast<double>(m);
}

}  // namespace momoe
