#include "rffi/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace rffi::metrics {

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("auroc: bad inputs");
  int64_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: needs both classes");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // mid-rank sum over positives
  double rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum += mid_rank;
    i = j + 1;
  }
  double u = rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("average_precision: bad inputs");
  int64_t n_pos = 0;
  for (int l : labels)
    if (l) n_pos++;
  if (n_pos == 0) throw std::invalid_argument("average_precision: no positives");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  int64_t tp = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    if (!labels[order[k]]) continue;
    tp++;
    double precision_at_k = static_cast<double>(tp) / static_cast<double>(k + 1);
    ap += precision_at_k / static_cast<double>(n_pos);
  }
  return ap;
}

double keep_rate(const std::vector<bool>& kept) {
  if (kept.empty()) throw std::invalid_argument("keep_rate: empty stream");
  int64_t k = 0;
  for (bool b : kept)
    if (b) k++;
  return static_cast<double>(k) / static_cast<double>(kept.size());
}

}  // namespace rffi::metrics
