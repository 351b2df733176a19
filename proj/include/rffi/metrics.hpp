#pragma once

#include <vector>

namespace rffi::metrics {

// Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie), computed from
// mid-ranks. Throws if either class is absent.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Step-interpolated AP over the score-descending ranking; ties keep stable
// input order. Throws when there is no positive.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

// fraction of true entries; throws on an empty stream
double keep_rate(const std::vector<bool>& kept);

}  // namespace rffi::metrics
