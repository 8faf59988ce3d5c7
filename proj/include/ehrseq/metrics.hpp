#pragma once

// Rank-based AUROC with half-credit for ties, plus the per-outcome
// evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ehrseq {

/// Probability that a positive outranks a negative (ties count 1/2), computed
/// from average ranks. Returns NaN when only one class is present. All
/// intermediate sums are multiples of 1/2, so the result is exact and agrees
/// with direct pair counting.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auroc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
        n_pos += static_cast<std::size_t>(y);
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nan("");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct OutcomeMetric {
    double auroc_value = std::nan("");
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    bool valid() const { return !std::isnan(auroc_value); }
};

struct EvalReport {
    std::string regime;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    std::vector<OutcomeMetric> per_outcome;

    /// Arithmetic mean over outcomes that carried both classes.
    double mean_auroc() const {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& m : per_outcome) {
            if (!m.valid()) continue;
            sum += m.auroc_value;
            ++count;
        }
        return count == 0 ? std::nan("") : sum / static_cast<double>(count);
    }

    std::vector<std::size_t> skipped_outcomes() const {
        std::vector<std::size_t> out;
        for (std::size_t o = 0; o < per_outcome.size(); ++o)
            if (!per_outcome[o].valid()) out.push_back(o);
        return out;
    }
};

inline EvalReport make_eval_report(const std::vector<std::vector<double>>& scores_per_outcome,
                                   const std::vector<std::vector<int>>& labels_per_outcome) {
    if (scores_per_outcome.size() != labels_per_outcome.size())
        throw std::invalid_argument("evaluation: outcome count mismatch");
    EvalReport report;
    for (std::size_t o = 0; o < scores_per_outcome.size(); ++o) {
        OutcomeMetric m;
        for (int y : labels_per_outcome[o]) {
            if (y == 1)
                ++m.n_pos;
            else
                ++m.n_neg;
        }
        m.auroc_value = auroc(scores_per_outcome[o], labels_per_outcome[o]);
        report.per_outcome.push_back(m);
    }
    return report;
}

}  // namespace ehrseq
