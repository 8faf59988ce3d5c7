#pragma once

// Shared test utilities: finite-difference gradient checking and independent
// oracles kept deliberately free of the library's own computation paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ehrseq/rng.hpp"
#include "ehrseq/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]" of the worst coordinate
    bool ok(double tol) const { return max_rel_err < tol; }
};

/// Central finite differences (h = 1e-5) against reverse-mode gradients.
/// `build` must deterministically construct a scalar loss from the current
/// contents of `leaves`.
inline GradCheckReport grad_check(const std::function<ehrseq::Tensor()>& build,
                                  std::vector<std::pair<std::string, ehrseq::Tensor>> leaves,
                                  double h = 1e-5) {
    using namespace ehrseq;
    std::vector<std::vector<double>> analytic;
    {
        TapeScope scope;
        for (auto& [name, t] : leaves) t.zero_grad();
        Tensor loss = build();
        backward(loss);
        for (auto& [name, t] : leaves) analytic.push_back(t.grad());
    }
    GradCheckReport report;
    NoTapeScope eval;
    for (std::size_t p = 0; p < leaves.size(); ++p) {
        auto& t = leaves[p].second;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double fp = build().value();
            t.data()[i] = saved - h;
            const double fm = build().value();
            t.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = rel_err(analytic[p][i], numeric);
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = leaves[p].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

inline ehrseq::Tensor random_tensor(std::vector<std::size_t> shape, ehrseq::Rng& rng,
                                    double scale = 1.0) {
    ehrseq::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal() * scale;
    return t;
}

/// Pair-counting AUROC: positives outranking negatives, ties worth 1/2.
inline double pair_count_auroc(const std::vector<double>& scores,
                               const std::vector<int>& labels) {
    double wins = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) {
            ++n_pos;
            for (std::size_t j = 0; j < scores.size(); ++j) {
                if (labels[j] != 0) continue;
                if (scores[i] > scores[j])
                    wins += 1.0;
                else if (scores[i] == scores[j])
                    wins += 0.5;
            }
        } else {
            ++n_neg;
        }
    }
    if (n_pos == 0 || n_neg == 0) return std::nan("");
    return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Direct-summation InfoNCE oracle on a precomputed similarity matrix.
/// Returns -(1/(2K)) * sum_i log(exp(s_ii/tau) / sum_{j in denom} exp(s_ij/tau)).
inline double info_nce_oracle_from_sims(const std::vector<std::vector<double>>& sims, double tau,
                                        bool include_positive) {
    const std::size_t k = sims.size();
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (!include_positive && j == i) continue;
            denom += std::exp(sims[i][j] / tau);
        }
        total += std::log(std::exp(sims[i][i] / tau) / denom);
    }
    return -total / (2.0 * static_cast<double>(k));
}

inline std::vector<std::vector<double>> dot_matrix(const std::vector<std::vector<double>>& a,
                                                   const std::vector<std::vector<double>>& b) {
    std::vector<std::vector<double>> out(a.size(), std::vector<double>(b.size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j)
            for (std::size_t c = 0; c < a[i].size(); ++c) out[i][j] += a[i][c] * b[j][c];
    return out;
}

/// Oracle for the paired contrastive objective on unit-norm row sets
/// (rows of m against rows of d), both directions summed.
inline double alignment_oracle(const std::vector<std::vector<double>>& m,
                               const std::vector<std::vector<double>>& d, double tau,
                               bool include_positive) {
    const auto s_md = dot_matrix(m, d);
    const auto s_dm = dot_matrix(d, m);
    return info_nce_oracle_from_sims(s_md, tau, include_positive) +
           info_nce_oracle_from_sims(s_dm, tau, include_positive);
}

}  // namespace testutil
