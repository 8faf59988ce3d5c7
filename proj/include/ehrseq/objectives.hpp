#pragma once

// Training objectives: the paired contrastive alignment loss over unit-norm
// projections, the bi-modal contrastive baseline, multilabel cross-entropy,
// and their weighted total.
//
// Each direction of the paired loss is
//   -(1/(2K)) * sum_i log( exp(<a_i, b_i>/tau) / sum_{j in denom(i)} exp(<a_i, b_j>/tau) )
// where denom(i) either includes the positive (standard InfoNCE, default) or
// ranges over the other rows only.

#include <cmath>
#include <stdexcept>
#include <string>

#include "ehrseq/tensor.hpp"

namespace ehrseq {

enum class DenominatorMode {
    kIncludePositive,  // denominator sums over all rows, positive included
    kNegativesOnly,    // denominator sums over the other rows only
};

inline DenominatorMode denominator_mode_from_string(const std::string& s) {
    if (s == "include-positive") return DenominatorMode::kIncludePositive;
    if (s == "negatives-only") return DenominatorMode::kNegativesOnly;
    throw std::invalid_argument("unknown denominator mode '" + s + "'");
}

inline const char* to_string(DenominatorMode mode) {
    return mode == DenominatorMode::kIncludePositive ? "include-positive" : "negatives-only";
}

struct ContrastiveBatch {
    Tensor h_m;  // (K, d_c), unit-norm rows
    Tensor h_d;  // (K, d_c), unit-norm rows
    double tau = 0.07;
    DenominatorMode mode = DenominatorMode::kIncludePositive;
};

namespace detail {

inline void require_unit_rows(const char* what, const Tensor& t) {
    require_matrix(what, t);
    for (std::size_t i = 0; i < t.rows(); ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < t.cols(); ++j) ss += t.at(i, j) * t.at(i, j);
        if (std::abs(std::sqrt(ss) - 1.0) > 1e-9)
            throw std::invalid_argument(std::string(what) + ": row " + std::to_string(i) +
                                        " is not unit-norm");
    }
}

// One direction of the paired loss; anchors and targets are (K, d_c).
inline Tensor info_nce_direction(const Tensor& anchors, const Tensor& targets, double tau,
                                 DenominatorMode mode) {
    const std::size_t k = anchors.rows();
    Tensor sims = scale(matmul(anchors, transpose(targets)), 1.0 / tau);  // (K, K)
    Tensor positives = take_diag(sims);
    if (mode == DenominatorMode::kNegativesOnly) {
        Tensor diag_mask({k, k}, 0.0);
        for (std::size_t i = 0; i < k; ++i) diag_mask.data()[i * k + i] = 1.0;
        // -1e300 underflows to an exact zero term inside the log-sum-exp
        sims = masked_fill(sims, diag_mask, -1e300);
    }
    Tensor lse = logsumexp_rows(sims);
    return scale(sum_all_invariant(sub(positives, lse)), -1.0 / (2.0 * static_cast<double>(k)));
}

}  // namespace detail

struct AlignmentLoss {
    Tensor l_md;         // fused representation against discharge targets
    Tensor l_dm;         // discharge targets against fused representations
    Tensor l_alignment;  // l_md + l_dm
};

inline AlignmentLoss alignment_loss(const ContrastiveBatch& batch) {
    if (batch.tau <= 0.0) throw std::invalid_argument("alignment_loss: tau must be positive");
    detail::require_unit_rows("alignment_loss h_m", batch.h_m);
    detail::require_unit_rows("alignment_loss h_d", batch.h_d);
    if (batch.h_m.shape() != batch.h_d.shape())
        detail::shape_error("alignment_loss", batch.h_m.shape(), batch.h_d.shape());
    if (batch.mode == DenominatorMode::kNegativesOnly && batch.h_m.rows() < 2)
        throw std::invalid_argument(
            "alignment_loss: negatives-only mode needs a batch of at least 2");
    AlignmentLoss out;
    out.l_md = detail::info_nce_direction(batch.h_m, batch.h_d, batch.tau, batch.mode);
    out.l_dm = detail::info_nce_direction(batch.h_d, batch.h_m, batch.tau, batch.mode);
    out.l_alignment = add(out.l_md, out.l_dm);
    return out;
}

/// Bi-modal baseline: the same paired loss applied directly to the two
/// unimodal projections.
inline Tensor intermodal_loss(const Tensor& h_time, const Tensor& h_note, double tau,
                              DenominatorMode mode = DenominatorMode::kIncludePositive) {
    ContrastiveBatch batch;
    batch.h_m = h_time;
    batch.h_d = h_note;
    batch.tau = tau;
    batch.mode = mode;
    return alignment_loss(batch).l_alignment;
}

/// Mean over batch and outcomes of the stable logit binary cross-entropy.
inline Tensor multilabel_ce(const Tensor& logits, const Tensor& labels) {
    return bce_with_logits(logits, labels);
}

struct LossWeights {
    double alpha = 0.2;  // alignment weight
    double beta = 1.0;   // cross-entropy weight
};

struct LossReport {
    Tensor l_md;
    Tensor l_dm;
    Tensor l_alignment;
    Tensor l_ce;
    Tensor l_total;

    double md() const { return l_md.value(); }
    double dm() const { return l_dm.value(); }
    double alignment() const { return l_alignment.value(); }
    double ce() const { return l_ce.value(); }
    double total() const { return l_total.value(); }
};

inline LossReport total_loss(const AlignmentLoss& alignment, const Tensor& ce,
                             const LossWeights& weights) {
    if (weights.alpha < 0.0 || weights.beta < 0.0)
        throw std::invalid_argument("loss weights must be nonnegative");
    if (weights.alpha == 0.0 && weights.beta == 0.0)
        throw std::invalid_argument("at least one loss weight must be positive");
    LossReport report;
    report.l_md = alignment.l_md;
    report.l_dm = alignment.l_dm;
    report.l_alignment = alignment.l_alignment;
    report.l_ce = ce;
    report.l_total = add(scale(report.l_alignment, weights.alpha), scale(ce, weights.beta));
    return report;
}

}  // namespace ehrseq
