#pragma once

// Cross-attention fusion: each modality's sequence is enriched by attending
// over the other, the enriched sequences are mean-pooled, concatenated, and
// projected to the fused vector. A contrast head maps the fused vector onto
// the unit sphere for alignment training.

#include <cmath>
#include <stdexcept>
#include <string>

#include "ehrseq/tensor.hpp"

namespace ehrseq {

struct CrossAttentionParams {
    Tensor wq;  // (d, d_k)
    Tensor wk;  // (d, d_k)
    Tensor wv;  // (d, d)
};

struct CrossAttendResult {
    Tensor output;   // (L_target, d)
    Tensor weights;  // (L_target, L_source), rows sum to 1
};

/// Enriches `target` by attending over `source`:
/// W = softmax(Q_target K_source^T / sqrt(d_k)), output = W V_source.
/// The value combination is permutation-invariant in the source rows.
inline CrossAttendResult cross_attend(const Tensor& target, const Tensor& source,
                                      const CrossAttentionParams& params) {
    if (!target.defined() || !source.defined() || target.rows() == 0 || source.rows() == 0)
        throw std::invalid_argument("cross_attend: empty modality sequence");
    const std::size_t d_k = params.wq.cols();
    Tensor q = matmul(target, params.wq);
    Tensor k = matmul(source, params.wk);
    Tensor v = matmul(source, params.wv);
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
    Tensor weights = softmax_lastdim(scores);
    CrossAttendResult result;
    result.weights = weights;
    result.output = weighted_sum_rows(weights, v);
    return result;
}

struct FusionParams {
    CrossAttentionParams enrich_time;  // time enriched by note features
    CrossAttentionParams enrich_note;  // note enriched by time features
    Tensor fuse_w;      // (2d, d_f)
    Tensor fuse_b;      // (d_f)
    Tensor contrast_w;  // (d_f, d_c)
    Tensor contrast_b;  // (d_c)
};

struct FusedRepresentation {
    Tensor h;              // (1, d_f) fused vector
    Tensor enriched_time;  // (L_t, d)
    Tensor enriched_note;  // (L_n, d)
    Tensor projection_m;   // (1, d_c), unit L2 norm
};

inline FusedRepresentation fuse(const Tensor& x_time, const Tensor& x_note,
                                const FusionParams& params) {
    FusedRepresentation out;
    out.enriched_time = cross_attend(x_time, x_note, params.enrich_time).output;
    out.enriched_note = cross_attend(x_note, x_time, params.enrich_note).output;
    Tensor pooled_time = reshape(mean_axis(out.enriched_time, 0), {1, out.enriched_time.cols()});
    Tensor pooled_note = reshape(mean_axis(out.enriched_note, 0), {1, out.enriched_note.cols()});
    Tensor joint = concat_lastdim(pooled_time, pooled_note);  // (1, 2d)
    out.h = add_rowvec(matmul(joint, params.fuse_w), params.fuse_b);
    out.projection_m =
        l2_normalize_rows(add_rowvec(matmul(out.h, params.contrast_w), params.contrast_b));
    return out;
}

}  // namespace ehrseq
