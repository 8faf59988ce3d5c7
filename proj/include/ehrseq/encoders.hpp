#pragma once

// Long-sequence self-attention encoder. Real tokens attend within a sliding
// window of neighbouring token positions plus all global tokens; global
// tokens attend to everything. Relative positions enter the scores as a
// bucketed bias in the style of additive relative-key attention:
//   score(i, j) = (Q_i . K_j + Q_i . R_{bucket(i,j)}) / sqrt(d_k)
// Score storage is banded, so memory grows linearly in sequence length at a
// fixed window.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehrseq/tensor.hpp"
#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

struct AttentionConfig {
    std::size_t window = 8;    // one-sided window w over real-token positions
    std::size_t n_heads = 1;
    std::size_t n_layers = 1;
    std::size_t head_dim = 0;  // d_k; 0 means d / n_heads
    std::size_t n_global = 0;
    double dropout = 0.0;

    void validate(std::size_t d) const {
        if (window < 1) throw std::invalid_argument("attention window must be >= 1");
        if (n_heads == 0 || n_layers == 0)
            throw std::invalid_argument("attention needs at least one head and one layer");
        if (d % n_heads != 0)
            throw std::invalid_argument("model dimension " + std::to_string(d) +
                                        " not divisible by " + std::to_string(n_heads) +
                                        " heads");
    }

    std::size_t resolved_head_dim(std::size_t d) const {
        return head_dim == 0 ? d / n_heads : head_dim;
    }
};

/// Score/weight buffer sizes of the last attention call, for memory
/// accounting: the banded buffer covers every row at width 2w+1+n_global;
/// global rows keep their full-length scores in a separate buffer.
struct AttentionAccounting {
    std::size_t banded_score_elems = 0;
    std::size_t global_score_elems = 0;
};

namespace detail {

struct VisibleSlot {
    std::size_t col;
    std::size_t bucket;
};

// Enumerates the visible columns of one attention row in a fixed order:
// global columns first, then the window (for real rows) or all remaining
// columns (for global rows).
inline void visible_columns(std::size_t row, std::size_t length, std::size_t n_global,
                            std::size_t window, std::size_t rel_clip,
                            const std::vector<std::size_t>& abs_pos,
                            const std::vector<std::uint8_t>& mask,
                            std::vector<VisibleSlot>& out) {
    out.clear();
    auto push = [&](std::size_t col) {
        if (!mask.empty() && !mask[col]) return;
        const auto pi = static_cast<long long>(abs_pos[row]);
        const auto pj = static_cast<long long>(abs_pos[col]);
        out.push_back({col, relative_bucket(pi, pj, static_cast<long long>(rel_clip))});
    };
    if (row < n_global) {
        for (std::size_t j = 0; j < length; ++j) push(j);
        return;
    }
    for (std::size_t j = 0; j < n_global; ++j) push(j);
    const std::size_t r = row - n_global;  // position among real tokens
    const std::size_t lo = r > window ? r - window : 0;
    const std::size_t hi = std::min(length - n_global - 1, r + window);
    for (std::size_t j = lo; j <= hi; ++j) push(n_global + j);
}

}  // namespace detail

/// One attention head over banded scores. Q, K are (L, d_k); V is (L, d_v);
/// rel_table is (2k+1, d_k). Returns (L, d_v).
inline Tensor banded_attention_head(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const Tensor& rel_table, const TokenSequence& seq,
                                    std::size_t window, std::size_t rel_clip,
                                    AttentionAccounting* accounting = nullptr,
                                    Tensor* dense_weights_out = nullptr) {
    const std::size_t length = q.rows();
    if (k.rows() != length || v.rows() != length)
        throw std::invalid_argument("banded_attention: Q/K/V row mismatch");
    if (seq.length() != length)
        throw std::invalid_argument("banded_attention: sequence length " +
                                    std::to_string(seq.length()) + " vs " +
                                    std::to_string(length) + " rows");
    if (rel_table.rows() != 2 * rel_clip + 1 || rel_table.cols() != q.cols())
        throw std::invalid_argument("banded_attention: relative table must be (2k+1, d_k)");
    const std::size_t d_k = q.cols();
    const std::size_t d_v = v.cols();
    const std::size_t n_global = seq.n_global;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
    const std::size_t band_width = 2 * window + 1 + n_global;

    // weights are stored banded for every row; global rows spill into their
    // own full-length buffer
    struct WeightBuffers {
        std::vector<double> band;
        std::vector<double> global_rows;
        std::vector<std::vector<detail::VisibleSlot>> visible;
    };
    auto buf = std::make_shared<WeightBuffers>();
    buf->band.assign(length * band_width, 0.0);
    buf->global_rows.assign(n_global * length, 0.0);
    buf->visible.resize(length);
    if (accounting) {
        accounting->banded_score_elems = buf->band.size();
        accounting->global_score_elems = buf->global_rows.size();
    }

    std::vector<double> out(length * d_v, 0.0);
    std::vector<detail::VisibleSlot> slots;
    for (std::size_t i = 0; i < length; ++i) {
        detail::visible_columns(i, length, n_global, window, rel_clip, seq.abs_pos,
                                seq.attention_mask, slots);
        if (slots.empty())
            throw std::invalid_argument("banded_attention: row " + std::to_string(i) +
                                        " has no visible keys");
        double* row_w = i < n_global ? &buf->global_rows[i * length] : &buf->band[i * band_width];
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> scores(slots.size());
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const auto [j, bucket] = slots[s];
            double dot = 0.0;
            for (std::size_t c = 0; c < d_k; ++c)
                dot += q.data()[i * d_k + c] *
                       (k.data()[j * d_k + c] + rel_table.data()[bucket * d_k + c]);
            scores[s] = dot * scale;
            mx = std::max(mx, scores[s]);
        }
        double denom = 0.0;
        for (double& sc : scores) {
            sc = std::exp(sc - mx);
            denom += sc;
        }
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const double w = scores[s] / denom;
            row_w[s] = w;
            const std::size_t j = slots[s].col;
            for (std::size_t c = 0; c < d_v; ++c)
                out[i * d_v + c] += w * v.data()[j * d_v + c];
        }
        buf->visible[i] = slots;
    }

    if (dense_weights_out) {
        Tensor dense({length, length}, 0.0);
        for (std::size_t i = 0; i < length; ++i) {
            const double* row_w =
                i < n_global ? &buf->global_rows[i * length] : &buf->band[i * band_width];
            for (std::size_t s = 0; s < buf->visible[i].size(); ++s)
                dense.data()[i * length + buf->visible[i][s].col] = row_w[s];
        }
        *dense_weights_out = dense;
    }

    NodePtr qn = q.node(), kn = k.node(), vn = v.node(), rn = rel_table.node();
    return detail::make_result(
        {length, d_v}, std::move(out), {q, k, v, rel_table}, [=](NodePtr o) {
            return [=]() {
                const bool need_q = qn->requires_grad, need_k = kn->requires_grad;
                const bool need_v = vn->requires_grad, need_r = rn->requires_grad;
                if (need_q) qn->ensure_grad();
                if (need_k) kn->ensure_grad();
                if (need_v) vn->ensure_grad();
                if (need_r) rn->ensure_grad();
                std::vector<double> dlogit;
                for (std::size_t i = 0; i < length; ++i) {
                    const auto& slots = buf->visible[i];
                    const double* row_w =
                        i < n_global ? &buf->global_rows[i * length] : &buf->band[i * band_width];
                    dlogit.assign(slots.size(), 0.0);
                    double weighted = 0.0;
                    for (std::size_t s = 0; s < slots.size(); ++s) {
                        const std::size_t j = slots[s].col;
                        double dw = 0.0;
                        for (std::size_t c = 0; c < d_v; ++c) {
                            const double go = o->grad[i * d_v + c];
                            dw += go * vn->data[j * d_v + c];
                            if (need_v) vn->grad[j * d_v + c] += row_w[s] * go;
                        }
                        dlogit[s] = dw;
                        weighted += row_w[s] * dw;
                    }
                    for (std::size_t s = 0; s < slots.size(); ++s) {
                        const double dl = row_w[s] * (dlogit[s] - weighted) * scale;
                        if (dl == 0.0) continue;
                        const auto [j, bucket] = slots[s];
                        for (std::size_t c = 0; c < d_k; ++c) {
                            if (need_q)
                                qn->grad[i * d_k + c] +=
                                    dl * (kn->data[j * d_k + c] + rn->data[bucket * d_k + c]);
                            if (need_k) kn->grad[j * d_k + c] += dl * qn->data[i * d_k + c];
                            if (need_r)
                                rn->grad[bucket * d_k + c] += dl * qn->data[i * d_k + c];
                        }
                    }
                }
            };
        });
}

/// Per-head Q/K/V projections for one attention sublayer.
struct AttentionHeadParams {
    Tensor wq, wk;  // (d, d_k)
    Tensor wv;      // (d, d_v)
};

struct EncoderLayerParams {
    std::vector<AttentionHeadParams> heads;
    Tensor wo;  // (d, d)
    Tensor bo;  // (d)
    Tensor ln1_gain, ln1_bias;
    Tensor ff_w1, ff_b1;  // (d, 4d), (4d)
    Tensor ff_w2, ff_b2;  // (4d, d), (d)
    Tensor ln2_gain, ln2_bias;
};

struct EncoderParams {
    std::vector<EncoderLayerParams> layers;
    Tensor final_gain, final_bias;
};

/// Multi-head windowed self-attention (heads concatenated, before the output
/// projection). Exposes score-buffer accounting summed over heads.
inline Tensor sliding_window_attention(const Tensor& x, const TokenSequence& seq,
                                       const std::vector<AttentionHeadParams>& heads,
                                       const AttentionConfig& cfg, const Tensor& rel_table,
                                       std::size_t rel_clip,
                                       AttentionAccounting* accounting = nullptr,
                                       std::vector<Tensor>* head_weights_out = nullptr) {
    cfg.validate(x.cols());
    if (heads.empty()) throw std::invalid_argument("attention: no head parameters");
    AttentionAccounting total;
    Tensor concat;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        Tensor q = matmul(x, heads[h].wq);
        Tensor k = matmul(x, heads[h].wk);
        Tensor v = matmul(x, heads[h].wv);
        AttentionAccounting head_acc;
        Tensor weights;
        Tensor head_out = banded_attention_head(
            q, k, v, rel_table, seq, cfg.window, rel_clip, accounting ? &head_acc : nullptr,
            head_weights_out ? &weights : nullptr);
        if (accounting) {
            total.banded_score_elems += head_acc.banded_score_elems;
            total.global_score_elems += head_acc.global_score_elems;
        }
        if (head_weights_out) head_weights_out->push_back(weights);
        concat = h == 0 ? head_out : concat_lastdim(concat, head_out);
    }
    if (accounting) *accounting = total;
    return concat;
}

struct EncodedModality {
    Tensor sequence;        // (L, d)
    Tensor global_outputs;  // (n_global, d); undefined when n_global == 0
    Tensor pooled;          // (1, d) mean over the sequence
};

/// Pre-norm transformer stack over token embeddings; returns the encoded
/// sequence together with the global-token states.
inline EncodedModality encode_time_series(const Tensor& embeddings, const TokenSequence& seq,
                                          const AttentionConfig& cfg,
                                          const EncoderParams& params, const Tensor& rel_table,
                                          std::size_t rel_clip, Rng& rng, bool train,
                                          AttentionAccounting* accounting = nullptr) {
    if (cfg.n_layers != params.layers.size())
        throw std::invalid_argument("encoder: configured " + std::to_string(cfg.n_layers) +
                                    " layers but " + std::to_string(params.layers.size()) +
                                    " parameter sets");
    Tensor x = embeddings;
    for (const auto& layer : params.layers) {
        Tensor attn_in = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
        Tensor attn = sliding_window_attention(attn_in, seq, layer.heads, cfg, rel_table,
                                               rel_clip, accounting);
        attn = add_rowvec(matmul(attn, layer.wo), layer.bo);
        x = add(x, dropout(attn, cfg.dropout, rng, train));
        Tensor ff_in = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
        Tensor hidden = relu(add_rowvec(matmul(ff_in, layer.ff_w1), layer.ff_b1));
        Tensor ff = add_rowvec(matmul(hidden, layer.ff_w2), layer.ff_b2);
        x = add(x, dropout(ff, cfg.dropout, rng, train));
    }
    x = layer_norm(x, params.final_gain, params.final_bias);
    EncodedModality out;
    out.sequence = x;
    if (seq.n_global > 0) out.global_outputs = slice_rows(x, 0, seq.n_global);
    out.pooled = reshape(mean_axis(x, 0), {1, x.cols()});
    return out;
}

/// Linear projection of note-chunk embeddings into the shared model space.
/// Exposes both the projected chunk sequence and its average.
inline EncodedModality project_notes(const std::vector<std::vector<double>>& note_chunks,
                                     const Tensor& proj_w, const Tensor& proj_b) {
    if (note_chunks.empty())
        throw std::invalid_argument("project_notes: record carries no note chunks");
    const std::size_t e = proj_w.rows();
    std::vector<double> flat;
    flat.reserve(note_chunks.size() * e);
    for (const auto& chunk : note_chunks) {
        if (chunk.size() != e)
            throw std::invalid_argument("project_notes: chunk dimension " +
                                        std::to_string(chunk.size()) + " does not match " +
                                        std::to_string(e));
        flat.insert(flat.end(), chunk.begin(), chunk.end());
    }
    Tensor chunks({note_chunks.size(), e}, std::move(flat));
    Tensor projected = add_rowvec(matmul(chunks, proj_w), proj_b);
    EncodedModality out;
    out.sequence = projected;
    out.pooled = reshape(mean_axis(projected, 0), {1, projected.cols()});
    return out;
}

}  // namespace ehrseq
