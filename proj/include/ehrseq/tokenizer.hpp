#pragma once

// Token construction for irregular multivariate event streams. Absolute
// positional indices are assigned by rank of distinct timestamp, so events
// recorded at the same instant share an index. A configurable number of
// outcome-specific global tokens is prepended, and each token embedding sums
// a variable-specific value encoding, a variable-id embedding, an
// absolute-position embedding, a projected learnable time encoding, and a
// projected static-feature context.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehrseq/adam.hpp"
#include "ehrseq/cohort.hpp"
#include "ehrseq/tensor.hpp"

namespace ehrseq {

struct TokenizerConfig {
    std::size_t max_events = 512;  // real tokens kept (latest events win)
    std::size_t max_positions = 512;  // P_max: distinct-timestamp indices addressable
};

struct TokenSequence {
    std::size_t n_global = 0;
    std::vector<int> variable_ids;    // kGlobalVariableId for global tokens
    std::vector<double> values;       // 0 for global tokens
    std::vector<double> times;        // normalized timestamps; 0 for global tokens
    std::vector<std::size_t> abs_pos; // non-unique, nondecreasing over real tokens
    std::vector<std::uint8_t> attention_mask;  // 1 = valid token

    static constexpr int kGlobalVariableId = -1;

    std::size_t length() const { return variable_ids.size(); }
    std::size_t n_real() const { return length() - n_global; }
};

/// Ranks events by distinct timestamp; ties share an index. Events must be
/// sorted ascending. Truncation keeps the latest max_events events and
/// re-ranks from zero.
inline TokenSequence tokenize(const CohortRecord& record, std::size_t n_global,
                              const TokenizerConfig& cfg = {}) {
    for (std::size_t i = 1; i < record.events.size(); ++i)
        if (record.events[i].timestamp < record.events[i - 1].timestamp)
            throw std::invalid_argument("tokenize: events must be sorted by timestamp");

    TokenSequence seq;
    seq.n_global = n_global;
    const std::size_t n_real = std::min(record.events.size(), cfg.max_events);
    const std::size_t first = record.events.size() - n_real;
    seq.variable_ids.reserve(n_global + n_real);
    for (std::size_t g = 0; g < n_global; ++g) {
        seq.variable_ids.push_back(TokenSequence::kGlobalVariableId);
        seq.values.push_back(0.0);
        seq.times.push_back(0.0);
        seq.abs_pos.push_back(0);
        seq.attention_mask.push_back(1);
    }
    std::size_t rank = 0;
    for (std::size_t i = first; i < record.events.size(); ++i) {
        const auto& e = record.events[i];
        if (i > first && e.timestamp != record.events[i - 1].timestamp) ++rank;
        if (rank >= cfg.max_positions)
            throw std::out_of_range("tokenize: positional index " + std::to_string(rank) +
                                    " reaches the limit of " +
                                    std::to_string(cfg.max_positions) + " distinct timestamps");
        seq.variable_ids.push_back(e.variable_id);
        seq.values.push_back(e.value);
        seq.times.push_back(e.timestamp);
        seq.abs_pos.push_back(rank);
        seq.attention_mask.push_back(1);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// learnable time encoding
// ---------------------------------------------------------------------------

/// One linear component plus d_t - 1 sinusoidal components, all learnable.
struct Time2VecParams {
    Tensor omega_np;  // (1,1)
    Tensor phi_np;    // (1)
    Tensor omega_p;   // (1, d_t - 1)
    Tensor phi_p;     // (d_t - 1)

    std::size_t output_dim() const { return 1 + omega_p.cols(); }
};

inline Time2VecParams make_time2vec_params(std::size_t d_t) {
    if (d_t < 2) throw std::invalid_argument("time encoding needs output dimension >= 2");
    Time2VecParams p;
    p.omega_np = Tensor({1, 1});
    p.phi_np = Tensor({1});
    p.omega_p = Tensor({1, d_t - 1});
    p.phi_p = Tensor({d_t - 1});
    return p;
}

/// Encodes a column of times (L,1) to (L, d_t): [w_np*t + b_np, sin(w_p*t + b_p)...].
inline Tensor time2vec(const Tensor& times_col, const Time2VecParams& p) {
    Tensor linear = add_rowvec(matmul(times_col, p.omega_np), p.phi_np);
    Tensor periodic = sin_(add_rowvec(matmul(times_col, p.omega_p), p.phi_p));
    return concat_lastdim(linear, periodic);
}

/// Convenience scalar form.
inline std::vector<double> time2vec(double t, const Time2VecParams& p) {
    NoTapeScope eval;
    Tensor col({1, 1}, {t});
    return time2vec(col, p).data();
}

// ---------------------------------------------------------------------------
// relative position buckets
// ---------------------------------------------------------------------------

/// clip(abs_pos_j - abs_pos_i, -k, k) + k, an index into a (2k+1)-row table.
inline std::size_t relative_bucket(long long pos_i, long long pos_j, long long clip) {
    if (clip < 1) throw std::invalid_argument("relative_bucket: clip distance must be >= 1");
    const long long offset = std::clamp(pos_j - pos_i, -clip, clip);
    return static_cast<std::size_t>(offset + clip);
}

// ---------------------------------------------------------------------------
// token embedding parameters
// ---------------------------------------------------------------------------

struct TokenEmbeddingParams {
    Tensor variable_embed;   // (V + 1, d); last row backs the global sentinel
    Tensor position_embed;   // (P_max, d)
    Tensor static_proj_w;    // (s_dim, d)
    Tensor static_proj_b;    // (d)
    Time2VecParams time2vec_params;
    Tensor time_proj_w;      // (d_t, d)
    Tensor time_proj_b;      // (d)
    Tensor global_embed;     // (n_global, d)
    Tensor rel_bucket_embed; // (2k + 1, d_head), consumed by attention
    std::size_t rel_clip = 8;
};

/// Variable-specific scalar-to-vector maps; `shared` collapses the bank to a
/// single encoder reused for every variable.
struct VariableEncoderBank {
    Tensor weight;  // (V, d) or (1, d)
    Tensor bias;    // (V, d) or (1, d)
    bool shared = false;

    std::size_t n_encoders() const { return weight.rows(); }
};

inline Tensor encode_values(const TokenSequence& seq, const VariableEncoderBank& bank,
                            std::size_t first_real) {
    std::vector<std::size_t> rows;
    std::vector<double> values;
    for (std::size_t i = first_real; i < seq.length(); ++i) {
        const int vid = seq.variable_ids[i];
        if (vid < 0 || (!bank.shared && static_cast<std::size_t>(vid) >= bank.n_encoders()))
            throw std::out_of_range("value encoder: unknown variable id " + std::to_string(vid));
        rows.push_back(bank.shared ? 0 : static_cast<std::size_t>(vid));
        values.push_back(seq.values[i]);
    }
    Tensor w_rows = embedding_lookup(bank.weight, rows);
    Tensor b_rows = embedding_lookup(bank.bias, rows);
    const std::size_t n = values.size();
    Tensor value_col({n}, std::move(values));
    return add(row_scale(w_rows, value_col), b_rows);
}

/// Single-value form: affine map of `value` through the encoder for `variable_id`.
inline std::vector<double> encode_value(double value, int variable_id,
                                        const VariableEncoderBank& bank) {
    NoTapeScope eval;
    if (variable_id < 0 ||
        (!bank.shared && static_cast<std::size_t>(variable_id) >= bank.n_encoders()))
        throw std::out_of_range("value encoder: unknown variable id " +
                                std::to_string(variable_id));
    const std::size_t row = bank.shared ? 0 : static_cast<std::size_t>(variable_id);
    const std::size_t d = bank.weight.cols();
    std::vector<double> out(d);
    for (std::size_t j = 0; j < d; ++j)
        out[j] = bank.weight.at(row, j) * value + bank.bias.at(row, j);
    return out;
}

/// Full token embedding matrix (L x d). Global tokens use their dedicated
/// embeddings; all tokens receive the projected static context.
inline Tensor embed_tokens(const TokenSequence& seq, const TokenEmbeddingParams& params,
                           const VariableEncoderBank& bank,
                           const std::vector<double>& static_features) {
    const std::size_t n_global = seq.n_global;
    if (n_global != params.global_embed.rows())
        throw std::invalid_argument("embed_tokens: sequence carries " +
                                    std::to_string(n_global) + " global tokens but " +
                                    std::to_string(params.global_embed.rows()) +
                                    " global embeddings exist");
    if (static_features.size() != params.static_proj_w.rows())
        throw std::invalid_argument("embed_tokens: static feature size " +
                                    std::to_string(static_features.size()) +
                                    " does not match projection rows " +
                                    std::to_string(params.static_proj_w.rows()));
    for (double s : static_features)
        if (std::isnan(s))
            throw std::invalid_argument("embed_tokens: static features must be imputed first");

    Tensor static_row({1, static_features.size()}, std::vector<double>(static_features));
    Tensor static_ctx = add_rowvec(matmul(static_row, params.static_proj_w),
                                   params.static_proj_b);  // (1, d)

    Tensor global_block = add_rowvec(params.global_embed, static_ctx);
    if (seq.n_real() == 0) return global_block;

    const std::size_t sentinel_row = params.variable_embed.rows() - 1;
    std::vector<std::size_t> var_rows, pos_rows;
    std::vector<double> times;
    for (std::size_t i = n_global; i < seq.length(); ++i) {
        const int vid = seq.variable_ids[i];
        var_rows.push_back(vid == TokenSequence::kGlobalVariableId
                               ? sentinel_row
                               : static_cast<std::size_t>(vid));
        pos_rows.push_back(seq.abs_pos[i]);
        times.push_back(seq.times[i]);
    }
    for (std::size_t rnk : pos_rows)
        if (rnk >= params.position_embed.rows())
            throw std::out_of_range("embed_tokens: positional index " + std::to_string(rnk) +
                                    " exceeds table of " +
                                    std::to_string(params.position_embed.rows()));

    Tensor value_enc = encode_values(seq, bank, n_global);
    Tensor var_emb = embedding_lookup(params.variable_embed, var_rows);
    Tensor pos_emb = embedding_lookup(params.position_embed, pos_rows);
    const std::size_t n_times = times.size();
    Tensor time_col({n_times, 1}, std::move(times));
    Tensor time_emb = add_rowvec(matmul(time2vec(time_col, params.time2vec_params),
                                        params.time_proj_w),
                                 params.time_proj_b);
    Tensor real_block = add(add(value_enc, var_emb), add(pos_emb, time_emb));
    real_block = add_rowvec(real_block, static_ctx);
    return concat_rows(global_block, real_block);
}

}  // namespace ehrseq
