#pragma once

// Full per-record forward path: tokenize, embed, encode the event stream with
// windowed attention, project note chunks, fuse both modalities, and read out
// per-outcome logits plus the unit-norm projections used by the contrastive
// objectives. One classification head per outcome consumes that outcome's
// global-token state concatenated with the fused vector.

#include <cmath>
#include <string>
#include <vector>

#include "ehrseq/adam.hpp"
#include "ehrseq/cohort.hpp"
#include "ehrseq/config.hpp"
#include "ehrseq/encoders.hpp"
#include "ehrseq/fusion.hpp"
#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

struct ModelDims {
    std::size_t n_variables = 0;
    std::size_t n_static = 0;
    std::size_t embed_dim = 0;  // e, dimension of note/discharge embeddings
    std::size_t n_outcomes = 0;
};

inline ModelDims dims_from_cohort(const Cohort& cohort, const NormalizationStats& stats) {
    if (cohort.empty()) throw std::invalid_argument("cannot size a model from an empty cohort");
    ModelDims dims;
    dims.n_variables = stats.n_variables();
    dims.n_static = cohort.front().static_features.size();
    dims.embed_dim = cohort.front().embedding_dim();
    dims.n_outcomes = cohort.front().labels.size();
    return dims;
}

struct ForwardOptions {
    bool train = false;
    bool detach_heads = false;    // probe mode: heads see detached features
    bool want_discharge = false;  // produce the discharge projection h_d
    bool want_intermodal = false; // produce unimodal projections
    bool use_augmented = false;   // contrast against the augmented discharge
};

class EhrModel {
public:
    EhrModel(const TrainConfig& cfg, const ModelDims& dims, std::uint64_t init_seed)
        : cfg_(cfg), dims_(dims) {
        cfg_.validate();
        Rng rng = Rng::derived(init_seed, 0x1217);
        build_parameters(rng);
    }

    struct Output {
        Tensor logits;  // (1, n_outcomes)
        Tensor h_m;     // (1, d_c), unit rows
        Tensor h_d;     // (1, d_c), unit rows (when requested)
        Tensor h_time;  // (1, d_c) unimodal projections (when requested)
        Tensor h_note;
    };

    Output forward(const CohortRecord& record, Rng& rng, const ForwardOptions& opts,
                   AttentionAccounting* accounting = nullptr) const {
        TokenizerConfig tok_cfg;
        tok_cfg.max_events = cfg_.max_events;
        tok_cfg.max_positions = cfg_.max_positions;
        TokenSequence seq = tokenize(record, dims_.n_outcomes, tok_cfg);
        // a record without static features still feeds the (1-row) projection
        const std::vector<double>& statics =
            dims_.n_static == 0 ? kZeroStatic : record.static_features;
        Tensor emb = embed_tokens(seq, tok_, bank_, statics);

        AttentionConfig attn;
        attn.window = cfg_.window;
        attn.n_heads = cfg_.n_heads;
        attn.n_layers = cfg_.n_layers;
        attn.n_global = dims_.n_outcomes;
        attn.dropout = cfg_.dropout;
        EncodedModality time_enc = encode_time_series(emb, seq, attn, enc_, tok_.rel_bucket_embed,
                                                      tok_.rel_clip, rng, opts.train, accounting);
        EncodedModality note_enc = project_notes(record.note_chunks, note_w_, note_b_);

        FusedRepresentation fused = fuse(time_enc.sequence, note_enc.sequence, fusion_);

        // one head per outcome over [global-token state || fused vector]
        std::vector<Tensor> h_rows(dims_.n_outcomes, fused.h);
        Tensor head_in = concat_lastdim(time_enc.global_outputs, stack_rows(h_rows));
        if (opts.detach_heads) head_in = head_in.detach();
        Tensor logits_col = take_diag(matmul(head_in, cls_w_));  // (n_outcomes)
        Output out;
        out.logits = reshape(add(logits_col, cls_b_), {1, dims_.n_outcomes});
        out.h_m = fused.projection_m;

        if (opts.want_discharge) {
            const auto& source =
                opts.use_augmented ? record.augmented_discharge : record.discharge_embedding;
            if (source.size() != dims_.embed_dim)
                throw std::invalid_argument(
                    opts.use_augmented
                        ? "record is missing its augmented discharge embedding"
                        : "discharge embedding dimension mismatch");
            Tensor row({1, dims_.embed_dim}, std::vector<double>(source));
            out.h_d = l2_normalize_rows(add_rowvec(matmul(row, discharge_w_), discharge_b_));
        }
        if (opts.want_intermodal) {
            out.h_time = l2_normalize_rows(
                add_rowvec(matmul(time_enc.pooled, time_head_w_), time_head_b_));
            out.h_note = l2_normalize_rows(
                add_rowvec(matmul(note_enc.pooled, note_head_w_), note_head_b_));
        }
        return out;
    }

    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const TrainConfig& config() const { return cfg_; }
    const ModelDims& dims() const { return dims_; }

    /// Names of the contrast-head parameters (those touched only by the
    /// alignment objectives).
    static const std::vector<std::string>& contrast_parameter_names() {
        static const std::vector<std::string> names = {
            "fusion.contrast_w", "fusion.contrast_b", "discharge.proj_w", "discharge.proj_b",
        };
        return names;
    }

private:
    Tensor init(const std::string& name, std::vector<std::size_t> shape, Rng& rng, double gain) {
        Tensor t(shape);
        const double fan_in = static_cast<double>(shape.front());
        const double scale = gain / std::sqrt(std::max(1.0, fan_in));
        for (auto& v : t.data()) v = rng.normal() * scale;
        return params_.add(name, std::move(t));
    }

    Tensor constant(const std::string& name, std::vector<std::size_t> shape, double value) {
        return params_.add(name, Tensor(std::move(shape), value));
    }

    void build_parameters(Rng& rng) {
        const std::size_t d = cfg_.d, d_t = cfg_.d_t, d_f = cfg_.d_f, d_c = cfg_.d_c;
        const std::size_t v = dims_.n_variables;
        const std::size_t d_k = cfg_.d / cfg_.n_heads;

        tok_.rel_clip = cfg_.rel_clip;
        tok_.variable_embed = init("tokenizer.variable_embed", {v + 1, d}, rng, 1.0);
        tok_.position_embed = init("tokenizer.position_embed", {cfg_.max_positions, d}, rng, 1.0);
        tok_.static_proj_w = init("tokenizer.static_w", {std::max<std::size_t>(dims_.n_static, 1), d},
                                  rng, 1.0);
        tok_.static_proj_b = constant("tokenizer.static_b", {d}, 0.0);
        tok_.time2vec_params.omega_np = init("tokenizer.t2v_omega_np", {1, 1}, rng, 1.0);
        tok_.time2vec_params.phi_np = constant("tokenizer.t2v_phi_np", {1}, 0.0);
        tok_.time2vec_params.omega_p = init("tokenizer.t2v_omega_p", {1, d_t - 1}, rng, 1.0);
        tok_.time2vec_params.phi_p = constant("tokenizer.t2v_phi_p", {d_t - 1}, 0.0);
        tok_.time_proj_w = init("tokenizer.time_w", {d_t, d}, rng, 1.0);
        tok_.time_proj_b = constant("tokenizer.time_b", {d}, 0.0);
        tok_.global_embed = init("tokenizer.global_embed", {dims_.n_outcomes, d}, rng, 1.0);
        tok_.rel_bucket_embed =
            init("tokenizer.rel_bucket_embed", {2 * cfg_.rel_clip + 1, d_k}, rng, 0.5);

        bank_.shared = false;
        bank_.weight = init("value_bank.weight", {v, d}, rng, 1.0);
        bank_.bias = constant("value_bank.bias", {v, d}, 0.0);

        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const std::string prefix = "encoder.layer" + std::to_string(l) + ".";
            EncoderLayerParams layer;
            for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
                const std::string hp = prefix + "head" + std::to_string(h) + ".";
                AttentionHeadParams head;
                head.wq = init(hp + "wq", {d, d_k}, rng, 1.0);
                head.wk = init(hp + "wk", {d, d_k}, rng, 1.0);
                head.wv = init(hp + "wv", {d, d / cfg_.n_heads}, rng, 1.0);
                layer.heads.push_back(head);
            }
            layer.wo = init(prefix + "wo", {d, d}, rng, 1.0);
            layer.bo = constant(prefix + "bo", {d}, 0.0);
            layer.ln1_gain = constant(prefix + "ln1_gain", {d}, 1.0);
            layer.ln1_bias = constant(prefix + "ln1_bias", {d}, 0.0);
            layer.ff_w1 = init(prefix + "ff_w1", {d, 4 * d}, rng, 1.0);
            layer.ff_b1 = constant(prefix + "ff_b1", {4 * d}, 0.0);
            layer.ff_w2 = init(prefix + "ff_w2", {4 * d, d}, rng, 1.0);
            layer.ff_b2 = constant(prefix + "ff_b2", {d}, 0.0);
            layer.ln2_gain = constant(prefix + "ln2_gain", {d}, 1.0);
            layer.ln2_bias = constant(prefix + "ln2_bias", {d}, 0.0);
            enc_.layers.push_back(layer);
        }
        enc_.final_gain = constant("encoder.final_gain", {d}, 1.0);
        enc_.final_bias = constant("encoder.final_bias", {d}, 0.0);

        note_w_ = init("notes.proj_w", {dims_.embed_dim, d}, rng, 1.0);
        note_b_ = constant("notes.proj_b", {d}, 0.0);

        fusion_.enrich_time.wq = init("fusion.time.wq", {d, d_k}, rng, 1.0);
        fusion_.enrich_time.wk = init("fusion.time.wk", {d, d_k}, rng, 1.0);
        fusion_.enrich_time.wv = init("fusion.time.wv", {d, d}, rng, 1.0);
        fusion_.enrich_note.wq = init("fusion.note.wq", {d, d_k}, rng, 1.0);
        fusion_.enrich_note.wk = init("fusion.note.wk", {d, d_k}, rng, 1.0);
        fusion_.enrich_note.wv = init("fusion.note.wv", {d, d}, rng, 1.0);
        fusion_.fuse_w = init("fusion.fuse_w", {2 * d, d_f}, rng, 1.0);
        fusion_.fuse_b = constant("fusion.fuse_b", {d_f}, 0.0);
        fusion_.contrast_w = init("fusion.contrast_w", {d_f, d_c}, rng, 1.0);
        fusion_.contrast_b = constant("fusion.contrast_b", {d_c}, 0.01);

        discharge_w_ = init("discharge.proj_w", {dims_.embed_dim, d_c}, rng, 1.0);
        discharge_b_ = constant("discharge.proj_b", {d_c}, 0.01);
        time_head_w_ = init("intermodal.time_w", {d, d_c}, rng, 1.0);
        time_head_b_ = constant("intermodal.time_b", {d_c}, 0.01);
        note_head_w_ = init("intermodal.note_w", {d, d_c}, rng, 1.0);
        note_head_b_ = constant("intermodal.note_b", {d_c}, 0.01);

        cls_w_ = init("heads.cls_w", {d + d_f, dims_.n_outcomes}, rng, 1.0);
        cls_b_ = constant("heads.cls_b", {dims_.n_outcomes}, 0.0);
    }

    inline static const std::vector<double> kZeroStatic{0.0};

    TrainConfig cfg_;
    ModelDims dims_;
    ParameterStore params_;
    TokenEmbeddingParams tok_;
    VariableEncoderBank bank_;
    EncoderParams enc_;
    Tensor note_w_, note_b_;
    FusionParams fusion_;
    Tensor discharge_w_, discharge_b_;
    Tensor time_head_w_, time_head_b_;
    Tensor note_head_w_, note_head_b_;
    Tensor cls_w_, cls_b_;
};

}  // namespace ehrseq
