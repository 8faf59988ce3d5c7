#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ehrseq/encoders.hpp"
#include "ehrseq/tokenizer.hpp"
#include "helpers.hpp"

using namespace ehrseq;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

TokenSequence sequence_of(std::size_t n_global, std::size_t n_real, Rng& rng,
                          double tie_prob = 0.3) {
    TokenSequence seq;
    seq.n_global = n_global;
    std::size_t pos = 0;
    for (std::size_t g = 0; g < n_global; ++g) {
        seq.variable_ids.push_back(TokenSequence::kGlobalVariableId);
        seq.values.push_back(0.0);
        seq.times.push_back(0.0);
        seq.abs_pos.push_back(0);
        seq.attention_mask.push_back(1);
    }
    for (std::size_t i = 0; i < n_real; ++i) {
        if (i > 0 && !rng.bernoulli(tie_prob)) ++pos;
        seq.variable_ids.push_back(static_cast<int>(rng.below(3)));
        seq.values.push_back(rng.normal());
        seq.times.push_back(rng.normal());
        seq.abs_pos.push_back(pos);
        seq.attention_mask.push_back(1);
    }
    return seq;
}

// Reference implementation with unrestricted visibility: every token attends
// to every valid token, scores carry the same bucketed relative bias.
std::vector<double> dense_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const Tensor& rel, const TokenSequence& seq,
                                           std::size_t clip) {
    const std::size_t n = q.rows(), dk = q.cols(), dv = v.cols();
    std::vector<double> out(n * dv, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> scores(n, -std::numeric_limits<double>::infinity());
        for (std::size_t j = 0; j < n; ++j) {
            if (!seq.attention_mask[j]) continue;
            const std::size_t b = relative_bucket(static_cast<long long>(seq.abs_pos[i]),
                                                  static_cast<long long>(seq.abs_pos[j]),
                                                  static_cast<long long>(clip));
            double dot = 0.0;
            for (std::size_t c = 0; c < dk; ++c)
                dot += q.at(i, c) * (k.at(j, c) + rel.at(b, c));
            scores[j] = dot / std::sqrt(double(dk));
        }
        const double mx = *std::max_element(scores.begin(), scores.end());
        double denom = 0.0;
        for (double s : scores)
            if (s != -std::numeric_limits<double>::infinity()) denom += std::exp(s - mx);
        for (std::size_t j = 0; j < n; ++j) {
            if (!seq.attention_mask[j]) continue;
            const double w = std::exp(scores[j] - mx) / denom;
            for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += w * v.at(j, c);
        }
    }
    return out;
}

EncoderLayerParams random_layer(std::size_t d, std::size_t n_heads, Rng& rng) {
    EncoderLayerParams layer;
    const std::size_t dk = d / n_heads, dv = d / n_heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        AttentionHeadParams head;
        head.wq = random_tensor({d, dk}, rng, 0.4);
        head.wk = random_tensor({d, dk}, rng, 0.4);
        head.wv = random_tensor({d, dv}, rng, 0.4);
        layer.heads.push_back(head);
    }
    layer.wo = random_tensor({d, d}, rng, 0.4);
    layer.bo = random_tensor({d}, rng, 0.1);
    layer.ln1_gain = Tensor({d}, 1.0);
    layer.ln1_bias = Tensor({d}, 0.0);
    layer.ff_w1 = random_tensor({d, 4 * d}, rng, 0.3);
    layer.ff_b1 = random_tensor({4 * d}, rng, 0.1);
    layer.ff_w2 = random_tensor({4 * d, d}, rng, 0.3);
    layer.ff_b2 = random_tensor({d}, rng, 0.1);
    layer.ln2_gain = Tensor({d}, 1.0);
    layer.ln2_bias = Tensor({d}, 0.0);
    return layer;
}

EncoderParams random_encoder(std::size_t d, std::size_t n_heads, std::size_t n_layers, Rng& rng) {
    EncoderParams p;
    for (std::size_t l = 0; l < n_layers; ++l) p.layers.push_back(random_layer(d, n_heads, rng));
    p.final_gain = Tensor({d}, 1.0);
    p.final_bias = Tensor({d}, 0.0);
    return p;
}

}  // namespace

TEST_CASE("windowed attention equals dense attention when the window covers everything") {
    Rng rng(71);
    const std::size_t clip = 4;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n_global = rng.below(3);
        const std::size_t n_real = 2 + rng.below(14);
        const std::size_t L = n_global + n_real;
        const std::size_t dk = 3, dv = 4;
        TokenSequence seq = sequence_of(n_global, n_real, rng);
        Tensor q = random_tensor({L, dk}, rng);
        Tensor k = random_tensor({L, dk}, rng);
        Tensor v = random_tensor({L, dv}, rng);
        Tensor rel = random_tensor({2 * clip + 1, dk}, rng, 0.3);
        NoTapeScope eval;
        Tensor banded = banded_attention_head(q, k, v, rel, seq, L, clip);
        auto oracle = dense_attention_oracle(q, k, v, rel, seq, clip);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < oracle.size(); ++i)
            max_diff = std::max(max_diff, std::abs(banded.data()[i] - oracle[i]));
        CHECK(max_diff < 1e-9);
    }
}

TEST_CASE("attention weights vanish exactly outside the window") {
    Rng rng(73);
    const std::size_t n_global = 2, n_real = 12, w = 2, clip = 3;
    TokenSequence seq = sequence_of(n_global, n_real, rng);
    const std::size_t L = seq.length();
    Tensor q = random_tensor({L, 3}, rng);
    Tensor k = random_tensor({L, 3}, rng);
    Tensor v = random_tensor({L, 3}, rng);
    Tensor rel = random_tensor({2 * clip + 1, 3}, rng);
    NoTapeScope eval;
    Tensor weights;
    banded_attention_head(q, k, v, rel, seq, w, clip, nullptr, &weights);
    for (std::size_t i = n_global; i < L; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
            const bool visible =
                j < n_global ||
                std::llabs(static_cast<long long>(i) - static_cast<long long>(j)) <=
                    static_cast<long long>(w);
            if (!visible) CHECK(weights.at(i, j) == 0.0);
            row_sum += weights.at(i, j);
        }
        CHECK(std::abs(row_sum - 1.0) < 1e-12);
    }
    // global rows attend everywhere and also normalize
    for (std::size_t i = 0; i < n_global; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < L; ++j) row_sum += weights.at(i, j);
        CHECK(std::abs(row_sum - 1.0) < 1e-12);
    }
}

TEST_CASE("uniform zero queries and keys spread weight uniformly over the visible set") {
    Rng rng(79);
    const std::size_t n_global = 1, n_real = 9, w = 2, clip = 2;
    TokenSequence seq = sequence_of(n_global, n_real, rng);
    const std::size_t L = seq.length();
    Tensor q({L, 3}, 0.0), k({L, 3}, 0.0);
    Tensor v = random_tensor({L, 3}, rng);
    Tensor rel({2 * clip + 1, 3}, 0.0);
    NoTapeScope eval;
    Tensor weights;
    banded_attention_head(q, k, v, rel, seq, w, clip, nullptr, &weights);
    for (std::size_t i = 0; i < L; ++i) {
        std::size_t visible = 0;
        for (std::size_t j = 0; j < L; ++j)
            if (weights.at(i, j) != 0.0) ++visible;
        for (std::size_t j = 0; j < L; ++j)
            if (weights.at(i, j) != 0.0)
                CHECK(weights.at(i, j) == Catch::Approx(1.0 / double(visible)).epsilon(1e-12));
    }
}

TEST_CASE("fully masked visibility is rejected") {
    Rng rng(83);
    TokenSequence seq = sequence_of(0, 5, rng);
    for (auto& m : seq.attention_mask) m = 0;
    const std::size_t L = seq.length();
    Tensor q({L, 2}, 0.0), k({L, 2}, 0.0), v({L, 2}, 0.0);
    Tensor rel({5, 2}, 0.0);
    NoTapeScope eval;
    CHECK_THROWS_WITH(banded_attention_head(q, k, v, rel, seq, 2, 2),
                      Catch::Matchers::ContainsSubstring("no visible keys"));
}

TEST_CASE("score buffers grow linearly in sequence length at fixed window") {
    Rng rng(89);
    const std::size_t n_global = 2, w = 3, clip = 2, n_heads = 2, d = 8;
    AttentionConfig cfg;
    cfg.window = w;
    cfg.n_heads = n_heads;
    cfg.n_global = n_global;
    Tensor rel = random_tensor({2 * clip + 1, d / n_heads}, rng);
    std::vector<AttentionHeadParams> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        AttentionHeadParams p;
        p.wq = random_tensor({d, d / n_heads}, rng);
        p.wk = random_tensor({d, d / n_heads}, rng);
        p.wv = random_tensor({d, d / n_heads}, rng);
        heads.push_back(p);
    }
    NoTapeScope eval;
    std::vector<std::size_t> lengths{20, 40, 80};
    for (std::size_t n_real : lengths) {
        TokenSequence seq = sequence_of(n_global, n_real, rng);
        const std::size_t L = seq.length();
        Tensor x = random_tensor({L, d}, rng);
        AttentionAccounting acc;
        sliding_window_attention(x, seq, heads, cfg, rel, clip, &acc);
        CHECK(acc.banded_score_elems == L * (2 * w + 1 + n_global) * n_heads);
        CHECK(acc.global_score_elems == n_global * L * n_heads);
    }
}

TEST_CASE("attention gradients pass finite differences") {
    Rng rng(97);
    const std::size_t n_global = 1, n_real = 6, w = 2, clip = 2;
    TokenSequence seq = sequence_of(n_global, n_real, rng);
    const std::size_t L = seq.length();
    Tensor q = random_tensor({L, 3}, rng);
    Tensor k = random_tensor({L, 3}, rng);
    Tensor v = random_tensor({L, 3}, rng);
    Tensor rel = random_tensor({2 * clip + 1, 3}, rng, 0.4);
    for (auto* t : {&q, &k, &v, &rel}) t->set_requires_grad(true);
    Tensor probe = random_tensor({L, 3}, rng);
    auto report = grad_check(
        [&]() {
            return sum_all(mul(banded_attention_head(q, k, v, rel, seq, w, clip), probe));
        },
        {{"q", q}, {"k", k}, {"v", v}, {"rel", rel}});
    INFO("worst " << report.worst << " err " << report.max_rel_err);
    CHECK(report.ok(1e-5));
}

TEST_CASE("encoder returns one global output per prepended global token") {
    Rng rng(101);
    const std::size_t d = 8;
    TokenSequence seq = sequence_of(9, 20, rng);
    Tensor emb = random_tensor({seq.length(), d}, rng);
    AttentionConfig cfg;
    cfg.window = 4;
    cfg.n_global = 9;
    EncoderParams params = random_encoder(d, 1, 1, rng);
    Tensor rel = random_tensor({2 * 8 + 1, d}, rng, 0.3);
    Rng drop(1);
    NoTapeScope eval;
    EncodedModality enc = encode_time_series(emb, seq, cfg, params, rel, 8, drop, false);
    CHECK(enc.global_outputs.rows() == 9);
    CHECK(enc.global_outputs.cols() == d);
    CHECK(enc.sequence.rows() == seq.length());

    // determinism in eval mode
    EncodedModality enc2 = encode_time_series(emb, seq, cfg, params, rel, 8, drop, false);
    CHECK(enc.sequence.data() == enc2.sequence.data());
}

TEST_CASE("swapping position-identical tokens leaves global outputs unchanged") {
    Rng rng(103);
    const std::size_t d = 8;
    AttentionConfig cfg;
    cfg.window = 3;
    cfg.n_global = 2;
    EncoderParams params = random_encoder(d, 1, 1, rng);
    Tensor rel = random_tensor({2 * 4 + 1, d}, rng, 0.3);

    TokenSequence seq = sequence_of(2, 10, rng);
    // force a same-timestamp pair in the middle
    seq.abs_pos[6] = seq.abs_pos[5];
    seq.times[6] = seq.times[5];
    Tensor emb = random_tensor({seq.length(), d}, rng);

    TokenSequence swapped = seq;
    std::swap(swapped.variable_ids[5], swapped.variable_ids[6]);
    std::swap(swapped.values[5], swapped.values[6]);
    Tensor emb_swapped = emb.detach();
    for (std::size_t c = 0; c < d; ++c)
        std::swap(emb_swapped.data()[5 * d + c], emb_swapped.data()[6 * d + c]);

    Rng drop(1);
    NoTapeScope eval;
    EncodedModality a = encode_time_series(emb, seq, cfg, params, rel, 4, drop, false);
    EncodedModality b = encode_time_series(emb_swapped, swapped, cfg, params, rel, 4, drop, false);
    for (std::size_t i = 0; i < a.global_outputs.size(); ++i)
        CHECK(std::abs(a.global_outputs.data()[i] - b.global_outputs.data()[i]) < 1e-9);
}

TEST_CASE("full encoder stack gradients pass finite differences") {
    Rng rng(107);
    const std::size_t d = 4;
    TokenSequence seq = sequence_of(1, 5, rng);
    Tensor emb = random_tensor({seq.length(), d}, rng);
    emb.set_requires_grad(true);
    AttentionConfig cfg;
    cfg.window = 2;
    cfg.n_global = 1;
    EncoderParams params = random_encoder(d, 1, 1, rng);
    Tensor rel = random_tensor({2 * 2 + 1, d}, rng, 0.3);
    rel.set_requires_grad(true);
    std::vector<std::pair<std::string, Tensor>> leaves = {
        {"emb", emb},
        {"rel", rel},
        {"wq", params.layers[0].heads[0].wq},
        {"wk", params.layers[0].heads[0].wk},
        {"wv", params.layers[0].heads[0].wv},
        {"wo", params.layers[0].wo},
        {"bo", params.layers[0].bo},
        {"ff_w1", params.layers[0].ff_w1},
        {"ff_b1", params.layers[0].ff_b1},
        {"ff_w2", params.layers[0].ff_w2},
        {"ff_b2", params.layers[0].ff_b2},
        {"ln1_g", params.layers[0].ln1_gain},
        {"ln2_g", params.layers[0].ln2_gain},
        {"final_g", params.final_gain},
    };
    for (auto& [name, t] : leaves) t.set_requires_grad(true);
    Rng drop(1);
    Tensor probe = random_tensor({seq.length(), d}, rng);
    auto report = grad_check(
        [&]() {
            EncodedModality enc = encode_time_series(emb, seq, cfg, params, rel, 2, drop, false);
            return sum_all(mul(enc.sequence, probe));
        },
        leaves);
    INFO("worst " << report.worst << " err " << report.max_rel_err);
    CHECK(report.ok(1e-5));
}

TEST_CASE("note projection exposes the chunk sequence and a consistent average") {
    Rng rng(109);
    const std::size_t e = 5, d = 4;
    Tensor w = random_tensor({e, d}, rng);
    Tensor b = random_tensor({d}, rng);
    std::vector<std::vector<double>> chunks;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> chunk(e);
        for (auto& x : chunk) x = rng.normal();
        chunks.push_back(chunk);
    }
    NoTapeScope eval;
    EncodedModality notes = project_notes(chunks, w, b);
    CHECK(notes.sequence.rows() == 3);

    // pooled equals the projection of the chunk average (affine commutes with mean)
    std::vector<double> avg(e, 0.0);
    for (const auto& c : chunks)
        for (std::size_t i = 0; i < e; ++i) avg[i] += c[i] / 3.0;
    EncodedModality pooled_of_avg = project_notes({avg}, w, b);
    for (std::size_t j = 0; j < d; ++j)
        CHECK(notes.pooled.at(0, j) == Catch::Approx(pooled_of_avg.pooled.at(0, j)).margin(1e-12));

    // single chunk: sequence of one row equal to the pooled vector
    EncodedModality one = project_notes({chunks[0]}, w, b);
    CHECK(one.sequence.rows() == 1);
    for (std::size_t j = 0; j < d; ++j) CHECK(one.sequence.at(0, j) == one.pooled.at(0, j));

    // zero chunk: projection bias
    EncodedModality zero = project_notes({std::vector<double>(e, 0.0)}, w, b);
    for (std::size_t j = 0; j < d; ++j) CHECK(zero.pooled.at(0, j) == b.data()[j]);

    CHECK_THROWS_WITH(project_notes({}, w, b), Catch::Matchers::ContainsSubstring("no note"));
}

TEST_CASE("attention config validation") {
    AttentionConfig cfg;
    cfg.window = 0;
    CHECK_THROWS_AS(cfg.validate(8), std::invalid_argument);
    cfg = AttentionConfig{};
    cfg.n_heads = 3;
    CHECK_THROWS_AS(cfg.validate(8), std::invalid_argument);
}
