#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "ehrseq/tokenizer.hpp"
#include "helpers.hpp"

using namespace ehrseq;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

CohortRecord record_with_times(const std::vector<double>& times) {
    CohortRecord r;
    r.patient_id = "t";
    for (std::size_t i = 0; i < times.size(); ++i)
        r.events.push_back({static_cast<int>(i % 3), times[i], 0.1 * double(i)});
    std::stable_sort(r.events.begin(), r.events.end(),
                     [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    return r;
}

struct SmallEmbedding {
    TokenEmbeddingParams params;
    VariableEncoderBank bank;

    SmallEmbedding(std::size_t v, std::size_t d, std::size_t d_t, std::size_t p_max,
                   std::size_t n_global, std::size_t s_dim, Rng& rng) {
        params.variable_embed = random_tensor({v + 1, d}, rng, 0.3);
        params.position_embed = random_tensor({p_max, d}, rng, 0.3);
        params.static_proj_w = random_tensor({s_dim, d}, rng, 0.3);
        params.static_proj_b = random_tensor({d}, rng, 0.3);
        params.time2vec_params = make_time2vec_params(d_t);
        params.time2vec_params.omega_np = random_tensor({1, 1}, rng, 0.5);
        params.time2vec_params.phi_np = random_tensor({1}, rng, 0.5);
        params.time2vec_params.omega_p = random_tensor({1, d_t - 1}, rng, 0.5);
        params.time2vec_params.phi_p = random_tensor({d_t - 1}, rng, 0.5);
        params.time_proj_w = random_tensor({d_t, d}, rng, 0.3);
        params.time_proj_b = random_tensor({d}, rng, 0.3);
        params.global_embed = random_tensor({n_global, d}, rng, 0.3);
        params.rel_bucket_embed = random_tensor({2 * params.rel_clip + 1, d}, rng, 0.3);
        bank.weight = random_tensor({v, d}, rng, 0.3);
        bank.bias = random_tensor({v, d}, rng, 0.3);
    }
};

}  // namespace

TEST_CASE("same timestamps share a positional index") {
    TokenSequence seq = tokenize(record_with_times({10.0, 10.0, 20.0}), 0);
    CHECK(seq.abs_pos == std::vector<std::size_t>{0, 0, 1});

    TokenSequence seq2 = tokenize(record_with_times({1.0, 2.0, 2.0, 5.0}), 0);
    CHECK(seq2.abs_pos == std::vector<std::size_t>{0, 1, 1, 2});
}

TEST_CASE("empty record tokenizes to exactly the global tokens") {
    CohortRecord r;
    r.patient_id = "empty";
    TokenSequence seq = tokenize(r, 9);
    CHECK(seq.length() == 9);
    CHECK(seq.n_real() == 0);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(seq.variable_ids[i] == TokenSequence::kGlobalVariableId);
        CHECK(seq.values[i] == 0.0);
        CHECK(seq.attention_mask[i] == 1);
    }
}

TEST_CASE("global tokens are prepended before real tokens") {
    TokenSequence seq = tokenize(record_with_times({1.0, 2.0}), 3);
    REQUIRE(seq.length() == 5);
    CHECK(seq.variable_ids[0] == TokenSequence::kGlobalVariableId);
    CHECK(seq.variable_ids[2] == TokenSequence::kGlobalVariableId);
    CHECK(seq.variable_ids[3] >= 0);
}

TEST_CASE("truncation keeps the latest events and re-ranks from zero") {
    TokenizerConfig cfg;
    cfg.max_events = 3;
    CohortRecord r = record_with_times({1.0, 2.0, 3.0, 4.0, 5.0});
    TokenSequence seq = tokenize(r, 1, cfg);
    REQUIRE(seq.n_real() == 3);
    CHECK(seq.times.back() == r.events.back().timestamp);  // suffix retained
    CHECK(seq.abs_pos[1] == 0);
    CHECK(seq.abs_pos[3] == 2);
}

TEST_CASE("too many distinct timestamps is rejected with the limit") {
    TokenizerConfig cfg;
    cfg.max_events = 64;
    cfg.max_positions = 4;
    CohortRecord r = record_with_times({1, 2, 3, 4, 5, 6});
    CHECK_THROWS_WITH(tokenize(r, 0, cfg), Catch::Matchers::ContainsSubstring("4"));
}

TEST_CASE("unsorted events are rejected") {
    CohortRecord r;
    r.events = {{0, 5.0, 0.0}, {0, 3.0, 0.0}};
    CHECK_THROWS_AS(tokenize(r, 0), std::invalid_argument);
}

TEST_CASE("tie order does not change the (abs_pos, variable) multiset") {
    Rng rng(51);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<TimeSeriesEvent> events;
        double t = 0.0;
        for (int i = 0; i < 12; ++i) {
            if (i > 0 && rng.bernoulli(0.4)) t += 1.0;
            events.push_back({static_cast<int>(rng.below(4)), t, rng.normal()});
        }
        CohortRecord a;
        a.events = events;
        // shuffle, then restore timestamp order with ties in arbitrary order
        CohortRecord b = a;
        rng.shuffle(b.events);
        std::stable_sort(b.events.begin(), b.events.end(),
                         [](const auto& x, const auto& y) { return x.timestamp < y.timestamp; });
        auto multiset_of = [](const TokenSequence& s) {
            std::multiset<std::pair<std::size_t, int>> m;
            for (std::size_t i = 0; i < s.length(); ++i)
                m.emplace(s.abs_pos[i], s.variable_ids[i]);
            return m;
        };
        CHECK(multiset_of(tokenize(a, 0)) == multiset_of(tokenize(b, 0)));
    }
}

TEST_CASE("tokenize is idempotent over its own reconstruction") {
    CohortRecord r = record_with_times({1.0, 2.0, 2.0, 7.0, 7.0, 9.0});
    TokenSequence first = tokenize(r, 2);
    CohortRecord rebuilt;
    for (std::size_t i = first.n_global; i < first.length(); ++i)
        rebuilt.events.push_back({first.variable_ids[i], first.times[i], first.values[i]});
    TokenSequence second = tokenize(rebuilt, 2);
    CHECK(first.abs_pos == second.abs_pos);
}

TEST_CASE("time translation changes times but not positional indices") {
    CohortRecord r = record_with_times({1.0, 2.0, 2.0, 5.0});
    CohortRecord shifted = r;
    for (auto& e : shifted.events) e.timestamp += 1000.0;
    TokenSequence a = tokenize(r, 1);
    TokenSequence b = tokenize(shifted, 1);
    CHECK(a.abs_pos == b.abs_pos);
    for (std::size_t i = a.n_global; i < a.length(); ++i) CHECK(a.times[i] != b.times[i]);
}

TEST_CASE("time2vec linear component and zero case") {
    Time2VecParams p = make_time2vec_params(4);
    p.omega_np.data()[0] = 2.0;
    p.phi_np.data()[0] = 1.0;
    auto out = time2vec(3.0, p);
    REQUIRE(out.size() == 4);
    CHECK(out[0] == Catch::Approx(7.0));
    CHECK(out[1] == Catch::Approx(0.0));  // sin(0*t + 0)

    Time2VecParams zeros = make_time2vec_params(5);
    for (double v : time2vec(123.0, zeros)) CHECK(v == 0.0);
}

TEST_CASE("time2vec periodic components repeat at their own period") {
    Rng rng(53);
    Time2VecParams p = make_time2vec_params(6);
    for (auto* t : {&p.omega_p, &p.phi_p})
        for (auto& v : t->data()) v = 0.3 + rng.uniform();
    const double t0 = 1.7;
    auto a = time2vec(t0, p);
    for (std::size_t j = 0; j < p.omega_p.cols(); ++j) {
        const double period = 2.0 * 3.141592653589793 / p.omega_p.data()[j];
        auto b = time2vec(t0 + period, p);
        CHECK(b[j + 1] == Catch::Approx(a[j + 1]).margin(1e-9));
    }
}

TEST_CASE("relative buckets clip and center") {
    CHECK(relative_bucket(5, 5, 4) == 4);  // zero offset -> center k
    CHECK(relative_bucket(0, 9, 4) == 8);  // clipped to 2k
    CHECK(relative_bucket(9, 0, 4) == 0);
    const std::vector<long long> offsets{-3, -2, -1, 0, 1, 2, 3};
    const std::vector<std::size_t> expected{0, 0, 1, 2, 3, 4, 4};
    for (std::size_t i = 0; i < offsets.size(); ++i)
        CHECK(relative_bucket(0, offsets[i], 2) == expected[i]);
    CHECK_THROWS_AS(relative_bucket(0, 0, 0), std::invalid_argument);
}

TEST_CASE("zero static projection makes embeddings static-independent") {
    Rng rng(55);
    SmallEmbedding small(3, 6, 4, 16, 2, 3, rng);
    for (auto& v : small.params.static_proj_w.data()) v = 0.0;
    for (auto& v : small.params.static_proj_b.data()) v = 0.0;
    CohortRecord r = record_with_times({1.0, 2.0});
    TokenSequence seq = tokenize(r, 2);
    NoTapeScope eval;
    Tensor e1 = embed_tokens(seq, small.params, small.bank, {0.0, 0.0, 0.0});
    Tensor e2 = embed_tokens(seq, small.params, small.bank, {5.0, -2.0, 9.0});
    CHECK(e1.data() == e2.data());
}

TEST_CASE("identical tokens embed identically") {
    Rng rng(57);
    SmallEmbedding small(3, 6, 4, 16, 1, 2, rng);
    CohortRecord r;
    r.events = {{1, 4.0, 0.7}, {1, 4.0, 0.7}};
    TokenSequence seq = tokenize(r, 1);
    NoTapeScope eval;
    Tensor e = embed_tokens(seq, small.params, small.bank, {0.5, -0.5});
    for (std::size_t j = 0; j < e.cols(); ++j) CHECK(e.at(1, j) == e.at(2, j));
}

TEST_CASE("embedding rejects unimputed statics and mismatched globals") {
    Rng rng(59);
    SmallEmbedding small(3, 6, 4, 16, 2, 2, rng);
    TokenSequence seq = tokenize(record_with_times({1.0}), 2);
    CHECK_THROWS_WITH(embed_tokens(seq, small.params, small.bank, {std::nan(""), 0.0}),
                      Catch::Matchers::ContainsSubstring("imputed"));
    TokenSequence wrong = tokenize(record_with_times({1.0}), 1);
    CHECK_THROWS_WITH(embed_tokens(wrong, small.params, small.bank, {0.0, 0.0}),
                      Catch::Matchers::ContainsSubstring("global"));
}

TEST_CASE("token embedding gradients match finite differences") {
    Rng rng(61);
    SmallEmbedding small(3, 5, 3, 8, 2, 2, rng);
    CohortRecord r = record_with_times({0.25, 0.5, 0.5, 0.875});
    TokenSequence seq = tokenize(r, 2);
    std::vector<double> statics{0.3, -0.8};

    std::vector<std::pair<std::string, Tensor>> leaves = {
        {"variable_embed", small.params.variable_embed},
        {"position_embed", small.params.position_embed},
        {"static_w", small.params.static_proj_w},
        {"static_b", small.params.static_proj_b},
        {"omega_np", small.params.time2vec_params.omega_np},
        {"phi_np", small.params.time2vec_params.phi_np},
        {"omega_p", small.params.time2vec_params.omega_p},
        {"phi_p", small.params.time2vec_params.phi_p},
        {"time_w", small.params.time_proj_w},
        {"time_b", small.params.time_proj_b},
        {"global_embed", small.params.global_embed},
        {"bank_w", small.bank.weight},
        {"bank_b", small.bank.bias},
    };
    for (auto& [name, t] : leaves) t.set_requires_grad(true);

    Tensor probe = random_tensor({seq.length(), 5}, rng);
    auto report = grad_check(
        [&]() {
            Tensor e = embed_tokens(seq, small.params, small.bank, statics);
            return sum_all(mul(e, probe));
        },
        leaves);
    INFO("worst " << report.worst << " err " << report.max_rel_err);
    CHECK(report.ok(1e-5));
}

TEST_CASE("shared encoder bank gives equal encodings across variables") {
    Rng rng(63);
    VariableEncoderBank shared;
    shared.weight = random_tensor({1, 4}, rng);
    shared.bias = random_tensor({1, 4}, rng);
    shared.shared = true;
    CHECK(encode_value(0.7, 0, shared) == encode_value(0.7, 2, shared));

    VariableEncoderBank separate;
    separate.weight = random_tensor({3, 4}, rng);
    separate.bias = random_tensor({3, 4}, rng);
    CHECK(encode_value(0.7, 0, separate) != encode_value(0.7, 2, separate));

    // affine: encode(2v) - encode(v) == encode(v) - encode(0)
    auto e0 = encode_value(0.0, 1, separate);
    auto e1 = encode_value(0.9, 1, separate);
    auto e2 = encode_value(1.8, 1, separate);
    for (std::size_t j = 0; j < e0.size(); ++j)
        CHECK(e2[j] - e1[j] == Catch::Approx(e1[j] - e0[j]).margin(1e-12));

    // value 0 -> bias row
    for (std::size_t j = 0; j < e0.size(); ++j) CHECK(e0[j] == separate.bias.at(1, j));

    CHECK_THROWS_AS(encode_value(1.0, 7, separate), std::out_of_range);
}
