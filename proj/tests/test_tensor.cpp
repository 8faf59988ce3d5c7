#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ehrseq/tensor.hpp"
#include "helpers.hpp"

using namespace ehrseq;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("softmax basics") {
    Tensor x({1, 2}, {0.0, 0.0});
    Tensor y = softmax_lastdim(x);
    CHECK(y.at(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(y.at(0, 1) == Catch::Approx(0.5).margin(1e-15));

    // matches direct evaluation of e^{x_i} / sum_j e^{x_j}
    Tensor z({1, 3}, {1.0, 2.0, 3.0});
    Tensor s = softmax_lastdim(z);
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (std::size_t j = 0; j < 3; ++j)
        CHECK(s.at(0, j) == Catch::Approx(std::exp(1.0 + double(j)) / denom).epsilon(1e-12));
}

TEST_CASE("softmax rows are a probability distribution") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor({4, 9}, rng, 3.0);
        Tensor y = softmax_lastdim(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                CHECK(y.at(i, j) >= 0.0);
                sum += y.at(i, j);
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax is stable under large inputs") {
    Tensor x({1, 3}, {1000.0, 1000.0, 1000.0});
    Tensor y = softmax_lastdim(x);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::isfinite(y.at(0, j)));
    CHECK(y.at(0, 0) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("concat shapes") {
    Tensor a({2, 3}, 1.0), b({2, 4}, 2.0);
    Tensor c = concat_lastdim(a, b);
    REQUIRE(c.shape() == std::vector<std::size_t>{2, 7});
    CHECK(c.at(0, 2) == 1.0);
    CHECK(c.at(0, 3) == 2.0);

    Tensor d = concat_rows(a, Tensor({1, 3}, 5.0));
    REQUIRE(d.shape() == std::vector<std::size_t>{3, 3});
    CHECK(d.at(2, 0) == 5.0);
}

TEST_CASE("shape mismatch reports both shapes") {
    Tensor a({2, 3}), b({3, 2});
    try {
        add(a, b);
        FAIL("expected shape error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,2)") != std::string::npos);
    }
}

TEST_CASE("log and exp reject bad input") {
    CHECK_THROWS_AS(log_(Tensor({1}, {0.0})), std::domain_error);
    CHECK_THROWS_AS(log_(Tensor({1}, {-1.0})), std::domain_error);
    CHECK_THROWS_AS(exp_(Tensor({1}, {std::nan("")})), std::domain_error);
    CHECK_THROWS_AS(exp_(Tensor({1}, {800.0})), std::domain_error);  // would overflow
}

TEST_CASE("backward of x*x at x=3 gives 6") {
    Tensor x = Tensor::scalar(3.0, true);
    TapeScope scope;
    Tensor loss = mul(x, x);
    backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward of softmax component at [0,0]") {
    Tensor x({1, 2}, {0.0, 0.0}, true);
    TapeScope scope;
    Tensor y = softmax_lastdim(x);
    Tensor first = slice_rows(transpose(y), 0, 1);  // y[0][0] as scalar-ish row
    Tensor loss = sum_all(first);
    backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(0.25).margin(1e-9));
    CHECK(x.grad()[1] == Catch::Approx(-0.25).margin(1e-9));
}

TEST_CASE("backward requires scalar loss and a fresh tape") {
    Tensor x({2, 2}, 1.0, true);
    TapeScope scope;
    Tensor y = add(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
    Tensor loss = sum_all(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), std::logic_error);
}

TEST_CASE("matmul chain gradient matches finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto report = grad_check([&]() { return sum_all(matmul(a, b)); },
                                 {{"a", a}, {"b", b}});
        INFO(report.worst);
        CHECK(report.ok(1e-5));
    }
}

TEST_CASE("elementwise and reduction gradients match finite differences") {
    Rng rng(13);
    Tensor a = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({3, 5}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);

    auto check = [&](const char* what, std::function<Tensor()> f) {
        auto report = grad_check(f, {{"a", a}, {"b", b}});
        INFO(what << " worst at " << report.worst << " err " << report.max_rel_err);
        CHECK(report.ok(1e-5));
    };

    check("add+mul", [&]() { return sum_all(mul(add(a, b), b)); });
    check("sub", [&]() { return sum_all(mul(sub(a, b), a)); });
    check("scale", [&]() { return sum_all(scale(a, -1.7)); });
    check("sin", [&]() { return sum_all(sin_(a)); });
    check("relu", [&]() { return sum_all(relu(a)); });
    check("exp", [&]() { return sum_all(exp_(scale(a, 0.3))); });
    check("log", [&]() { return sum_all(log_(add(mul(a, a), Tensor({3, 5}, 1.0)))); });
    check("transpose", [&]() { return sum_all(mul(transpose(a), transpose(b))); });
    check("mean_axis0", [&]() { return sum_all(mean_axis(a, 0)); });
    check("mean_axis1", [&]() { return sum_all(mul(mean_axis(a, 1), mean_axis(b, 1))); });
    check("sum_axis", [&]() { return sum_all(mul(sum_axis(a, 0), sum_axis(b, 0))); });
    check("mean_all", [&]() { return mean_all(mul(a, b)); });
    check("softmax", [&]() { return sum_all(mul(softmax_lastdim(a), b)); });
    check("concat_lastdim", [&]() { return sum_all(mul(concat_lastdim(a, b), concat_lastdim(b, a))); });
    check("concat_rows", [&]() { return sum_all(mul(concat_rows(a, b), concat_rows(b, a))); });
    check("slice_rows", [&]() { return sum_all(slice_rows(a, 1, 2)); });
}

TEST_CASE("broadcast and normalization gradients match finite differences") {
    Rng rng(17);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor v = random_tensor({3}, rng);
    Tensor c = random_tensor({4}, rng);
    Tensor gain = random_tensor({3}, rng, 0.5);
    Tensor bias = random_tensor({3}, rng, 0.5);
    for (auto* t : {&x, &v, &c, &gain, &bias}) t->set_requires_grad(true);

    auto check = [&](const char* what, std::function<Tensor()> f) {
        auto report = grad_check(f, {{"x", x}, {"v", v}, {"c", c}, {"gain", gain}, {"bias", bias}});
        INFO(what << " worst at " << report.worst << " err " << report.max_rel_err);
        CHECK(report.ok(1e-5));
    };

    check("add_rowvec", [&]() { return sum_all(mul(add_rowvec(x, v), x)); });
    check("sub_colvec", [&]() { return sum_all(mul(sub_colvec(x, c), x)); });
    check("row_scale", [&]() { return sum_all(mul(row_scale(x, c), x)); });
    check("l2_normalize", [&]() { return sum_all(mul(l2_normalize_rows(x), x)); });
    check("layer_norm", [&]() { return sum_all(mul(layer_norm(x, gain, bias), x)); });
    check("weighted_sum_rows", [&]() {
        return sum_all(weighted_sum_rows(softmax_lastdim(x), transpose(x)));
    });
}

TEST_CASE("take_diag and masked_fill gradients") {
    Rng rng(19);
    Tensor s = random_tensor({4, 4}, rng);
    s.set_requires_grad(true);
    Tensor mask({4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) mask.data()[i * 4 + i] = 1.0;

    auto report = grad_check(
        [&]() {
            Tensor filled = masked_fill(s, mask, -1e6);
            return sum_all(mul(softmax_lastdim(filled), s));
        },
        {{"s", s}});
    CHECK(report.ok(1e-5));

    auto report2 = grad_check([&]() { return sum_all(mul(take_diag(s), take_diag(s))); },
                              {{"s", s}});
    CHECK(report2.ok(1e-5));
}

TEST_CASE("masked_fill broadcast modes") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor rowmask({3}, {0.0, 1.0, 0.0});
    Tensor out = masked_fill(x, rowmask, 9.0);
    CHECK(out.at(0, 1) == 9.0);
    CHECK(out.at(1, 1) == 9.0);
    CHECK(out.at(0, 0) == 1.0);
    Tensor badmask({5}, 0.0);
    CHECK_THROWS_AS(masked_fill(x, badmask, 0.0), std::invalid_argument);
}

TEST_CASE("embedding lookup gathers rows and scatters gradients") {
    Tensor table({4, 3}, {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3}, true);
    std::vector<std::size_t> idx{2, 0, 2};
    {
        TapeScope scope;
        Tensor rows = embedding_lookup(table, idx);
        REQUIRE(rows.shape() == std::vector<std::size_t>{3, 3});
        CHECK(rows.at(0, 0) == 2.0);
        CHECK(rows.at(1, 0) == 0.0);
        Tensor loss = sum_all(rows);
        backward(loss);
    }
    auto g = table.grad();
    CHECK(g[2 * 3 + 0] == 2.0);  // row 2 referenced twice
    CHECK(g[0 * 3 + 0] == 1.0);
    CHECK(g[1 * 3 + 0] == 0.0);
    CHECK_THROWS_AS(embedding_lookup(table, {7}), std::out_of_range);
}

TEST_CASE("forward values are independent of tape presence") {
    Rng rng(23);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);
    a.set_requires_grad(true);
    auto run = [&]() {
        Tensor y = softmax_lastdim(matmul(add(a, b), transpose(b)));
        return y.data();
    };
    std::vector<double> with_tape, without_tape;
    {
        TapeScope scope;
        with_tape = run();
    }
    {
        NoTapeScope scope;
        without_tape = run();
    }
    CHECK(with_tape == without_tape);  // bitwise
}

TEST_CASE("dropout is identity in eval mode and unbiased in train mode") {
    Rng rng(29);
    Tensor x({1, 4}, {1.0, -2.0, 3.0, 0.5});
    Tensor eval_out = dropout(x, 0.4, rng, false);
    CHECK(eval_out.data() == x.data());

    // expectation over masks equals the input
    const int samples = 100000;
    std::vector<double> mean(4, 0.0);
    for (int s = 0; s < samples; ++s) {
        Tensor out = dropout(x, 0.4, rng, true);
        for (int j = 0; j < 4; ++j) mean[j] += out.at(0, std::size_t(j));
    }
    for (int j = 0; j < 4; ++j) {
        mean[j] /= samples;
        CHECK(std::abs(mean[j] - x.at(0, std::size_t(j))) < 1e-2 * std::max(1.0, std::abs(x.at(0, std::size_t(j)))));
    }

    CHECK_THROWS_AS(dropout(x, 1.0, rng, true), std::invalid_argument);
}

TEST_CASE("dropout gradient follows the sampled mask") {
    Rng rng(31);
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    TapeScope scope;
    Tensor y = dropout(x, 0.5, rng, true);
    Tensor loss = sum_all(y);
    backward(loss);
    for (std::size_t i = 0; i < 6; ++i) {
        if (y.data()[i] == 0.0)
            CHECK(x.grad()[i] == 0.0);
        else
            CHECK(x.grad()[i] == Catch::Approx(2.0));  // 1/(1-0.5)
    }
}

TEST_CASE("bce_with_logits values and gradient") {
    // all-zero logits: ln 2 per element
    Tensor z({2, 2}, 0.0);
    Tensor y({2, 2}, {1, 0, 1, 0});
    CHECK(bce_with_logits(z, y).value() == Catch::Approx(std::log(2.0)).epsilon(1e-12));

    // saturated correct prediction: tiny loss
    Tensor z2({1, 1}, {20.0});
    Tensor y2({1, 1}, {1.0});
    CHECK(bce_with_logits(z2, y2).value() < 1e-8);

    Tensor bad({1, 1}, {0.5});
    CHECK_THROWS_AS(bce_with_logits(z2, bad), std::invalid_argument);

    Rng rng(37);
    Tensor logits = random_tensor({3, 4}, rng, 2.0);
    logits.set_requires_grad(true);
    Tensor labels({3, 4}, 0.0);
    for (auto& v : labels.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto report = grad_check([&]() { return bce_with_logits(logits, labels); },
                             {{"logits", logits}});
    CHECK(report.ok(1e-5));
}

TEST_CASE("stack_rows stacks and routes gradients") {
    Tensor r0({1, 2}, {1.0, 2.0}, true);
    Tensor r1({1, 2}, {3.0, 4.0}, true);
    TapeScope scope;
    Tensor m = stack_rows({r0, r1});
    REQUIRE(m.shape() == std::vector<std::size_t>{2, 2});
    Tensor loss = sum_all(mul(m, m));
    backward(loss);
    CHECK(r0.grad()[0] == Catch::Approx(2.0));
    CHECK(r1.grad()[1] == Catch::Approx(8.0));
}
