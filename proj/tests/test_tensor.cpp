#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctxseq/tensor.hpp"

using namespace ctxseq;

namespace {

Tensor random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(detail::shape_numel(shape)));
    for (double& x : v) x = lo + (hi - lo) * rng.next_double();
    return Tensor::param(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
    Rng rng(7);
    Tensor a = random_param({3, 3}, rng);
    std::vector<double> id(9, 0.0);
    id[0] = id[4] = id[8] = 1.0;
    Tensor eye = Tensor::from({3, 3}, id);
    Tensor zero = Tensor::zeros({3, 3});

    Tensor ai = matmul(a, eye);
    Tensor az = matmul(a, zero);
    for (int i = 0; i < 9; ++i) {
        CHECK(ai.values()[i] == doctest::Approx(a.values()[i]).epsilon(1e-15));
        CHECK(az.values()[i] == 0.0);
    }
}

TEST_CASE("matmul hand-computed product") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 19.0);
    CHECK(c.at(0, 1) == 22.0);
    CHECK(c.at(1, 0) == 43.0);
    CHECK(c.at(1, 1) == 50.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("softmax uniform row") {
    Tensor x = Tensor::zeros({1, 3});
    Tensor y = softmax_rows(x);
    for (int j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> row(5), shifted(5);
        double c = 3.0 * rng.next_double() - 1.5;
        for (int j = 0; j < 5; ++j) {
            row[j] = 4.0 * rng.next_double() - 2.0;
            shifted[j] = row[j] + c;
        }
        Tensor a = softmax_rows(Tensor::from({1, 5}, row));
        Tensor b = softmax_rows(Tensor::from({1, 5}, shifted));
        for (int j = 0; j < 5; ++j)
            CHECK(a.at(0, j) == doctest::Approx(b.at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("softmax direct evaluation of [1,2]") {
    Tensor y = softmax_rows(Tensor::from({1, 2}, {1.0, 2.0}));
    CHECK(y.at(0, 0) == doctest::Approx(0.26894).epsilon(1e-4));
    CHECK(y.at(0, 1) == doctest::Approx(0.73106).epsilon(1e-4));
    CHECK(std::fabs(y.at(0, 0) - 0.26894) < 1e-5);
    CHECK(std::fabs(y.at(0, 1) - 0.73106) < 1e-5);
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 1 + static_cast<int>(rng.next_below(5));
        int m = 2 + static_cast<int>(rng.next_below(8));
        std::vector<double> v(static_cast<size_t>(n) * m);
        for (double& x : v) x = 40.0 * rng.next_double() - 20.0;
        Tensor y = softmax_rows(Tensor::from({n, m}, v));
        for (int i = 0; i < n; ++i) {
            double sum = 0.0;
            for (int j = 0; j < m; ++j) {
                double p = y.at(i, j);
                CHECK(p >= 0.0);
                CHECK(p <= 1.0);
                sum += p;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x = Tensor::from({1, 2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS_AS(softmax_rows(x), NumericError);
    Tensor inf = Tensor::from({1, 2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(softmax_rows(inf), NumericError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Rng rng(3);
    Tensor w = random_param({2, 3}, rng);
    backward(sum_all(w));
    for (double g : w.grad()) CHECK(g == 1.0);
    CHECK(w.grad().size() == w.values().size());
}

TEST_CASE("backward of sum of squares gives 2w") {
    Rng rng(4);
    Tensor w = random_param({4}, rng);
    backward(sum_all(mul(w, w)));
    for (size_t i = 0; i < w.values().size(); ++i)
        CHECK(w.grad()[i] == doctest::Approx(2.0 * w.values()[i]).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar loss") {
    Rng rng(5);
    Tensor w = random_param({2, 2}, rng);
    Tensor y = mul(w, w);
    CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("backward twice on the same graph errors") {
    Rng rng(6);
    Tensor w = random_param({3}, rng);
    Tensor loss = sum_all(mul(w, w));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), ConfigError);
}

TEST_CASE("backward_collect returns grads shaped like parameters") {
    Rng rng(8);
    Tensor a = random_param({2, 3}, rng);
    Tensor b = random_param({3}, rng);
    a.set_name("a");
    b.set_name("b");
    std::vector<std::pair<std::string, Tensor>> params{{"a", a}, {"b", b}};
    Tensor loss = sum_all(add_rows(a, b));
    auto grads = backward_collect(loss, params);
    CHECK(grads.at("a").shape() == a.shape());
    CHECK(grads.at("b").shape() == b.shape());
    for (double g : grads.at("a").values()) CHECK(g == 1.0);
    for (double g : grads.at("b").values()) CHECK(g == 2.0);  // two rows broadcast
}

TEST_CASE("finite_diff_check on a quadratic is exact to roundoff") {
    Rng rng(9);
    Tensor theta = random_param({5}, rng);
    auto f = [&]() { return sum_all(mul(theta, theta)); };
    double err = finite_diff_check(f, theta, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("finite_diff_check validates eps range") {
    Rng rng(10);
    Tensor theta = random_param({2}, rng);
    auto f = [&]() { return sum_all(theta); };
    CHECK_THROWS_AS(finite_diff_check(f, theta, 1e-8), ConfigError);
    CHECK_THROWS_AS(finite_diff_check(f, theta, 1e-2), ConfigError);
}

TEST_CASE("toy two-layer cross-entropy gradient matches finite differences") {
    Rng rng(13);
    Tensor w1 = random_param({4, 6}, rng, -0.8, 0.8);
    Tensor w2 = random_param({6, 5}, rng, -0.8, 0.8);
    Tensor x = Tensor::from({3, 4}, [&] {
        std::vector<double> v(12);
        for (double& e : v) e = 2.0 * rng.next_double() - 1.0;
        return v;
    }());
    std::vector<int> gold{1, 4, 2};
    auto f = [&]() {
        Tensor h = relu(matmul(x, w1));
        Tensor logits = matmul(h, w2);
        return cross_entropy_sum(logits, gold, /*pad_id=*/0);
    };
    CHECK(finite_diff_check(f, w1, 1e-5) < 1e-4);
    CHECK(finite_diff_check(f, w2, 1e-5) < 1e-4);
}

// Every differentiable operation, checked against central differences on
// random small inputs across 20+ seeds.
TEST_CASE("all ops pass the finite-difference property test") {
    for (uint64_t seed = 1; seed <= 22; ++seed) {
        Rng rng(seed * 7919);
        int n = 2 + static_cast<int>(rng.next_below(3));
        int m = 2 + static_cast<int>(rng.next_below(3));

        struct OpCase {
            const char* name;
            std::function<Tensor(Tensor&)> apply;
        };

        Tensor other = random_param({n, m}, rng);
        Tensor bias = random_param({m}, rng);
        Tensor right = random_param({m, n}, rng);
        Tensor gain = random_param({m}, rng, 0.5, 1.5);

        std::vector<OpCase> cases{
            {"add", [&](Tensor& t) { return sum_all(mul(add(t, other), other)); }},
            {"sub", [&](Tensor& t) { return sum_all(mul(sub(t, other), other)); }},
            {"mul", [&](Tensor& t) { return sum_all(mul(mul(t, other), other)); }},
            {"scale", [&](Tensor& t) { return sum_all(mul(scale(t, 1.7), other)); }},
            {"add_rows", [&](Tensor& t) { return sum_all(mul(add_rows(t, bias), other)); }},
            {"relu", [&](Tensor& t) { return sum_all(mul(relu(t), other)); }},
            {"matmul", [&](Tensor& t) { return sum_all(matmul(t, right)); }},
            {"matmul_nt", [&](Tensor& t) { return sum_all(matmul_nt(t, other)); }},
            {"softmax", [&](Tensor& t) { return sum_all(mul(softmax_rows(t), other)); }},
            {"div_rowsum", [&](Tensor& t) {
                 return sum_all(mul(div_rowsum(softmax_rows(t)), other));
             }},
            {"layer_norm", [&](Tensor& t) {
                 return sum_all(mul(layer_norm_rows(t, gain, bias), other));
             }},
            {"concat_rows", [&](Tensor& t) { return sum_all(mul(concat_rows(t, t), concat_rows(other, other))); }},
            {"slice_cols", [&](Tensor& t) { return sum_all(mul(slice_cols(t, 0, 1), slice_cols(other, 0, 1))); }},
            {"slice_rows", [&](Tensor& t) { return sum_all(mul(slice_rows(t, 0, 1), slice_rows(other, 0, 1))); }},
        };

        for (auto& c : cases) {
            Tensor theta = random_param({n, m}, rng);
            if (std::string(c.name) == "relu") {
                // keep inputs away from the kink
                for (double& v : theta.values_mut())
                    v += (v >= 0.0 ? 0.2 : -0.2);
            }
            auto f = [&]() { return c.apply(theta); };
            double err = finite_diff_check(f, theta, 1e-5);
            INFO("op = " << c.name << " seed = " << seed);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("embedding scatter gradient matches finite differences") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 104729);
        int d = 3 + static_cast<int>(rng.next_below(3));
        Tensor table = random_param({5, d}, rng);
        Tensor proj = random_param({4, d}, rng);
        std::vector<int> ids{1, 4, 1, 2};  // repeated id exercises accumulation
        std::vector<int> gold{3, 0, 2, 1};
        auto f = [&]() {
            Tensor e = embedding_rows(table, ids);
            return cross_entropy_sum(matmul_nt(e, proj), gold, -1);
        };
        CHECK(finite_diff_check(f, table, 1e-5) < 1e-4);
        CHECK(finite_diff_check(f, proj, 1e-5) < 1e-4);
    }
}

TEST_CASE("concat_cols gradient routes into each part") {
    Rng rng(31);
    Tensor a = random_param({2, 2}, rng);
    Tensor b = random_param({2, 3}, rng);
    Tensor weights = random_param({2, 5}, rng);
    auto f = [&]() { return sum_all(mul(concat_cols({a, b}), weights)); };
    CHECK(finite_diff_check(f, a, 1e-5) < 1e-4);
    CHECK(finite_diff_check(f, b, 1e-5) < 1e-4);
}

TEST_CASE("masked softmax zeroes hidden keys and keeps rows stochastic") {
    Tensor x = Tensor::from({3, 3}, {0.3, -1.0, 2.0, 0.0, 0.5, -0.2, 1.0, 1.0, 1.0});
    std::vector<uint8_t> vis{1, 0, 0, 1, 1, 0, 1, 1, 1};  // causal pattern
    Tensor y = softmax_rows_masked(x, vis);
    CHECK(y.at(0, 0) == 1.0);
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(0, 2) == 0.0);
    CHECK(y.at(1, 2) == 0.0);
    for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) s += y.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("no-grad guard suppresses graph recording") {
    Rng rng(37);
    Tensor w = random_param({2, 2}, rng);
    NoGradGuard ng;
    Tensor y = sum_all(mul(w, w));
    CHECK_FALSE(y.requires_grad());
}
