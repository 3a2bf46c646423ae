#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duet/grad_check.hpp"
#include "duet/numerics.hpp"
#include "duet/rng.hpp"

using namespace duet;

namespace {

// Independent norm oracle: plain summation over squares, no shared code path.
double norm_oracle(const Tensor& v) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < v.size(); ++i) s += (long double)v[i] * v[i];
    return (double)std::sqrt((long double)s);
}

}  // namespace

TEST_CASE("l2_normalize basics") {
    Tensor v = Tensor::row({3.0, 4.0});
    Tensor u = l2_normalize(v);
    CHECK(u[0] == Catch::Approx(0.6).margin(1e-15));
    CHECK(u[1] == Catch::Approx(0.8).margin(1e-15));

    // idempotence on an already-unit vector
    Tensor uu = l2_normalize(u);
    CHECK(uu[0] == Catch::Approx(u[0]).margin(1e-15));
    CHECK(uu[1] == Catch::Approx(u[1]).margin(1e-15));
}

TEST_CASE("l2_normalize random 16-dim against summation oracle") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> d(16);
        for (auto& x : d) x = rng.next_range(-2.0, 2.0);
        Tensor v = Tensor::row(d);
        Tensor u = l2_normalize(v);
        CHECK(std::abs(norm_oracle(u) - 1.0) < 1e-12);
        // direction preserved
        double c = v[0] / u[0];
        for (std::size_t i = 0; i < v.size(); ++i)
            CHECK(v[i] == Catch::Approx(c * u[i]).margin(1e-12));
    }
}

TEST_CASE("l2_normalize rejects near-zero vectors") {
    CHECK_THROWS_AS(l2_normalize(Tensor::row({0.0, 0.0})), ZeroVectorError);
    CHECK_THROWS_AS(l2_normalize(Tensor::row({1e-13, 0.0})), ZeroVectorError);
}

TEST_CASE("cosine_similarity_matrix identity and antipodal") {
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Tensor s = cosine_similarity_matrix(eye, eye);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(s.at(i, j) == (i == j ? 1.0 : 0.0));

    Tensor neg = eye;
    neg *= -1.0;
    Tensor t = cosine_similarity_matrix(eye, neg);
    for (int i = 0; i < 3; ++i) CHECK(t.at(i, i) == -1.0);
}

TEST_CASE("cosine_similarity_matrix random against scalar-loop oracle") {
    Rng rng(11);
    Tensor a({3, 4}), b({5, 4});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.next_range(-1.0, 1.0);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.next_range(-1.0, 1.0);
    Tensor s = cosine_similarity_matrix(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double num = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < 4; ++k) {
                num += a.at(i, k) * b.at(j, k);
                na += a.at(i, k) * a.at(i, k);
                nb += b.at(j, k) * b.at(j, k);
            }
            double expect = num / (std::sqrt(na) * std::sqrt(nb));
            CHECK(s.at(i, j) == Catch::Approx(expect).margin(1e-12));
            CHECK(s.at(i, j) >= -1.0 - 1e-12);
            CHECK(s.at(i, j) <= 1.0 + 1e-12);
        }

    // transpose symmetry
    Tensor st = cosine_similarity_matrix(b, a);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(s.at(i, j) == st.at(j, i));
}

TEST_CASE("cosine_similarity_matrix rejects zero rows") {
    Tensor a({2, 2}, {1.0, 0.0, 0.0, 0.0});
    Tensor b({1, 2}, {1.0, 1.0});
    CHECK_THROWS_AS(cosine_similarity_matrix(a, b), ZeroVectorError);
}

TEST_CASE("log_sigmoid values and stability") {
    CHECK(log_sigmoid(0.0) == Catch::Approx(-std::log(2.0)).margin(1e-15));
    CHECK(log_sigmoid(-1000.0) == Catch::Approx(-1000.0).margin(1e-9));
    CHECK(std::isfinite(log_sigmoid(1e6)));
    CHECK(std::isfinite(log_sigmoid(-1e6)));

    // tensor form applies elementwise
    Tensor t = log_sigmoid(Tensor::row({0.0, -1000.0, 3.0}));
    CHECK(t[0] == log_sigmoid(0.0));
    CHECK(t[1] == log_sigmoid(-1000.0));
    CHECK(t[2] == log_sigmoid(3.0));

    // high-precision oracle on a grid
    for (int i = -50; i <= 50; ++i) {
        double x = 0.1 * i;
        long double oracle = -std::log1p(std::exp(-(long double)x));
        CHECK(std::abs(log_sigmoid(x) - (double)oracle) < 1e-14);
    }
}

TEST_CASE("log_sigmoid identity log s(x) - log s(-x) = x") {
    Rng rng(3);
    for (int rep = 0; rep < 100; ++rep) {
        double x = rng.next_range(-30.0, 30.0);
        CHECK(std::abs((log_sigmoid(x) - log_sigmoid(-x)) - x) < 1e-12);
    }
}

TEST_CASE("softmax_row uniform, shift invariance, oracle") {
    Tensor u = softmax_row(Tensor::row({0.0, 0.0, 0.0}), 1.0);
    for (int i = 0; i < 3; ++i) CHECK(u[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));

    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) {
        double c = rng.next_range(-100.0, 100.0);
        double t = rng.next_range(0.0, 2.0);
        Tensor base = softmax_row(Tensor::row({0.0, t, 2.0 * t}), 1.0);
        Tensor shifted = softmax_row(Tensor::row({c, c + t, c + 2.0 * t}), 1.0);
        for (int i = 0; i < 3; ++i)
            CHECK(shifted[i] == Catch::Approx(base[i]).margin(1e-12));
    }

    // naive exp/sum oracle at small magnitudes
    std::vector<double> d(8);
    for (auto& x : d) x = rng.next_range(-2.0, 2.0);
    Tensor out = softmax_row(Tensor::row(d), 1.3);
    double z = 0.0;
    for (double x : d) z += std::exp(1.3 * x);
    double total = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(out[i] == Catch::Approx(std::exp(1.3 * d[i]) / z).margin(1e-12));
        total += out[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("softmax_row permutation equivariance") {
    Rng rng(9);
    std::vector<double> d(6);
    for (auto& x : d) x = rng.next_range(-3.0, 3.0);
    Tensor out = softmax_row(Tensor::row(d), 2.0);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<double> pd(6);
    for (std::size_t i = 0; i < 6; ++i) pd[i] = d[perm[i]];
    Tensor pout = softmax_row(Tensor::row(pd), 2.0);
    for (std::size_t i = 0; i < 6; ++i) CHECK(pout[i] == out[perm[i]]);
}

TEST_CASE("finite_diff_check on quadratic and constant") {
    GradFunction square = [](const ParamMap& p) {
        const Tensor& x = p.at("x");
        GradPair g;
        g.value = x[0] * x[0];
        g.grads["x"] = Tensor::row({2.0 * x[0]});
        return g;
    };
    ParamMap p;
    p["x"] = Tensor::row({3.0});
    double err = finite_diff_check(square, p, {.step = 1e-5});
    CHECK(err < 1e-9);

    GradFunction constant = [](const ParamMap&) {
        GradPair g;
        g.value = 42.0;
        return g;  // no gradient entries: implicitly zero
    };
    CHECK(finite_diff_check(constant, p) == 0.0);
}

TEST_CASE("finite_diff_check rejects non-finite functions") {
    GradFunction bad = [](const ParamMap&) {
        GradPair g;
        g.value = std::numeric_limits<double>::quiet_NaN();
        return g;
    };
    ParamMap p;
    p["x"] = Tensor::row({1.0});
    CHECK_THROWS_AS(finite_diff_check(bad, p), NonFiniteError);
}

TEST_CASE("tensor construction rejects NaN and Inf") {
    CHECK_THROWS_AS(Tensor({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}),
                    NonFiniteError);
    CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::infinity()}), NonFiniteError);
}

TEST_CASE("determinism: repeated evaluation is bit-identical") {
    Rng rng(21);
    Tensor a({4, 6}), b({3, 6});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.next_range(-1.0, 1.0);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.next_range(-1.0, 1.0);
    Tensor s1 = cosine_similarity_matrix(a, b);
    Tensor s2 = cosine_similarity_matrix(a, b);
    CHECK(s1 == s2);
    CHECK(softmax_row(a.row_copy(0), 3.0) == softmax_row(a.row_copy(0), 3.0));
}
