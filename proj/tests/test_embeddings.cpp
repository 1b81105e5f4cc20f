#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "carformer/embeddings.hpp"
#include "carformer/rng.hpp"

using namespace cf;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t->v) v = rng.normal(0.0, 1.0);
    return t;
}

double rotated_dot(const std::vector<double>& q, int mq, const std::vector<double>& k,
                   int mk) {
    Tensor tq = Tensor::from({1, static_cast<int>(q.size())}, std::vector<double>(q));
    Tensor tk = Tensor::from({1, static_cast<int>(k.size())}, std::vector<double>(k));
    Tensor rq = rope_rotate(tq, {mq});
    Tensor rk = rope_rotate(tk, {mk});
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += rq->v[i] * rk->v[i];
    return s;
}

}  // namespace

TEST_CASE("rotated dot products depend only on relative position") {
    Rng rng(12);
    const int d = 16;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> q(d), k(d);
        for (auto& v : q) v = rng.normal(0.0, 1.0);
        for (auto& v : k) v = rng.normal(0.0, 1.0);
        int m = static_cast<int>(rng.uniform_int(40));
        int n = static_cast<int>(rng.uniform_int(40));
        int s = static_cast<int>(rng.uniform_int(100));
        double base = rotated_dot(q, m, k, n);
        double shifted = rotated_dot(q, m + s, k, n + s);
        CHECK(std::abs(base - shifted) < 1e-9);
    }
}

TEST_CASE("rope frequencies follow the inverse power law") {
    // pair i rotates at theta0^(-2(i-1)/d); check via a one-hot input
    const int d = 8;
    for (int pair = 0; pair < d / 2; ++pair) {
        std::vector<double> x(d, 0.0);
        x[2 * pair] = 1.0;
        Tensor t = Tensor::from({1, d}, std::move(x));
        Tensor y = rope_rotate(t, {1});
        double angle = std::atan2(y->v[2 * pair + 1], y->v[2 * pair]);
        double expect = std::pow(1e4, -2.0 * pair / d);
        CHECK_THAT(angle, Catch::Matchers::WithinAbs(expect, 1e-12));
    }
}

TEST_CASE("event type embedding selects rows") {
    Tensor table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor e = event_type_embed(table, {2, 0, 2});
    CHECK(e.at(0, 0) == 5.0);
    CHECK(e.at(1, 1) == 2.0);
    CHECK(e.at(2, 1) == 6.0);
}

TEST_CASE("time embedding is affine in scaled time") {
    Tensor w = Tensor::from({1, 3}, {1.0, 2.0, -1.0});
    Tensor b = Tensor::from({3}, {0.5, 0.0, 0.25});
    Tensor e = time_embed({0.0, 2.0}, w, b);
    CHECK(e.at(0, 0) == 0.5);
    CHECK(e.at(1, 0) == 2.5);
    CHECK(e.at(1, 1) == 4.0);
    CHECK(e.at(1, 2) == -1.75);
}

TEST_CASE("mileage embedding floors and clamps") {
    Rng rng(4);
    Tensor table = random_tensor({kMileageTableSize, 4}, rng);
    Tensor e = mileage_embed(table, {0.2, 17.9, 299.5, 5000.0});
    for (int j = 0; j < 4; ++j) {
        CHECK(e.at(0, j) == table.at(0, j));
        CHECK(e.at(1, j) == table.at(17, j));
        CHECK(e.at(2, j) == table.at(299, j));
        CHECK(e.at(3, j) == table.at(299, j));  // clamped to the last row
    }
    CHECK_THROWS_AS(mileage_embed(table, {-1.0}), DataError);
}
