#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "carformer/rng.hpp"
#include "carformer/tensor.hpp"

using namespace cf;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool rg = true) {
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (auto& v : t->v) v = rng.normal(0.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("elementwise forward values") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    CHECK(add(a, b).at(1, 1) == 12.0);
    CHECK(sub(a, b).at(0, 0) == -4.0);
    CHECK(mul(a, b).at(0, 1) == 12.0);
    CHECK(scale(a, 0.5).at(1, 0) == 1.5);
}

TEST_CASE("gelu matches the exact erf form") {
    Tensor x = Tensor::from({1}, {0.7});
    CHECK_THAT(gelu(x).item(), Catch::Matchers::WithinAbs(0.5306254434438489, 1e-15));
    Tensor z = Tensor::from({1}, {0.0});
    CHECK(gelu(z).item() == 0.0);
}

TEST_CASE("sigmoid is stable and symmetric") {
    Tensor x = Tensor::from({3}, {-50.0, 0.0, 50.0});
    Tensor y = sigmoid(x);
    CHECK(y->v[0] > 0.0);
    CHECK(y->v[1] == 0.5);
    CHECK_THAT(y->v[0] + y->v[2], Catch::Matchers::WithinAbs(1.0, 1e-15));
}

TEST_CASE("matmul against a hand computation") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 58.0);
    CHECK(c.at(0, 1) == 64.0);
    CHECK(c.at(1, 0) == 139.0);
    CHECK(c.at(1, 1) == 154.0);
}

TEST_CASE("matmul_bt equals matmul with an explicit transpose") {
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng, false);
    Tensor b = random_tensor({5, 4}, rng, false);
    Tensor bt = Tensor::zeros({4, 5});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) bt.at(j, i) = b.at(i, j);
    Tensor c1 = matmul_bt(a, b), c2 = matmul(a, bt);
    for (std::size_t i = 0; i < c1->size(); ++i)
        CHECK_THAT(c1->v[i], Catch::Matchers::WithinAbs(c2->v[i], 1e-14));
}

TEST_CASE("softmax row values") {
    Tensor x = Tensor::from({1, 3}, {1, 2, 3});
    Tensor y = softmax_rows(x);
    CHECK_THAT(y->v[0], Catch::Matchers::WithinAbs(0.09003057317038046, 1e-15));
    CHECK_THAT(y->v[1], Catch::Matchers::WithinAbs(0.24472847105479767, 1e-15));
    CHECK_THAT(y->v[2], Catch::Matchers::WithinAbs(0.6652409557748219, 1e-15));
}

TEST_CASE("masked softmax writes exact zeros and renormalizes") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 5, 5, 5});
    std::vector<std::uint8_t> mask = {1, 1, 0, 0, 0, 0};
    Tensor y = softmax_rows(x, &mask);
    CHECK(y.at(0, 2) == 0.0);
    CHECK_THAT(y.at(0, 0) + y.at(0, 1), Catch::Matchers::WithinAbs(1.0, 1e-15));
    // fully masked row stays identically zero
    CHECK(y.at(1, 0) == 0.0);
    CHECK(y.at(1, 1) == 0.0);
    CHECK(y.at(1, 2) == 0.0);
}

TEST_CASE("masked softmax ignores huge masked logits") {
    Tensor x = Tensor::from({1, 3}, {1.0, 2.0, 1e6});
    std::vector<std::uint8_t> mask = {1, 1, 0};
    Tensor y = softmax_rows(x, &mask);
    Tensor x2 = Tensor::from({1, 2}, {1.0, 2.0});
    Tensor y2 = softmax_rows(x2);
    CHECK(y.at(0, 0) == y2.at(0, 0));
    CHECK(y.at(0, 1) == y2.at(0, 1));
}

TEST_CASE("cross entropy frozen value") {
    Tensor logits = Tensor::from({1, 3}, {1, 2, 3});
    Tensor l = cross_entropy_rows(logits, {2}, {1});
    CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(0.40760596444438013, 1e-13));
    Tensor logits2 = Tensor::from({1, 4}, {0.5, -1.0, 0.25, 2.0});
    Tensor l2 = cross_entropy_rows(logits2, {0}, {1});
    CHECK_THAT(l2.item(), Catch::Matchers::WithinAbs(1.8692789984482534, 1e-13));
}

TEST_CASE("cross entropy excludes masked rows") {
    Tensor logits = Tensor::from({2, 3}, {1, 2, 3, 9, 9, 9});
    Tensor l = cross_entropy_rows(logits, {2, 0}, {1, 0});
    CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(0.40760596444438013, 1e-13));
}

TEST_CASE("bce frozen values") {
    Tensor z = Tensor::from({2}, {0.3, -1.2});
    Tensor l = bce_logits(z, {1.0, 0.0}, {1, 1});
    CHECK_THAT(l.item(),
               Catch::Matchers::WithinAbs(0.554355244468527 + 0.2632824673380312, 1e-13));
}

TEST_CASE("huber branches and boundary") {
    std::vector<std::uint8_t> inc = {1, 1, 1};
    Tensor p = Tensor::from({3}, {0.5, 2.0, 1.0});
    Tensor l = huber_sum(p, {0.0, 0.0, 0.0}, inc, 1.0);
    // 0.125 quadratic, 1.5 linear, boundary |e|=beta takes the linear value 0.5
    CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(0.125 + 1.5 + 0.5, 1e-15));
}

TEST_CASE("rope preserves norms and zero position is identity") {
    Rng rng(3);
    Tensor x = random_tensor({4, 8}, rng, false);
    Tensor y = rope_rotate(x, {0, 1, 5, 100});
    for (int j = 0; j < 8; ++j) CHECK(y.at(0, j) == x.at(0, j));
    for (int r = 0; r < 4; ++r) {
        double nx = 0, ny = 0;
        for (int j = 0; j < 8; ++j) {
            nx += x.at(r, j) * x.at(r, j);
            ny += y.at(r, j) * y.at(r, j);
        }
        CHECK_THAT(ny, Catch::Matchers::WithinRel(nx, 1e-12));
    }
}

TEST_CASE("causal depthwise conv never reads ahead") {
    Tensor x = Tensor::from({4, 1}, {1, 10, 100, 1000});
    Tensor k = Tensor::from({1, 3}, {1, 2, 3});
    Tensor b = Tensor::from({1}, {0.0});
    Tensor y = conv1d_depthwise(x, k, b);
    CHECK(y.at(0, 0) == 3.0);              // 3*1
    CHECK(y.at(1, 0) == 2.0 + 30.0);       // 2*1 + 3*10
    CHECK(y.at(2, 0) == 1.0 + 20.0 + 300.0);
    CHECK(y.at(3, 0) == 10.0 + 200.0 + 3000.0);
}

TEST_CASE("gradient checks for primitive ops") {
    Rng rng(7);
    SECTION("mul chain") {
        Tensor a = random_tensor({3, 3}, rng);
        Tensor b = random_tensor({3, 3}, rng);
        double err = grad_check([&]() { return sum_all(mul(a, b)); }, {a, b});
        CHECK(err < 1e-6);
    }
    SECTION("matmul") {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        double err = grad_check([&]() { return sum_all(mul(matmul(a, b), matmul(a, b))); },
                                {a, b});
        CHECK(err < 1e-6);
    }
    SECTION("linear with bias") {
        Tensor x = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({4, 2}, rng);
        Tensor b = random_tensor({2}, rng);
        double err =
            grad_check([&]() { return sum_all(gelu(linear(x, w, b))); }, {x, w, b});
        CHECK(err < 1e-6);
    }
    SECTION("softmax with mask") {
        Tensor x = random_tensor({3, 3}, rng);
        std::vector<std::uint8_t> mask = {1, 0, 0, 1, 1, 0, 1, 1, 1};
        double err = grad_check(
            [&]() { return sum_all(mul(softmax_rows(x, &mask), softmax_rows(x, &mask))); },
            {x});
        CHECK(err < 1e-6);
    }
    SECTION("rms norm") {
        Tensor x = random_tensor({3, 4}, rng);
        Tensor g = random_tensor({4}, rng);
        double err = grad_check([&]() { return sum_all(gelu(rms_norm(x, g))); }, {x, g});
        CHECK(err < 1e-6);
    }
    SECTION("rope") {
        Tensor x = random_tensor({3, 4}, rng);
        double err = grad_check(
            [&]() {
                Tensor y = rope_rotate(x, {0, 2, 7});
                return sum_all(mul(y, y));
            },
            {x});
        CHECK(err < 1e-6);
    }
    SECTION("conv") {
        Tensor x = random_tensor({5, 2}, rng);
        Tensor k = random_tensor({2, 3}, rng);
        Tensor b = random_tensor({2}, rng);
        double err = grad_check(
            [&]() { return sum_all(gelu(conv1d_depthwise(x, k, b))); }, {x, k, b});
        CHECK(err < 1e-6);
    }
    SECTION("cross entropy") {
        Tensor x = random_tensor({4, 5}, rng);
        double err = grad_check(
            [&]() { return cross_entropy_rows(x, {1, 0, 4, 2}, {1, 1, 0, 1}); }, {x});
        CHECK(err < 1e-6);
    }
    SECTION("bce logits") {
        Tensor x = random_tensor({4}, rng);
        double err = grad_check(
            [&]() { return bce_logits(x, {1, 0, 1, 0}, {1, 1, 1, 0}); }, {x});
        CHECK(err < 1e-6);
    }
    SECTION("bce probs") {
        Tensor x = Tensor::from({3}, {0.2, 0.5, 0.9}, true);
        double err = grad_check([&]() { return bce_probs(x, {1, 0, 1}); }, {x});
        CHECK(err < 1e-6);
    }
    SECTION("huber away from the kink") {
        Tensor x = Tensor::from({3}, {0.3, 2.5, -1.8}, true);
        double err = grad_check(
            [&]() { return huber_sum(x, {0.0, 0.0, 0.0}, {1, 1, 1}, 1.0); }, {x});
        CHECK(err < 1e-6);
    }
    SECTION("row and column slices") {
        Tensor x = random_tensor({5, 6}, rng);
        double err = grad_check(
            [&]() {
                Tensor a = col_slice(x, 1, 3);
                Tensor b = row_block(x, 2, 2);
                return add(sum_all(mul(a, a)), sum_all(mul(b, b)));
            },
            {x});
        CHECK(err < 1e-6);
    }
    SECTION("embedding gather with repeated ids") {
        Tensor t = random_tensor({5, 3}, rng);
        double err = grad_check(
            [&]() {
                Tensor e = rows_embed(t, {0, 2, 2, 4});
                return sum_all(mul(e, e));
            },
            {t});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("backward rejects bad roots") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(x), ShapeError);
    Tensor nanv = Tensor::from({1}, {std::nan("")}, true);
    CHECK_THROWS_AS(backward(nanv), NumericError);
}

TEST_CASE("shared subgraphs accumulate gradients once per use") {
    Tensor x = Tensor::from({1}, {3.0}, true);
    Tensor y = add(x, x);  // dy/dx = 2
    backward(sum_all(y));
    CHECK(x->g[0] == 2.0);
}
