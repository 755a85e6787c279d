#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dis/ops.hpp"
#include "grad_check.hpp"

using namespace dis;
using dis::testing::max_grad_error;
using dis::testing::random_leaf;
using dis::testing::Tensor64;
using dis::testing::weighted_sum;

TEST_CASE("matmul identity cases")
{
    const auto eye = Tensor<float>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const auto v = Tensor<float>({3, 1}, {2, -1, 5});
    CHECK(matmul(eye, v).at({1, 0}) == -1.0f);
    CHECK(matmul(eye, v).shape() == Shape{3, 1});

    const auto a = Tensor<float>({2, 2}, {1, 2, 3, 4});
    const auto id = Tensor<float>({2, 2}, {1, 0, 0, 1});
    const auto out = matmul(a, id);
    CHECK(std::vector<float>(out.values().begin(), out.values().end()) == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("matmul shape mismatch names both shapes")
{
    const auto a = Tensor<float>::zeros({2, 3});
    const auto b = Tensor<float>::zeros({2, 3});
    try {
        (void)matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
    }
}

TEST_CASE("gradient of sum(a*b) w.r.t. a is b transposed broadcast")
{
    Rng rng(1);
    const auto a = random_leaf({2, 3}, rng);
    const auto b = random_leaf({3, 4}, rng);
    backward(sum(matmul(a, b)));
    const auto ga = a.grad();
    for (Index i = 0; i < 2; ++i) {
        for (Index k = 0; k < 3; ++k) {
            double row_sum = 0;
            for (Index j = 0; j < 4; ++j) {
                row_sum += b.at({k, j});
            }
            CHECK(ga.at({i, k}) == doctest::Approx(row_sum).epsilon(1e-12));
        }
    }
    CHECK(max_grad_error([](const auto& in) { return sum(matmul(in[0], in[1])); }, {a, b}) < 1e-4);
}

TEST_CASE("batched matmul broadcasts batch axes")
{
    Rng rng(2);
    const auto a = random_leaf({2, 1, 3, 2}, rng);
    const auto b = random_leaf({3, 2, 4}, rng);
    const auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 3, 3, 4});
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); }, {a, b}) < 1e-4);
}

TEST_CASE("elementwise analytic values")
{
    const auto zero = Tensor<double>::scalar(0.0);
    CHECK(silu(zero).item() == 0.0);
    CHECK(softplus(zero).item() == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(sigmoid(zero).item() == 0.5);
}

TEST_CASE("exp gradient at 1 equals e")
{
    const auto x = Tensor64::parameter({1}, {1.0});
    backward(sum(exp(x)));
    CHECK(x.grad().item() == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
    CHECK(max_grad_error([](const auto& in) { return sum(exp(in[0])); }, {x}) < 1e-4);
}

TEST_CASE("log and exp domain errors")
{
    CHECK_THROWS_AS((void)log(Tensor<double>({2}, {1.0, -1.0})), NumericError);
    CHECK_THROWS_AS((void)log(Tensor<double>({1}, {0.0})), NumericError);
    CHECK_THROWS_AS((void)exp(Tensor<double>({1}, {1000.0})), NumericError);
}

TEST_CASE("elementwise ops pass finite differences")
{
    Rng rng(3);
    const auto x = random_leaf({3, 4}, rng);
    const auto y = random_leaf({3, 4}, rng);
    const auto pos = Tensor64::parameter({3, 4}, [&] {
        std::vector<double> v(12);
        for (auto& e : v) {
            e = 0.5 + rng.uniform();
        }
        return v;
    }());
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(in[0] + in[1]); }, {x, y}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(in[0] - in[1]); }, {x, y}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(in[0] * in[1]); }, {x, y}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(exp(in[0])); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(log(in[0])); }, {pos}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(sigmoid(in[0])); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(silu(in[0])); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(softplus(in[0])); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(square(in[0])); }, {x}) < 1e-4);
}

TEST_CASE("broadcast table for ranks up to three")
{
    // Every accepted pairing of these shapes must broadcast and differentiate.
    const std::vector<Shape> shapes = {{}, {1}, {3}, {2, 1}, {2, 3}, {1, 3}, {4, 2, 3}, {4, 1, 3}, {1, 2, 1}, {4, 1, 1}, {2}};
    Rng rng(4);
    int accepted = 0;
    int rejected = 0;
    for (const auto& sa : shapes) {
        for (const auto& sb : shapes) {
            Shape expected;
            bool ok = true;
            const std::size_t rank = std::max(sa.size(), sb.size());
            for (std::size_t i = 0; i < rank; ++i) {
                const Index da = i < rank - sa.size() ? 1 : sa[i - (rank - sa.size())];
                const Index db = i < rank - sb.size() ? 1 : sb[i - (rank - sb.size())];
                if (da != db && da != 1 && db != 1) {
                    ok = false;
                }
                expected.push_back(std::max(da, db));
            }
            const auto a = random_leaf(sa, rng);
            const auto b = random_leaf(sb, rng);
            if (!ok) {
                CHECK_THROWS_AS((void)(a + b), ShapeError);
                ++rejected;
                continue;
            }
            ++accepted;
            const auto c = a * b;
            CHECK(c.shape() == expected);
            CHECK(max_grad_error([](const auto& in) { return weighted_sum(in[0] * in[1] + in[0]); }, {a, b}) <
                  1e-4);
        }
    }
    CHECK(accepted > 0);
    CHECK(rejected > 0);
}

TEST_CASE("layer_norm statistics and gradient")
{
    const auto gamma = Tensor64::ones({4});
    const auto beta = Tensor64::zeros({4});
    const auto constant = Tensor64::full({2, 4}, 3.0);
    const auto normalized = layer_norm(constant, gamma, beta, 1e-6);
    for (double v : normalized.values()) {
        CHECK(v == 0.0);
    }

    Rng rng(5);
    const auto x = random_leaf({3, 4}, rng, 2.0);
    const auto y = layer_norm(x, gamma, beta, 1e-6);
    for (Index r = 0; r < 3; ++r) {
        double mu = 0;
        double var = 0;
        for (Index k = 0; k < 4; ++k) {
            mu += y.at({r, k}) / 4;
        }
        for (Index k = 0; k < 4; ++k) {
            var += (y.at({r, k}) - mu) * (y.at({r, k}) - mu) / 4;
        }
        CHECK(std::abs(mu) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }

    const auto g = random_leaf({4}, rng);
    const auto b = random_leaf({4}, rng);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-6)); },
                         {x, g, b}) < 1e-4);
    CHECK_THROWS_AS((void)layer_norm(x, Tensor64::ones({3}), beta), ShapeError);
}

TEST_CASE("softmax_last values and gradient")
{
    const auto uniform = softmax_last(Tensor64::zeros({1, 3}));
    for (double v : uniform.values()) {
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    const auto shifted = softmax_last(Tensor64({2}, {1000.0, 1000.0 + std::log(2.0)}));
    CHECK(shifted.values()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(shifted.values()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    Rng rng(6);
    const auto x = random_leaf({2, 5}, rng);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(softmax_last(in[0])); }, {x}) < 1e-4);
}

TEST_CASE("layout ops pass finite differences")
{
    Rng rng(7);
    const auto x = random_leaf({2, 3, 4}, rng);
    const auto y = random_leaf({2, 1, 4}, rng);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(reshape(in[0], {6, 4})); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(slice(in[0], 1, 1, 2)); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(reverse(in[0], 1)); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(transpose_last2(in[0])); }, {x}) < 1e-4);
    CHECK(max_grad_error([](const auto& in) { return weighted_sum(concat<double>({in[1], in[0]}, 1)); }, {x, y}) <
          1e-4);
    const auto table = random_leaf({4, 3}, rng);
    const std::vector<int> ids = {2, 0, 2};
    CHECK(max_grad_error([&](const auto& in) { return weighted_sum(gather_rows<double>(in[0], ids)); }, {table}) <
          1e-4);
    const std::vector<int> bad = {4};
    CHECK_THROWS_AS((void)gather_rows<double>(table, bad), ContractError);
}

TEST_CASE("backward contracts")
{
    const auto w = Tensor64::parameter({1}, {3.0});
    backward(sum(w * w));
    CHECK(w.grad().item() == 6.0);

    ParameterSet<double> params;
    auto used = params.add("used", {2}, {1.0, 2.0});
    params.add("unused", {3}, {1.0, 1.0, 1.0});
    const auto grads = backward(sum(used * used), params);
    for (double g : grads.at("unused").values()) {
        CHECK(g == 0.0);
    }
    CHECK(grads.at("used").values()[1] == 4.0);

    const auto v = Tensor64::parameter({2}, {1.0, 2.0});
    CHECK_THROWS_AS(backward(v * v), ContractError);
}

TEST_CASE("fan-out accumulates gradients additively")
{
    const auto x = Tensor64::parameter({1}, {2.0});
    const auto y = x * x;
    backward(sum(y + y + x));
    CHECK(x.grad().item() == doctest::Approx(4 * 2.0 + 1.0));
}

TEST_CASE("reductions are bit-reproducible")
{
    Rng rng(8);
    std::vector<float> v(10000);
    for (auto& e : v) {
        e = static_cast<float>(rng.normal());
    }
    const Tensor<float> x({10000}, v);
    const float first = sum(x).item();
    for (int i = 0; i < 5; ++i) {
        CHECK(sum(x).item() == first);
    }
}
