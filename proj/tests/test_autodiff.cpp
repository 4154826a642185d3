#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "freqback/autodiff.hpp"
#include "testing.hpp"

using namespace freqback;
using fbtest::gradient_error;
using fbtest::random_tensor;
using fbtest::weighted_sum;

namespace {

constexpr double kTol = 1e-4;

using Inputs = const std::vector<Tensor>&;

}  // namespace

TEST(AutodiffGrad, Elementwise) {
    auto a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(add(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(sub(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(mul(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(scale(v[0], -2.5)); }, {a}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(neg(v[0])); }, {a}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(square(v[0])); }, {a}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(tanh(v[0])); }, {a}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(sigmoid(v[0])); }, {a}), kTol);
}

TEST(AutodiffGrad, KinkedOpsAwayFromZero) {
    // Values bounded away from the kink so central differences stay on one side.
    std::vector<double> v{-0.9, -0.4, 0.3, 0.8, -0.2, 0.6};
    Tensor x({2, 3}, v);
    EXPECT_LT(gradient_error([](Inputs t) { return weighted_sum(relu(t[0])); }, {x}), kTol);
    EXPECT_LT(gradient_error([](Inputs t) { return weighted_sum(freqback::abs(t[0])); }, {x}), kTol);
    Tensor pos({2, 3}, {0.5, 1.2, 2.0, 0.7, 3.1, 0.9});
    EXPECT_LT(gradient_error([](Inputs t) { return weighted_sum(freqback::sqrt(t[0])); }, {pos}), kTol);
}

TEST(AutodiffGrad, MatmulAndBias) {
    auto a = random_tensor({3, 5}, 3), b = random_tensor({5, 2}, 4), bias = random_tensor({2}, 5);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(matmul(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(add_bias(matmul(v[0], v[1]), v[2])); }, {a, b, bias}),
              kTol);
}

TEST(AutodiffGrad, Conv1dVariants) {
    auto x = random_tensor({2, 3, 7}, 6), w = random_tensor({4, 3, 3}, 7), b = random_tensor({4}, 8);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(conv1d(v[0], v[1], v[2])); }, {x, w, b}), kTol);
    EXPECT_LT(gradient_error(
                  [](Inputs v) { return weighted_sum(conv1d(v[0], v[1], v[2], Conv1dOptions{1, 2, 4, 0})); },
                  {x, w, b}),
              kTol);
    EXPECT_LT(gradient_error(
                  [](Inputs v) { return weighted_sum(conv1d(v[0], v[1], v[2], Conv1dOptions{2, 1, 1, 1})); },
                  {x, w, b}),
              kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(conv1d(v[0], v[1])); }, {x, w}), kTol);
}

TEST(AutodiffGrad, SoftmaxAndCrossEntropy) {
    auto z = random_tensor({4, 3}, 9, true, -2.0, 2.0);
    std::vector<int> y{0, 2, 1, 2};
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(softmax(v[0])); }, {z}), kTol);
    EXPECT_LT(gradient_error([&](Inputs v) { return weighted_sum(cross_entropy_per_sample(v[0], y)); }, {z}), kTol);
}

TEST(AutodiffGrad, Reductions) {
    auto x = random_tensor({2, 3, 4}, 10);
    EXPECT_LT(gradient_error([](Inputs v) { return sum(square(v[0])); }, {x}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return mean(square(v[0])); }, {x}), kTol);
    for (std::size_t ax = 0; ax < 3; ++ax) {
        EXPECT_LT(gradient_error([ax](Inputs v) { return weighted_sum(sum(v[0], ax)); }, {x}), kTol) << ax;
        EXPECT_LT(gradient_error([ax](Inputs v) { return weighted_sum(mean(v[0], ax)); }, {x}), kTol) << ax;
    }
}

TEST(AutodiffGrad, ShapeOps) {
    auto x = random_tensor({2, 3, 4}, 11), y = random_tensor({2, 2, 4}, 12);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(reshape(v[0], {6, 4})); }, {x}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(slice(v[0], 1, 1, 3)); }, {x}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(slice(v[0], 2, 0, 2)); }, {x}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(concat({v[0], v[1]}, 1)); }, {x, y}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(transpose(v[0], 0, 2)); }, {x}), kTol);
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(transpose(v[0], 1, 2)); }, {x}), kTol);
    auto m = random_tensor({3, 4}, 13);
    std::vector<int> idx{3, 0, 2};
    EXPECT_LT(gradient_error([](Inputs v) { return weighted_sum(transpose(v[0])); }, {m}), kTol);
    EXPECT_LT(gradient_error([&](Inputs v) { return weighted_sum(gather(v[0], idx)); }, {m}), kTol);
}

TEST(AutodiffGrad, SharedSubexpression) {
    auto x = random_tensor({3}, 14);
    // f = sum(x * x + tanh(x) * x), using x in several places.
    EXPECT_LT(gradient_error([](Inputs v) { return sum(add(mul(v[0], v[0]), mul(tanh(v[0]), v[0]))); }, {x}), kTol);
}

TEST(AutodiffValues, MatmulMatchesTripleLoop) {
    auto a = random_tensor({4, 6}, 15, false), b = random_tensor({6, 3}, 16, false);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) acc += a[i * 6 + k] * b[k * 3 + j];
            EXPECT_NEAR(c[i * 3 + j], acc, 1e-12);
        }
}

TEST(AutodiffValues, Conv1dMatchesDirectSum) {
    auto x = random_tensor({2, 3, 9}, 17, false), w = random_tensor({2, 3, 3}, 18, false), b = random_tensor({2}, 19, false);
    const Conv1dOptions opt{2, 2, 3, 1};
    auto y = conv1d(x, w, b, opt);
    const std::size_t lout = (9 + 3 + 1 - (2 * 2 + 1)) / 2 + 1;
    ASSERT_EQ(y.dim(2), lout);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 2; ++o)
            for (std::size_t j = 0; j < lout; ++j) {
                double acc = b[o];
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t k = 0; k < 3; ++k) {
                        long pos = static_cast<long>(j * 2 + k * 2) - 3;
                        if (pos >= 0 && pos < 9) acc += w[(o * 3 + c) * 3 + k] * x[(n * 3 + c) * 9 + pos];
                    }
                EXPECT_NEAR(y[(n * 2 + o) * lout + j], acc, 1e-12);
            }
}

TEST(AutodiffValues, SoftmaxRowsSumToOneUnderLargeLogits) {
    Tensor z({2, 3}, {1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0});
    auto p = softmax(z);
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p[r * 3] + p[r * 3 + 1] + p[r * 3 + 2], 1.0, 1e-12);
    const double e = std::exp(1.0), s = 1.0 + e + std::exp(-1.0);
    EXPECT_NEAR(p[1], e / s, 1e-12);
}

TEST(AutodiffValues, CrossEntropyClosedForm) {
    Tensor z({1, 3}, {0.0, std::log(2.0), std::log(3.0)});
    std::vector<int> y{2};
    EXPECT_NEAR(cross_entropy_per_sample(z, y)[0], -std::log(0.5), 1e-12);
}

TEST(AutodiffValues, GradientIsLinearInUpstreamSeed) {
    auto x = random_tensor({5}, 20);
    auto grad_of = [&](double k) {
        x.zero_grad();
        backward(scale(sum(tanh(x)), k));
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    auto g1 = grad_of(1.0), g3 = grad_of(3.0);
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g3[i], 3.0 * g1[i], 1e-12);
}

TEST(AutodiffTape, NoGradRecordsNothing) {
    auto x = random_tensor({3}, 21);
    {
        NoGradGuard g;
        auto y = sum(square(x));
        (void)y;
        EXPECT_TRUE(Tape::current().empty());
    }
    auto y = sum(square(x));
    EXPECT_FALSE(Tape::current().empty());
    backward(y);
    EXPECT_TRUE(Tape::current().empty());
}

TEST(AutodiffTape, GradientsAccumulateAcrossBackwardCalls) {
    Tensor x({2}, {1.0, -2.0}, true);
    backward(sum(square(x)));
    backward(sum(square(x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
}

TEST(AutodiffErrors, NonScalarBackward) {
    auto x = random_tensor({3}, 22);
    auto y = square(x);
    EXPECT_THROW(backward(y), ContractError);
    Tape::current().clear();
}

TEST(AutodiffErrors, ShapeMismatch) {
    auto a = random_tensor({2, 3}, 23), b = random_tensor({3, 2}, 24);
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(matmul(a, a), ShapeError);
    EXPECT_THROW(reshape(a, {4}), ShapeError);
    Tape::current().clear();
}

TEST(AutodiffErrors, NonFiniteInput) {
    Tensor a({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}, true);
    Tensor b({2}, {1.0, 1.0}, true);
    EXPECT_THROW(matmul(reshape(a, {1, 2}), reshape(b, {2, 1})), NumericError);
    Tape::current().clear();
}

TEST(AutodiffErrors, SqrtOfNegative) {
    Tensor a({2}, {1.0, -1.0}, true);
    EXPECT_THROW(freqback::sqrt(a), NumericError);
    Tape::current().clear();
}

TEST(AutodiffTensor, DetachCutsTheGraph) {
    auto x = random_tensor({3}, 25);
    auto d = x.detach();
    EXPECT_FALSE(d.requires_grad());
    EXPECT_NE(d.id(), x.id());
    auto y = sum(mul(d, x));
    backward(y);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], d[i]);
}
