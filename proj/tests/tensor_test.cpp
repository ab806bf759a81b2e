#include "smarties/tensor.hpp"

#include <gtest/gtest.h>

#include "smarties/rng.hpp"

using namespace smarties;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape), requires_grad);
    rng.fill_uniform(t.values(), lo, hi);
    return t;
}

}  // namespace

TEST(Linear, IdentityWeightsPassInputThrough) {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) w.data()[i * 3 + i] = 1.0;
    Tensor b = Tensor::zeros({3});
    Tensor y = linear(x, w, b);
    EXPECT_EQ(y.values(), x.values());
}

TEST(Linear, ZeroInputBroadcastsBias) {
    Tensor x = Tensor::zeros({4, 3});
    Rng rng(11);
    Tensor w = random_tensor({2, 3}, rng, false);
    Tensor b = Tensor::from({2}, {0.5, -1.25});
    Tensor y = linear(x, w, b);
    for (int r = 0; r < 4; ++r) {
        EXPECT_DOUBLE_EQ(y.data()[r * 2 + 0], 0.5);
        EXPECT_DOUBLE_EQ(y.data()[r * 2 + 1], -1.25);
    }
}

TEST(Linear, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({2, 4}, rng);
    Tensor b = random_tensor({2}, rng);
    auto f = [&]() { return sum_all(linear(x, w, b)); };
    double err = grad_check<double>(f, {x, w, b}, 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(LayerNorm, RowsAreStandardizedBeforeAffine) {
    Rng rng(3);
    Tensor x = random_tensor({5, 16}, rng, false, -3.0, 3.0);
    Tensor gamma = Tensor::constant({16}, 1.0);
    Tensor beta = Tensor::zeros({16});
    Tensor y = layer_norm(x, gamma, beta);
    for (int r = 0; r < 5; ++r) {
        double mean = 0, var = 0;
        for (int i = 0; i < 16; ++i) mean += y.data()[r * 16 + i];
        mean /= 16;
        for (int i = 0; i < 16; ++i) {
            double d = y.data()[r * 16 + i] - mean;
            var += d * d;
        }
        var /= 16;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-5);
    }
}

TEST(Softmax, ConstantRowGivesUniformWeights) {
    Tensor x = Tensor::constant({2, 5}, 3.7);
    Tensor y = softmax_rows(x);
    for (size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], 0.2, 1e-15);
}

TEST(Attention, SingleHeadSingleTokenIsValueProjection) {
    // One token: softmax over a 1x1 score matrix is 1, so the output must be
    // w_out * (w_v x + b_v) + b_out, computed by hand here.
    const int d = 3;
    Rng rng(21);
    Tensor x = random_tensor({1, d}, rng, false);
    Tensor w_q = random_tensor({d, d}, rng, false);
    Tensor b_q = random_tensor({d}, rng, false);
    Tensor w_k = random_tensor({d, d}, rng, false);
    Tensor w_v = random_tensor({d, d}, rng, false);
    Tensor b_v = random_tensor({d}, rng, false);
    Tensor w_out = random_tensor({d, d}, rng, false);
    Tensor b_out = random_tensor({d}, rng, false);

    Tensor y = multi_head_attention(x, w_q, b_q, w_k, w_v, b_v, w_out, b_out, 1);

    std::vector<double> v(d, 0.0);
    for (int o = 0; o < d; ++o) {
        v[o] = b_v.data()[o];
        for (int i = 0; i < d; ++i) v[o] += x.data()[i] * w_v.data()[o * d + i];
    }
    for (int o = 0; o < d; ++o) {
        double expect = b_out.data()[o];
        for (int i = 0; i < d; ++i) expect += v[i] * w_out.data()[o * d + i];
        EXPECT_NEAR(y.data()[o], expect, 1e-12);
    }
}

TEST(GradCheck, QuadraticIsExact) {
    Rng rng(5);
    Tensor w = random_tensor({7}, rng);
    auto f = [&]() { return scale(sum_all(mul(w, w)), 0.5); };
    double err = grad_check<double>(f, {w}, 1e-5);
    EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, ConstantFunctionHasZeroGradients) {
    Rng rng(6);
    Tensor w = random_tensor({4}, rng);
    auto f = [&]() { return Tensor::scalar(2.5); };
    double err = grad_check<double>(f, {w}, 1e-5);
    EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, EveryKernelPassesOnRandomShapes) {
    // Composite objective touching every differentiable op, 10 seeds.
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        const int n = 3 + int(rng.uniform_int(3));
        const int d = 4 + 4 * int(rng.uniform_int(2));  // divisible by 4 heads at most
        Tensor x = random_tensor({n, d}, rng);
        Tensor w_q = random_tensor({d, d}, rng, true, -0.5, 0.5);
        Tensor b_q = random_tensor({d}, rng);
        Tensor w_k = random_tensor({d, d}, rng, true, -0.5, 0.5);
        Tensor w_v = random_tensor({d, d}, rng, true, -0.5, 0.5);
        Tensor b_v = random_tensor({d}, rng);
        Tensor w_out = random_tensor({d, d}, rng, true, -0.5, 0.5);
        Tensor b_out = random_tensor({d}, rng);
        Tensor gamma = random_tensor({d}, rng, true, 0.5, 1.5);
        Tensor beta = random_tensor({d}, rng);
        Tensor emb = random_tensor({d}, rng);
        Tensor w2 = random_tensor({2 * d, d}, rng, true, -0.5, 0.5);
        Tensor b2 = random_tensor({2 * d}, rng);

        std::vector<int> keep{0, n - 1};
        auto f = [&]() {
            Tensor h = layer_norm(x, gamma, beta);
            h = add(h, multi_head_attention(h, w_q, b_q, w_k, w_v, b_v, w_out, b_out, 2));
            h = gelu(linear(h, w2, b2));
            Tensor g = gather_rows(h, keep);
            Tensor s = scatter_rows(slice_cols(g, 0, d), keep, n);
            s = add(s, fill_rows(emb, n, {1}));
            Tensor top = concat_rows(s, mul(s, s));
            Tensor sq = sub(top, Tensor::constant(top.shape(), 0.25));
            return scale(sum_all(mean_rows(sq)), 1.0 / double(n));
        };
        double err = grad_check<double>(
            f, {x, w_q, b_q, w_k, w_v, b_v, w_out, b_out, gamma, beta, emb, w2, b2}, 1e-5);
        EXPECT_LT(err, 1e-5) << "seed " << seed;
    }
}

TEST(GradCheck, SoftmaxAndLossKernels) {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 31);
        Tensor logits = random_tensor({5, 4}, rng, true, -2.0, 2.0);
        std::vector<int> labels;
        for (int i = 0; i < 5; ++i) labels.push_back(int(rng.uniform_int(4)));
        auto f_ce = [&]() { return softmax_cross_entropy(logits, labels); };
        EXPECT_LT(grad_check<double>(f_ce, {logits}, 1e-5), 1e-6) << "seed " << seed;

        Tensor z = random_tensor({3, 6}, rng, true, -2.0, 2.0);
        Tensor t = Tensor::zeros({3, 6});
        for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
        auto f_bce = [&]() { return sigmoid_bce(z, t); };
        EXPECT_LT(grad_check<double>(f_bce, {z}, 1e-5), 1e-6) << "seed " << seed;

        Tensor a = random_tensor({4, 3}, rng);
        Tensor b = random_tensor({3, 5}, rng);
        auto f_mm = [&]() { return sum_all(mul(matmul(a, b), matmul(a, b))); };
        EXPECT_LT(grad_check<double>(f_mm, {a, b}, 1e-5), 1e-6) << "seed " << seed;

        Tensor sm = random_tensor({3, 4}, rng);
        auto f_sm = [&]() { return sum_all(mul(softmax_rows(sm), transpose(transpose(sm)))); };
        EXPECT_LT(grad_check<double>(f_sm, {sm}, 1e-5), 1e-6) << "seed " << seed;
    }
}

TEST(Tensor, ShapeMismatchThrows) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    EXPECT_THROW(add(a, b), std::invalid_argument);
    EXPECT_THROW(matmul(a, a), std::invalid_argument);
    EXPECT_THROW(linear(a, Tensor::zeros({2, 4}), Tensor::zeros({2})), std::invalid_argument);
}

TEST(Tensor, NonFiniteValuesAreAnErrorState) {
    Tensor a = Tensor::from({2}, {1.0, std::nan("")});
    EXPECT_FALSE(a.all_finite());
    EXPECT_THROW(require_finite(a, "activations"), InvariantError);
    auto f = [&]() { return sum_all(a); };
    EXPECT_THROW(grad_check<double>(f, {a}, 1e-5), InvariantError);
}

TEST(Tensor, NoGradGuardSuppressesGraph) {
    Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
    NoGradGuard ng;
    Tensor s = sum_all(a);
    EXPECT_FALSE(s.requires_grad());
}

TEST(Tensor, BackwardAccumulatesIntoLeaves) {
    Tensor a = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
    a.zero_grad();
    Tensor loss = sum_all(mul(a, a));
    loss.backward();
    EXPECT_DOUBLE_EQ(a.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
    EXPECT_DOUBLE_EQ(a.grad()[2], 6.0);
    // Second backward on a fresh graph accumulates.
    sum_all(mul(a, a)).backward();
    EXPECT_DOUBLE_EQ(a.grad()[1], 8.0);
}

TEST(Tensor, SinglePrecisionKernelsWork) {
    TensorT<float> x = TensorT<float>::from({2, 2}, {1.f, 2.f, 3.f, 4.f}, true);
    TensorT<float> w = TensorT<float>::from({2, 2}, {1.f, 0.f, 0.f, 1.f});
    TensorT<float> b = TensorT<float>::from({2}, {0.f, 0.f});
    auto y = linear(x, w, b);
    EXPECT_EQ(y.values(), x.values());
    auto f = [&]() { return sum_all(mul(x, x)); };
    // Looser tolerance in single precision.
    EXPECT_LT(grad_check<float>(f, {x}, 1e-2), 1e-3);
}

TEST(Rng, SplitStreamsAreStableAndIndependent) {
    Rng a(42), b(42);
    EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c1 = a.split("mask");
    Rng c2 = b.split("mask");
    EXPECT_EQ(c1.next_u64(), c2.next_u64());
    // Parent draws do not shift child streams.
    Rng p1(9), p2(9);
    p1.next_u64();
    EXPECT_EQ(p1.split(3).next_u64(), p2.split(3).next_u64());
    EXPECT_NE(p1.split(3).next_u64(), p2.split(4).next_u64());
}

TEST(Rng, StateRoundTripsThroughText) {
    Rng r(1234);
    for (int i = 0; i < 17; ++i) r.next_u64();
    std::string state = r.save_state();
    Rng restored = Rng::restore_state(state);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(r.next_u64(), restored.next_u64());
}

TEST(Rng, PermutationIsUniformEnough) {
    Rng r(77);
    std::vector<int> counts(4, 0);
    for (int trial = 0; trial < 4000; ++trial) counts[size_t(r.permutation(4)[0])]++;
    for (int c : counts) {
        EXPECT_GT(c, 800);
        EXPECT_LT(c, 1200);
    }
}
