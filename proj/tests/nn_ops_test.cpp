#include <gtest/gtest.h>

#include <random>

#include "iriskit/nn/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_ops.hpp"

using namespace iriskit;
using nn::Tensor;
using nn::Var;
using DTensor = nn::TensorT<double>;
using DVar = nn::VarT<double>;
using testsupport::gradcheck;
using testsupport::random_tensor;

namespace {

Tensor rand_f(std::vector<int> shape, std::mt19937& rng, float lo = -1.f, float hi = 1.f) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

double inner_product(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
    return s;
}

} // namespace

TEST(Conv2d, IdentityKernel) {
    Var x = Var::leaf(Tensor({1, 1, 1}, {5.f}));
    Var w = Var::leaf(Tensor({1, 1, 1, 1}, {1.f}));
    Var b = Var::leaf(Tensor({1}, {0.f}));
    Var y = nn::conv2d(x, w, b, 1, 0);
    EXPECT_EQ(y.shape(), (std::vector<int>{1, 1, 1}));
    EXPECT_FLOAT_EQ(y.tensor()[0], 5.f);
}

TEST(Conv2d, AllOnesSumsNineProducts) {
    Var x = Var::leaf(Tensor::full({1, 3, 3}, 1.f));
    Var w = Var::leaf(Tensor::full({1, 1, 3, 3}, 1.f));
    Var b = Var::leaf(Tensor::zeros({1}));
    Var y = nn::conv2d(x, w, b, 1, 0);
    ASSERT_EQ(y.shape(), (std::vector<int>{1, 1, 1}));
    EXPECT_FLOAT_EQ(y.tensor()[0], 9.f);
}

TEST(Conv2d, StemShape224) {
    std::mt19937 rng(7);
    Var x = Var::leaf(rand_f({3, 224, 224}, rng));
    Var w = Var::leaf(rand_f({32, 3, 3, 3}, rng));
    Var y = nn::conv2d(x, w, 2, 1);
    // floor((224 + 2 - 3)/2) + 1 = 112
    EXPECT_EQ(y.shape(), (std::vector<int>{32, 112, 112}));
}

TEST(Conv2d, MatchesBruteForceReference) {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> hw(3, 12), ch(1, 4), ks(1, 3), ss(1, 3), ps(0, 2);
        const int h = hw(rng), w = hw(rng), ci = ch(rng), co = ch(rng);
        int k = ks(rng), s = ss(rng), p = ps(rng);
        if (k > std::min(h, w) + 2 * p) k = 1;
        Tensor x = rand_f({ci, h, w}, rng);
        Tensor wt = rand_f({co, ci, k, k}, rng);
        Tensor bt = rand_f({co}, rng);
        Var y = nn::conv2d(Var::leaf(x), Var::leaf(wt), Var::leaf(bt), s, p);
        Tensor ref = testsupport::reference_conv2d(x, wt, bt.values(), s, p);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_NEAR(y.tensor()[i], ref[i], 1e-4f) << "trial " << trial << " index " << i;
        }
    }
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
    Var x = Var::leaf(Tensor::zeros({3, 8, 8}));
    Var w = Var::leaf(Tensor::zeros({4, 2, 3, 3}));
    try {
        nn::conv2d(x, w, 1, 1);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(3,8,8)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(4,2,3,3)"), std::string::npos) << msg;
    }
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
    Var x = Var::leaf(Tensor::zeros({1, 2, 2}));
    Var w = Var::leaf(Tensor::zeros({1, 1, 5, 5}));
    EXPECT_THROW(nn::conv2d(x, w, 1, 0), DimensionError);
}

TEST(DepthwiseConv2d, PerChannelScalarKernels) {
    // channel 0 all 1s * kernel [2] -> all 2s; channel 1 all 2s * [3] -> all 6s
    Tensor x({2, 2, 2}, {1, 1, 1, 1, 2, 2, 2, 2});
    Tensor w({2, 1, 1, 1}, {2.f, 3.f});
    Var y = nn::depthwise_conv2d(Var::leaf(x), Var::leaf(w), 1, 0);
    ASSERT_EQ(y.shape(), (std::vector<int>{2, 2, 2}));
    for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.tensor()[i], 2.f);
    for (int i = 4; i < 8; ++i) EXPECT_FLOAT_EQ(y.tensor()[i], 6.f);
}

TEST(DepthwiseConv2d, IdentityKernels) {
    std::mt19937 rng(3);
    Tensor x = rand_f({3, 5, 5}, rng);
    Tensor w = Tensor::zeros({3, 1, 3, 3});
    for (int c = 0; c < 3; ++c) w[(c * 3 + 1) * 3 + 1] = 1.f; // center tap
    Var y = nn::depthwise_conv2d(Var::leaf(x), Var::leaf(w), 1, 1);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(y.tensor()[i], x[i]);
}

TEST(DepthwiseConv2d, StridedShape) {
    std::mt19937 rng(4);
    Var y = nn::depthwise_conv2d(Var::leaf(rand_f({3, 8, 8}, rng)),
                                 Var::leaf(rand_f({3, 1, 3, 3}, rng)), 2, 1);
    EXPECT_EQ(y.shape(), (std::vector<int>{3, 4, 4}));
}

TEST(DepthwiseConv2d, MatchesBruteForceReference) {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = rand_f({4, 9, 7}, rng);
        Tensor w = rand_f({4, 1, 3, 3}, rng);
        Var y = nn::depthwise_conv2d(Var::leaf(x), Var::leaf(w), 2, 1);
        Tensor ref = testsupport::reference_depthwise(x, w, 2, 1);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.tensor()[i], ref[i], 1e-4f);
    }
}

TEST(DepthwiseConv2d, ChannelMismatchRejected) {
    EXPECT_THROW(nn::depthwise_conv2d(Var::leaf(Tensor::zeros({3, 4, 4})),
                                      Var::leaf(Tensor::zeros({2, 1, 3, 3})), 1, 1),
                 DimensionError);
}

TEST(ConvTranspose2d, ScalarCase) {
    Var x = Var::leaf(Tensor({1, 1, 1}, {3.f}));
    Var w = Var::leaf(Tensor({1, 1, 1, 1}, {-2.f}));
    Var y = nn::conv_transpose2d(x, w, 1, 0);
    ASSERT_EQ(y.shape(), (std::vector<int>{1, 1, 1}));
    EXPECT_FLOAT_EQ(y.tensor()[0], -6.f);
}

TEST(ConvTranspose2d, DoublesSpatialSize) {
    std::mt19937 rng(6);
    Var x = Var::leaf(rand_f({16, 112, 112}, rng));
    Var w = Var::leaf(rand_f({16, 8, 4, 4}, rng));
    Var y = nn::conv_transpose2d(x, w, 2, 1);
    // (112-1)*2 - 2 + 4 = 224
    EXPECT_EQ(y.shape(), (std::vector<int>{8, 224, 224}));
}

TEST(ConvTranspose2d, AdjointOfConv2d) {
    std::mt19937 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const int s = 1 + trial % 2, p = trial % 2;
        Tensor w = rand_f({2, 3, 3, 3}, rng); // conv: 3ch in -> 2ch out
        Tensor u = rand_f({3, 4 + trial % 3, 4 + trial % 2}, rng);
        Var yu = nn::conv2d(Var::leaf(u), Var::leaf(w), s, p);
        Tensor v = rand_f(yu.shape(), rng);
        Var xv = nn::conv_transpose2d(Var::leaf(v), Var::leaf(w), s, p);
        ASSERT_EQ(xv.shape(), u.shape());
        const double lhs = inner_product(yu.tensor(), v);
        const double rhs = inner_product(u, xv.tensor());
        EXPECT_NEAR(lhs, rhs, 1e-6 * std::max(1.0, std::abs(lhs)));
    }
}

TEST(ConvTranspose2d, MatchesBruteForceReference) {
    std::mt19937 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        const int s = 1 + trial % 3, p = trial % 2, op = trial % std::max(1, s);
        Tensor x = rand_f({3, 5, 6}, rng);
        Tensor w = rand_f({3, 2, 3, 3}, rng);
        Var y = nn::conv_transpose2d(Var::leaf(x), Var::leaf(w), s, p, op);
        Tensor ref = testsupport::reference_conv_transpose2d(x, w, s, p, op);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.tensor()[i], ref[i], 1e-4f);
    }
}

TEST(ConvTranspose2d, NegativeOutputSizeRejected) {
    Var x = Var::leaf(Tensor::zeros({1, 1, 1}));
    Var w = Var::leaf(Tensor::zeros({1, 1, 1, 1}));
    EXPECT_THROW(nn::conv_transpose2d(x, w, 1, 2), DimensionError);
}

TEST(Relu6, ClampsBothEnds) {
    Var x = Var::leaf(Tensor({3}, {-1.f, 3.f, 7.f}));
    Var y = nn::relu6(x);
    EXPECT_FLOAT_EQ(y.tensor()[0], 0.f);
    EXPECT_FLOAT_EQ(y.tensor()[1], 3.f);
    EXPECT_FLOAT_EQ(y.tensor()[2], 6.f);
}

TEST(Relu6, IdempotentBitExact) {
    std::mt19937 rng(10);
    Tensor x = rand_f({64}, rng, -10.f, 10.f);
    Var once = nn::relu6(Var::leaf(x));
    Var twice = nn::relu6(once);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(twice.tensor()[i], once.tensor()[i]);
    }
}

TEST(Batchnorm, InferIdentityParameters) {
    std::mt19937 rng(12);
    Tensor x = rand_f({2, 4, 4}, rng);
    Var gamma = Var::leaf(Tensor::full({2}, 1.f));
    Var beta = Var::leaf(Tensor::zeros({2}));
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::full({2}, 1.f);
    nn::BatchNormOptions<float> opts; // infer
    Var y = nn::batchnorm(Var::leaf(x), gamma, beta, rm, rv, opts);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.tensor()[i], x[i], 1e-4f);
}

TEST(Batchnorm, InferAffine) {
    Tensor x = Tensor::full({1, 2, 2}, 0.5f);
    Var gamma = Var::leaf(Tensor({1}, {2.f}));
    Var beta = Var::leaf(Tensor({1}, {1.f}));
    Tensor rm = Tensor::zeros({1});
    Tensor rv = Tensor::full({1}, 1.f);
    nn::BatchNormOptions<float> opts;
    Var y = nn::batchnorm(Var::leaf(x), gamma, beta, rm, rv, opts);
    EXPECT_NEAR(y.tensor()[0], 2.0f, 1e-4f); // 2 * 0.5 + 1
}

TEST(Batchnorm, TrainConstantChannelGivesBeta) {
    Tensor x = Tensor::full({1, 3, 3}, 4.2f);
    Var gamma = Var::leaf(Tensor({1}, {1.5f}));
    Var beta = Var::leaf(Tensor({1}, {-0.25f}));
    Tensor rm = Tensor::zeros({1});
    Tensor rv = Tensor::full({1}, 1.f);
    nn::BatchNormOptions<float> opts;
    opts.training = true;
    Var y = nn::batchnorm(Var::leaf(x), gamma, beta, rm, rv, opts);
    for (std::size_t i = 0; i < y.tensor().size(); ++i) {
        EXPECT_NEAR(y.tensor()[i], -0.25f, 1e-5f);
    }
    // running statistics moved toward the batch values with momentum 0.1
    EXPECT_NEAR(rm[0], 0.1f * 4.2f, 1e-5f);
}

TEST(Batchnorm, ParamLengthMismatchRejected) {
    Tensor x = Tensor::zeros({3, 2, 2});
    Var gamma = Var::leaf(Tensor::full({2}, 1.f));
    Var beta = Var::leaf(Tensor::zeros({3}));
    Tensor rm = Tensor::zeros({3});
    Tensor rv = Tensor::full({3}, 1.f);
    nn::BatchNormOptions<float> opts;
    EXPECT_THROW(nn::batchnorm(Var::leaf(x), gamma, beta, rm, rv, opts), DimensionError);
}

// Output-shape formulas over random valid configurations.
TEST(ShapeFormulas, PropertyOverRandomConfigs) {
    std::mt19937 rng(13);
    std::uniform_int_distribution<int> hw(1, 20), ks(1, 5), ss(1, 3), ps(0, 3);
    for (int trial = 0; trial < 200; ++trial) {
        const int h = hw(rng), w = hw(rng), k = ks(rng), s = ss(rng), p = ps(rng);
        if (k > h + 2 * p || k > w + 2 * p) continue;
        Tensor x = rand_f({2, h, w}, rng);
        Tensor wt = rand_f({3, 2, k, k}, rng);
        Var y = nn::conv2d(Var::leaf(x), Var::leaf(wt), s, p);
        EXPECT_EQ(y.tensor().dim(1), (h + 2 * p - k) / s + 1);
        EXPECT_EQ(y.tensor().dim(2), (w + 2 * p - k) / s + 1);
        EXPECT_TRUE(y.tensor().all_finite());

        const int out_pad = (trial % s);
        const int th = (h - 1) * s - 2 * p + k + out_pad;
        const int tw = (w - 1) * s - 2 * p + k + out_pad;
        if (th <= 0 || tw <= 0) continue;
        Tensor wt2 = rand_f({2, 3, k, k}, rng);
        Var z = nn::conv_transpose2d(Var::leaf(x), Var::leaf(wt2), s, p, out_pad);
        EXPECT_EQ(z.tensor().dim(1), th);
        EXPECT_EQ(z.tensor().dim(2), tw);
        EXPECT_TRUE(z.tensor().all_finite());
    }
}

TEST(Determinism, RepeatedForwardBitIdentical) {
    std::mt19937 rng(14);
    Tensor x = rand_f({3, 9, 9}, rng);
    Tensor w = rand_f({4, 3, 3, 3}, rng);
    Var a = nn::conv2d(Var::leaf(x), Var::leaf(w), 2, 1);
    Var b = nn::conv2d(Var::leaf(x), Var::leaf(w), 2, 1);
    ASSERT_EQ(a.tensor().size(), b.tensor().size());
    for (std::size_t i = 0; i < a.tensor().size(); ++i) {
        EXPECT_EQ(a.tensor()[i], b.tensor()[i]);
    }
}

// ---------------------------------------------------------------------------
// Gradient checks: analytic vs central finite differences (double precision)
// ---------------------------------------------------------------------------

namespace {

// Loss: sum(output * fixed random coefficients), keeps every gradient O(1).
DVar weighted_sum(const DVar& y, const DTensor& coeff) {
    return nn::sum(nn::mul(y, DVar::leaf(coeff)));
}

} // namespace

TEST(GradCheck, Conv2d) {
    std::mt19937 rng(21);
    for (int i = 0; i < 5; ++i) {
        DVar x = DVar::leaf(random_tensor({2, 5, 5}, rng), true);
        DVar w = DVar::leaf(random_tensor({3, 2, 3, 3}, rng), true);
        DVar b = DVar::leaf(random_tensor({3}, rng), true);
        const int s = 1 + i % 2;
        DTensor coeff = random_tensor({3, (5 + 2 - 3) / s + 1, (5 + 2 - 3) / s + 1}, rng);
        auto res = gradcheck({x, w, b}, [&]() {
            return weighted_sum(nn::conv2d(x, w, b, s, 1), coeff);
        });
        EXPECT_TRUE(res.ok) << "rel " << res.max_rel_error;
    }
}

TEST(GradCheck, DepthwiseConv2d) {
    std::mt19937 rng(22);
    for (int i = 0; i < 5; ++i) {
        DVar x = DVar::leaf(random_tensor({3, 5, 5}, rng), true);
        DVar w = DVar::leaf(random_tensor({3, 1, 3, 3}, rng), true);
        const int s = 1 + i % 2;
        const int o = (5 + 2 - 3) / s + 1;
        DTensor coeff = random_tensor({3, o, o}, rng);
        auto res = gradcheck({x, w}, [&]() {
            return weighted_sum(nn::depthwise_conv2d(x, w, s, 1), coeff);
        });
        EXPECT_TRUE(res.ok) << "rel " << res.max_rel_error;
    }
}

TEST(GradCheck, ConvTranspose2d) {
    std::mt19937 rng(23);
    for (int i = 0; i < 5; ++i) {
        DVar x = DVar::leaf(random_tensor({2, 4, 4}, rng), true);
        DVar w = DVar::leaf(random_tensor({2, 3, 4, 4}, rng), true);
        DVar b = DVar::leaf(random_tensor({3}, rng), true);
        DTensor coeff = random_tensor({3, 8, 8}, rng);
        auto res = gradcheck({x, w, b}, [&]() {
            return weighted_sum(nn::conv_transpose2d(x, w, b, 2, 1), coeff);
        });
        EXPECT_TRUE(res.ok) << "rel " << res.max_rel_error;
    }
}

TEST(GradCheck, Relu6) {
    std::mt19937 rng(24);
    for (int i = 0; i < 5; ++i) {
        // keep samples away from the kinks at 0 and 6
        DTensor xt = random_tensor({40}, rng, -4.0, 10.0);
        for (auto& v : xt.values()) {
            if (std::abs(v) < 0.2) v += 0.5;
            if (std::abs(v - 6.0) < 0.2) v += 0.5;
        }
        DVar x = DVar::leaf(xt, true);
        DTensor coeff = random_tensor({40}, rng);
        auto res = gradcheck({x}, [&]() { return weighted_sum(nn::relu6(x), coeff); });
        EXPECT_TRUE(res.ok) << "rel " << res.max_rel_error;
    }
}

TEST(GradCheck, Sigmoid) {
    std::mt19937 rng(25);
    for (int i = 0; i < 5; ++i) {
        DVar x = DVar::leaf(random_tensor({30}, rng, -3.0, 3.0), true);
        DTensor coeff = random_tensor({30}, rng);
        auto res = gradcheck({x}, [&]() { return weighted_sum(nn::sigmoid(x), coeff); });
        EXPECT_TRUE(res.ok) << "rel " << res.max_rel_error;
    }
}

TEST(GradCheck, BatchnormTrainAndInfer) {
    std::mt19937 rng(26);
    for (int i = 0; i < 5; ++i) {
        DVar x = DVar::leaf(random_tensor({2, 4, 4}, rng), true);
        DVar gamma = DVar::leaf(random_tensor({2}, rng, 0.5, 1.5), true);
        DVar beta = DVar::leaf(random_tensor({2}, rng), true);
        DTensor coeff = random_tensor({2, 4, 4}, rng);
        const bool training = i % 2 == 0;
        auto res = gradcheck({x, gamma, beta}, [&]() {
            // fresh buffers per evaluation; train mode mutates them
            DTensor rm = DTensor::zeros({2});
            DTensor rv = DTensor::full({2}, 1.0);
            nn::BatchNormOptions<double> opts;
            opts.training = training;
            return weighted_sum(nn::batchnorm(x, gamma, beta, rm, rv, opts), coeff);
        });
        EXPECT_TRUE(res.ok) << "train=" << training << " rel " << res.max_rel_error;
    }
}

TEST(GradCheck, ElementwiseAndReduction) {
    std::mt19937 rng(27);
    for (int i = 0; i < 5; ++i) {
        DVar a = DVar::leaf(random_tensor({12}, rng, 0.5, 2.0), true);
        DVar b = DVar::leaf(random_tensor({12}, rng, 0.5, 2.0), true);
        DTensor coeff = random_tensor({12}, rng);
        auto res = gradcheck({a, b}, [&]() {
            DVar m = nn::mul(nn::add(a, b), nn::div(a, b));
            DVar s = nn::sub(m, nn::mul_scalar(b, 0.25));
            return weighted_sum(nn::rsub_scalar(1.0, nn::add_scalar(s, 0.5)), coeff);
        });
        EXPECT_TRUE(res.ok) << "rel " << res.max_rel_error;
    }
}
