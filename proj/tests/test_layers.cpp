#include <gtest/gtest.h>

#include <cmath>

#include "pnsamp/gradcheck.hpp"
#include "pnsamp/layers.hpp"

using namespace pnsamp;

namespace {

// Reference convolution: six nested loops, no tricks. Independent of the
// shifted-row implementation it checks.
TensorD conv3d_naive(const TensorD& x, const TensorD& kernel, const TensorD& bias) {
    const std::size_t n = x.shape[0], ic = x.shape[1];
    const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    const std::size_t oc = kernel.shape[0], k = kernel.shape[2];
    const long pad = static_cast<long>(k / 2);
    TensorD out({n, oc, d, h, w});
    for (std::size_t nn = 0; nn < n; ++nn)
        for (std::size_t co = 0; co < oc; ++co)
            for (std::size_t od = 0; od < d; ++od)
                for (std::size_t oh = 0; oh < h; ++oh)
                    for (std::size_t ow = 0; ow < w; ++ow) {
                        double acc = bias[co];
                        for (std::size_t ci = 0; ci < ic; ++ci)
                            for (std::size_t kz = 0; kz < k; ++kz)
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const long iz = long(od) + long(kz) - pad;
                                        const long iy = long(oh) + long(ky) - pad;
                                        const long ix = long(ow) + long(kx) - pad;
                                        if (iz < 0 || iz >= long(d) || iy < 0 || iy >= long(h) ||
                                            ix < 0 || ix >= long(w))
                                            continue;
                                        acc += kernel[(((co * ic + ci) * k + kz) * k + ky) * k + kx] *
                                               x[(((nn * ic + ci) * d + iz) * h + iy) * w + ix];
                                    }
                        out[(((nn * oc + co) * d + od) * h + oh) * w + ow] = acc;
                    }
    return out;
}

// y = sum(node(x)); gradient of x and of every parameter leaf checked
// against central finite differences.
void expect_gradcheck(Graph<double>& g, const std::map<std::string, TensorD>& inputs,
                      const std::vector<std::string>& leaves) {
    for (const auto& leaf : leaves) {
        auto report = finite_diff_check(g, inputs, leaf, "y", 1e-5, 1e-4);
        EXPECT_TRUE(report.pass) << leaf << ": " << report.summary();
    }
}

}  // namespace

// --- conv3d --------------------------------------------------------------

TEST(Conv3d, IdentityKernelPassesThrough) {
    TensorD kernel({1, 1, 1, 1, 1}, std::vector<double>{1.0});
    TensorD bias({1}, 0.0);
    Rng rng(1);
    TensorD x = TensorD::uniform({2, 1, 4, 4, 4}, rng, -1.0, 1.0);
    TensorD y = conv3d(x, kernel, bias);
    ASSERT_EQ(y.shape, x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv3d, ZeroInputGivesBias) {
    Rng rng(2);
    auto p = make_conv3d_params<double>(3, 2, 3, rng);
    p.bias[0] = 0.5;
    p.bias[1] = -1.0;
    p.bias[2] = 2.0;
    TensorD x({1, 2, 4, 4, 4}, 0.0);
    TensorD y = conv3d(x, p);
    for (std::size_t co = 0; co < 3; ++co) {
        for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(y[co * 64 + i], p.bias[co]);
    }
}

TEST(Conv3d, MatchesNaiveReferenceExactly) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(10 + seed);
        TensorD x = TensorD::uniform({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
        auto p = make_conv3d_params<double>(3, 2, 3, rng);
        for (auto& b : p.bias.data) b = rng.uniform(-0.5, 0.5);
        TensorD got = conv3d(x, p);
        TensorD want = conv3d_naive(x, p.kernel, p.bias);
        ASSERT_EQ(got.shape, want.shape);
        for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_EQ(got[i], want[i]);
    }
}

TEST(Conv3d, ChannelMismatchIsAnError) {
    Rng rng(3);
    auto p = make_conv3d_params<double>(2, 3, 3, rng);
    TensorD x({1, 2, 4, 4, 4}, 0.0);
    EXPECT_THROW(conv3d(x, p), ShapeError);
}

TEST(Conv3d, GradientsMatchFiniteDifferences) {
    Rng rng(4);
    Graph<double> g;
    NodeId x = g.input("x", {1, 2, 3, 3, 3}, true);
    auto p = make_conv3d_params<double>(2, 2, 3, rng);
    g.mark_output("y", make_sum(g, make_conv3d(g, x, p, "conv")));
    TensorD in = TensorD::uniform({1, 2, 3, 3, 3}, rng, -1.0, 1.0);
    expect_gradcheck(g, {{"x", in}}, {"x", "conv.kernel", "conv.bias"});
}

// --- batchnorm ------------------------------------------------------------

TEST(BatchNorm, ConstantInputTrainGivesZeros) {
    auto p = make_batchnorm_params<double>(2);
    TensorD x({3, 2, 2, 2, 2}, 7.5);
    TensorD y = batchnorm(x, p, /*train=*/true);
    for (double v : y.data) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    auto p = make_batchnorm_params<double>(2);
    p.gamma[0] = p.gamma[1] = 0.0;
    p.beta[0] = 1.25;
    p.beta[1] = -0.5;
    Rng rng(5);
    TensorD x = TensorD::uniform({2, 2, 2, 2, 2}, rng, -2.0, 2.0);
    TensorD y = batchnorm(x, p, true);
    const std::size_t sp = 8;
    for (std::size_t nn = 0; nn < 2; ++nn)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < sp; ++i)
                EXPECT_EQ(y[(nn * 2 + c) * sp + i], p.beta[c]);
}

TEST(BatchNorm, NormalizesMoments) {
    auto p = make_batchnorm_params<double>(3);
    Rng rng(6);
    TensorD x = TensorD::uniform({4, 3, 4, 4, 4}, rng, -3.0, 5.0);
    TensorD y = batchnorm(x, p, true);
    const std::size_t sp = 64, n = 4, c = 3;
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t nn = 0; nn < n; ++nn)
            for (std::size_t i = 0; i < sp; ++i) {
                const double v = y[(nn * c + ch) * sp + i];
                sum += v;
                sq += v * v;
            }
        const double m = double(n * sp);
        const double mean = sum / m;
        const double var = sq / m - mean * mean;
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_LT(std::abs(var - 1.0), 1e-4);
    }
}

TEST(BatchNorm, BatchOfOneInTrainModeIsAnError) {
    auto p = make_batchnorm_params<double>(1);
    TensorD x({1, 1, 2, 2, 2}, 1.0);
    EXPECT_THROW(batchnorm(x, p, true), ValueError);
    EXPECT_NO_THROW(batchnorm(x, p, false));
}

TEST(BatchNorm, InferUsesRunningStatsOnly) {
    auto p = make_batchnorm_params<double>(1);
    p.running_mean[0] = 2.0;
    p.running_var[0] = 4.0;
    TensorD x({1, 1, 1, 1, 2}, std::vector<double>{2.0, 4.0});
    TensorD y = batchnorm(x, p, false);
    EXPECT_NEAR(y[0], 0.0, 1e-9);
    EXPECT_NEAR(y[1], 2.0 / std::sqrt(4.0 + p.epsilon), 1e-9);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
    Rng rng(7);
    Graph<double> g;
    auto p = make_batchnorm_params<double>(2);
    NodeId x = g.input("x", {3, 2, 2, 2, 2}, true);
    NodeId bn = make_batchnorm(g, x, p, "bn");
    // mul by x keeps the check sensitive to the normalization terms
    g.mark_output("y", make_sum(g, make_mul(g, bn, x)));
    TensorD in = TensorD::uniform({3, 2, 2, 2, 2}, rng, -1.0, 1.0);
    expect_gradcheck(g, {{"x", in}}, {"x", "bn.gamma", "bn.beta"});
}

// --- elu / sigmoid ---------------------------------------------------------

TEST(Elu, ClosedFormValues) {
    TensorD x({3}, std::vector<double>{0.0, 2.0, -1.0});
    TensorD y = elu(x, 1.0);
    EXPECT_DOUBLE_EQ(y[0], 0.0);
    EXPECT_DOUBLE_EQ(y[1], 2.0);
    EXPECT_NEAR(y[2], std::exp(-1.0) - 1.0, 1e-12);  // ~ -0.63212
}

TEST(Elu, ContinuousAtZero) {
    const double h = 1e-9;
    TensorD x({2}, std::vector<double>{-h, h});
    TensorD y = elu(x, 1.0);
    EXPECT_NEAR(y[0], y[1], 1e-8);
}

TEST(Elu, AlphaMustBePositive) {
    TensorD x({1}, 0.0);
    EXPECT_THROW(elu(x, 0.0), ValueError);
}

TEST(Elu, GradientsMatchFiniteDifferences) {
    Rng rng(8);
    Graph<double> g;
    NodeId x = g.input("x", {16}, true);
    g.mark_output("y", make_sum(g, make_elu(g, x, 1.0)));
    // keep samples away from the (smooth but curvature-heavy) origin
    TensorD in({16});
    for (auto& v : in.data) v = rng.uniform(0.3, 2.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    expect_gradcheck(g, {{"x", in}}, {"x"});
}

TEST(Sigmoid, RangeAndMidpoint) {
    // +-34 keeps 1-sigmoid representable in double; beyond that it saturates
    TensorD x({3}, std::vector<double>{0.0, -34.0, 34.0});
    TensorD y = sigmoid(x);
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_GT(y[1], 0.0);
    EXPECT_LT(y[1], 1e-14);
    EXPECT_LT(y[2], 1.0);
    EXPECT_GT(y[2], 1.0 - 1e-14);
}

TEST(Sigmoid, GradientsMatchFiniteDifferences) {
    Rng rng(9);
    Graph<double> g;
    NodeId x = g.input("x", {12}, true);
    g.mark_output("y", make_sum(g, make_sigmoid(g, x)));
    expect_gradcheck(g, {{"x", TensorD::uniform({12}, rng, -2.0, 2.0)}}, {"x"});
}

// --- pooling ----------------------------------------------------------------

TEST(MaxPool3d, ConstantVolumeHalves) {
    TensorD x({1, 1, 4, 4, 4}, 3.25);
    TensorD y = maxpool3d(x);
    EXPECT_EQ(y.shape, (Shape{1, 1, 2, 2, 2}));
    for (double v : y.data) EXPECT_EQ(v, 3.25);
}

TEST(MaxPool3d, SpikeSurvives) {
    TensorD x({1, 1, 4, 4, 4}, 0.0);
    x[(2 * 4 + 3) * 4 + 1] = 9.0;  // voxel (2,3,1) -> pooled (1,1,0)
    TensorD y = maxpool3d(x);
    EXPECT_EQ(y[(1 * 2 + 1) * 2 + 0], 9.0);
    double total = 0;
    for (double v : y.data) total += v;
    EXPECT_EQ(total, 9.0);
}

TEST(MaxPool3d, MatchesBruteForceBlockMax) {
    Rng rng(10);
    TensorD x = TensorD::uniform({2, 2, 8, 8, 8}, rng, -1.0, 1.0);
    TensorD y = maxpool3d(x);
    for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t z = 0; z < 4; ++z)
            for (std::size_t yy = 0; yy < 4; ++yy)
                for (std::size_t xx = 0; xx < 4; ++xx) {
                    double best = -1e300;
                    for (std::size_t dz = 0; dz < 2; ++dz)
                        for (std::size_t dy = 0; dy < 2; ++dy)
                            for (std::size_t dx = 0; dx < 2; ++dx)
                                best = std::max(best, x[j * 512 + ((2 * z + dz) * 8 + 2 * yy + dy) * 8 +
                                                         2 * xx + dx]);
                    EXPECT_EQ(y[j * 64 + (z * 4 + yy) * 4 + xx], best);
                }
    }
}

TEST(MaxPool3d, OddDimsAreAnError) {
    TensorD x({1, 1, 3, 4, 4}, 0.0);
    EXPECT_THROW(maxpool3d(x), ShapeError);
}

TEST(MaxPool3d, TieRoutesToFirstInScanOrder) {
    TensorD x({1, 1, 2, 2, 2}, 1.0);  // all tied
    std::vector<std::size_t> argmax;
    maxpool3d(x, &argmax);
    ASSERT_EQ(argmax.size(), 1u);
    EXPECT_EQ(argmax[0], 0u);
}

TEST(MaxPool3d, GradientsMatchFiniteDifferences) {
    Rng rng(11);
    Graph<double> g;
    NodeId x = g.input("x", {1, 1, 4, 4, 4}, true);
    g.mark_output("y", make_sum(g, make_maxpool3d(g, x)));
    expect_gradcheck(g, {{"x", TensorD::uniform({1, 1, 4, 4, 4}, rng, -1.0, 1.0)}}, {"x"});
}

TEST(MaxPool3d, TiedMaximaAreFlaggedAsSubgradientPoints) {
    Graph<double> g;
    NodeId x = g.input("x", {1, 1, 2, 2, 2}, true);
    g.mark_output("y", make_sum(g, make_maxpool3d(g, x)));
    TensorD in({1, 1, 2, 2, 2}, 1.0);  // exact tie everywhere
    auto report = finite_diff_check(g, {{"x", in}}, "x", "y", 1e-5, 1e-4);
    EXPECT_FALSE(report.nonsmooth.empty());
    // Perturbing to break the ties clears the flags and passes.
    Rng rng(12);
    TensorD jit = in;
    for (auto& v : jit.data) v += rng.uniform(-0.01, 0.01);
    auto report2 = finite_diff_check(g, {{"x", jit}}, "x", "y", 1e-5, 1e-4);
    EXPECT_TRUE(report2.nonsmooth.empty());
    EXPECT_TRUE(report2.pass) << report2.summary();
}

TEST(UpPool3d, RepeatsVoxelIntoBlock) {
    TensorD x({1, 1, 1, 1, 1}, std::vector<double>{4.5});
    TensorD y = uppool3d(x);
    EXPECT_EQ(y.shape, (Shape{1, 1, 2, 2, 2}));
    for (double v : y.data) EXPECT_EQ(v, 4.5);
}

TEST(UpPool3d, MaxPoolOfUpPoolIsIdentity) {
    Rng rng(13);
    TensorD x = TensorD::uniform({2, 3, 4, 4, 4}, rng, -2.0, 2.0);
    TensorD y = maxpool3d(uppool3d(x));
    ASSERT_EQ(y.shape, x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(UpPool3d, GradientSumsBlockOfEight) {
    Graph<double> g;
    NodeId x = g.input("x", {1, 1, 2, 2, 2}, true);
    g.mark_output("y", make_sum(g, make_uppool3d(g, x)));
    g.forward({{"x", TensorD({1, 1, 2, 2, 2}, 1.0)}});
    g.backward({{"y", TensorD::scalar(1.0)}});
    for (double v : g.input_gradient("x")) EXPECT_DOUBLE_EQ(v, 8.0);

    Rng rng(14);
    auto report = finite_diff_check(g, {{"x", TensorD::uniform({1, 1, 2, 2, 2}, rng, -1.0, 1.0)}},
                                    "x", "y", 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << report.summary();
}

// --- dense -------------------------------------------------------------------

TEST(Dense, IdentityWeightPassesThrough) {
    DenseParams<double> p;
    p.weight = TensorD({3, 3}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) p.weight[i * 3 + i] = 1.0;
    p.bias = TensorD({3}, 0.0);
    Rng rng(15);
    TensorD x = TensorD::uniform({2, 3}, rng, -1.0, 1.0);
    TensorD y = dense(x, p);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-15);
}

TEST(Dense, ZeroWeightGivesBiasRows) {
    DenseParams<double> p;
    p.weight = TensorD({2, 3}, 0.0);
    p.bias = TensorD({2}, std::vector<double>{1.5, -2.5});
    TensorD x({4, 3}, 9.0);
    TensorD y = dense(x, p);
    for (std::size_t nn = 0; nn < 4; ++nn) {
        EXPECT_EQ(y[nn * 2 + 0], 1.5);
        EXPECT_EQ(y[nn * 2 + 1], -2.5);
    }
}

TEST(Dense, MatchesHandMatrixMultiply) {
    Rng rng(16);
    TensorD x = TensorD::uniform({2, 3}, rng, -1.0, 1.0);
    DenseParams<double> p;
    p.weight = TensorD::uniform({4, 3}, rng, -1.0, 1.0);
    p.bias = TensorD::uniform({4}, rng, -1.0, 1.0);
    TensorD y = dense(x, p);
    for (std::size_t nn = 0; nn < 2; ++nn)
        for (std::size_t o = 0; o < 4; ++o) {
            double acc = p.bias[o];
            for (std::size_t i = 0; i < 3; ++i) acc += x[nn * 3 + i] * p.weight[o * 3 + i];
            EXPECT_DOUBLE_EQ(y[nn * 4 + o], acc);
        }
}

TEST(Dense, GradientsMatchFiniteDifferences) {
    Rng rng(17);
    Graph<double> g;
    NodeId x = g.input("x", {2, 3}, true);
    auto p = make_dense_params<double>(4, 3, rng);
    g.mark_output("y", make_sum(g, make_dense(g, x, p, "fc")));
    expect_gradcheck(g, {{"x", TensorD::uniform({2, 3}, rng, -1.0, 1.0)}},
                     {"x", "fc.weight", "fc.bias"});
}

// --- softmax -------------------------------------------------------------------

TEST(Softmax, UniformLogitsGiveUniformProbabilities) {
    TensorD x({2, 5}, 0.7);
    TensorD y = softmax(x);
    for (double v : y.data) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(Softmax, ShiftInvariant) {
    Rng rng(18);
    TensorD x = TensorD::uniform({3, 4}, rng, -2.0, 2.0);
    TensorD shifted = x;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t i = 0; i < 4; ++i) shifted[r * 4 + i] += 17.5;
    TensorD a = softmax(x), b = softmax(shifted);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, ClosedForm) {
    TensorD x({1, 2}, std::vector<double>{0.0, std::log(3.0)});
    TensorD y = softmax(x);
    EXPECT_NEAR(y[0], 0.25, 1e-12);
    EXPECT_NEAR(y[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(19);
    TensorD x = TensorD::uniform({6, 5}, rng, -30.0, 30.0);
    TensorD y = softmax(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t i = 0; i < 5; ++i) {
            s += y[r * 5 + i];
            EXPECT_GT(y[r * 5 + i], 0.0);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
    Rng rng(20);
    Graph<double> g;
    NodeId x = g.input("x", {2, 4}, true);
    NodeId sm = make_softmax(g, x);
    // weight the entries so the gradient is not identically zero
    NodeId w = g.input("w", {2, 4});
    g.mark_output("y", make_sum(g, make_mul(g, sm, w)));
    expect_gradcheck(g,
                     {{"x", TensorD::uniform({2, 4}, rng, -1.0, 1.0)},
                      {"w", TensorD::uniform({2, 4}, rng, 0.5, 1.5)}},
                     {"x"});
}

// --- concat / global average pool ------------------------------------------------

TEST(Concat, SingleInputIsIdentity) {
    Rng rng(21);
    TensorD x = TensorD::uniform({2, 3, 2, 2, 2}, rng, -1.0, 1.0);
    TensorD y = concat_channels<double>({&x});
    ASSERT_EQ(y.shape, x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Concat, ChannelCountsAdd) {
    TensorD a({2, 3, 2, 2, 2}, 1.0), b({2, 5, 2, 2, 2}, 2.0);
    TensorD y = concat_channels(a, b);
    EXPECT_EQ(y.shape, (Shape{2, 8, 2, 2, 2}));
    // a's channels first
    EXPECT_EQ(y[0], 1.0);
    EXPECT_EQ(y[3 * 8 + 0], 2.0);  // first b channel of sample 0
}

TEST(Concat, MismatchedSpatialIsAnError) {
    TensorD a({2, 3, 2, 2, 2}, 1.0), b({2, 5, 4, 2, 2}, 2.0);
    EXPECT_THROW(concat_channels(a, b), ShapeError);
}

TEST(Concat, BackwardSplitsGradientExactly) {
    Rng rng(22);
    Graph<double> g;
    NodeId a = g.input("a", {1, 2, 2, 2, 2}, true);
    NodeId b = g.input("b", {1, 3, 2, 2, 2}, true);
    NodeId cat = make_concat_channels<double>(g, {a, b});
    NodeId w = g.input("w", {1, 5, 2, 2, 2});
    g.mark_output("y", make_sum(g, make_mul(g, cat, w)));
    std::map<std::string, TensorD> inputs = {
        {"a", TensorD::uniform({1, 2, 2, 2, 2}, rng, -1.0, 1.0)},
        {"b", TensorD::uniform({1, 3, 2, 2, 2}, rng, -1.0, 1.0)},
        {"w", TensorD::uniform({1, 5, 2, 2, 2}, rng, 0.5, 1.5)}};
    expect_gradcheck(g, inputs, {"a", "b"});
}

TEST(GlobalAvgPool, AveragesSpatialAxes) {
    TensorD x({1, 2, 2, 1, 2}, std::vector<double>{1, 2, 3, 4, 10, 20, 30, 40});
    TensorD y = global_avg_pool(x);
    EXPECT_EQ(y.shape, (Shape{1, 2}));
    EXPECT_DOUBLE_EQ(y[0], 2.5);
    EXPECT_DOUBLE_EQ(y[1], 25.0);
}

TEST(GlobalAvgPool, GradientsMatchFiniteDifferences) {
    Rng rng(23);
    Graph<double> g;
    NodeId x = g.input("x", {2, 2, 2, 2, 2}, true);
    g.mark_output("y", make_sum(g, make_global_avg_pool(g, x)));
    expect_gradcheck(g, {{"x", TensorD::uniform({2, 2, 2, 2, 2}, rng, -1.0, 1.0)}}, {"x"});
}
