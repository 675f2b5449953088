#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "fedlfd/checkpoint.hpp"
#include "fedlfd/tensor.hpp"
#include "oracles.hpp"

using namespace fedlfd;

namespace {

MlpModel linear_one_param(double w) {
    MlpArch arch{{1, 1}, Activation::identity, false};
    return MlpModel(arch, ParamVector(std::vector<double>{w}, arch.shape()));
}

}  // namespace

TEST(ParamVector, RejectsShapeMismatch) {
    EXPECT_THROW(ParamVector({1.0, 2.0}, {LayerShape{"a", 3, 1}}), ShapeError);
    EXPECT_NO_THROW(ParamVector({1.0, 2.0, 3.0}, {LayerShape{"a", 1, 2}, LayerShape{"b", 1, 1}}));
}

TEST(ParamVector, LayerRange) {
    MlpArch arch{{2, 3, 1}, Activation::tanh, true};
    auto m = MlpModel::initialized(arch, 1);
    EXPECT_EQ(m.params.size(), 2u * 3 + 3 + 3 * 1 + 1);
    EXPECT_EQ(m.params.layer_range("b0"), (std::pair<std::size_t, std::size_t>{6, 9}));
    EXPECT_EQ(m.params.layer_range("W1"), (std::pair<std::size_t, std::size_t>{9, 12}));
    EXPECT_THROW(m.params.layer_range("W9"), NotFoundError);
}

TEST(Init, ScaledUniformAndSeeded) {
    MlpArch arch{{4, 16, 2}, Activation::tanh, true};
    auto a = MlpModel::initialized(arch, 3);
    auto b = MlpModel::initialized(arch, 3);
    auto c = MlpModel::initialized(arch, 4);
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, c.params);
    const auto [w0b, w0e] = a.params.layer_range("W0");
    for (auto i = w0b; i < w0e; ++i) EXPECT_LE(std::abs(a.params[i]), 0.5 / std::sqrt(4.0));
    const auto [w1b, w1e] = a.params.layer_range("W1");
    for (auto i = w1b; i < w1e; ++i) EXPECT_LE(std::abs(a.params[i]), 0.5 / std::sqrt(16.0));
}

TEST(Forward, ZeroWeightsGiveZeroOutput) {
    MlpArch arch{{3, 5, 2}, Activation::tanh, true};
    MlpModel m(arch, ParamVector(std::vector<double>(arch.param_count(), 0.0), arch.shape()));
    const std::vector<double> x{0.3, -1.2, 4.0};
    EXPECT_EQ(forward(m, x), (std::vector<double>{0.0, 0.0}));
}

TEST(Forward, IdentityOneLayerHandComputed) {
    MlpArch arch{{1, 1}, Activation::identity, true};
    MlpModel m(arch, ParamVector({2.0, 1.0}, arch.shape()));
    const std::vector<double> x{3.0};
    EXPECT_EQ(forward(m, x), std::vector<double>{7.0});
}

TEST(Forward, InputShapeError) {
    MlpArch arch{{2, 1}, Activation::identity, true};
    auto m = MlpModel::initialized(arch, 1);
    const std::vector<double> x{1.0, 2.0, 3.0};
    EXPECT_THROW(forward(m, x), ShapeError);
}

// layer_sizes [2,3,1], seed 7, input [1,0]. The frozen value was produced once by
// the independent matrix-form reference below and is pinned here.
TEST(Forward, SeededRegressionFixture) {
    MlpArch arch{{2, 3, 1}, Activation::tanh, true};
    const auto m = MlpModel::initialized(arch, 7);
    const std::vector<double> x{1.0, 0.0};
    const double got = forward(m, x)[0];
    const double reference = oracle::reference_forward(m, x)[0];
    EXPECT_NEAR(got, reference, 1e-15);
    EXPECT_NEAR(got, oracle::kSeed7Fixture, 1e-12);
}

TEST(Forward, PureAndBitIdentical) {
    MlpArch arch{{3, 8, 2}, Activation::relu, true};
    const auto m = MlpModel::initialized(arch, 11);
    const std::vector<double> x{0.1, 0.2, -0.3};
    EXPECT_EQ(forward(m, x), forward(m, x));
    std::vector<Sample> batch{{x, {0.5, 0.5}}, {{1, 1, 1}, {0, 1}}};
    const auto a = loss_and_grad(m, batch, LossKind::mse);
    const auto b = loss_and_grad(m, batch, LossKind::mse);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grad, b.grad);
}

TEST(LossAndGrad, PerfectFitGivesZero) {
    MlpArch arch{{1, 1}, Activation::identity, true};
    MlpModel m(arch, ParamVector({2.0, 1.0}, arch.shape()));
    std::vector<Sample> batch{{{3.0}, {7.0}}, {{-1.0}, {-1.0}}};
    const auto lg = loss_and_grad(m, batch, LossKind::mse);
    EXPECT_EQ(lg.loss, 0.0);
    for (double g : lg.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(LossAndGrad, LinearOneParamHandComputed) {
    const auto m = linear_one_param(0.0);
    std::vector<Sample> batch{{{1.0}, {2.0}}};
    const auto lg = loss_and_grad(m, batch, LossKind::mse);
    EXPECT_EQ(lg.loss, 4.0);
    ASSERT_EQ(lg.grad.size(), 1u);
    EXPECT_EQ(lg.grad[0], -4.0);
}

TEST(LossAndGrad, EmptyBatchIsUsageError) {
    const auto m = linear_one_param(0.0);
    std::vector<Sample> none;
    EXPECT_THROW(loss_and_grad(m, none, LossKind::mse), UsageError);
}

TEST(LossAndGrad, TargetValidation) {
    MlpArch arch{{2, 3}, Activation::identity, true};
    const auto m = MlpModel::initialized(arch, 1);
    std::vector<Sample> bad_class{{{1.0, 0.0}, {3.0}}};
    EXPECT_THROW(loss_and_grad(m, bad_class, LossKind::cross_entropy), ShapeError);
    std::vector<Sample> frac_class{{{1.0, 0.0}, {0.5}}};
    EXPECT_THROW(loss_and_grad(m, frac_class, LossKind::cross_entropy), ShapeError);
    std::vector<Sample> bad_dim{{{1.0, 0.0}, {1.0, 2.0}}};
    EXPECT_THROW(loss_and_grad(m, bad_dim, LossKind::mse), ShapeError);
}

TEST(LossAndGrad, NonFiniteReportsLayer) {
    MlpArch arch{{1, 2, 1}, Activation::relu, true};
    MlpModel m(arch, ParamVector({1e308, 1e308, 0.0, 0.0, 1e308, 1e308, 0.0}, arch.shape()));
    std::vector<Sample> batch{{{10.0}, {0.0}}};
    try {
        loss_and_grad(m, batch, LossKind::mse);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer"), std::string::npos);
    }
}

TEST(LossAndGrad, WeightDecayAddsL2Term) {
    const auto m = linear_one_param(3.0);
    std::vector<Sample> batch{{{1.0}, {3.0}}};
    const auto lg = loss_and_grad(m, batch, LossKind::mse, 0.5);
    EXPECT_DOUBLE_EQ(lg.loss, 0.5 * 0.5 * 9.0);
    EXPECT_DOUBLE_EQ(lg.grad[0], 0.5 * 3.0);
}

// Analytic gradients vs central finite differences on 100 seeded instances
// spanning activations, bias, depth and both losses.
TEST(LossAndGrad, MatchesFiniteDifferences) {
    int checked = 0;
    for (int seed = 0; seed < 100; ++seed) {
        const auto inst = oracle::random_instance(static_cast<std::uint64_t>(seed));
        const auto lg = loss_and_grad(inst.model, inst.batch, inst.loss);
        const auto fd = oracle::finite_difference_grad(inst.model, inst.batch, inst.loss);
        const double err = oracle::max_relative_error(lg.grad.values(), fd);
        EXPECT_LT(err, 1e-5) << "seed " << seed << " arch depth " << inst.model.arch.layer_sizes.size();
        ++checked;
    }
    EXPECT_EQ(checked, 100);
}

TEST(Sgd, ZeroGradientKeepsParams) {
    const auto p = ParamVector::flat({1.0, -2.0, 3.0});
    EXPECT_EQ(sgd_step(p, ParamVector::zeros_like(p), 0.3), p);
}

TEST(Sgd, HandComputedStep) {
    const auto p = ParamVector::flat({0.0});
    const auto g = ParamVector::flat({-4.0});
    EXPECT_DOUBLE_EQ(sgd_step(p, g, 0.1)[0], 0.4);
}

TEST(Sgd, RejectsNonPositiveLrAndLengthMismatch) {
    const auto p = ParamVector::flat({0.0, 1.0});
    EXPECT_THROW(sgd_step(p, p, 0.0), UsageError);
    EXPECT_THROW(sgd_step(p, p, -1.0), UsageError);
    EXPECT_THROW(sgd_step(p, ParamVector::flat({1.0}), 0.1), ShapeError);
}

TEST(Sgd, InputsUnmodified) {
    const auto p = ParamVector::flat({1.0, 2.0});
    const auto g = ParamVector::flat({0.5, 0.5});
    const auto p_copy = p;
    const auto g_copy = g;
    (void)sgd_step(p, g, 0.1);
    EXPECT_EQ(p, p_copy);
    EXPECT_EQ(g, g_copy);
}

TEST(Sgd, StepsComposeLinearlyInLr) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> pv(20), gv(20);
        for (auto& v : pv) v = u(rng);
        for (auto& v : gv) v = u(rng);
        const auto p = ParamVector::flat(pv);
        const auto g = ParamVector::flat(gv);
        const double a = 0.5 * (u(rng) + 1.0) + 1e-3;
        const double b = 0.5 * (u(rng) + 1.0) + 1e-3;
        const auto once = sgd_step(p, g, a + b);
        const auto twice = sgd_step(sgd_step(p, g, a), g, b);
        for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-12);
    }
}

// ---- checkpoint -------------------------------------------------------------------

TEST(Checkpoint, ByteLayout) {
    const auto p = ParamVector({1.0, -2.5}, {LayerShape{"w", 2, 1}});
    const auto bytes = encode_checkpoint(Checkpoint{"m", p});
    ASSERT_GE(bytes.size(), 24u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FLFD");
    // version 1, little-endian u32
    EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 4, bytes.begin() + 8)), (std::vector<std::uint8_t>{1, 0, 0, 0}));
    // count 2, little-endian u64
    EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 8, bytes.begin() + 16)),
              (std::vector<std::uint8_t>{2, 0, 0, 0, 0, 0, 0, 0}));
    // 1.0f = 0x3F800000, -2.5f = 0xC0200000, little-endian
    EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 16, bytes.begin() + 24)),
              (std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x20, 0xC0}));
    const std::string footer(bytes.begin() + 24, bytes.end());
    const auto j = nlohmann::json::parse(footer);
    EXPECT_EQ(j["name"], "m");
    EXPECT_EQ(j["shape_meta"], nlohmann::json::parse(R"([["w",2,1]])"));
}

TEST(Checkpoint, RoundTripIsFloat32Exact) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 20; ++trial) {
        MlpArch arch{{3, 1 + static_cast<std::size_t>(trial % 5), 2}, Activation::tanh, trial % 2 == 0};
        auto m = MlpModel::initialized(arch, static_cast<std::uint64_t>(trial));
        for (auto& v : m.params.values()) v += n(rng);
        const auto back = decode_checkpoint(encode_checkpoint(Checkpoint{"t", m.params}));
        EXPECT_EQ(back.name, "t");
        EXPECT_EQ(back.params.shape(), m.params.shape());
        for (std::size_t i = 0; i < m.params.size(); ++i)
            EXPECT_EQ(back.params[i], static_cast<double>(static_cast<float>(m.params[i])));
    }
}

TEST(Checkpoint, RejectsCorruptInput) {
    const auto good = encode_checkpoint(Checkpoint{"m", ParamVector::flat({1.0, 2.0})});
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
    auto bad_version = good;
    bad_version[4] = 9;
    EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
    auto truncated = std::vector<std::uint8_t>(good.begin(), good.begin() + 20);
    EXPECT_THROW(decode_checkpoint(truncated), FormatError);
    auto bad_footer = std::vector<std::uint8_t>(good.begin(), good.begin() + 24);
    const std::string wrong = R"({"name":"m","shape_meta":[["flat",3,1]]})";
    bad_footer.insert(bad_footer.end(), wrong.begin(), wrong.end());
    EXPECT_THROW(decode_checkpoint(bad_footer), FormatError);
}
