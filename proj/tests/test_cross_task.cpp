#include <gtest/gtest.h>

#include <random>

#include "fedlfd/cross_task.hpp"
#include "oracles.hpp"

using namespace fedlfd;

namespace {

ParamVector named(std::vector<double> v) {
    const auto n = v.size();
    return ParamVector(std::move(v), {LayerShape{"W0", n, 1}});
}

ModelParams random_models(std::mt19937_64& rng, const std::vector<int>& ids, std::size_t dim) {
    std::normal_distribution<double> n(0.0, 1.0);
    ModelParams out;
    for (int id : ids) {
        std::vector<double> v(dim);
        for (auto& x : v) x = n(rng);
        out.emplace(id, ParamVector::flat(v));
    }
    return out;
}

// Flatten/unflatten helpers for finite differences over several models.
std::vector<double> flatten(const ModelParams& m) {
    std::vector<double> out;
    for (const auto& [id, p] : m) out.insert(out.end(), p.raw().begin(), p.raw().end());
    return out;
}

ModelParams unflatten(const ModelParams& like, const std::vector<double>& x) {
    ModelParams out;
    std::size_t off = 0;
    for (const auto& [id, p] : like) {
        std::vector<double> v(x.begin() + static_cast<long>(off), x.begin() + static_cast<long>(off + p.size()));
        out.emplace(id, ParamVector(std::move(v), p.shape()));
        off += p.size();
    }
    return out;
}

Eigen::MatrixXd random_spd(std::mt19937_64& rng, Eigen::Index n) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    return a * a.transpose() + Eigen::MatrixXd::Identity(n, n);
}

}  // namespace

// ---- transfer alignment -----------------------------------------------------------

TEST(Alignment, IdenticalSpansGiveZero) {
    const ModelParams m{{1, named({1.0, 2.0})}, {2, named({1.0, 2.0})}};
    const auto out = alignment_loss_and_grad({TransferPairSpec{1, 2, "W0", "W0", 3.0}}, m);
    EXPECT_EQ(out.loss, 0.0);
    for (const auto& [id, g] : out.grads)
        for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Alignment, HandExpansion) {
    const ModelParams m{{1, named({0.0, 0.0})}, {2, named({3.0, 4.0})}};
    const auto out = alignment_loss_and_grad({TransferPairSpec{1, 2, "W0", "W0", 1.0}}, m);
    EXPECT_DOUBLE_EQ(out.loss, 25.0);
    EXPECT_EQ(out.grads.at(1).raw(), (std::vector<double>{-6.0, -8.0}));
    EXPECT_EQ(out.grads.at(2).raw(), (std::vector<double>{6.0, 8.0}));
}

TEST(Alignment, SpanMismatchIsConfigError) {
    MlpArch small{{2, 3, 1}, Activation::tanh, true};
    MlpArch big{{4, 3, 1}, Activation::tanh, true};
    const ModelParams m{{1, MlpModel::initialized(small, 1).params}, {2, MlpModel::initialized(big, 1).params}};
    EXPECT_THROW(validate_transfer_pair(TransferPairSpec{1, 2, "W0", "b0", 1.0}, m), ConfigError);
    EXPECT_NO_THROW(validate_transfer_pair(TransferPairSpec{1, 2, "W1", "b1", 1.0}, m));
    EXPECT_THROW(validate_transfer_pair(TransferPairSpec{1, 2, "W1", "b1", -1.0}, m), ConfigError);
    EXPECT_THROW(validate_transfer_pair(TransferPairSpec{1, 1, "W1", "b1", 1.0}, m), ConfigError);
}

TEST(Alignment, GradientMatchesFiniteDifferences) {
    MlpArch arch{{3, 4, 2}, Activation::tanh, true};
    std::mt19937_64 rng(4);
    ModelParams m;
    for (int id = 1; id <= 3; ++id) m.emplace(id, MlpModel::initialized(arch, rng()).params);
    const std::vector<TransferPairSpec> pairs{{1, 2, "W0", "b0", 0.7}, {2, 3, "W1", "b1", 1.3}, {1, 3, "b0", "W1", 0.2}};
    const auto out = alignment_loss_and_grad(pairs, m);
    const auto fd = oracle::finite_difference(
        [&](const std::vector<double>& x) { return alignment_loss_and_grad(pairs, unflatten(m, x)).loss; }, flatten(m));
    EXPECT_LT(oracle::max_relative_error(flatten(out.grads), fd), 1e-5);
}

// ---- multi-task penalty ------------------------------------------------------------

TEST(MultiTask, OrthonormalColumnsHandValue) {
    const ModelParams m{{1, ParamVector::flat({1.0, 0.0, 0.0})}, {2, ParamVector::flat({0.0, 1.0, 0.0})}};
    const auto s = MultiTaskState::uniform({1, 2}, 1.0);
    EXPECT_NEAR(s.omega.inverse().trace(), 1.0, 1e-15);
    const auto out = multitask_penalty_and_grad(s, m);
    EXPECT_NEAR(out.loss, 2.0, 1e-12);
}

TEST(MultiTask, ZeroMatrixGivesZero) {
    const ModelParams m{{1, ParamVector::flat({0.0, 0.0})}, {2, ParamVector::flat({0.0, 0.0})}};
    const auto out = multitask_penalty_and_grad(MultiTaskState::uniform({1, 2}, 3.0), m);
    EXPECT_EQ(out.loss, 0.0);
    for (const auto& [id, g] : out.grads)
        for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(MultiTask, NonPdOmegaIsNumericError) {
    const ModelParams m{{1, ParamVector::flat({1.0})}, {2, ParamVector::flat({2.0})}};
    auto s = MultiTaskState::uniform({1, 2}, 1.0);
    s.omega(0, 0) = -1.0;
    EXPECT_THROW(multitask_penalty_and_grad(s, m), NumericError);
}

TEST(MultiTask, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto m = random_models(rng, {1, 2, 3}, 7);
        MultiTaskState s{{1, 2, 3}, random_spd(rng, 3), 0.8, 1e-8};
        const auto out = multitask_penalty_and_grad(s, m);
        const auto fd = oracle::finite_difference(
            [&](const std::vector<double>& x) { return multitask_penalty_and_grad(s, unflatten(m, x)).loss; },
            flatten(m));
        EXPECT_LT(oracle::max_relative_error(flatten(out.grads), fd), 1e-5);
    }
}

TEST(MultiTask, InvariantUnderColumnPermutation) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const auto m = random_models(rng, {1, 2, 3}, 5);
        const Eigen::MatrixXd omega = random_spd(rng, 3);
        const double base = multitask_penalty_and_grad(MultiTaskState{{1, 2, 3}, omega, 1.0, 1e-8}, m).loss;
        // columns (3,1,2): P maps new index -> old index
        const std::vector<int> perm{2, 0, 1};
        Eigen::MatrixXd permuted(3, 3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) permuted(i, j) = omega(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
        const double moved = multitask_penalty_and_grad(MultiTaskState{{3, 1, 2}, permuted, 1.0, 1e-8}, m).loss;
        EXPECT_NEAR(moved, base, 1e-12 * std::max(1.0, std::abs(base)));
    }
}

// ---- omega update --------------------------------------------------------------------

TEST(OmegaUpdate, OrthonormalGramGivesScaledIdentity) {
    const ModelParams m{{1, ParamVector::flat({1.0, 0.0, 0.0})}, {2, ParamVector::flat({0.0, 1.0, 0.0})}};
    auto s = MultiTaskState::uniform({1, 2}, 1.0);
    s.ridge = 0.0;
    const auto u = update_omega(s, m);
    ASSERT_TRUE(u.updated);
    EXPECT_TRUE(u.state.omega.isApprox(2.0 * Eigen::MatrixXd::Identity(2, 2), 1e-12));
    EXPECT_TRUE(u.state.omega.inverse().isApprox(0.5 * Eigen::MatrixXd::Identity(2, 2), 1e-12));
}

TEST(OmegaUpdate, ConstraintsHoldOnRandomModels) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto m = random_models(rng, {1, 2, 3, 4}, 9);
        const auto u = update_omega(MultiTaskState::uniform({1, 2, 3, 4}, 1.0), m);
        ASSERT_TRUE(u.updated);
        const auto& o = u.state.omega;
        EXPECT_LE((o - o.transpose()).cwiseAbs().maxCoeff(), 1e-12);
        const Eigen::MatrixXd inv = o.inverse();
        EXPECT_NEAR(inv.trace(), 1.0, 1e-9);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inv + inv.transpose()));
        EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
    }
}

// Closed form vs a brute-force search over the constraint set: no random
// trace-one SPD Omega^-1 beats the closed form on tr(A Omega A^T).
TEST(OmegaUpdate, ClosedFormMinimizesPenaltyOverConstraintSet) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const auto m = random_models(rng, {1, 2, 3}, 6);
        const auto u = update_omega(MultiTaskState::uniform({1, 2, 3}, 2.0), m);
        const double best = multitask_penalty_and_grad(u.state, m).loss;
        for (int k = 0; k < 200; ++k) {
            Eigen::MatrixXd inv = random_spd(rng, 3);
            inv /= inv.trace();
            MultiTaskState s{{1, 2, 3}, inv.inverse(), 2.0, 1e-8};
            EXPECT_GE(multitask_penalty_and_grad(s, m).loss, best - 1e-9);
        }
    }
}

TEST(OmegaUpdate, FailureKeepsPreviousOmega) {
    const ModelParams m{{1, ParamVector::flat({std::nan(""), 0.0})}, {2, ParamVector::flat({0.0, 1.0})}};
    const auto s = MultiTaskState::uniform({1, 2}, 1.0);
    const auto u = update_omega(s, m);
    EXPECT_FALSE(u.updated);
    EXPECT_FALSE(u.warnings.empty());
    EXPECT_EQ(u.state.omega, s.omega);
}

// ---- meta learning -------------------------------------------------------------------

TEST(Meta, QuadraticFirstOrderStep) {
    MlpArch arch{{1, 1}, Activation::identity, false};
    const MlpModel w0(arch, ParamVector({0.0}, arch.shape()));
    // (w*1 - a)^2 with a = 1 for support and a = 3 for query
    const std::vector<std::vector<Sample>> support{{{{1.0}, {1.0}}}};
    const std::vector<std::vector<Sample>> query{{{{1.0}, {3.0}}}};
    MetaConfig cfg;
    cfg.inner_lr = 0.25;
    cfg.outer_lr = 0.1;
    const auto step = meta_step(w0, support, query, cfg, LossKind::mse);
    EXPECT_NEAR(step.adapted[0][0], 0.5, 1e-12);
    EXPECT_NEAR(step.outer_grad[0], -5.0, 1e-12);
    EXPECT_NEAR(step.params[0], 0.5, 1e-12);
}

TEST(Meta, PerfectlyFitSupportLeavesParams) {
    MlpArch arch{{1, 1}, Activation::identity, false};
    const MlpModel w0(arch, ParamVector({2.0}, arch.shape()));
    const std::vector<Sample> fit{{{1.0}, {2.0}}, {{-3.0}, {-6.0}}};
    EXPECT_EQ(adapt(w0, fit, 4, 0.3, LossKind::mse), w0.params);
}

TEST(Meta, ConfigValidation) {
    MetaConfig cfg;
    cfg.inner_lr = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.support_fraction = 1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.first_order = false;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Meta, SplitIsSeededAndProper) {
    const std::vector<int> teachers{4, 1, 3, 2, 5};
    const auto a = split_support_query(teachers, 0.4, 99);
    const auto b = split_support_query({5, 4, 3, 2, 1}, 0.4, 99);
    EXPECT_EQ(a.support, b.support);
    EXPECT_EQ(a.query, b.query);
    EXPECT_EQ(a.support.size(), 2u);
    EXPECT_EQ(a.query.size(), 3u);
    const auto extreme = split_support_query({1, 2}, 0.01, 1);
    EXPECT_EQ(extreme.support.size(), 1u);
    EXPECT_EQ(extreme.query.size(), 1u);
}

TEST(Meta, RoundSkipsWithOneTeacher) {
    MlpArch arch{{1, 1}, Activation::identity, false};
    const MlpModel w0(arch, ParamVector({0.0}, arch.shape()));
    const std::map<int, std::vector<std::vector<Sample>>> data{{1, {{{{1.0}, {1.0}}}}}};
    const auto r = meta_round(w0, data, {}, LossKind::mse, 1);
    EXPECT_TRUE(r.skipped);
    EXPECT_EQ(r.params, w0.params);
}

TEST(Meta, RoundIsDeterministic) {
    MlpArch arch{{2, 3, 1}, Activation::tanh, true};
    const auto w0 = MlpModel::initialized(arch, 2);
    std::map<int, std::vector<std::vector<Sample>>> data;
    for (int t = 1; t <= 4; ++t) data[t] = {{{{0.1 * t, 1.0}, {0.5 * t}}, {{-1.0, 0.2}, {0.1}}}};
    const auto a = meta_round(w0, data, {}, LossKind::mse, 17);
    const auto b = meta_round(w0, data, {}, LossKind::mse, 17);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.split.support, b.split.support);
}
