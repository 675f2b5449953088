#pragma once

// Couplings between global models: a transfer alignment loss on shared layer
// spans, the multi-task trace penalty with a learned precision matrix, and
// first-order meta-learning over support/query teacher splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fedlfd/error.hpp"
#include "fedlfd/seed.hpp"
#include "fedlfd/tensor.hpp"

namespace fedlfd {

using ModelParams = std::map<int, ParamVector>;

// ---- transfer alignment -----------------------------------------------------

struct TransferPairSpec {
    int model_a = 0;
    int model_b = 0;
    std::string first_layer;  // inclusive layer-name range, resolved in each model
    std::string last_layer;
    double weight = 1.0;  // mu

    bool operator==(const TransferPairSpec&) const = default;
};

// [begin, end) covering first_layer .. last_layer in layer order.
inline std::pair<std::size_t, std::size_t> span_range(const ParamVector& p, const std::string& first,
                                                      const std::string& last) {
    const auto [b, e0] = p.layer_range(first);
    const auto [b1, e] = p.layer_range(last);
    (void)e0;
    if (b1 < b) throw ConfigError("shared span: layer '" + last + "' precedes '" + first + "'");
    return {b, e};
}

inline void validate_transfer_pair(const TransferPairSpec& pair, const ModelParams& models) {
    if (!(pair.weight >= 0.0)) throw ConfigError("transfer weight must be >= 0");
    if (pair.model_a == pair.model_b) throw ConfigError("transfer pair must join two different models");
    auto a = models.find(pair.model_a);
    auto b = models.find(pair.model_b);
    if (a == models.end() || b == models.end()) throw ConfigError("transfer pair references an unknown model");
    try {
        const auto ra = span_range(a->second, pair.first_layer, pair.last_layer);
        const auto rb = span_range(b->second, pair.first_layer, pair.last_layer);
        if (ra.second - ra.first != rb.second - rb.first)
            throw ConfigError("transfer pair (" + std::to_string(pair.model_a) + ", " + std::to_string(pair.model_b) +
                              "): shared spans have different lengths");
    } catch (const NotFoundError& e) {
        throw ConfigError(std::string("transfer pair: ") + e.what());
    }
}

struct CouplingLoss {
    double loss = 0.0;
    ModelParams grads;  // one entry per input model, zero where untouched
};

inline ModelParams zero_grads(const ModelParams& models) {
    ModelParams g;
    for (const auto& [id, p] : models) g.emplace(id, ParamVector::zeros_like(p));
    return g;
}

// sum over pairs of mu * ||A[span] - B[span]||^2
inline CouplingLoss alignment_loss_and_grad(const std::vector<TransferPairSpec>& pairs, const ModelParams& models) {
    CouplingLoss out{0.0, zero_grads(models)};
    for (const auto& pair : pairs) {
        validate_transfer_pair(pair, models);
        const auto& a = models.at(pair.model_a);
        const auto& b = models.at(pair.model_b);
        const auto ra = span_range(a, pair.first_layer, pair.last_layer);
        const auto rb = span_range(b, pair.first_layer, pair.last_layer);
        auto& ga = out.grads.at(pair.model_a);
        auto& gb = out.grads.at(pair.model_b);
        for (std::size_t k = 0; k < ra.second - ra.first; ++k) {
            const double diff = a[ra.first + k] - b[rb.first + k];
            out.loss += pair.weight * diff * diff;
            ga[ra.first + k] += 2.0 * pair.weight * diff;
            gb[rb.first + k] -= 2.0 * pair.weight * diff;
        }
    }
    return out;
}

// ---- multi-task precision matrix ----------------------------------------------

struct MultiTaskState {
    std::vector<int> members;  // columns of A, in this order
    Eigen::MatrixXd omega;
    double lambda = 0.0;
    double ridge = 1e-8;

    // Omega = n * I, i.e. Omega^-1 = I / n with unit trace.
    static MultiTaskState uniform(std::vector<int> members, double lambda) {
        const auto n = static_cast<Eigen::Index>(members.size());
        MultiTaskState s;
        s.members = std::move(members);
        s.omega = static_cast<double>(n) * Eigen::MatrixXd::Identity(n, n);
        s.lambda = lambda;
        return s;
    }
};

struct OmegaCheck {
    double asymmetry = 0.0;        // max |Omega - Omega^T|
    double trace_inverse = 0.0;    // tr(Omega^-1)
    double min_eig_inverse = 0.0;  // smallest eigenvalue of Omega^-1
    double min_eig = 0.0;          // smallest eigenvalue of Omega
};

inline OmegaCheck check_omega(const Eigen::MatrixXd& omega) {
    OmegaCheck c;
    c.asymmetry = (omega - omega.transpose()).cwiseAbs().maxCoeff();
    const Eigen::MatrixXd sym = 0.5 * (omega + omega.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    c.min_eig = eig.eigenvalues().minCoeff();
    const Eigen::VectorXd inv_vals = eig.eigenvalues().cwiseInverse();
    c.min_eig_inverse = inv_vals.minCoeff();
    c.trace_inverse = inv_vals.sum();
    return c;
}

// A = [W_1 ... W_B'] as a P x B' matrix.
inline Eigen::MatrixXd stack_columns(const std::vector<int>& members, const ModelParams& models) {
    if (members.empty()) throw UsageError("multi-task: no member models");
    const std::size_t p = models.at(members.front()).size();
    Eigen::MatrixXd a(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(members.size()));
    for (std::size_t j = 0; j < members.size(); ++j) {
        const auto it = models.find(members[j]);
        if (it == models.end()) throw UsageError("multi-task: model " + std::to_string(members[j]) + " missing");
        if (it->second.size() != p) throw UsageError("multi-task: member models must share one parameter length");
        for (std::size_t i = 0; i < p; ++i) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = it->second[i];
    }
    return a;
}

// (lambda/2) tr(A Omega A^T) and its gradient lambda * A * Omega, split per model.
inline CouplingLoss multitask_penalty_and_grad(const MultiTaskState& state, const ModelParams& models) {
    const auto n = static_cast<Eigen::Index>(state.members.size());
    if (state.omega.rows() != n || state.omega.cols() != n) throw UsageError("multi-task: Omega has the wrong size");
    const auto chk = check_omega(state.omega);
    if (chk.min_eig <= 0.0 || chk.asymmetry > 1e-9 * std::max(1.0, state.omega.cwiseAbs().maxCoeff()))
        throw NumericError("multi-task: Omega is not symmetric positive definite (min eigenvalue " +
                           std::to_string(chk.min_eig) + ")");
    const Eigen::MatrixXd a = stack_columns(state.members, models);
    const Eigen::MatrixXd a_omega = a * state.omega;
    CouplingLoss out{0.0, zero_grads(models)};
    out.loss = 0.5 * state.lambda * (a_omega.cwiseProduct(a)).sum();
    for (Eigen::Index j = 0; j < n; ++j) {
        auto& g = out.grads.at(state.members[static_cast<std::size_t>(j)]);
        for (Eigen::Index i = 0; i < a.rows(); ++i) g[static_cast<std::size_t>(i)] = state.lambda * a_omega(i, j);
    }
    return out;
}

struct OmegaUpdate {
    MultiTaskState state;
    bool updated = false;
    std::vector<std::string> warnings;
    OmegaCheck check;
};

// Closed-form minimizer over Omega of tr(A Omega A^T) subject to Omega^-1 PSD and
// tr(Omega^-1) = 1:
//   Omega^-1 = (A^T A + rho I)^(1/2) / tr((A^T A + rho I)^(1/2)).
inline OmegaUpdate update_omega(MultiTaskState state, const ModelParams& models) {
    OmegaUpdate out;
    const Eigen::MatrixXd a = stack_columns(state.members, models);
    const auto n = a.cols();
    const Eigen::MatrixXd gram = a.transpose() * a + state.ridge * Eigen::MatrixXd::Identity(n, n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0) {
        out.warnings.push_back("matrix square root failed; Omega kept");
        out.check = check_omega(state.omega);
        out.state = std::move(state);
        return out;
    }
    const Eigen::VectorXd root = eig.eigenvalues().cwiseSqrt();
    const double tr = root.sum();
    const Eigen::MatrixXd& v = eig.eigenvectors();
    Eigen::MatrixXd omega = v * (tr * root.cwiseInverse()).asDiagonal() * v.transpose();
    omega = 0.5 * (omega + omega.transpose());
    const auto chk = check_omega(omega);
    if (!std::isfinite(chk.trace_inverse) || std::abs(chk.trace_inverse - 1.0) > 1e-9 || chk.min_eig_inverse < -1e-10) {
        out.warnings.push_back("Omega update violated its constraints; Omega kept");
        out.check = check_omega(state.omega);
        out.state = std::move(state);
        return out;
    }
    state.omega = std::move(omega);
    out.state = std::move(state);
    out.updated = true;
    out.check = chk;
    return out;
}

// ---- meta-learning ------------------------------------------------------------

struct MetaConfig {
    double inner_lr = 0.05;
    double outer_lr = 0.05;
    int inner_steps = 1;
    double support_fraction = 0.5;
    bool first_order = true;
    int personalization_steps = 5;

    void validate() const {
        if (!(inner_lr > 0.0)) throw ConfigError("meta.inner_lr must be positive");
        if (!(outer_lr > 0.0)) throw ConfigError("meta.outer_lr must be positive");
        if (inner_steps < 1) throw ConfigError("meta.inner_steps must be >= 1");
        if (!(support_fraction > 0.0 && support_fraction < 1.0)) throw ConfigError("meta.support_fraction must lie in (0,1)");
        if (!first_order) throw ConfigError("meta.first_order = false is not supported (second-order MAML)");
        if (personalization_steps < 0) throw ConfigError("meta.personalization_steps must be >= 0");
    }

    bool operator==(const MetaConfig&) const = default;
};

// `steps` full-batch gradient steps on `data`.
inline ParamVector adapt(const MlpModel& init, std::span<const Sample> data, int steps, double lr, LossKind loss) {
    MlpModel m = init;
    for (int s = 0; s < steps; ++s) m.params = sgd_step(m.params, loss_and_grad(m, data, loss).grad, lr);
    return m.params;
}

struct SupportQuerySplit {
    std::vector<int> support;
    std::vector<int> query;
};

inline SupportQuerySplit split_support_query(std::vector<int> teachers, double support_fraction, std::uint64_t seed) {
    if (teachers.size() < 2) throw UsageError("support/query split needs at least two teachers");
    std::sort(teachers.begin(), teachers.end());
    Rng rng(seed);
    std::shuffle(teachers.begin(), teachers.end(), rng);
    const auto n = static_cast<long>(teachers.size());
    const long k = std::clamp(std::lround(support_fraction * static_cast<double>(n)), 1L, n - 1);
    SupportQuerySplit s;
    s.support.assign(teachers.begin(), teachers.begin() + k);
    s.query.assign(teachers.begin() + k, teachers.end());
    std::sort(s.support.begin(), s.support.end());
    std::sort(s.query.begin(), s.query.end());
    return s;
}

struct MetaStep {
    ParamVector params;
    ParamVector outer_grad;
    std::vector<ParamVector> adapted;  // one per support dataset
};

// First-order MAML: adapt from `global` on each support dataset, take the
// query-loss gradient at each adapted point, average over support datasets
// and step the global model.
inline MetaStep meta_step(const MlpModel& global, const std::vector<std::vector<Sample>>& support,
                          const std::vector<std::vector<Sample>>& query, const MetaConfig& cfg, LossKind loss) {
    cfg.validate();
    if (support.empty() || query.empty()) throw UsageError("meta_step: support and query sets must be nonempty");
    MetaStep out;
    out.outer_grad = ParamVector::zeros_like(global.params);
    for (const auto& s : support) {
        if (s.empty()) throw UsageError("meta_step: empty support dataset");
        auto adapted = global.with_params(adapt(global, s, cfg.inner_steps, cfg.inner_lr, loss));
        ParamVector g = ParamVector::zeros_like(global.params);
        for (const auto& q : query) {
            if (q.empty()) throw UsageError("meta_step: empty query dataset");
            g = g + loss_and_grad(adapted, q, loss).grad;
        }
        out.outer_grad = out.outer_grad + (1.0 / static_cast<double>(query.size())) * g;
        out.adapted.push_back(std::move(adapted.params));
    }
    out.outer_grad = (1.0 / static_cast<double>(support.size())) * out.outer_grad;
    out.params = sgd_step(global.params, out.outer_grad, cfg.outer_lr);
    return out;
}

struct MetaRoundResult {
    ParamVector params;
    bool skipped = false;
    SupportQuerySplit split;
    std::vector<std::string> warnings;
};

// `teacher_data` maps each teacher to its local datasets (one per node).
// Datasets of support teachers drive the inner loop; those of query teachers
// form the outer objective.
inline MetaRoundResult meta_round(const MlpModel& global,
                                  const std::map<int, std::vector<std::vector<Sample>>>& teacher_data,
                                  const MetaConfig& cfg, LossKind loss, std::uint64_t seed) {
    MetaRoundResult out;
    std::vector<int> teachers;
    for (const auto& [m, sets] : teacher_data)
        if (!sets.empty()) teachers.push_back(m);
    if (teachers.size() < 2) {
        out.params = global.params;
        out.skipped = true;
        out.warnings.push_back("fewer than two teachers available; meta round skipped");
        return out;
    }
    out.split = split_support_query(teachers, cfg.support_fraction, seed);
    std::vector<std::vector<Sample>> support, query;
    for (int m : out.split.support)
        for (const auto& d : teacher_data.at(m)) support.push_back(d);
    for (int m : out.split.query)
        for (const auto& d : teacher_data.at(m)) query.push_back(d);
    out.params = meta_step(global, support, query, cfg, loss).params;
    return out;
}

}  // namespace fedlfd
