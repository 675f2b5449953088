#pragma once

// Node-side computation for one platform: simulated teaching, local SGD
// producing deltas against a global snapshot, and per-teacher profiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fedlfd/error.hpp"
#include "fedlfd/seed.hpp"
#include "fedlfd/taxonomy.hpp"
#include "fedlfd/tensor.hpp"

namespace fedlfd {

inline constexpr int kGlobalNode = -1;

struct TeacherSpec {
    int id = 0;
    std::vector<double> bias;  // task-output space; resized per model (zero padded / truncated)
    double noise_scale = 0.0;
    double skill = 1.0;
    std::optional<int> cluster_tag;

    void validate() const {
        if (!(noise_scale >= 0.0)) throw ConfigError("teacher " + std::to_string(id) + ": noise_scale must be >= 0");
        if (!(skill >= 0.0 && skill <= 1.0)) throw ConfigError("teacher " + std::to_string(id) + ": skill must lie in [0,1]");
        for (double b : bias)
            if (!std::isfinite(b)) throw ConfigError("teacher " + std::to_string(id) + ": bias must be finite");
    }

    std::vector<double> bias_for(std::size_t dim) const {
        std::vector<double> b(dim, 0.0);
        std::copy_n(bias.begin(), std::min(dim, bias.size()), b.begin());
        return b;
    }

    bool operator==(const TeacherSpec&) const = default;
};

// The behaviour teachers are trying to convey: a frozen network. For
// classification models its outputs are logits and the ideal label is the argmax.
struct GroundTruthPolicy {
    MlpModel net;
    LossKind loss = LossKind::mse;
    double input_scale = 1.0;

    std::vector<double> operator()(std::span<const double> input) const { return forward(net, input); }
};

struct Demonstration {
    int model_id = 0;
    int teacher_id = 0;
    std::vector<double> input;
    std::vector<double> target;  // class index in target[0] for classification
    int round_stamp = 0;

    Sample as_sample() const { return Sample{input, target}; }
};

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Draws an input from the policy's input distribution (i.i.d. Gaussian).
inline std::vector<double> draw_input(const GroundTruthPolicy& policy, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> x(policy.net.arch.input_dim());
    for (auto& v : x) v = policy.input_scale * normal(rng);
    return x;
}

// Ideal target for an input: the truth itself for regression, argmax label
// for classification.
inline std::vector<double> ideal_target(const GroundTruthPolicy& policy, std::span<const double> input) {
    auto truth = policy(input);
    if (policy.loss == LossKind::cross_entropy) return {static_cast<double>(argmax(truth))};
    return truth;
}

// target = skill*truth + (1-skill)*(truth+bias) + noise_scale*N(0,1), applied to
// logits before the argmax for classification models.
inline std::vector<double> teacher_target(const TeacherSpec& teacher, const GroundTruthPolicy& policy,
                                          std::span<const double> input, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    auto truth = policy(input);
    const auto bias = teacher.bias_for(truth.size());
    std::vector<double> y(truth.size());
    for (std::size_t k = 0; k < y.size(); ++k) {
        y[k] = teacher.skill * truth[k] + (1.0 - teacher.skill) * (truth[k] + bias[k]);
        if (teacher.noise_scale > 0.0) y[k] += teacher.noise_scale * normal(rng);
    }
    if (policy.loss == LossKind::cross_entropy) return {static_cast<double>(argmax(y))};
    return y;
}

inline std::vector<Demonstration> generate_demonstrations(const TeacherSpec& teacher, const ModelSpec& model,
                                                          const GroundTruthPolicy& policy, int n,
                                                          std::uint64_t seed, int round_stamp = 0) {
    if (n <= 0) throw UsageError("generate_demonstrations: n must be positive");
    if (policy.net.arch.input_dim() != model.arch.input_dim() ||
        policy.net.arch.output_dim() != model.arch.output_dim())
        throw ShapeError("ground-truth policy dimensions do not match model " + std::to_string(model.id));
    Rng rng(seed);
    std::vector<Demonstration> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto x = draw_input(policy, rng);
        auto y = teacher_target(teacher, policy, x, rng);
        out.push_back(Demonstration{model.id, teacher.id, std::move(x), std::move(y), round_stamp});
    }
    return out;
}

// ---- local update ----------------------------------------------------------

struct LocalTrainConfig {
    double lr = 0.05;
    int epochs = 1;
    int batch_size = 8;
    double weight_decay = 0.0;

    void validate() const {
        if (!(lr > 0.0)) throw UsageError("local learning rate must be positive");
        if (epochs < 0) throw UsageError("epochs must be >= 0");
        if (batch_size < 1) throw UsageError("batch_size must be >= 1");
        if (!(weight_decay >= 0.0)) throw UsageError("weight_decay must be >= 0");
    }

    bool operator==(const LocalTrainConfig&) const = default;
};

struct LocalDelta {
    int model_id = 0;
    int node_id = 0;
    int teacher_id = 0;
    ParamVector delta;
    int sample_count = 0;
    int staleness = 0;
};

// Local model the delta was taken from: snapshot + delta. local_update builds
// its delta so that this reproduces the trained parameters exactly.
inline ParamVector local_params(const ParamVector& snapshot, const LocalDelta& d) { return snapshot + d.delta; }

inline std::vector<Sample> to_samples(std::span<const Demonstration> data) {
    std::vector<Sample> out;
    out.reserve(data.size());
    for (const auto& d : data) out.push_back(d.as_sample());
    return out;
}

inline void require_single_source(std::span<const Demonstration> data) {
    for (const auto& d : data)
        if (d.model_id != data.front().model_id || d.teacher_id != data.front().teacher_id)
            throw UsageError("local_update: demonstrations mix model or teacher ids");
}

// Runs `epochs` passes of shuffled mini-batch SGD from a copy of `global`.
inline LocalDelta local_update(const MlpModel& global, std::span<const Demonstration> data,
                               const LocalTrainConfig& cfg, LossKind loss, int node_id, std::uint64_t seed) {
    cfg.validate();
    if (data.empty()) throw UsageError("local_update: no demonstrations");
    require_single_source(data);

    const auto samples = to_samples(data);
    MlpModel local = global;
    Rng rng(seed);
    std::vector<std::size_t> order(samples.size());
    std::vector<Sample> batch;
    for (int e = 0; e < cfg.epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            batch.clear();
            for (std::size_t k = start; k < end; ++k) batch.push_back(samples[order[k]]);
            const auto lg = loss_and_grad(local, batch, loss, cfg.weight_decay);
            local.params = sgd_step(local.params, lg.grad, cfg.lr);
        }
    }

    LocalDelta out;
    out.model_id = data.front().model_id;
    out.teacher_id = data.front().teacher_id;
    out.node_id = node_id;
    out.sample_count = static_cast<int>(data.size());
    out.delta = local.params - global.params;
    return out;
}

// ---- profiles ------------------------------------------------------------

inline constexpr std::size_t kDefaultProfileDim = 8;

// Embedding layout: [EW mean residual (dim/2) | EW residual std (dim/2)].
struct UserProfile {
    int teacher_id = 0;
    int node_id = kGlobalNode;
    std::vector<double> embedding = std::vector<double>(kDefaultProfileDim, 0.0);
    int sample_count = 0;
    int residual_dim = 0;  // output dimension seen so far; 0 before the first sample

    static UserProfile empty(int teacher, int node, std::size_t dim = kDefaultProfileDim) {
        if (dim < 2 || dim % 2 != 0) throw UsageError("profile dimension must be even and >= 2");
        return UserProfile{teacher, node, std::vector<double>(dim, 0.0), 0, 0};
    }

    bool operator==(const UserProfile&) const = default;
};

// Residual of a demonstration against the ground truth.
inline std::vector<double> residual(const Demonstration& d, const GroundTruthPolicy& policy) {
    const auto truth = policy(d.input);
    if (policy.loss == LossKind::cross_entropy) {
        std::vector<double> r(truth.size(), 0.0);
        const auto label = static_cast<std::size_t>(d.target.at(0));
        if (label >= r.size()) throw ShapeError("demonstration label out of range");
        r[label] += 1.0;
        r[argmax(truth)] -= 1.0;
        return r;
    }
    if (d.target.size() != truth.size()) throw ShapeError("demonstration target dimension mismatch");
    std::vector<double> r(truth.size());
    for (std::size_t k = 0; k < r.size(); ++k) r[k] = d.target[k] - truth[k];
    return r;
}

inline UserProfile update_profile(UserProfile profile, std::span<const Demonstration> data,
                                  const GroundTruthPolicy& policy, double alpha = 0.1) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("profile smoothing must lie in (0,1]");
    const std::size_t dim = profile.embedding.size();
    if (dim < 2 || dim % 2 != 0) throw UsageError("profile dimension must be even and >= 2");
    const std::size_t half = dim / 2;
    for (const auto& d : data) {
        if (d.teacher_id != profile.teacher_id) throw UsageError("update_profile: data from another teacher");
        const auto r = residual(d, policy);
        if (profile.residual_dim == 0) {
            profile.residual_dim = static_cast<int>(r.size());
        } else if (static_cast<std::size_t>(profile.residual_dim) != r.size()) {
            throw UsageError("update_profile: residual dimension changed from " +
                             std::to_string(profile.residual_dim) + " to " + std::to_string(r.size()));
        }
        for (std::size_t k = 0; k < half; ++k) {
            const double x = k < r.size() ? r[k] : 0.0;
            double& mean = profile.embedding[k];
            double& sd = profile.embedding[half + k];
            if (profile.sample_count == 0) {
                mean = x;
                sd = 0.0;
            } else {
                const double diff = x - mean;
                const double var = (1.0 - alpha) * (sd * sd + alpha * diff * diff);
                mean += alpha * diff;
                sd = std::sqrt(var);
            }
        }
        ++profile.sample_count;
    }
    return profile;
}

}  // namespace fedlfd
