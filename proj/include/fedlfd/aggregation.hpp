#pragma once

// Global-model aggregation operators. Everything here consumes LocalDeltas and
// UserProfiles only; raw demonstrations never reach this layer.
//
// Deltas are combined in (model, node, teacher) order regardless of the order
// they arrive in, so results are bitwise independent of worker scheduling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fedlfd/error.hpp"
#include "fedlfd/node.hpp"
#include "fedlfd/seed.hpp"
#include "fedlfd/tensor.hpp"

namespace fedlfd {

// (node, teacher)
using ContributorKey = std::pair<int, int>;

enum class StrategyKind { fedavg, user_weighting, parameter_weighting, user_clustering };

inline const char* to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::fedavg: return "fedavg";
        case StrategyKind::user_weighting: return "user_weighting";
        case StrategyKind::parameter_weighting: return "parameter_weighting";
        case StrategyKind::user_clustering: return "user_clustering";
    }
    return "?";
}

inline StrategyKind strategy_from_string(const std::string& s) {
    if (s == "fedavg") return StrategyKind::fedavg;
    if (s == "user_weighting") return StrategyKind::user_weighting;
    if (s == "parameter_weighting") return StrategyKind::parameter_weighting;
    if (s == "user_clustering") return StrategyKind::user_clustering;
    throw ConfigError("unknown aggregation strategy '" + s + "'");
}

struct AggregationStrategy {
    StrategyKind kind = StrategyKind::fedavg;
    double epsilon_floor = 1e-6;       // user weighting: distance floor
    int window = 10;                   // parameter weighting: rounds of history kept
    int min_window = 3;                // parameter weighting: rounds needed before r is trusted
    bool inverse_sensitivity = false;  // parameter weighting: use 1 - r
    int eta_max = 2;                   // user clustering: number of centers
    double center_sigma = 0.01;        // user clustering: init perturbation, relative to init RMS
    bool weight_by_samples = false;    // fedavg / clustering: weight deltas by sample_count

    void validate() const {
        if (!(epsilon_floor > 0.0)) throw ConfigError("strategy.epsilon_floor must be positive");
        if (window < 2) throw ConfigError("strategy.window must be >= 2");
        if (min_window < 2 || min_window > window) throw ConfigError("strategy.min_window must lie in [2, window]");
        if (eta_max < 1) throw ConfigError("strategy.eta_max must be >= 1");
        if (!(center_sigma >= 0.0)) throw ConfigError("strategy.center_sigma must be >= 0");
    }

    bool operator==(const AggregationStrategy&) const = default;
};

struct AggregationResult {
    ParamVector params;
    bool skipped = false;
    std::vector<std::string> warnings;
    std::map<ContributorKey, double> weights;  // normalized scalar weight per contributor, where defined
};

inline std::vector<const LocalDelta*> sorted_deltas(const std::vector<LocalDelta>& deltas) {
    std::vector<const LocalDelta*> out;
    out.reserve(deltas.size());
    for (const auto& d : deltas) out.push_back(&d);
    std::sort(out.begin(), out.end(), [](const LocalDelta* a, const LocalDelta* b) {
        return std::tie(a->model_id, a->node_id, a->teacher_id) < std::tie(b->model_id, b->node_id, b->teacher_id);
    });
    return out;
}

namespace detail {

inline void check_deltas(const ParamVector& global, const std::vector<LocalDelta>& deltas) {
    for (const auto& d : deltas) {
        if (d.model_id != deltas.front().model_id) throw UsageError("aggregation: deltas for more than one model");
        require_same_length(global, d.delta, "aggregation");
    }
}

inline AggregationResult skipped_round(const ParamVector& global, std::string why) {
    AggregationResult r;
    r.params = global;
    r.skipped = true;
    r.warnings.push_back(std::move(why));
    return r;
}

// global + lr_g * (sum_i w_i * delta_i) / (sum_i w_i), summed in sorted order.
inline ParamVector weighted_step(const ParamVector& global, const std::vector<const LocalDelta*>& deltas,
                                 const std::vector<double>& w, double lr_g) {
    std::vector<double> gamma(global.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        total += w[i];
        const auto dv = deltas[i]->delta.values();
        for (std::size_t p = 0; p < gamma.size(); ++p) gamma[p] += w[i] * dv[p];
    }
    ParamVector out = global;
    for (std::size_t p = 0; p < gamma.size(); ++p) out[p] += lr_g * (gamma[p] / total);
    return out;
}

}  // namespace detail

// Plain average of the received deltas (unweighted unless weight_by_samples).
inline AggregationResult fedavg(const ParamVector& global, const std::vector<LocalDelta>& deltas, double lr_g,
                                bool weight_by_samples = false) {
    if (!(lr_g > 0.0)) throw UsageError("global learning rate must be positive");
    if (deltas.empty()) return detail::skipped_round(global, "no deltas received; global model unchanged");
    detail::check_deltas(global, deltas);
    const auto sorted = sorted_deltas(deltas);
    std::vector<double> w(sorted.size(), 1.0);
    if (weight_by_samples)
        for (std::size_t i = 0; i < sorted.size(); ++i) w[i] = static_cast<double>(sorted[i]->sample_count);

    AggregationResult r;
    if (!weight_by_samples) {
        std::vector<double> gamma(global.size(), 0.0);
        for (const auto* d : sorted) {
            const auto dv = d->delta.values();
            for (std::size_t p = 0; p < gamma.size(); ++p) gamma[p] += dv[p];
        }
        const double lambda = static_cast<double>(sorted.size());
        r.params = global;
        for (std::size_t p = 0; p < gamma.size(); ++p) r.params[p] += lr_g * (gamma[p] / lambda);
    } else {
        r.params = detail::weighted_step(global, sorted, w, lr_g);
    }
    double total = 0.0;
    for (double x : w) total += x;
    for (std::size_t i = 0; i < sorted.size(); ++i) r.weights[{sorted[i]->node_id, sorted[i]->teacher_id}] = w[i] / total;
    return r;
}

// ---- user weighting ---------------------------------------------------------

// 1 / max(||Q_global - Q_local||_2, floor)
inline double profile_weight(const UserProfile& global, const UserProfile& local, double epsilon_floor) {
    return 1.0 / std::max(l2_distance(global.embedding, local.embedding), epsilon_floor);
}

inline AggregationResult user_weighting(const ParamVector& global, const std::vector<LocalDelta>& deltas,
                                        const std::map<ContributorKey, UserProfile>& profiles,
                                        const std::map<int, UserProfile>& global_profiles, double lr_g,
                                        double epsilon_floor = 1e-6) {
    if (!(lr_g > 0.0)) throw UsageError("global learning rate must be positive");
    if (!(epsilon_floor > 0.0)) throw UsageError("epsilon_floor must be positive");
    if (deltas.empty()) return detail::skipped_round(global, "no deltas received; global model unchanged");
    detail::check_deltas(global, deltas);

    AggregationResult r;
    std::vector<const LocalDelta*> kept;
    std::vector<double> w;
    for (const auto* d : sorted_deltas(deltas)) {
        auto lp = profiles.find({d->node_id, d->teacher_id});
        if (lp == profiles.end()) {
            r.warnings.push_back("no profile for node " + std::to_string(d->node_id) + " teacher " +
                                 std::to_string(d->teacher_id) + "; delta excluded");
            continue;
        }
        auto gp = global_profiles.find(d->teacher_id);
        // Missing global profile: bootstrap from the local one (distance 0, weight capped).
        const UserProfile& g = gp != global_profiles.end() ? gp->second : lp->second;
        if (g.embedding.size() != lp->second.embedding.size())
            throw UsageError("user_weighting: profile dimension mismatch");
        kept.push_back(d);
        w.push_back(profile_weight(g, lp->second, epsilon_floor));
    }
    if (kept.empty()) {
        auto s = detail::skipped_round(global, "every delta lacked a profile; global model unchanged");
        s.warnings.insert(s.warnings.begin(), r.warnings.begin(), r.warnings.end());
        return s;
    }
    r.params = detail::weighted_step(global, kept, w, lr_g);
    double total = 0.0;
    for (double x : w) total += x;
    for (std::size_t i = 0; i < kept.size(); ++i) r.weights[{kept[i]->node_id, kept[i]->teacher_id}] = w[i] / total;
    return r;
}

// ---- parameter weighting ----------------------------------------------------

// Elementwise: Gamma[p] = sum_i r_i[p] * delta_i[p] / sum_i r_i[p]. Entries whose
// weights sum to zero fall back to the plain average.
inline AggregationResult parameter_weighted_average(const ParamVector& global, const std::vector<LocalDelta>& deltas,
                                                    const std::map<ContributorKey, std::vector<double>>& sensitivity,
                                                    double lr_g) {
    if (!(lr_g > 0.0)) throw UsageError("global learning rate must be positive");
    if (deltas.empty()) return detail::skipped_round(global, "no deltas received; global model unchanged");
    detail::check_deltas(global, deltas);
    const auto sorted = sorted_deltas(deltas);
    const std::size_t n = global.size();
    std::vector<double> num(n, 0.0), den(n, 0.0), plain(n, 0.0);
    for (const auto* d : sorted) {
        auto it = sensitivity.find({d->node_id, d->teacher_id});
        if (it == sensitivity.end()) throw UsageError("parameter_weighted_average: missing sensitivity vector");
        if (it->second.size() != n) throw ShapeError("sensitivity vector length mismatch");
        const auto dv = d->delta.values();
        for (std::size_t p = 0; p < n; ++p) {
            num[p] += it->second[p] * dv[p];
            den[p] += it->second[p];
            plain[p] += dv[p];
        }
    }
    AggregationResult r;
    r.params = global;
    const double count = static_cast<double>(sorted.size());
    std::size_t fallback = 0;
    for (std::size_t p = 0; p < n; ++p) {
        double gamma;
        if (den[p] > 0.0) {
            gamma = num[p] / den[p];
        } else {
            gamma = plain[p] / count;
            ++fallback;
        }
        r.params[p] += lr_g * gamma;
    }
    if (fallback > 0)
        r.warnings.push_back(std::to_string(fallback) + " parameter(s) had zero total sensitivity; plain average used");
    return r;
}

// Sliding window of (profile, delta) per contributor, oldest first.
struct SensitivityHistory {
    int window = 10;
    std::map<ContributorKey, std::deque<std::pair<UserProfile, ParamVector>>> entries;

    void push(const ContributorKey& key, UserProfile profile, ParamVector delta) {
        auto& q = entries[key];
        q.emplace_back(std::move(profile), std::move(delta));
        while (static_cast<int>(q.size()) > window) q.pop_front();
    }
};

inline double pearson_abs(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    // Variance indistinguishable from rounding noise counts as zero.
    if (sxx <= 1e-24 * xx || syy <= 1e-24 * yy || sxx == 0.0 || syy == 0.0) return 0.0;
    return std::min(1.0, std::abs(sxy) / std::sqrt(sxx * syy));
}

// Scores of each window entry's embedding on the first principal direction of
// the window. All-zero when the embeddings do not vary.
inline std::vector<double> principal_scores(const std::deque<std::pair<UserProfile, ParamVector>>& window) {
    const auto t = static_cast<Eigen::Index>(window.size());
    const auto d = static_cast<Eigen::Index>(window.front().first.embedding.size());
    Eigen::MatrixXd e(t, d);
    for (Eigen::Index i = 0; i < t; ++i) {
        const auto& emb = window[static_cast<std::size_t>(i)].first.embedding;
        if (static_cast<Eigen::Index>(emb.size()) != d) throw UsageError("profile dimension changed inside window");
        for (Eigen::Index k = 0; k < d; ++k) e(i, k) = emb[static_cast<std::size_t>(k)];
    }
    const Eigen::RowVectorXd mean = e.colwise().mean();
    e.rowwise() -= mean;
    const Eigen::MatrixXd cov = e.transpose() * e;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    std::vector<double> scores(static_cast<std::size_t>(t), 0.0);
    if (eig.info() != Eigen::Success || eig.eigenvalues()(d - 1) <= 0.0) return scores;
    const Eigen::VectorXd dir = eig.eigenvectors().col(d - 1);
    const Eigen::VectorXd s = e * dir;
    for (Eigen::Index i = 0; i < t; ++i) scores[static_cast<std::size_t>(i)] = s(i);
    return scores;
}

// r[p] = |corr(delta[p], principal score)| over the contributor's window, or
// nullopt when fewer than min_window entries exist.
inline std::optional<std::vector<double>> sensitivity_vector(
    const std::deque<std::pair<UserProfile, ParamVector>>& window, int min_window) {
    if (static_cast<int>(window.size()) < min_window || window.size() < 2) return std::nullopt;
    const auto scores = principal_scores(window);
    const std::size_t n = window.front().second.size();
    std::vector<double> r(n, 0.0), column(window.size());
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t t = 0; t < window.size(); ++t) column[t] = window[t].second[p];
        r[p] = pearson_abs(column, scores);
    }
    return r;
}

// `history` must already hold this round's (profile, delta) entries.
inline AggregationResult parameter_weighting(const ParamVector& global, const std::vector<LocalDelta>& deltas,
                                             const SensitivityHistory& history, double lr_g, int min_window = 3,
                                             bool inverse = false) {
    if (deltas.empty()) return detail::skipped_round(global, "no deltas received; global model unchanged");
    std::map<ContributorKey, std::vector<double>> r;
    std::vector<std::string> warnings;
    int fallback = 0;
    for (const auto* d : sorted_deltas(deltas)) {
        const ContributorKey key{d->node_id, d->teacher_id};
        std::optional<std::vector<double>> s;
        if (auto it = history.entries.find(key); it != history.entries.end()) s = sensitivity_vector(it->second, min_window);
        if (s) {
            if (inverse)
                for (auto& v : *s) v = 1.0 - v;
            r[key] = std::move(*s);
        } else {
            r[key] = std::vector<double>(global.size(), 1.0);
            ++fallback;
        }
    }
    if (fallback == static_cast<int>(deltas.size())) {
        auto out = fedavg(global, deltas, lr_g);
        out.warnings.push_back("no contributor has enough history for sensitivity analysis; used fedavg");
        return out;
    }
    auto out = parameter_weighted_average(global, deltas, r, lr_g);
    if (fallback > 0)
        out.warnings.insert(out.warnings.begin(),
                            std::to_string(fallback) + " contributor(s) below min_window; uniform weights used");
    return out;
}

// ---- user clustering --------------------------------------------------------

struct ClusterState {
    int model_id = 0;
    std::vector<ParamVector> centers;
    std::map<ContributorKey, int> assignment;  // 0-based center index
};

// Center 0 is the global model itself; the others are Gaussian perturbations
// with sigma = center_sigma * RMS(global).
inline ClusterState init_cluster_state(int model_id, const ParamVector& global, int eta_max, double center_sigma,
                                       std::uint64_t seed) {
    if (eta_max < 1) throw UsageError("eta_max must be >= 1");
    ClusterState s;
    s.model_id = model_id;
    const double rms = global.empty() ? 0.0 : l2_norm(global) / std::sqrt(static_cast<double>(global.size()));
    const double sigma = center_sigma * (rms > 0.0 ? rms : 1.0);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    s.centers.push_back(global);
    for (int k = 1; k < eta_max; ++k) {
        ParamVector c = global;
        for (auto& v : c.values()) v += sigma * normal(rng);
        s.centers.push_back(std::move(c));
    }
    return s;
}

// Nearest center by L2 distance; ties go to the lowest index.
inline int nearest_center(const ClusterState& state, const ParamVector& model) {
    int best = 0;
    double best_d = l2_distance(model, state.centers.at(0));
    for (std::size_t k = 1; k < state.centers.size(); ++k) {
        const double d = l2_distance(model, state.centers[k]);
        if (d < best_d) {
            best = static_cast<int>(k);
            best_d = d;
        }
    }
    return best;
}

inline ClusterState cluster_assign(ClusterState state, const std::map<ContributorKey, ParamVector>& local_models) {
    if (state.centers.empty()) throw UsageError("cluster_assign: centers not initialized");
    for (const auto& [key, params] : local_models) state.assignment[key] = nearest_center(state, params);
    return state;
}

struct ClusterUpdate {
    ClusterState state;
    bool skipped = false;
    std::vector<std::string> warnings;
    std::vector<int> member_counts;
};

// Each center with members moves by lr_g times the mean of its members'
// deltas; empty centers stay where they are.
inline ClusterUpdate cluster_update(ClusterState state, const std::vector<LocalDelta>& deltas, double lr_g,
                                    bool weight_by_samples = false) {
    if (!(lr_g > 0.0)) throw UsageError("global learning rate must be positive");
    ClusterUpdate out;
    const std::size_t k = state.centers.size();
    std::vector<std::vector<const LocalDelta*>> members(k);
    for (const auto* d : sorted_deltas(deltas)) {
        auto it = state.assignment.find({d->node_id, d->teacher_id});
        if (it == state.assignment.end()) {
            out.warnings.push_back("unassigned contributor node " + std::to_string(d->node_id) + " teacher " +
                                   std::to_string(d->teacher_id) + "; delta excluded");
            continue;
        }
        require_same_length(state.centers.at(static_cast<std::size_t>(it->second)), d->delta, "cluster_update");
        members[static_cast<std::size_t>(it->second)].push_back(d);
    }
    out.member_counts.assign(k, 0);
    bool any = false;
    for (std::size_t c = 0; c < k; ++c) {
        out.member_counts[c] = static_cast<int>(members[c].size());
        if (members[c].empty()) continue;
        any = true;
        std::vector<double> w(members[c].size(), 1.0);
        if (weight_by_samples)
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(members[c][i]->sample_count);
        state.centers[c] = detail::weighted_step(state.centers[c], members[c], w, lr_g);
    }
    if (!any) {
        out.skipped = true;
        out.warnings.push_back("all clusters empty; round skipped");
    }
    out.state = std::move(state);
    return out;
}

// ---- global profiles ----------------------------------------------------------

// Q_global[m] = sample-count weighted mean of every local profile of teacher m.
// Teachers without any local profile keep their previous global profile (or
// stay absent).
inline std::map<int, UserProfile> update_global_profile(std::map<int, UserProfile> global_profiles,
                                                        const std::map<ContributorKey, UserProfile>& local_profiles) {
    std::map<int, std::vector<const UserProfile*>> by_teacher;
    for (const auto& [key, p] : local_profiles)
        if (p.sample_count > 0) by_teacher[key.second].push_back(&p);
    for (const auto& [teacher, list] : by_teacher) {
        const std::size_t dim = list.front()->embedding.size();
        UserProfile g{teacher, kGlobalNode, std::vector<double>(dim, 0.0), 0, list.front()->residual_dim};
        double total = 0.0;
        for (const auto* p : list) total += p->sample_count;
        for (const auto* p : list) {
            if (p->embedding.size() != dim) throw UsageError("update_global_profile: profile dimension mismatch");
            const double w = p->sample_count / total;
            for (std::size_t k = 0; k < dim; ++k) g.embedding[k] += w * p->embedding[k];
            g.sample_count += p->sample_count;
        }
        global_profiles[teacher] = std::move(g);
    }
    return global_profiles;
}

}  // namespace fedlfd
