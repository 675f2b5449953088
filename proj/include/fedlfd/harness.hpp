#pragma once

// Simulation harness: builds a world from a ScenarioConfig, drives federated
// rounds (synchronous or bounded-staleness asynchronous), evaluates models and
// emits one metrics record per round.
//
// Round order: sample nodes -> node work (demonstrations, local updates,
// profiles) -> aggregation per model -> cross-task coupling step -> Omega
// update -> meta round -> evaluation.
//
// Seeds: every random stream is derive_seed(master, kind, entity, round) with
// the kinds listed in seed_kind below, so results do not depend on the worker
// count or on the order node jobs finish.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlfd/aggregation.hpp"
#include "fedlfd/checkpoint.hpp"
#include "fedlfd/config.hpp"
#include "fedlfd/cross_task.hpp"
#include "fedlfd/node.hpp"
#include "fedlfd/seed.hpp"
#include "fedlfd/taxonomy.hpp"
#include "fedlfd/tensor.hpp"

namespace fedlfd {

namespace seed_kind {
inline constexpr const char* model_init = "model-init";
inline constexpr const char* policy = "policy";
inline constexpr const char* mix = "node-mix";
inline constexpr const char* sample = "node-sample";
inline constexpr const char* staleness = "staleness";
inline constexpr const char* demo = "demo";
inline constexpr const char* shuffle = "shuffle";
inline constexpr const char* eval = "eval";
inline constexpr const char* teacher_eval = "teacher-eval";
inline constexpr const char* personal = "personal";
inline constexpr const char* centers = "centers";
inline constexpr const char* meta = "meta";
}  // namespace seed_kind

// ---- world ---------------------------------------------------------------------

struct NodeState {
    int id = 0;
    Platform platform;
    std::vector<int> eligible;                 // model ids
    std::map<int, int> teacher_samples;        // teacher -> demonstrations per (model, round)
    std::map<std::pair<int, int>, UserProfile> profiles;       // (model, teacher)
    std::map<std::pair<int, int>, ParamVector> local_models;  // (model, teacher): W^{l,m}
};

// Per-model view the aggregator keeps; only deltas and profiles feed it.
struct ModelAggState {
    ParamVector global;
    std::deque<ParamVector> snapshots;                  // [0] = current, [s] = s rounds old
    std::deque<std::vector<ParamVector>> center_snapshots;
    std::map<ContributorKey, UserProfile> local_profiles;  // latest received Q^{l,m}
    std::map<int, UserProfile> global_profiles;            // Q^{g,m}
    SensitivityHistory history;
    std::optional<ClusterState> clusters;
};

struct Aggregator {
    std::map<int, ModelAggState> models;
    std::optional<MultiTaskState> multitask;

    // Visits every number held on the aggregator side (privacy audit hook).
    void for_each_value(const std::function<void(double)>& fn) const {
        auto vec = [&](std::span<const double> v) {
            for (double x : v) fn(x);
        };
        for (const auto& [id, m] : models) {
            vec(m.global.values());
            for (const auto& s : m.snapshots) vec(s.values());
            for (const auto& cs : m.center_snapshots)
                for (const auto& c : cs) vec(c.values());
            for (const auto& [k, p] : m.local_profiles) vec(p.embedding);
            for (const auto& [k, p] : m.global_profiles) vec(p.embedding);
            for (const auto& [k, q] : m.history.entries)
                for (const auto& [p, d] : q) {
                    vec(p.embedding);
                    vec(d.values());
                }
            if (m.clusters)
                for (const auto& c : m.clusters->centers) vec(c.values());
        }
        if (multitask) vec(std::span<const double>(multitask->omega.data(), static_cast<std::size_t>(multitask->omega.size())));
    }
};

struct EvalSets {
    std::map<int, std::vector<Sample>> global;                           // model -> noise-free targets
    std::map<std::pair<int, int>, std::vector<Sample>> teacher;          // (model, teacher) -> biased targets
    std::map<std::pair<int, int>, std::vector<Sample>> personalization;  // (model, teacher) -> noisy adaptation set
};

struct World {
    ScenarioConfig cfg;
    Registry registry;
    std::map<int, GroundTruthPolicy> policies;
    std::map<int, TeacherSpec> teachers;
    std::vector<NodeState> nodes;
    Aggregator aggregator;
    EvalSets eval;
    int rounds_done = 0;

    const ModelSpec& spec(int model) const { return registry.model(model).spec; }

    MlpModel global_model(int model) const {
        return MlpModel(spec(model).arch, aggregator.models.at(model).global);
    }

    NodeState& node(int id) {
        for (auto& n : nodes)
            if (n.id == id) return n;
        throw NotFoundError("no node " + std::to_string(id));
    }

    const NodeState& node(int id) const { return const_cast<World*>(this)->node(id); }

    std::vector<int> teaching_teachers() const {
        std::vector<int> out;
        for (const auto& [id, _] : teachers)
            if (!cfg.is_holdout(id)) out.push_back(id);
        return out;
    }
};

// ---- reports -------------------------------------------------------------------

struct ModelRoundStats {
    int model_id = 0;
    double global_loss = 0.0;
    double param_norm = 0.0;
    bool skipped = false;
    std::vector<ContributorKey> participants;
    std::map<ContributorKey, double> weights;
    std::map<ContributorKey, int> clusters;
    std::vector<int> cluster_sizes;
    std::optional<SupportQuerySplit> meta_split;
};

struct EvalReport {
    std::map<int, double> global_loss;                       // model
    std::map<int, std::map<int, double>> teacher_loss;       // model -> teacher
    std::map<int, std::map<int, double>> holdout_loss;       // model -> holdout teacher (k-step adapted)

    double mean_teacher_loss() const {
        double acc = 0.0;
        int n = 0;
        for (const auto& [m, per] : teacher_loss)
            for (const auto& [t, v] : per) {
                acc += v;
                ++n;
            }
        return n ? acc / n : 0.0;
    }

    double mean_global_loss() const {
        double acc = 0.0;
        for (const auto& [m, v] : global_loss) acc += v;
        return global_loss.empty() ? 0.0 : acc / static_cast<double>(global_loss.size());
    }
};

struct RoundReport {
    int round = 0;
    std::vector<int> sampled_nodes;
    std::map<int, int> staleness;            // node -> staleness used
    std::map<int, int> staleness_histogram;  // staleness -> node count
    std::vector<ModelRoundStats> models;
    EvalReport eval;
    std::optional<double> alignment_loss;
    std::optional<double> multitask_penalty;
    std::vector<std::vector<double>> omega;
    std::optional<double> omega_trace_inverse;
    std::optional<double> omega_min_eig_inverse;
    std::vector<std::string> warnings;
    double duration_ms = 0.0;
};

// ---- construction ----------------------------------------------------------------

inline GroundTruthPolicy make_policy(const ModelConfig& m, std::uint64_t seed) {
    MlpArch arch;
    if (m.policy == "linear") {
        arch = MlpArch{{m.spec.arch.input_dim(), m.spec.arch.output_dim()}, Activation::identity, true};
    } else {
        arch = MlpArch{{m.spec.arch.input_dim(), m.policy_hidden, m.spec.arch.output_dim()}, Activation::tanh, true};
    }
    auto net = MlpModel::initialized(arch, seed);
    net.params = m.policy_gain * net.params;
    return GroundTruthPolicy{std::move(net), m.spec.loss, m.input_scale};
}

// Splits n into integer parts proportional to w (largest remainder, ties by index).
inline std::vector<int> apportion(int n, const std::vector<double>& w) {
    double total = 0.0;
    for (double x : w) total += x;
    std::vector<int> out(w.size(), 0);
    std::vector<std::pair<double, std::size_t>> rem;
    int used = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double exact = n * w[i] / total;
        out[i] = static_cast<int>(std::floor(exact));
        used += out[i];
        rem.emplace_back(exact - out[i], i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int k = 0; k < n - used; ++k) ++out[rem[static_cast<std::size_t>(k)].second];
    return out;
}

// Teacher mix per node: Dirichlet(alpha) over teacher clusters, split evenly
// inside a cluster. alpha == 0 means an even mix over teachers.
inline std::map<int, int> node_teacher_mix(const ScenarioConfig& cfg, const std::vector<int>& teachers,
                                           const std::map<int, TeacherSpec>& specs, int node_id) {
    std::vector<double> w(teachers.size(), 1.0);
    if (cfg.data.dirichlet_alpha > 0.0) {
        std::map<int, std::vector<std::size_t>> clusters;
        for (std::size_t i = 0; i < teachers.size(); ++i) {
            const auto& t = specs.at(teachers[i]);
            clusters[t.cluster_tag ? *t.cluster_tag : -1000000 - t.id].push_back(i);
        }
        Rng rng(derive_seed(cfg.seed, seed_kind::mix, static_cast<std::uint64_t>(node_id)));
        std::gamma_distribution<double> gamma(cfg.data.dirichlet_alpha, 1.0);
        for (const auto& [tag, members] : clusters) {
            const double g = std::max(gamma(rng), 1e-12);
            for (auto i : members) w[i] = g / static_cast<double>(members.size());
        }
    }
    const auto counts = apportion(cfg.data.samples_per_node, w);
    std::map<int, int> out;
    for (std::size_t i = 0; i < teachers.size(); ++i)
        if (counts[i] > 0) out[teachers[i]] = counts[i];
    return out;
}

inline std::vector<Sample> make_eval_set(const GroundTruthPolicy& policy, const TeacherSpec* teacher, int n,
                                         std::uint64_t seed, bool noisy) {
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto x = draw_input(policy, rng);
        std::vector<double> y;
        if (!teacher) {
            y = ideal_target(policy, x);
        } else {
            TeacherSpec t = *teacher;
            if (!noisy) t.noise_scale = 0.0;
            y = teacher_target(t, policy, x, rng);
        }
        out.push_back(Sample{std::move(x), std::move(y)});
    }
    return out;
}

inline World build_scenario(const ScenarioConfig& cfg) {
    validate(cfg);
    World w{cfg, Registry(cfg.taxonomy), {}, {}, {}, {}, {}, 0};
    for (const auto& m : cfg.models) {
        w.registry.register_model(m.spec, derive_seed(cfg.seed, seed_kind::model_init, static_cast<std::uint64_t>(m.spec.id)));
        w.policies.emplace(m.spec.id, make_policy(m, derive_seed(cfg.seed, seed_kind::policy, static_cast<std::uint64_t>(m.spec.id))));
    }
    for (const auto& p : cfg.platforms) w.registry.add_platform(p);
    for (const auto& t : cfg.teachers) w.teachers.emplace(t.id, t);

    const auto teaching = w.teaching_teachers();
    for (const auto& p : cfg.platforms) {
        NodeState n;
        n.id = p.id;
        n.platform = p;
        n.eligible = w.registry.eligible_models(p.id);
        n.teacher_samples = node_teacher_mix(cfg, teaching, w.teachers, p.id);
        w.nodes.push_back(std::move(n));
    }

    for (const auto& [id, gm] : w.registry.models()) {
        ModelAggState s;
        s.global = gm.params;
        s.snapshots.push_back(gm.params);
        s.history.window = cfg.strategy.window;
        if (cfg.strategy.kind == StrategyKind::user_clustering) {
            s.clusters = init_cluster_state(id, gm.params, cfg.strategy.eta_max, cfg.strategy.center_sigma,
                                            derive_seed(cfg.seed, seed_kind::centers, static_cast<std::uint64_t>(id)));
            s.center_snapshots.push_back(s.clusters->centers);
        }
        w.aggregator.models.emplace(id, std::move(s));
    }

    const auto& mt = cfg.cross_task.multitask;
    if (mt.enabled) {
        auto state = MultiTaskState::uniform(mt.members, mt.lambda);
        state.ridge = mt.ridge;
        if (!mt.learn_omega) {
            const auto n = static_cast<Eigen::Index>(mt.members.size());
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j)
                    state.omega(i, j) = mt.omega[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
        w.aggregator.multitask = std::move(state);
    }

    for (const auto& [id, policy] : w.policies) {
        w.eval.global[id] = make_eval_set(policy, nullptr, cfg.data.eval_samples,
                                          derive_seed(cfg.seed, seed_kind::eval, static_cast<std::uint64_t>(id)), false);
        for (const auto& [tid, t] : w.teachers) {
            const auto key = pack_ids(static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(tid));
            w.eval.teacher[{id, tid}] =
                make_eval_set(policy, &t, cfg.data.eval_samples, derive_seed(cfg.seed, seed_kind::teacher_eval, key), false);
            w.eval.personalization[{id, tid}] = make_eval_set(policy, &t, cfg.data.personalization_samples,
                                                              derive_seed(cfg.seed, seed_kind::personal, key), true);
        }
    }
    return w;
}

// ---- node work -----------------------------------------------------------------

inline std::uint64_t work_entity(int node, int model, int teacher) {
    return pack_ids(static_cast<std::uint64_t>(node), static_cast<std::uint64_t>(model), static_cast<std::uint64_t>(teacher));
}

// Demonstrations teacher m gives node l for model b in a round. Deterministic,
// so tests can rebuild the pooled data a run consumed.
inline std::vector<Demonstration> round_demonstrations(const World& w, int node, int model, int teacher, int round) {
    const auto& n = w.node(node);
    const int count = n.teacher_samples.at(teacher);
    return generate_demonstrations(w.teachers.at(teacher), w.spec(model), w.policies.at(model), count,
                                   derive_seed(w.cfg.seed, seed_kind::demo, work_entity(node, model, teacher),
                                               static_cast<std::uint64_t>(round)),
                                   round);
}

// Nodes sampled for a round: ceil(C * L) of the active platforms, uniformly
// without replacement, ascending by id.
inline std::vector<int> sample_nodes(const World& w, int round) {
    std::vector<int> pool;
    for (const auto& n : w.nodes)
        if (!n.eligible.empty() || !w.cfg.exclude_idle_platforms) pool.push_back(n.id);
    const auto k = static_cast<std::size_t>(std::ceil(w.cfg.sample_fraction * static_cast<double>(pool.size()) - 1e-12));
    Rng rng(derive_seed(w.cfg.seed, seed_kind::sample, 0, static_cast<std::uint64_t>(round)));
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(k, pool.size()));
    std::sort(pool.begin(), pool.end());
    return pool;
}

// Staleness of a node's snapshot: uniform in [0, min(max_staleness, available)].
inline int draw_staleness(const World& w, int node, int round, int max_staleness, int available) {
    const int hi = std::min(max_staleness, available);
    if (hi <= 0) return 0;
    Rng rng(derive_seed(w.cfg.seed, seed_kind::staleness, static_cast<std::uint64_t>(node), static_cast<std::uint64_t>(round)));
    return std::uniform_int_distribution<int>(0, hi)(rng);
}

template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::jthread> pool;
    const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    for (std::size_t t = 0; t < count; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    pool.clear();
    if (error) std::rethrow_exception(error);
}

struct WorkItem {
    int node = 0;
    int model = 0;
    int teacher = 0;
    int staleness = 0;
    ParamVector start;  // snapshot the local model starts from
};

struct WorkResult {
    LocalDelta delta;
    UserProfile profile;
    ParamVector local;
    std::vector<Sample> data;  // node-side only; used by the meta round, never by the aggregator
};

// ---- evaluation ----------------------------------------------------------------

inline bool meta_enabled_for(const ScenarioConfig& cfg, int model) {
    const auto& meta = cfg.cross_task.meta;
    if (!meta.enabled) return false;
    return meta.models.empty() || std::find(meta.models.begin(), meta.models.end(), model) != meta.models.end();
}

inline MlpModel personalize(const World& w, const MlpModel& init, int model, int teacher) {
    const auto& meta = w.cfg.cross_task.meta;
    const auto& data = w.eval.personalization.at({model, teacher});
    if (meta.cfg.personalization_steps == 0) return init;
    return init.with_params(adapt(init, data, meta.cfg.personalization_steps, meta.cfg.inner_lr, w.spec(model).loss));
}

// Global loss on noise-free data; per-teacher loss of the local models W^{l,m}
// (k-step adapted global model under meta) on that teacher's biased targets;
// holdout teachers always get the k-step adapted global model.
inline EvalReport evaluate(const World& w) {
    EvalReport r;
    for (const auto& [id, agg] : w.aggregator.models) {
        const auto& spec = w.spec(id);
        const MlpModel global(spec.arch, agg.global);
        r.global_loss[id] = mean_loss(global, w.eval.global.at(id), spec.loss);
        for (const auto& [tid, t] : w.teachers) {
            const auto& data = w.eval.teacher.at({id, tid});
            if (w.cfg.is_holdout(tid)) {
                r.holdout_loss[id][tid] = mean_loss(personalize(w, global, id, tid), data, spec.loss);
                continue;
            }
            if (meta_enabled_for(w.cfg, id)) {
                r.teacher_loss[id][tid] = mean_loss(personalize(w, global, id, tid), data, spec.loss);
                continue;
            }
            double acc = 0.0;
            int count = 0;
            for (const auto& n : w.nodes) {
                auto it = n.local_models.find({id, tid});
                if (it == n.local_models.end()) continue;
                acc += mean_loss(global.with_params(it->second), data, spec.loss);
                ++count;
            }
            if (count > 0) {
                r.teacher_loss[id][tid] = acc / count;
                continue;
            }
            // No local model yet: whatever the teacher would be served now.
            MlpModel serving = global;
            if (agg.clusters) {
                int center = 0;
                for (const auto& [key, c] : agg.clusters->assignment)
                    if (key.second == tid) {
                        center = c;
                        break;
                    }
                serving.params = agg.clusters->centers[static_cast<std::size_t>(center)];
            }
            r.teacher_loss[id][tid] = mean_loss(serving, data, spec.loss);
        }
    }
    return r;
}

// ---- rounds ----------------------------------------------------------------------

namespace detail {

inline ParamVector membership_weighted_mean(const ClusterState& s) {
    std::vector<int> counts(s.centers.size(), 0);
    for (const auto& [k, c] : s.assignment) ++counts[static_cast<std::size_t>(c)];
    int total = 0;
    for (int c : counts) total += c;
    if (total == 0) return s.centers.front();
    if (s.centers.size() == 1) return s.centers.front();
    ParamVector out = ParamVector::zeros_like(s.centers.front());
    for (std::size_t k = 0; k < s.centers.size(); ++k) {
        if (counts[k] == 0) continue;
        out = out + (static_cast<double>(counts[k]) / total) * s.centers[k];
    }
    return out;
}

inline int assigned_center(const ClusterState& s, int node, int teacher) {
    auto it = s.assignment.find({node, teacher});
    return it == s.assignment.end() ? 0 : it->second;
}

}  // namespace detail

inline RoundReport run_round(World& w, int round, int max_staleness) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& cfg = w.cfg;
    RoundReport rep;
    rep.round = round;
    rep.sampled_nodes = sample_nodes(w, round);

    // 1. node work items, in (node, model, teacher) order
    std::vector<WorkItem> items;
    for (int nid : rep.sampled_nodes) {
        const auto& node = w.node(nid);
        int stale = 0;
        if (max_staleness > 0) {
            int available = 0;
            for (int b : node.eligible)
                available = std::max(available, static_cast<int>(w.aggregator.models.at(b).snapshots.size()) - 1);
            stale = draw_staleness(w, nid, round, max_staleness, available);
        }
        rep.staleness[nid] = stale;
        ++rep.staleness_histogram[stale];
        for (int b : node.eligible) {
            const auto& agg = w.aggregator.models.at(b);
            const auto s = static_cast<std::size_t>(std::min<int>(stale, static_cast<int>(agg.snapshots.size()) - 1));
            for (const auto& [tid, count] : node.teacher_samples) {
                (void)count;
                WorkItem it{nid, b, tid, static_cast<int>(s), {}};
                if (agg.clusters) {
                    const auto& centers = agg.center_snapshots.at(std::min(s, agg.center_snapshots.size() - 1));
                    it.start = centers.at(static_cast<std::size_t>(detail::assigned_center(*agg.clusters, nid, tid)));
                } else {
                    it.start = agg.snapshots.at(s);
                }
                items.push_back(std::move(it));
            }
        }
    }

    std::vector<WorkResult> results(items.size());
    parallel_for(items.size(), cfg.workers, [&](std::size_t i) {
        const auto& it = items[i];
        const auto& node = w.node(it.node);
        const auto& spec = w.spec(it.model);
        const auto demos = round_demonstrations(w, it.node, it.model, it.teacher, round);
        const MlpModel start(spec.arch, it.start);
        WorkResult r;
        r.delta = local_update(start, demos, cfg.local, spec.loss, it.node,
                               derive_seed(cfg.seed, seed_kind::shuffle, work_entity(it.node, it.model, it.teacher),
                                           static_cast<std::uint64_t>(round)));
        r.delta.staleness = it.staleness;
        auto prev = node.profiles.find({it.model, it.teacher});
        const UserProfile base = prev != node.profiles.end() ? prev->second
                                                             : UserProfile::empty(it.teacher, it.node, cfg.profile_dim);
        r.profile = update_profile(base, demos, w.policies.at(it.model), cfg.profile_alpha);
        r.local = local_params(it.start, r.delta);
        if (meta_enabled_for(cfg, it.model)) r.data = to_samples(demos);
        results[i] = std::move(r);
    });

    // Node-side state, applied in item order.
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& node = w.node(items[i].node);
        node.profiles[{items[i].model, items[i].teacher}] = results[i].profile;
        node.local_models[{items[i].model, items[i].teacher}] = results[i].local;
    }

    // 2. aggregation per model; only deltas and profiles cross over.
    for (auto& [b, agg] : w.aggregator.models) {
        ModelRoundStats stats;
        stats.model_id = b;
        std::vector<LocalDelta> deltas;
        std::map<ContributorKey, UserProfile> round_profiles;
        std::map<ContributorKey, ParamVector> locals;
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (items[i].model != b) continue;
            const ContributorKey key{items[i].node, items[i].teacher};
            deltas.push_back(results[i].delta);
            round_profiles[key] = results[i].profile;
            locals[key] = results[i].local;
            stats.participants.push_back(key);
        }
        for (const auto& [k, p] : round_profiles) agg.local_profiles[k] = p;
        agg.global_profiles = update_global_profile(std::move(agg.global_profiles), agg.local_profiles);

        AggregationResult res;
        switch (cfg.strategy.kind) {
            case StrategyKind::fedavg:
                res = fedavg(agg.global, deltas, cfg.lr_global, cfg.strategy.weight_by_samples);
                break;
            case StrategyKind::user_weighting:
                res = user_weighting(agg.global, deltas, round_profiles, agg.global_profiles, cfg.lr_global,
                                     cfg.strategy.epsilon_floor);
                break;
            case StrategyKind::parameter_weighting:
                for (const auto& d : deltas) agg.history.push({d.node_id, d.teacher_id}, round_profiles.at({d.node_id, d.teacher_id}), d.delta);
                res = parameter_weighting(agg.global, deltas, agg.history, cfg.lr_global, cfg.strategy.min_window,
                                          cfg.strategy.inverse_sensitivity);
                break;
            case StrategyKind::user_clustering: {
                auto state = cluster_assign(std::move(*agg.clusters), locals);
                // Member deltas are taken against the center each member now belongs to.
                std::vector<LocalDelta> member_deltas = deltas;
                for (auto& d : member_deltas) {
                    const auto& c = state.centers[static_cast<std::size_t>(state.assignment.at({d.node_id, d.teacher_id}))];
                    d.delta = locals.at({d.node_id, d.teacher_id}) - c;
                }
                auto upd = cluster_update(std::move(state), member_deltas, cfg.lr_global, cfg.strategy.weight_by_samples);
                res.params = detail::membership_weighted_mean(upd.state);
                res.skipped = upd.skipped;
                res.warnings = std::move(upd.warnings);
                for (const auto& d : member_deltas) stats.clusters[{d.node_id, d.teacher_id}] = upd.state.assignment.at({d.node_id, d.teacher_id});
                stats.cluster_sizes = upd.member_counts;
                agg.clusters = std::move(upd.state);
                break;
            }
        }
        agg.global = std::move(res.params);
        stats.skipped = res.skipped;
        stats.weights = std::move(res.weights);
        for (auto& msg : res.warnings) rep.warnings.push_back("model " + std::to_string(b) + ": " + msg);
        rep.models.push_back(std::move(stats));
    }

    // 3. cross-task coupling step on the global models, then Omega.
    const auto& xt = cfg.cross_task;
    if (xt.coupling_active()) {
        ModelParams globals;
        for (const auto& [b, agg] : w.aggregator.models) globals.emplace(b, agg.global);
        ModelParams grads = zero_grads(globals);
        if (!xt.transfer.empty()) {
            auto al = alignment_loss_and_grad(xt.transfer, globals);
            rep.alignment_loss = al.loss;
            for (auto& [b, g] : grads) g = g + al.grads.at(b);
        }
        if (w.aggregator.multitask && xt.multitask.lambda > 0.0) {
            auto mt = multitask_penalty_and_grad(*w.aggregator.multitask, globals);
            rep.multitask_penalty = mt.loss;
            for (auto& [b, g] : grads) g = g + mt.grads.at(b);
        }
        for (auto& [b, agg] : w.aggregator.models) {
            const auto& g = grads.at(b);
            agg.global = sgd_step(agg.global, g, xt.coupling_lr);
            if (agg.clusters)
                for (auto& c : agg.clusters->centers) c = sgd_step(c, g, xt.coupling_lr);
            globals.at(b) = agg.global;
        }
        if (w.aggregator.multitask && xt.multitask.learn_omega) {
            auto upd = update_omega(std::move(*w.aggregator.multitask), globals);
            for (auto& msg : upd.warnings) rep.warnings.push_back("multitask: " + msg);
            w.aggregator.multitask = std::move(upd.state);
        }
        if (w.aggregator.multitask) {
            const auto chk = check_omega(w.aggregator.multitask->omega);
            rep.omega_trace_inverse = chk.trace_inverse;
            rep.omega_min_eig_inverse = chk.min_eig_inverse;
            const auto& om = w.aggregator.multitask->omega;
            for (Eigen::Index i = 0; i < om.rows(); ++i) {
                rep.omega.emplace_back();
                for (Eigen::Index j = 0; j < om.cols(); ++j) rep.omega.back().push_back(om(i, j));
            }
        }
    }

    // 4. meta round.
    if (xt.meta.enabled) {
        for (auto& stats : rep.models) {
            const int b = stats.model_id;
            if (!meta_enabled_for(cfg, b)) continue;
            std::map<int, std::vector<std::vector<Sample>>> teacher_data;
            for (std::size_t i = 0; i < items.size(); ++i)
                if (items[i].model == b) teacher_data[items[i].teacher].push_back(results[i].data);
            auto& agg = w.aggregator.models.at(b);
            auto res = meta_round(MlpModel(w.spec(b).arch, agg.global), teacher_data, xt.meta.cfg, w.spec(b).loss,
                                  derive_seed(cfg.seed, seed_kind::meta, static_cast<std::uint64_t>(b),
                                              static_cast<std::uint64_t>(round)));
            for (auto& msg : res.warnings) rep.warnings.push_back("model " + std::to_string(b) + " meta: " + msg);
            if (!res.skipped) stats.meta_split = res.split;
            agg.global = std::move(res.params);
        }
    }

    // 5. snapshots for stale readers.
    const std::size_t keep = static_cast<std::size_t>(std::max(cfg.async.max_staleness, max_staleness)) + 1;
    for (auto& [b, agg] : w.aggregator.models) {
        agg.snapshots.push_front(agg.global);
        while (agg.snapshots.size() > keep) agg.snapshots.pop_back();
        if (agg.clusters) {
            agg.center_snapshots.push_front(agg.clusters->centers);
            while (agg.center_snapshots.size() > keep) agg.center_snapshots.pop_back();
        }
        if (!agg.global.all_finite()) throw NumericError("model " + std::to_string(b) + " diverged (non-finite parameters)");
    }

    rep.eval = evaluate(w);
    for (auto& stats : rep.models) {
        const auto& agg = w.aggregator.models.at(stats.model_id);
        stats.global_loss = rep.eval.global_loss.at(stats.model_id);
        stats.param_norm = l2_norm(agg.global);
    }
    ++w.rounds_done;
    rep.duration_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline RoundReport run_round_sync(World& w, int round) { return run_round(w, round, 0); }

inline RoundReport run_round_async(World& w, int round) { return run_round(w, round, w.cfg.async.max_staleness); }

// Runs the configured number of rounds (or `rounds` when given).
inline std::vector<RoundReport> run_rounds(World& w, std::optional<int> rounds = std::nullopt,
                                           const std::function<void(const RoundReport&)>& sink = {}) {
    std::vector<RoundReport> out;
    const int n = rounds.value_or(w.cfg.rounds);
    for (int r = 0; r < n; ++r) {
        const int idx = w.rounds_done;
        auto rep = w.cfg.async.enabled ? run_round_async(w, idx) : run_round_sync(w, idx);
        if (sink) sink(rep);
        out.push_back(std::move(rep));
    }
    return out;
}

// ---- metrics ---------------------------------------------------------------------

inline nlohmann::json key_json(const ContributorKey& k) { return nlohmann::json::array({k.first, k.second}); }

inline nlohmann::json eval_json(const EvalReport& e) {
    auto nested = [](const std::map<int, std::map<int, double>>& m) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [b, per] : m)
            for (const auto& [t, v] : per) j[std::to_string(b)][std::to_string(t)] = v;
        return j;
    };
    nlohmann::json g = nlohmann::json::object();
    for (const auto& [b, v] : e.global_loss) g[std::to_string(b)] = v;
    return {{"global_loss", g},
            {"teacher_loss", nested(e.teacher_loss)},
            {"holdout_loss", nested(e.holdout_loss)},
            {"mean_global_loss", e.mean_global_loss()},
            {"mean_teacher_loss", e.mean_teacher_loss()}};
}

// One self-contained record. Holds losses, norms, weights and assignments only.
inline nlohmann::json round_record(const RoundReport& r, bool include_timing) {
    using nlohmann::json;
    json models = json::array();
    for (const auto& m : r.models) {
        json participants = json::array();
        for (const auto& k : m.participants) participants.push_back(key_json(k));
        json weights = json::array();
        for (const auto& [k, v] : m.weights) weights.push_back({k.first, k.second, v});
        json clusters = json::array();
        for (const auto& [k, c] : m.clusters) clusters.push_back({k.first, k.second, c});
        json jm = {{"model", m.model_id},     {"global_loss", m.global_loss}, {"param_norm", m.param_norm},
                   {"skipped", m.skipped},    {"participants", participants}, {"weights", weights},
                   {"clusters", clusters},    {"cluster_sizes", m.cluster_sizes}};
        if (m.meta_split) jm["meta_split"] = {{"support", m.meta_split->support}, {"query", m.meta_split->query}};
        models.push_back(jm);
    }
    json stale = json::object();
    for (const auto& [s, n] : r.staleness_histogram) stale[std::to_string(s)] = n;
    json per_node = json::object();
    for (const auto& [node, s] : r.staleness) per_node[std::to_string(node)] = s;
    json j = {{"type", "round"},
              {"round", r.round},
              {"sampled_nodes", r.sampled_nodes},
              {"staleness", per_node},
              {"staleness_histogram", stale},
              {"models", models},
              {"eval", eval_json(r.eval)},
              {"warnings", r.warnings}};
    if (r.alignment_loss) j["alignment_loss"] = *r.alignment_loss;
    if (r.multitask_penalty) j["multitask_penalty"] = *r.multitask_penalty;
    if (!r.omega.empty()) j["omega"] = r.omega;
    if (r.omega_trace_inverse) j["omega_trace_inverse"] = *r.omega_trace_inverse;
    if (r.omega_min_eig_inverse) j["omega_min_eig_inverse"] = *r.omega_min_eig_inverse;
    if (include_timing) j["duration_ms"] = r.duration_ms;
    return j;
}

inline nlohmann::json summary_record(const World& w, const std::vector<RoundReport>& reports) {
    nlohmann::json j = {{"type", "summary"}, {"name", w.cfg.name}, {"seed", w.cfg.seed}, {"rounds", w.rounds_done}};
    if (!reports.empty()) j["final"] = eval_json(reports.back().eval);
    return j;
}

// Writes final global models (and cluster centers) as FLFD checkpoints.
inline std::vector<std::string> write_checkpoints(const World& w, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> written;
    for (const auto& [b, agg] : w.aggregator.models) {
        const auto path = dir / ("model_" + std::to_string(b) + ".flfd");
        write_checkpoint(path.string(), Checkpoint{w.spec(b).name.empty() ? "model " + std::to_string(b) : w.spec(b).name, agg.global});
        written.push_back(path.string());
        if (agg.clusters) {
            for (std::size_t k = 0; k < agg.clusters->centers.size(); ++k) {
                const auto cpath = dir / ("model_" + std::to_string(b) + "_center_" + std::to_string(k) + ".flfd");
                write_checkpoint(cpath.string(), Checkpoint{"model " + std::to_string(b) + " center " + std::to_string(k),
                                                            agg.clusters->centers[k]});
                written.push_back(cpath.string());
            }
        }
    }
    return written;
}

// Full run with metrics written to dir/metrics.jsonl and checkpoints to dir.
inline std::vector<RoundReport> run_experiment(World& w, const std::filesystem::path& dir,
                                               std::optional<int> rounds = std::nullopt) {
    std::filesystem::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw Error("cannot write metrics to " + (dir / "metrics.jsonl").string());
    auto reports = run_rounds(w, rounds, [&](const RoundReport& r) {
        metrics << round_record(r, w.cfg.include_timing).dump() << '\n';
        metrics.flush();
    });
    metrics << summary_record(w, reports).dump() << '\n';
    write_checkpoints(w, dir);
    return reports;
}

}  // namespace fedlfd
