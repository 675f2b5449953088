#pragma once

// Experiment configuration: schema, strict JSON reading (unknown keys are
// errors), exhaustive validation and the built-in CRM recycling preset.
//
// Top-level keys (all optional except models/platforms/teachers):
//
//   name, seed, rounds, lr_global, sample_fraction, workers,
//   profile_dim, profile_alpha, exclude_idle_platforms, holdout_teachers,
//   taxonomy   {sensors, robots, tasks}
//   models     [{id, name, sensors, robots, tasks, arch{layer_sizes, activation, bias},
//                loss, policy, policy_hidden, policy_gain, input_scale}]
//   platforms  [{id, sensors, robots, tasks}]
//   teachers   [{id, bias, noise_scale, skill, cluster}]
//   data       {samples_per_node, dirichlet_alpha, eval_samples, personalization_samples}
//   local      {lr, epochs, batch_size, weight_decay}
//   strategy   {kind, epsilon_floor, window, min_window, inverse_sensitivity, eta_max,
//               center_sigma, weight_by_samples}
//   async      {enabled, max_staleness}
//   cross_task {coupling_lr, transfer[{model_a, model_b, first_layer, last_layer, weight}],
//               multitask{enabled, members, lambda, learn_omega, omega, ridge},
//               meta{enabled, models, inner_lr, outer_lr, inner_steps, support_fraction,
//                    first_order, personalization_steps}}
//   metrics    {include_timing}

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlfd/aggregation.hpp"
#include "fedlfd/cross_task.hpp"
#include "fedlfd/error.hpp"
#include "fedlfd/node.hpp"
#include "fedlfd/taxonomy.hpp"

namespace fedlfd {

using nlohmann::json;

struct ModelConfig {
    ModelSpec spec;
    std::string policy = "mlp";  // "linear" | "mlp"
    std::size_t policy_hidden = 8;
    double policy_gain = 2.0;
    double input_scale = 1.0;

    bool operator==(const ModelConfig&) const = default;
};

struct DataConfig {
    int samples_per_node = 16;     // per (node, model, round), split among the node's teachers
    double dirichlet_alpha = 0.0;  // 0: even teacher mix at every node (iid)
    int eval_samples = 200;
    int personalization_samples = 16;

    bool operator==(const DataConfig&) const = default;
};

struct AsyncConfig {
    bool enabled = false;
    int max_staleness = 0;

    bool operator==(const AsyncConfig&) const = default;
};

struct MultiTaskConfig {
    bool enabled = false;
    std::vector<int> members;
    double lambda = 0.0;
    bool learn_omega = true;
    std::vector<std::vector<double>> omega;  // a-priori Omega when learn_omega is false
    double ridge = 1e-8;

    bool operator==(const MultiTaskConfig&) const = default;
};

struct MetaSettings {
    bool enabled = false;
    std::vector<int> models;  // empty: every model
    MetaConfig cfg;

    bool operator==(const MetaSettings&) const = default;
};

struct CrossTaskConfig {
    double coupling_lr = 0.01;
    std::vector<TransferPairSpec> transfer;
    MultiTaskConfig multitask;
    MetaSettings meta;

    bool coupling_active() const {
        bool any = multitask.enabled && multitask.lambda > 0.0;
        for (const auto& t : transfer) any = any || t.weight > 0.0;
        return any;
    }

    bool operator==(const CrossTaskConfig&) const = default;
};

struct ScenarioConfig {
    std::string name = "scenario";
    std::uint64_t seed = 1;
    int rounds = 30;
    double lr_global = 1.0;
    double sample_fraction = 1.0;
    int workers = 1;
    std::size_t profile_dim = kDefaultProfileDim;
    double profile_alpha = 0.1;
    bool exclude_idle_platforms = true;
    std::vector<int> holdout_teachers;  // evaluated only, never teach at a node
    bool include_timing = false;

    Taxonomy taxonomy;
    std::vector<ModelConfig> models;
    std::vector<Platform> platforms;
    std::vector<TeacherSpec> teachers;
    DataConfig data;
    LocalTrainConfig local;
    AggregationStrategy strategy;
    AsyncConfig async;
    CrossTaskConfig cross_task;

    bool is_holdout(int teacher) const {
        return std::find(holdout_teachers.begin(), holdout_teachers.end(), teacher) != holdout_teachers.end();
    }

    bool operator==(const ScenarioConfig&) const = default;
};

// ---- validation -----------------------------------------------------------------

// Every problem found, not just the first.
inline std::vector<std::string> validation_errors(const ScenarioConfig& c) {
    std::vector<std::string> e;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) e.push_back(msg);
    };
    auto guard = [&](auto&& fn) {
        try {
            fn();
        } catch (const Error& ex) {
            e.push_back(ex.what());
        }
    };

    check(c.rounds >= 1, "rounds must be >= 1");
    check(c.lr_global > 0.0, "lr_global must be positive");
    check(c.sample_fraction > 0.0 && c.sample_fraction <= 1.0, "sample_fraction must lie in (0, 1]");
    check(c.workers >= 1, "workers must be >= 1");
    check(c.profile_dim >= 2 && c.profile_dim % 2 == 0, "profile_dim must be even and >= 2");
    check(c.profile_alpha > 0.0 && c.profile_alpha <= 1.0, "profile_alpha must lie in (0, 1]");
    check(c.data.samples_per_node >= 1, "data.samples_per_node must be >= 1");
    check(c.data.dirichlet_alpha >= 0.0, "data.dirichlet_alpha must be >= 0");
    check(c.data.eval_samples >= 1, "data.eval_samples must be >= 1");
    check(c.data.personalization_samples >= 1, "data.personalization_samples must be >= 1");
    check(c.local.lr > 0.0, "local.lr must be positive");
    check(c.local.epochs >= 0, "local.epochs must be >= 0");
    check(c.local.batch_size >= 1, "local.batch_size must be >= 1");
    check(c.local.weight_decay >= 0.0, "local.weight_decay must be >= 0");
    check(c.async.max_staleness >= 0, "async.max_staleness must be >= 0");
    check(c.cross_task.coupling_lr > 0.0, "cross_task.coupling_lr must be positive");
    guard([&] { c.strategy.validate(); });
    guard([&] { c.taxonomy.validate(); });

    std::set<int> model_ids;
    std::map<int, std::size_t> param_len;
    ModelParams shapes;
    for (const auto& m : c.models) {
        const std::string tag = "model " + std::to_string(m.spec.id);
        check(model_ids.insert(m.spec.id).second, tag + ": duplicate id");
        check(m.spec.id >= 1, tag + ": ids start at 1");
        check(m.policy == "linear" || m.policy == "mlp", tag + ": policy must be 'linear' or 'mlp'");
        check(m.policy_hidden >= 1, tag + ": policy_hidden must be >= 1");
        check(std::isfinite(m.policy_gain) && m.policy_gain > 0.0, tag + ": policy_gain must be positive");
        check(m.input_scale > 0.0, tag + ": input_scale must be positive");
        guard([&] { require_subset(m.spec.sensors, c.taxonomy.sensors, tag + " sensors"); });
        guard([&] { require_subset(m.spec.robots, c.taxonomy.robots, tag + " robots"); });
        guard([&] { require_subset(m.spec.tasks, c.taxonomy.tasks, tag + " tasks"); });
        bool arch_ok = true;
        guard([&] {
            try {
                m.spec.arch.validate();
            } catch (...) {
                arch_ok = false;
                throw;
            }
        });
        if (arch_ok) {
            if (m.spec.loss == LossKind::cross_entropy)
                check(m.spec.arch.output_dim() >= 2, tag + ": cross_entropy needs at least 2 output classes");
            param_len[m.spec.id] = m.spec.arch.param_count();
            shapes.emplace(m.spec.id, ParamVector(std::vector<double>(m.spec.arch.param_count(), 0.0), m.spec.arch.shape()));
        }
    }
    check(!c.models.empty(), "at least one model is required");

    std::set<int> platform_ids;
    for (const auto& p : c.platforms) {
        const std::string tag = "platform " + std::to_string(p.id);
        check(platform_ids.insert(p.id).second, tag + ": duplicate id");
        check(p.id >= 1, tag + ": ids start at 1");
        guard([&] { require_subset(p.sensors, c.taxonomy.sensors, tag + " sensors"); });
        guard([&] { require_subset(p.robots, c.taxonomy.robots, tag + " robots"); });
        guard([&] { require_subset(p.tasks, c.taxonomy.tasks, tag + " tasks"); });
    }
    check(!c.platforms.empty(), "at least one platform is required");

    std::size_t active_platforms = 0;
    for (const auto& p : c.platforms) {
        bool eligible = false;
        for (const auto& m : c.models) eligible = eligible || intersects(m.spec.tasks, p.tasks);
        if (eligible || !c.exclude_idle_platforms) ++active_platforms;
    }
    check(c.sample_fraction * static_cast<double>(active_platforms) >= 1.0,
          "sample_fraction * platforms = " + std::to_string(c.sample_fraction * static_cast<double>(active_platforms)) +
              " < 1: no node would be sampled");

    std::set<int> teacher_ids;
    int teaching = 0;
    for (const auto& t : c.teachers) {
        check(teacher_ids.insert(t.id).second, "teacher " + std::to_string(t.id) + ": duplicate id");
        check(t.id >= 1, "teacher " + std::to_string(t.id) + ": ids start at 1");
        guard([&] { t.validate(); });
        if (!c.is_holdout(t.id)) ++teaching;
    }
    check(teaching >= 1, "at least one non-holdout teacher is required");
    for (int h : c.holdout_teachers)
        check(teacher_ids.contains(h), "holdout teacher " + std::to_string(h) + " is not defined");

    for (const auto& t : c.cross_task.transfer) {
        if (!shapes.contains(t.model_a) || !shapes.contains(t.model_b)) {
            e.push_back("transfer pair references an unknown model");
            continue;
        }
        guard([&] { validate_transfer_pair(t, shapes); });
    }
    const auto& mt = c.cross_task.multitask;
    if (mt.enabled) {
        check(mt.members.size() >= 2, "multitask.members needs at least two models");
        check(mt.lambda >= 0.0, "multitask.lambda must be >= 0");
        check(mt.ridge > 0.0, "multitask.ridge must be positive");
        std::set<std::size_t> lens;
        for (int id : mt.members) {
            if (!param_len.contains(id)) {
                e.push_back("multitask member " + std::to_string(id) + " is not a model");
                continue;
            }
            lens.insert(param_len[id]);
        }
        check(lens.size() <= 1, "multitask members must share one parameter length");
        if (!mt.learn_omega) {
            const std::size_t n = mt.members.size();
            bool square = mt.omega.size() == n;
            for (const auto& row : mt.omega) square = square && row.size() == n;
            check(square, "multitask.omega must be a members x members matrix");
            if (square && n > 0) {
                Eigen::MatrixXd om(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        om(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = mt.omega[i][j];
                const auto chk = check_omega(om);
                check(chk.asymmetry <= 1e-12 && chk.min_eig > 0.0, "multitask.omega must be symmetric positive definite");
                check(std::abs(chk.trace_inverse - 1.0) <= 1e-9, "multitask.omega must satisfy tr(omega^-1) = 1");
            }
        }
    }
    if (c.cross_task.meta.enabled) {
        guard([&] { c.cross_task.meta.cfg.validate(); });
        for (int id : c.cross_task.meta.models)
            check(model_ids.contains(id), "meta model " + std::to_string(id) + " is not a model");
    } else if (c.cross_task.meta.cfg.personalization_steps < 0) {
        e.push_back("meta.personalization_steps must be >= 0");
    }
    return e;
}

inline void validate(const ScenarioConfig& c) {
    const auto errors = validation_errors(c);
    if (errors.empty()) return;
    std::ostringstream os;
    os << "invalid configuration (" << errors.size() << " problem" << (errors.size() == 1 ? "" : "s") << "):";
    for (const auto& msg : errors) os << "\n  - " << msg;
    throw ConfigError(os.str());
}

// ---- JSON writing -----------------------------------------------------------------

inline json config_to_json(const ScenarioConfig& c) {
    json models = json::array();
    for (const auto& m : c.models) {
        json jm = m.spec;
        jm["policy"] = m.policy;
        jm["policy_hidden"] = m.policy_hidden;
        jm["policy_gain"] = m.policy_gain;
        jm["input_scale"] = m.input_scale;
        models.push_back(jm);
    }
    json teachers = json::array();
    for (const auto& t : c.teachers) {
        json jt = {{"id", t.id}, {"bias", t.bias}, {"noise_scale", t.noise_scale}, {"skill", t.skill}};
        if (t.cluster_tag) jt["cluster"] = *t.cluster_tag;
        teachers.push_back(jt);
    }
    json transfer = json::array();
    for (const auto& t : c.cross_task.transfer)
        transfer.push_back({{"model_a", t.model_a},
                            {"model_b", t.model_b},
                            {"first_layer", t.first_layer},
                            {"last_layer", t.last_layer},
                            {"weight", t.weight}});
    const auto& mt = c.cross_task.multitask;
    const auto& meta = c.cross_task.meta;
    return json{
        {"name", c.name},
        {"seed", c.seed},
        {"rounds", c.rounds},
        {"lr_global", c.lr_global},
        {"sample_fraction", c.sample_fraction},
        {"workers", c.workers},
        {"profile_dim", c.profile_dim},
        {"profile_alpha", c.profile_alpha},
        {"exclude_idle_platforms", c.exclude_idle_platforms},
        {"holdout_teachers", c.holdout_teachers},
        {"taxonomy", c.taxonomy},
        {"models", models},
        {"platforms", c.platforms},
        {"teachers", teachers},
        {"data",
         {{"samples_per_node", c.data.samples_per_node},
          {"dirichlet_alpha", c.data.dirichlet_alpha},
          {"eval_samples", c.data.eval_samples},
          {"personalization_samples", c.data.personalization_samples}}},
        {"local",
         {{"lr", c.local.lr},
          {"epochs", c.local.epochs},
          {"batch_size", c.local.batch_size},
          {"weight_decay", c.local.weight_decay}}},
        {"strategy",
         {{"kind", to_string(c.strategy.kind)},
          {"epsilon_floor", c.strategy.epsilon_floor},
          {"window", c.strategy.window},
          {"min_window", c.strategy.min_window},
          {"inverse_sensitivity", c.strategy.inverse_sensitivity},
          {"eta_max", c.strategy.eta_max},
          {"center_sigma", c.strategy.center_sigma},
          {"weight_by_samples", c.strategy.weight_by_samples}}},
        {"async", {{"enabled", c.async.enabled}, {"max_staleness", c.async.max_staleness}}},
        {"cross_task",
         {{"coupling_lr", c.cross_task.coupling_lr},
          {"transfer", transfer},
          {"multitask",
           {{"enabled", mt.enabled},
            {"members", mt.members},
            {"lambda", mt.lambda},
            {"learn_omega", mt.learn_omega},
            {"omega", mt.omega},
            {"ridge", mt.ridge}}},
          {"meta",
           {{"enabled", meta.enabled},
            {"models", meta.models},
            {"inner_lr", meta.cfg.inner_lr},
            {"outer_lr", meta.cfg.outer_lr},
            {"inner_steps", meta.cfg.inner_steps},
            {"support_fraction", meta.cfg.support_fraction},
            {"first_order", meta.cfg.first_order},
            {"personalization_steps", meta.cfg.personalization_steps}}}}},
        {"metrics", {{"include_timing", c.include_timing}}},
    };
}

// ---- JSON reading -------------------------------------------------------------------

namespace detail {

// Reads fields of one JSON object, records type problems and, on finish(),
// every key that was never consumed.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) errors_.push_back(path_ + ": expected an object");
    }

    template <typename T>
    void opt(const char* key, T& out) {
        if (!j_.is_object() || !j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            errors_.push_back(path_ + "." + key + ": wrong type (" + j_.at(key).dump() + ")");
        }
    }

    template <typename T>
    void req(const char* key, T& out) {
        if (!j_.is_object() || !j_.contains(key)) {
            errors_.push_back(path_ + "." + key + ": required key missing");
            return;
        }
        opt(key, out);
    }

    const json* child(const char* key) {
        if (!j_.is_object() || !j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() {
        if (!j_.is_object()) return;
        for (const auto& [k, _] : j_.items())
            if (!seen_.contains(k)) errors_.push_back(path_ + "." + k + ": unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

template <typename Fn>
void each(const json* arr, const std::string& path, std::vector<std::string>& errors, Fn&& fn) {
    if (!arr) return;
    if (!arr->is_array()) {
        errors.push_back(path + ": expected an array");
        return;
    }
    for (std::size_t i = 0; i < arr->size(); ++i) fn((*arr)[i], path + "[" + std::to_string(i) + "]");
}

inline void read_enum(ObjectReader& r, const char* key, const std::string& path, std::vector<std::string>& errors,
                      auto&& parse) {
    std::string s;
    r.opt(key, s);
    if (s.empty()) return;
    try {
        parse(s);
    } catch (const ConfigError& ex) {
        errors.push_back(path + "." + key + ": " + ex.what());
    }
}

}  // namespace detail

inline ScenarioConfig config_from_json(const json& root) {
    using detail::ObjectReader;
    std::vector<std::string> errors;
    ScenarioConfig c;
    ObjectReader r(root, "config", errors);
    r.opt("name", c.name);
    r.opt("seed", c.seed);
    r.opt("rounds", c.rounds);
    r.opt("lr_global", c.lr_global);
    r.opt("sample_fraction", c.sample_fraction);
    r.opt("workers", c.workers);
    r.opt("profile_dim", c.profile_dim);
    r.opt("profile_alpha", c.profile_alpha);
    r.opt("exclude_idle_platforms", c.exclude_idle_platforms);
    r.opt("holdout_teachers", c.holdout_teachers);

    if (const json* t = r.child("taxonomy")) {
        ObjectReader tr(*t, "config.taxonomy", errors);
        tr.opt("sensors", c.taxonomy.sensors);
        tr.opt("robots", c.taxonomy.robots);
        tr.opt("tasks", c.taxonomy.tasks);
        tr.finish();
    }

    const json* models = r.child("models");
    if (!models) errors.push_back("config.models: required key missing");
    detail::each(models, "config.models", errors, [&](const json& jm, const std::string& path) {
        ModelConfig m;
        ObjectReader mr(jm, path, errors);
        mr.req("id", m.spec.id);
        mr.opt("name", m.spec.name);
        mr.req("sensors", m.spec.sensors);
        mr.req("robots", m.spec.robots);
        mr.req("tasks", m.spec.tasks);
        detail::read_enum(mr, "loss", path, errors, [&](const std::string& s) { m.spec.loss = loss_from_string(s); });
        mr.opt("policy", m.policy);
        mr.opt("policy_hidden", m.policy_hidden);
        mr.opt("policy_gain", m.policy_gain);
        mr.opt("input_scale", m.input_scale);
        if (const json* a = mr.child("arch")) {
            ObjectReader ar(*a, path + ".arch", errors);
            ar.req("layer_sizes", m.spec.arch.layer_sizes);
            detail::read_enum(ar, "activation", path + ".arch", errors,
                              [&](const std::string& s) { m.spec.arch.hidden = activation_from_string(s); });
            ar.opt("bias", m.spec.arch.bias);
            ar.finish();
        } else {
            errors.push_back(path + ".arch: required key missing");
        }
        mr.finish();
        c.models.push_back(std::move(m));
    });

    const json* platforms = r.child("platforms");
    if (!platforms) errors.push_back("config.platforms: required key missing");
    detail::each(platforms, "config.platforms", errors, [&](const json& jp, const std::string& path) {
        Platform p;
        ObjectReader pr(jp, path, errors);
        pr.req("id", p.id);
        pr.req("sensors", p.sensors);
        pr.req("robots", p.robots);
        pr.req("tasks", p.tasks);
        pr.finish();
        c.platforms.push_back(std::move(p));
    });

    const json* teachers = r.child("teachers");
    if (!teachers) errors.push_back("config.teachers: required key missing");
    detail::each(teachers, "config.teachers", errors, [&](const json& jt, const std::string& path) {
        TeacherSpec t;
        ObjectReader tr(jt, path, errors);
        tr.req("id", t.id);
        tr.opt("bias", t.bias);
        tr.opt("noise_scale", t.noise_scale);
        tr.opt("skill", t.skill);
        int cluster = -1;
        if (jt.is_object() && jt.contains("cluster")) {
            tr.opt("cluster", cluster);
            t.cluster_tag = cluster;
        }
        tr.finish();
        c.teachers.push_back(std::move(t));
    });

    if (const json* d = r.child("data")) {
        ObjectReader dr(*d, "config.data", errors);
        dr.opt("samples_per_node", c.data.samples_per_node);
        dr.opt("dirichlet_alpha", c.data.dirichlet_alpha);
        dr.opt("eval_samples", c.data.eval_samples);
        dr.opt("personalization_samples", c.data.personalization_samples);
        dr.finish();
    }
    if (const json* l = r.child("local")) {
        ObjectReader lr(*l, "config.local", errors);
        lr.opt("lr", c.local.lr);
        lr.opt("epochs", c.local.epochs);
        lr.opt("batch_size", c.local.batch_size);
        lr.opt("weight_decay", c.local.weight_decay);
        lr.finish();
    }
    if (const json* s = r.child("strategy")) {
        ObjectReader sr(*s, "config.strategy", errors);
        detail::read_enum(sr, "kind", "config.strategy", errors,
                          [&](const std::string& k) { c.strategy.kind = strategy_from_string(k); });
        sr.opt("epsilon_floor", c.strategy.epsilon_floor);
        sr.opt("window", c.strategy.window);
        sr.opt("min_window", c.strategy.min_window);
        sr.opt("inverse_sensitivity", c.strategy.inverse_sensitivity);
        sr.opt("eta_max", c.strategy.eta_max);
        sr.opt("center_sigma", c.strategy.center_sigma);
        sr.opt("weight_by_samples", c.strategy.weight_by_samples);
        sr.finish();
    }
    if (const json* a = r.child("async")) {
        ObjectReader ar(*a, "config.async", errors);
        ar.opt("enabled", c.async.enabled);
        ar.opt("max_staleness", c.async.max_staleness);
        ar.finish();
    }
    if (const json* x = r.child("cross_task")) {
        ObjectReader xr(*x, "config.cross_task", errors);
        xr.opt("coupling_lr", c.cross_task.coupling_lr);
        detail::each(xr.child("transfer"), "config.cross_task.transfer", errors,
                     [&](const json& jt, const std::string& path) {
                         TransferPairSpec t;
                         ObjectReader tr(jt, path, errors);
                         tr.req("model_a", t.model_a);
                         tr.req("model_b", t.model_b);
                         tr.req("first_layer", t.first_layer);
                         tr.req("last_layer", t.last_layer);
                         tr.opt("weight", t.weight);
                         tr.finish();
                         c.cross_task.transfer.push_back(std::move(t));
                     });
        if (const json* m = xr.child("multitask")) {
            auto& mt = c.cross_task.multitask;
            ObjectReader mr(*m, "config.cross_task.multitask", errors);
            mr.opt("enabled", mt.enabled);
            mr.opt("members", mt.members);
            mr.opt("lambda", mt.lambda);
            mr.opt("learn_omega", mt.learn_omega);
            mr.opt("omega", mt.omega);
            mr.opt("ridge", mt.ridge);
            mr.finish();
        }
        if (const json* m = xr.child("meta")) {
            auto& meta = c.cross_task.meta;
            ObjectReader mr(*m, "config.cross_task.meta", errors);
            mr.opt("enabled", meta.enabled);
            mr.opt("models", meta.models);
            mr.opt("inner_lr", meta.cfg.inner_lr);
            mr.opt("outer_lr", meta.cfg.outer_lr);
            mr.opt("inner_steps", meta.cfg.inner_steps);
            mr.opt("support_fraction", meta.cfg.support_fraction);
            mr.opt("first_order", meta.cfg.first_order);
            mr.opt("personalization_steps", meta.cfg.personalization_steps);
            mr.finish();
        }
        xr.finish();
    }
    if (const json* m = r.child("metrics")) {
        ObjectReader mr(*m, "config.metrics", errors);
        mr.opt("include_timing", c.include_timing);
        mr.finish();
    }
    r.finish();

    if (errors.empty()) {
        auto more = validation_errors(c);
        errors.insert(errors.end(), more.begin(), more.end());
    }
    if (!errors.empty()) {
        std::ostringstream os;
        os << "invalid configuration (" << errors.size() << " problem" << (errors.size() == 1 ? "" : "s") << "):";
        for (const auto& msg : errors) os << "\n  - " << msg;
        throw ConfigError(os.str());
    }
    return c;
}

inline ScenarioConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(f, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

// ---- presets -----------------------------------------------------------------------

// Critical-raw-materials recycling plant: material routing (AGVs), device
// dismantling (arm cells) and component sorting (vision/chemical stations).
// Two teacher clusters pull the regression outputs in opposite directions and
// each node sees a Dirichlet-skewed mix of them.
inline ScenarioConfig crm_preset(std::uint64_t seed = 7) {
    ScenarioConfig c;
    c.name = "crm-recycling";
    c.seed = seed;
    c.rounds = 30;
    c.lr_global = 1.0;
    c.sample_fraction = 0.5;

    auto model = [](int id, std::string name, TypeSet sensors, TypeSet robots, TypeSet tasks,
                    std::vector<std::size_t> sizes, LossKind loss, std::string policy) {
        ModelConfig m;
        m.spec.id = id;
        m.spec.name = std::move(name);
        m.spec.sensors = std::move(sensors);
        m.spec.robots = std::move(robots);
        m.spec.tasks = std::move(tasks);
        m.spec.arch = MlpArch{std::move(sizes), Activation::tanh, true};
        m.spec.loss = loss;
        m.policy = std::move(policy);
        return m;
    };
    c.models = {
        model(1, "sensing-classification", {"Vision", "Chemical"}, {"Arm", "Industrial"}, {"Sensing"}, {6, 16, 3},
              LossKind::cross_entropy, "mlp"),
        model(2, "manipulation-regression", {"Vision", "Force", "Position"}, {"Arm", "Industrial"}, {"Manipulation"},
              {6, 16, 2}, LossKind::mse, "mlp"),
        model(3, "navigation-regression", {"Position", "Motion"}, {"AGV"}, {"Navigation"}, {6, 16, 2}, LossKind::mse,
              "linear"),
    };
    c.platforms = {
        {1, {"Position", "Motion", "Vision"}, {"AGV", "Arm"}, {"Navigation", "Manipulation"}},
        {2, {"Position", "Motion"}, {"AGV"}, {"Navigation"}},
        {3, {"Vision", "Force", "Position"}, {"Arm", "Industrial"}, {"Manipulation"}},
        {4, {"Vision", "Force", "Position"}, {"Arm"}, {"Manipulation"}},
        {5, {"Vision", "Chemical"}, {"Arm"}, {"Sensing", "Manipulation"}},
        {6, {"Vision", "Chemical", "Light"}, {"Industrial"}, {"Sensing"}},
    };
    c.teachers = {
        {1, {0.6, -0.6, 0.6}, 0.05, 0.0, 0},
        {2, {0.6, -0.6, 0.6}, 0.10, 0.0, 0},
        {3, {-0.6, 0.6, -0.6}, 0.05, 0.0, 1},
        {4, {-0.6, 0.6, -0.6}, 0.10, 0.0, 1},
    };
    c.data.samples_per_node = 16;
    c.data.dirichlet_alpha = 0.5;
    c.data.eval_samples = 200;
    c.data.personalization_samples = 16;
    c.local = LocalTrainConfig{0.05, 1, 8, 0.0};
    c.strategy.kind = StrategyKind::fedavg;
    c.cross_task.coupling_lr = 0.01;
    c.cross_task.transfer = {TransferPairSpec{2, 3, "W0", "b0", 0.001}};
    c.cross_task.multitask.enabled = true;
    c.cross_task.multitask.members = {2, 3};
    c.cross_task.multitask.lambda = 0.001;
    return c;
}

inline ScenarioConfig preset(const std::string& name, std::uint64_t seed = 7) {
    if (name == "crm") return crm_preset(seed);
    throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace fedlfd
