#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlfd/error.hpp"
#include "fedlfd/tensor.hpp"

namespace fedlfd {

using TypeSet = std::set<std::string>;

// Sensor, robot and task vocabularies. Open string sets; the defaults below
// are only seeds and configs may add entries.
struct Taxonomy {
    TypeSet sensors{"Vision", "Light", "Temperature", "Chemical", "Force", "Acoustic",
                    "Gas",    "Motion", "Magnetic",   "Pressure", "Position"};
    TypeSet robots{"Arm", "AGV", "Humanoid", "UAV", "Vehicle", "Industrial"};
    TypeSet tasks{"Sensing", "Navigation", "Manipulation", "Control", "HumanRobotInteraction"};

    void validate() const {
        if (sensors.empty() || robots.empty() || tasks.empty())
            throw ConfigError("taxonomy: sensor, robot and task sets must be nonempty");
    }

    bool operator==(const Taxonomy&) const = default;
};

inline void require_subset(const TypeSet& subset, const TypeSet& universe, const std::string& what) {
    if (subset.empty()) throw ConfigError(what + " must be nonempty");
    for (const auto& s : subset)
        if (!universe.contains(s)) throw ConfigError(what + " references unknown type '" + s + "'");
}

struct Platform {
    int id = 0;
    TypeSet sensors;
    TypeSet robots;
    TypeSet tasks;

    bool operator==(const Platform&) const = default;
};

struct ModelSpec {
    int id = 0;
    std::string name;
    TypeSet sensors;
    TypeSet robots;
    TypeSet tasks;
    MlpArch arch;
    LossKind loss = LossKind::mse;

    bool operator==(const ModelSpec&) const = default;
};

struct GlobalModel {
    ModelSpec spec;
    ParamVector params;

    MlpModel as_mlp() const { return MlpModel(spec.arch, params); }
};

inline bool intersects(const TypeSet& a, const TypeSet& b) {
    return std::any_of(a.begin(), a.end(), [&](const std::string& s) { return b.contains(s); });
}

// Models and platforms of one run. Populated during setup, read-only afterwards.
class Registry {
public:
    explicit Registry(Taxonomy taxonomy = {}) : taxonomy_(std::move(taxonomy)) { taxonomy_.validate(); }

    const Taxonomy& taxonomy() const { return taxonomy_; }

    // Returns the model id as handle.
    int register_model(const ModelSpec& spec, std::uint64_t init_seed) {
        if (models_.contains(spec.id)) throw ConflictError("model id " + std::to_string(spec.id) + " already registered");
        if (spec.id < 1) throw ConfigError("model ids start at 1");
        require_subset(spec.sensors, taxonomy_.sensors, "model " + std::to_string(spec.id) + " sensors");
        require_subset(spec.robots, taxonomy_.robots, "model " + std::to_string(spec.id) + " robots");
        require_subset(spec.tasks, taxonomy_.tasks, "model " + std::to_string(spec.id) + " tasks");
        spec.arch.validate();
        if (spec.loss == LossKind::cross_entropy && spec.arch.output_dim() < 2)
            throw ConfigError("model " + std::to_string(spec.id) + ": cross_entropy needs at least 2 classes");
        auto mlp = MlpModel::initialized(spec.arch, init_seed);
        models_.emplace(spec.id, GlobalModel{spec, std::move(mlp.params)});
        return spec.id;
    }

    void add_platform(const Platform& p) {
        if (platforms_.contains(p.id)) throw ConflictError("platform id " + std::to_string(p.id) + " already registered");
        if (p.id < 1) throw ConfigError("platform ids start at 1");
        require_subset(p.sensors, taxonomy_.sensors, "platform " + std::to_string(p.id) + " sensors");
        require_subset(p.robots, taxonomy_.robots, "platform " + std::to_string(p.id) + " robots");
        require_subset(p.tasks, taxonomy_.tasks, "platform " + std::to_string(p.id) + " tasks");
        platforms_.emplace(p.id, p);
    }

    const GlobalModel& model(int id) const {
        auto it = models_.find(id);
        if (it == models_.end()) throw NotFoundError("no model with id " + std::to_string(id));
        return it->second;
    }

    const Platform& platform(int id) const {
        auto it = platforms_.find(id);
        if (it == platforms_.end()) throw NotFoundError("no platform with id " + std::to_string(id));
        return it->second;
    }

    // Models whose task set intersects the platform's, ascending by id.
    std::vector<int> eligible_models(int platform_id) const {
        const auto& p = platform(platform_id);
        std::vector<int> out;
        for (const auto& [id, m] : models_)
            if (intersects(m.spec.tasks, p.tasks)) out.push_back(id);
        return out;
    }

    std::vector<int> model_ids() const {
        std::vector<int> out;
        for (const auto& [id, _] : models_) out.push_back(id);
        return out;
    }

    std::vector<int> platform_ids() const {
        std::vector<int> out;
        for (const auto& [id, _] : platforms_) out.push_back(id);
        return out;
    }

    const std::map<int, GlobalModel>& models() const { return models_; }
    const std::map<int, Platform>& platforms() const { return platforms_; }

private:
    Taxonomy taxonomy_;
    std::map<int, GlobalModel> models_;
    std::map<int, Platform> platforms_;
};

// ---- JSON ------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const MlpArch& a) {
    j = {{"layer_sizes", a.layer_sizes}, {"activation", to_string(a.hidden)}, {"bias", a.bias}};
}

inline void to_json(nlohmann::json& j, const Taxonomy& t) {
    j = {{"sensors", t.sensors}, {"robots", t.robots}, {"tasks", t.tasks}};
}

inline void to_json(nlohmann::json& j, const Platform& p) {
    j = {{"id", p.id}, {"sensors", p.sensors}, {"robots", p.robots}, {"tasks", p.tasks}};
}

inline void to_json(nlohmann::json& j, const ModelSpec& m) {
    j = {{"id", m.id},         {"name", m.name},     {"sensors", m.sensors},      {"robots", m.robots},
         {"tasks", m.tasks},   {"arch", m.arch},     {"loss", to_string(m.loss)}};
}

}  // namespace fedlfd
