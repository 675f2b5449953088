#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "fedlfd/fedlfd.hpp"
#include "scenarios.hpp"

using namespace fedlfd;

namespace {

std::string metrics_stream(World& w, std::optional<int> rounds = std::nullopt) {
    std::string out;
    for (const auto& r : run_rounds(w, rounds)) out += round_record(r, false).dump() + "\n";
    return out;
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("fedlfd_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(CrmScenario, Construction) {
    const auto w = build_scenario(crm_preset(7));
    EXPECT_EQ(w.registry.models().size(), 3u);
    EXPECT_EQ(w.nodes.size(), 6u);
    std::map<int, std::vector<double>> bias_by_cluster;
    for (const auto& [id, t] : w.teachers) bias_by_cluster[t.cluster_tag.value()] = t.bias;
    ASSERT_EQ(bias_by_cluster.size(), 2u);
    for (std::size_t k = 0; k < bias_by_cluster[0].size(); ++k) EXPECT_EQ(bias_by_cluster[0][k], -bias_by_cluster[1][k]);
    EXPECT_EQ(w.node(5).eligible, (std::vector<int>{1, 2}));
    EXPECT_EQ(w.node(2).eligible, (std::vector<int>{3}));
}

TEST(CrmScenario, SameSeedSameInitialModels) {
    const auto a = build_scenario(crm_preset(7));
    const auto b = build_scenario(crm_preset(7));
    const auto c = build_scenario(crm_preset(8));
    for (const auto& [id, agg] : a.aggregator.models) {
        EXPECT_EQ(agg.global.raw(), b.aggregator.models.at(id).global.raw());
        EXPECT_NE(agg.global.raw(), c.aggregator.models.at(id).global.raw());
    }
}

TEST(CrmScenario, PresetFileMatchesBuiltin) {
    EXPECT_EQ(load_config(FEDLFD_SOURCE_DIR "/configs/crm.json"), crm_preset(7));
}

TEST(Config, TooSmallSampleFractionRejected) {
    auto c = crm_preset(7);
    c.sample_fraction = 0.1;  // 0.6 of a node per round
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, UnknownKeyRejected) {
    auto j = config_to_json(crm_preset(7));
    j["local"]["learning_rate"] = 0.1;
    try {
        config_from_json(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
    }
}

TEST(Config, JsonRoundTrip) {
    for (const auto& c : {crm_preset(3), scenarios::two_cluster(2, StrategyKind::user_clustering),
                          scenarios::meta_holdout(1, true)})
        EXPECT_EQ(config_from_json(config_to_json(c)), c);
}

TEST(Harness, SingleContributorGlobalIsTheLocalModel) {
    auto c = scenarios::linear_iid(4);
    c.platforms = scenarios::platforms(1, {"Manipulation"});
    c.teachers.resize(1);
    c.sample_fraction = 1.0;
    c.lr_global = 1.0;
    auto w = build_scenario(c);
    const auto start = w.global_model(1);
    run_rounds(w, 1);

    const auto demos = round_demonstrations(w, 1, 1, 1, 0);
    const auto d = local_update(start, demos, c.local, LossKind::mse, 1,
                                derive_seed(c.seed, seed_kind::shuffle, work_entity(1, 1, 1), 0));
    const auto expected = local_params(start.params, d);
    const auto& got = w.aggregator.models.at(1).global;
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(Harness, DeterministicAcrossRunsAndWorkerCounts) {
    auto c = crm_preset(11);
    c.rounds = 8;
    auto a = build_scenario(c);
    auto b = build_scenario(c);
    c.workers = 4;
    auto d = build_scenario(c);
    const auto ma = metrics_stream(a);
    EXPECT_EQ(ma, metrics_stream(b));
    EXPECT_EQ(ma, metrics_stream(d));
    for (const auto& [id, agg] : a.aggregator.models) EXPECT_EQ(agg.global.raw(), d.aggregator.models.at(id).global.raw());
}

TEST(Harness, AsyncWithZeroStalenessMatchesSync) {
    for (auto kind : {StrategyKind::fedavg, StrategyKind::user_weighting, StrategyKind::user_clustering}) {
        auto c = scenarios::two_cluster(3, kind);
        c.rounds = 6;
        auto sync = build_scenario(c);
        c.async.enabled = true;
        c.async.max_staleness = 0;
        auto async = build_scenario(c);
        EXPECT_EQ(metrics_stream(sync), metrics_stream(async));
        EXPECT_EQ(sync.aggregator.models.at(1).global.raw(), async.aggregator.models.at(1).global.raw());
    }
}

TEST(Harness, StalenessBoundedAndHistogramConsistent) {
    auto c = crm_preset(5);
    c.rounds = 12;
    c.async.enabled = true;
    c.async.max_staleness = 3;
    auto w = build_scenario(c);
    int stale_seen = 0;
    for (const auto& r : run_rounds(w)) {
        std::map<int, int> recount;
        for (int node : r.sampled_nodes) {
            const int s = r.staleness.at(node);
            EXPECT_GE(s, 0);
            EXPECT_LE(s, std::min(3, r.round));
            ++recount[s];
            stale_seen += s > 0;
        }
        EXPECT_EQ(recount, r.staleness_histogram);
    }
    EXPECT_GT(stale_seen, 0);
}

TEST(Harness, AsyncConvergesOnLinearScenario) {
    auto c = scenarios::linear_iid(1);
    c.async.enabled = true;
    c.async.max_staleness = 2;
    auto w = build_scenario(c);
    const auto reports = run_rounds(w);
    const auto ls = scenarios::pooled_least_squares(w, reports, 1);
    EXPECT_LT(l2_distance(std::span<const double>(ls), w.aggregator.models.at(1).global.values()), 5e-3);
}

TEST(Evaluate, PerfectModelHasZeroGlobalLoss) {
    auto w = build_scenario(scenarios::linear_iid(2));
    // the ground-truth policy of a linear model has the model's own layout
    w.aggregator.models.at(1).global = w.policies.at(1).net.params;
    EXPECT_NEAR(evaluate(w).global_loss.at(1), 0.0, 1e-24);
}

TEST(Evaluate, TrainingReducesLoss) {
    auto w = build_scenario(crm_preset(7));
    const auto before = evaluate(w);
    const auto after = run_rounds(w).back().eval;
    for (const auto& [id, loss] : before.global_loss) EXPECT_LT(after.global_loss.at(id), loss) << "model " << id;
}

TEST(Evaluate, TeacherSetsCarryTheTeacherBias) {
    const auto w = build_scenario(scenarios::two_cluster(1, StrategyKind::fedavg));
    const auto& policy = w.policies.at(1);
    for (const auto& [tid, t] : w.teachers) {
        double mean0 = 0.0;
        const auto& set = w.eval.teacher.at({1, tid});
        for (const auto& s : set) mean0 += s.target[0] - policy(s.input)[0];
        EXPECT_NEAR(mean0 / static_cast<double>(set.size()), t.bias[0], 0.02) << "teacher " << tid;
    }
}

TEST(Harness, CrmRoundUnderOneSecond) {
    auto w = build_scenario(crm_preset(7));
    const auto t0 = std::chrono::steady_clock::now();
    run_rounds(w, 5);
    const double per_round = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 5.0;
    EXPECT_LT(per_round, 1.0);
}

TEST(Harness, CrossTaskOffIsAggregationOnly) {
    auto c = crm_preset(9);
    c.rounds = 6;
    c.cross_task.transfer.clear();
    c.cross_task.multitask.enabled = false;
    auto plain = build_scenario(c);
    c.cross_task.transfer = {TransferPairSpec{2, 3, "W0", "b0", 0.0}};
    c.cross_task.multitask.enabled = true;
    c.cross_task.multitask.lambda = 0.0;
    auto zeroed = build_scenario(c);
    run_rounds(plain);
    run_rounds(zeroed);
    for (const auto& [id, agg] : plain.aggregator.models)
        EXPECT_EQ(agg.global.raw(), zeroed.aggregator.models.at(id).global.raw()) << "model " << id;
}

TEST(Harness, ExperimentWritesMetricsAndCheckpoints) {
    auto c = crm_preset(7);
    c.rounds = 3;
    auto w = build_scenario(c);
    const auto dir = scratch("experiment");
    run_experiment(w, dir);
    std::ifstream in(dir / "metrics.jsonl");
    int rounds = 0, summaries = 0;
    for (std::string line; std::getline(in, line);) {
        const auto j = nlohmann::json::parse(line);
        rounds += j.at("type") == "round";
        summaries += j.at("type") == "summary";
    }
    EXPECT_EQ(rounds, 3);
    EXPECT_EQ(summaries, 1);
    for (int b = 1; b <= 3; ++b) {
        const auto ck = read_checkpoint((dir / ("model_" + std::to_string(b) + ".flfd")).string());
        const auto& global = w.aggregator.models.at(b).global;
        ASSERT_EQ(ck.params.size(), global.size());
        for (std::size_t i = 0; i < global.size(); ++i) EXPECT_EQ(ck.params[i], static_cast<double>(static_cast<float>(global[i])));
    }
    std::filesystem::remove_all(dir);
}

// ---- CLI ---------------------------------------------------------------------------

namespace {

int cli(const std::string& args) {
    const int status = std::system((std::string(FEDLFD_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
    const auto dir = scratch("cli");
    auto c = crm_preset(7);
    c.rounds = 2;
    std::ofstream(dir / "ok.json") << config_to_json(c).dump();
    auto bad = config_to_json(c);
    bad["sample_fraction"] = 0.05;
    std::ofstream(dir / "bad.json") << bad.dump();
    std::ofstream(dir / "broken.json") << "{ not json";

    EXPECT_EQ(cli("run --config " + (dir / "ok.json").string() + " --out " + (dir / "out").string()), 0);
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / "metrics.jsonl"));
    EXPECT_EQ(cli("validate --config " + (dir / "ok.json").string()), 0);
    EXPECT_EQ(cli("inspect-checkpoint " + (dir / "out" / "model_1.flfd").string()), 0);
    EXPECT_EQ(cli("validate --config " + (dir / "bad.json").string()), 2);
    EXPECT_EQ(cli("run --config " + (dir / "broken.json").string() + " --out " + (dir / "o2").string()), 2);
    EXPECT_EQ(cli("validate --config " + (dir / "missing.json").string()), 2);
    EXPECT_EQ(cli("run --rounds"), 2);
    EXPECT_EQ(cli("frobnicate"), 2);
    EXPECT_EQ(cli("preset crm"), 0);
    EXPECT_EQ(cli("preset nope"), 2);
    std::filesystem::remove_all(dir);
}

TEST(Cli, RunMatchesLibrary) {
    const auto dir = scratch("cli_match");
    auto c = crm_preset(7);
    c.rounds = 3;
    std::ofstream(dir / "cfg.json") << config_to_json(c).dump();
    ASSERT_EQ(cli("run --config " + (dir / "cfg.json").string() + " --out " + (dir / "cli").string()), 0);
    auto w = build_scenario(c);
    run_experiment(w, dir / "lib");
    EXPECT_EQ(slurp(dir / "cli" / "metrics.jsonl"), slurp(dir / "lib" / "metrics.jsonl"));
    std::filesystem::remove_all(dir);
}
