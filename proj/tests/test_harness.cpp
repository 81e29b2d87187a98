#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "dream/harness.hpp"
#include "oracles.hpp"

using namespace dream;
using nlohmann::json;

namespace {

std::string file_text(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json mini_experiment_config() {
    return json{{"data", {{"family_count", 3}, {"samples_per_family", 30}, {"seed", 5}}},
                {"classifier", {{"hidden", {16}}, {"epochs", 6}, {"batch_size", 16}}},
                {"detector", {{"hidden", 24}, {"epochs", 3}, {"batch_size", 16}}},
                {"cade", {{"hidden", 24}, {"epochs", 3}, {"batch_size", 16}}},
                {"adaptor", {{"epochs", 4}, {"batch_size", 16}}},
                {"detectors", {"prob", "crd"}},
                {"budgets", {5}},
                {"seeds", {1}},
                {"heldout_families", {"fam0"}}};
}

}  // namespace

TEST_CASE("holdout split cuts each retained family by time") {
    const Dataset data = generate_synthetic(SyntheticSpec{});
    const HoldoutSplit split = holdout_split(data, "fam0");

    CHECK(split.drift_test.size() == 150);
    CHECK(split.train.size() == 7 * 120);
    CHECK(split.id_test.size() == 7 * 30);
    CHECK(split.warnings.empty());

    for (int r = 0; r < split.drift_test.size(); ++r)
        CHECK(split.drift_test.family_name(r) == "fam0");

    // within every family, everything in train predates everything in test
    std::map<std::string, std::int64_t> train_max, test_min;
    for (int r = 0; r < split.train.size(); ++r) {
        const auto& name = split.train.family_name(r);
        const auto t = split.train.timestamps[static_cast<std::size_t>(r)];
        auto [it, fresh] = train_max.try_emplace(name, t);
        if (!fresh) it->second = std::max(it->second, t);
    }
    for (int r = 0; r < split.id_test.size(); ++r) {
        const auto& name = split.id_test.family_name(r);
        const auto t = split.id_test.timestamps[static_cast<std::size_t>(r)];
        auto [it, fresh] = test_min.try_emplace(name, t);
        if (!fresh) it->second = std::min(it->second, t);
    }
    REQUIRE(train_max.size() == 7);
    for (const auto& [name, tmax] : train_max) CHECK(tmax <= test_min.at(name));

    // no sample appears twice
    std::set<std::int64_t> seen;
    for (const auto& part : {split.train, split.id_test, split.drift_test})
        for (std::int64_t id : part.ids) CHECK(seen.insert(id).second);
    CHECK(seen.size() == static_cast<std::size_t>(data.size()));

    SUBCASE("tiny families stay whole in train with a warning") {
        const Dataset small = oracles::tiny_dataset(3, 4, 6, 4, 100);
        const HoldoutSplit s = holdout_split(small, "fam0");
        CHECK(s.warnings.size() == 2);  // fam1 and fam2 both under 5 rows
        CHECK(s.train.size() == 8);
        CHECK(s.id_test.size() == 0);
        CHECK(s.drift_test.size() == 4);
    }
    SUBCASE("unknown family") {
        CHECK_THROWS_AS(holdout_split(data, "ghost"), InvalidInput);
    }
    SUBCASE("train fraction bounds") {
        CHECK_THROWS_AS(holdout_split(data, "fam0", 0.0), InvalidInput);
        CHECK_THROWS_AS(holdout_split(data, "fam0", 1.0), InvalidInput);
    }
}

TEST_CASE("rank AUC matches hand values and the pairwise oracle") {
    CHECK(auc_rank({0.9, 0.8, 0.3, 0.1}, {1, 0, 1, 0}) == doctest::Approx(0.75));
    CHECK(auc_rank({0.9, 0.1}, {1, 0}) == doctest::Approx(1.0));
    CHECK(auc_rank({0.1, 0.9}, {1, 0}) == doctest::Approx(0.0));
    CHECK(auc_rank({0.5, 0.5}, {1, 0}) == doctest::Approx(0.5));
    CHECK(auc_rank({0.7, 0.7, 0.2, 0.7}, {1, 0, 0, 1}) == doctest::Approx((0.5 + 1 + 0.5 + 1) / 4));

    std::mt19937_64 rng(123);
    std::uniform_int_distribution<int> tenths(0, 10);
    std::bernoulli_distribution coin(0.4);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        scores.push_back(tenths(rng) / 10.0);  // heavy ties
        labels.push_back(coin(rng) ? 1 : 0);
    }
    CHECK(auc_rank(scores, labels) ==
          doctest::Approx(oracles::auc_pairwise(scores, labels)).epsilon(1e-12));

    CHECK_THROWS_AS(auc_rank({0.1, 0.2}, {1, 1}), DegenerateTask);
    CHECK_THROWS_AS(auc_rank({0.1, 0.2}, {0, 0}), DegenerateTask);
    CHECK_THROWS_AS(auc_rank({0.1}, {1, 0}), InvalidInput);
    CHECK_THROWS_AS(auc_rank({0.1, 0.2}, {1, 2}), InvalidInput);
    const double bad = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(auc_rank({bad, 0.2}, {1, 0}), NumericalError);
}

TEST_CASE("classification metrics") {
    CHECK(accuracy_score({0, 0, 1, 1, 2}, {0, 1, 1, 1, 2}) == doctest::Approx(0.8));
    // per class: f1(0) = 2/3, f1(1) = 0.8, f1(2) = 1
    CHECK(macro_f1({0, 0, 1, 1, 2}, {0, 1, 1, 1, 2}) ==
          doctest::Approx((2.0 / 3.0 + 0.8 + 1.0) / 3.0));
    // a class predicted but never true still enters the mean with f1 = 0
    CHECK(macro_f1({0, 0}, {0, 1}) == doctest::Approx((2.0 / 3.0 + 0.0) / 2.0));
    CHECK(macro_f1({3, 3}, {3, 3}) == doctest::Approx(1.0));

    CHECK_THROWS_AS(accuracy_score({}, {}), InvalidInput);
    CHECK_THROWS_AS(accuracy_score({1}, {1, 2}), InvalidInput);
    CHECK_THROWS_AS(macro_f1({}, {}), InvalidInput);
}

TEST_CASE("the simulated analyst tells the truth except for seeded swaps") {
    const Dataset pool = oracles::tiny_dataset(3, 10, 6, 4, 101);
    DetectorConfig dcfg;
    dcfg.explicit_dim = 4;
    dcfg.implicit_dim = 3;
    dcfg.hidden = 12;
    dcfg.epochs = 5;
    dcfg.batch_size = 8;
    dcfg.pair_cap = 32;
    dcfg.margin = 3.0;
    dcfg.lambda_pre = 0.0;
    dcfg.lambda_rel = 0.0;
    dcfg.seed = 102;
    const ConceptAutoencoder det = train_detector(pool, nullptr, dcfg);
    const ClassCentroids centroids = class_centroids(det, pool);

    const std::vector<std::int64_t> ids = {0, 3, 5, 12, 15, 20, 22, 28};

    SUBCASE("zero noise needs no models and is exact") {
        const auto fb = oracle_label(pool, ids, 0.0, 9, nullptr, nullptr);
        REQUIRE(fb.size() == ids.size());
        for (std::size_t i = 0; i < fb.size(); ++i) {
            const int r = pool.find_id(ids[i]);
            CHECK(fb[i].sample_id == ids[i]);
            CHECK(fb[i].family == pool.family_name(r));
            CHECK(fb[i].concept_labels == pool.concept_labels.row(r).transpose());
            CHECK(fb[i].concept_mask == pool.concept_mask.row(r).transpose());
        }
    }
    SUBCASE("noise swaps exactly the rounded share to the nearest other family") {
        const auto fb = oracle_label(pool, ids, 0.25, 9, &det, &centroids);
        int changed = 0;
        for (std::size_t i = 0; i < fb.size(); ++i) {
            const int r = pool.find_id(ids[i]);
            // concepts are always the truth
            CHECK(fb[i].concept_labels == pool.concept_labels.row(r).transpose());
            if (fb[i].family == pool.family_name(r)) continue;
            ++changed;
            const Vec z = det.encode(pool.features.row(r)).row(0).transpose();
            std::string nearest;
            double best = 0.0;
            for (const auto& [name, c] : centroids) {
                if (name == pool.family_name(r)) continue;
                const double d = (z - c).norm();
                if (nearest.empty() || d < best) {
                    nearest = name;
                    best = d;
                }
            }
            CHECK(fb[i].family == nearest);
        }
        CHECK(changed == 2);  // llround(0.25 * 8)

        const auto again = oracle_label(pool, ids, 0.25, 9, &det, &centroids);
        for (std::size_t i = 0; i < fb.size(); ++i) CHECK(again[i].family == fb[i].family);
    }
    SUBCASE("rates that round to zero change nothing") {
        const auto fb = oracle_label(pool, ids, 0.05, 9, &det, &centroids);
        for (std::size_t i = 0; i < fb.size(); ++i) {
            const int r = pool.find_id(ids[i]);
            CHECK(fb[i].family == pool.family_name(r));
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(oracle_label(pool, {999}, 0.0, 9, nullptr, nullptr), InvalidInput);
        CHECK_THROWS_AS(oracle_label(pool, ids, 0.25, 9, nullptr, nullptr), InvalidInput);
        CHECK_THROWS_AS(oracle_label(pool, ids, 1.0, 9, &det, &centroids), InvalidInput);
        CHECK_THROWS_AS(oracle_label(pool, ids, -0.1, 9, &det, &centroids), InvalidInput);
    }
}

TEST_CASE("experiment config merges overrides onto defaults") {
    const ExperimentConfig defaults = config_from_json(json::object());
    CHECK(defaults.data.family_count == 8);
    CHECK(defaults.budgets == std::vector<int>({10, 20, 30, 40, 100}));
    CHECK(defaults.detectors.size() == 5);
    CHECK(defaults.ranking_detector == "crd");

    const json overrides = {{"data", {{"family_count", 3}, {"flip_noise", 0.2}}},
                            {"classifier", {{"epochs", 7}}},
                            {"budgets", {1, 2}},
                            {"seeds", {9}},
                            {"oracle_noise", 0.1}};
    const ExperimentConfig cfg = config_from_json(overrides);
    CHECK(cfg.data.family_count == 3);
    CHECK(cfg.data.flip_noise == 0.2);
    CHECK(cfg.data.feature_dim == defaults.data.feature_dim);
    CHECK(cfg.classifier.epochs == 7);
    CHECK(cfg.budgets == std::vector<int>({1, 2}));
    CHECK(cfg.seeds == std::vector<std::uint64_t>({9}));
    CHECK(cfg.oracle_noise == 0.1);
    CHECK(cfg.adaptor.epochs == defaults.adaptor.epochs);

    SUBCASE("round trip through json is stable") {
        const json once = config_to_json(cfg);
        const json twice = config_to_json(config_from_json(once));
        CHECK(once.dump() == twice.dump());
    }
    SUBCASE("budget and seed validation") {
        CHECK_THROWS_AS(config_from_json(json{{"budgets", json::array()}}), InvalidInput);
        CHECK_THROWS_AS(config_from_json(json{{"budgets", {5, 1}}}), InvalidInput);
        CHECK_THROWS_AS(config_from_json(json{{"budgets", {-1, 5}}}), InvalidInput);
        CHECK_THROWS_AS(config_from_json(json{{"seeds", json::array()}}), InvalidInput);
    }
}

TEST_CASE("seed mixing separates substreams") {
    CHECK(mix_seed(1, 2) == mix_seed(1, 2));
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
    std::set<std::uint64_t> seen;
    for (std::uint64_t a = 0; a < 10; ++a)
        for (std::uint64_t b = 0; b < 10; ++b) seen.insert(mix_seed(a, b));
    CHECK(seen.size() == 100);
}

TEST_CASE("budget curve reads the mean table") {
    const json report = {
        {"experiment", "adaptation"},
        {"mean",
         {{{"budget", 5},
           {"drift_in_budget", 1.0},
           {"a", {{"f1", 0.5}, {"accuracy", 0.85}}},
           {"b", {{"f1", 0.4}, {"accuracy", 0.70}}}},
          {{"budget", 10},
           {"drift_in_budget", 2.0},
           {"a", {{"f1", 0.8}, {"accuracy", 0.92}}},
           {"b", {{"f1", 0.6}, {"accuracy", 0.89}}}},
          {{"budget", 20},
           {"drift_in_budget", 4.0},
           {"a", {{"f1", 0.9}, {"accuracy", 0.95}}},
           {"b", {{"f1", 0.7}, {"accuracy", 0.91}}}}}}};

    const json curve = budget_curve(report, 0.9);
    CHECK(curve.at("target_accuracy") == 0.9);
    CHECK(curve.at("minimal_budget").at("a") == 10);
    CHECK(curve.at("minimal_budget").at("b") == 20);

    const json strict = budget_curve(report, 0.99);
    CHECK(strict.at("minimal_budget").at("a").is_null());
    CHECK(strict.at("minimal_budget").at("b").is_null());

    const json loose = budget_curve(report, 0.5);
    CHECK(loose.at("minimal_budget").at("a") == 5);

    CHECK_THROWS_AS(budget_curve(json{{"experiment", "detection"}}, 0.9), InvalidInput);
}

TEST_CASE("adaptation csv is written in a fixed column order") {
    const json report = {{"mean",
                          {{{"budget", 5},
                            {"drift_in_budget", 2.5},
                            {"a", {{"f1", 0.5}, {"accuracy", 0.85}}},
                            {"b", {{"f1", 0.25}, {"accuracy", 0.75}}}}}}};
    const char* path = "/tmp/dream_adapt.csv";
    write_adaptation_csv(report, path);
    CHECK(file_text(path) ==
          "budget,adaptor,f1,accuracy,mean_drift_in_budget\n"
          "5,a,0.5,0.85,2.5\n"
          "5,b,0.25,0.75,2.5\n");
    std::remove(path);

    CHECK_THROWS_AS(write_adaptation_csv(json::object(), path), InvalidInput);
}

TEST_CASE("detection experiment is reproducible and internally consistent") {
    const ExperimentConfig cfg = config_from_json(mini_experiment_config());
    const json a = run_detection_experiment(cfg);
    const json b = run_detection_experiment(cfg);
    CHECK(a.dump() == b.dump());

    CHECK(a.at("experiment") == "detection");
    REQUIRE(a.at("cells").size() == 1);
    const json& cell = a.at("cells").at(0);
    CHECK(cell.at("heldout_family") == "fam0");
    CHECK(cell.at("seed") == 1);
    for (const char* name : {"prob", "crd"}) {
        const double auc = cell.at("auc").at(name).get<double>();
        CHECK(auc >= 0.0);
        CHECK(auc <= 1.0);
        // single cell: the mean is the cell
        CHECK(a.at("mean_auc").at(name).get<double>() == doctest::Approx(auc));
    }
}

TEST_CASE("adaptation experiment is reproducible and internally consistent") {
    const ExperimentConfig cfg = config_from_json(mini_experiment_config());
    const json a = run_adaptation_experiment(cfg);
    const json b = run_adaptation_experiment(cfg);
    CHECK(a.dump() == b.dump());

    CHECK(a.at("experiment") == "adaptation");
    REQUIRE(a.at("cells").size() == 1);
    const json& cell = a.at("cells").at(0);
    CHECK(cell.at("budget") == 5);
    const int hits = cell.at("drift_in_budget").get<int>();
    CHECK(hits >= 0);
    CHECK(hits <= 5);
    for (const char* adaptor : {"retrain_baseline", "adapt_dream"}) {
        const json& r = cell.at(adaptor);
        CHECK(r.at("f1").get<double>() >= 0.0);
        CHECK(r.at("f1").get<double>() <= 1.0);
        CHECK(r.at("accuracy").get<double>() >= 0.0);
        CHECK(r.at("accuracy").get<double>() <= 1.0);
    }
    REQUIRE(a.at("mean").size() == 1);
    CHECK(a.at("mean").at(0).at("budget") == 5);
    // one cell again: means echo the cell
    CHECK(a.at("mean").at(0).at("adapt_dream").at("f1").get<double>() ==
          doctest::Approx(cell.at("adapt_dream").at("f1").get<double>()));

    // the curve consumes the report it was built from
    const json curve = budget_curve(a, 0.0);
    CHECK(curve.at("minimal_budget").at("adapt_dream") == 5);
}

TEST_CASE("explanation experiment reports matched random baselines") {
    json j = mini_experiment_config();
    j["explanation_samples"] = 5;
    j["explainer"] = {{"steps", 40}};
    const ExperimentConfig cfg = config_from_json(j);
    const json report = run_explanation_experiment(cfg);

    CHECK(report.at("experiment") == "explanation");
    const json& mean = report.at("mean").at("concept");
    CHECK(mean.at("samples").get<int>() >= 1);
    CHECK(mean.at("samples").get<int>() <= 5);
    for (const char* key : {"cbp", "cbp_random"}) {
        CHECK(mean.at(key).get<double>() >= 0.0);
        CHECK(mean.at(key).get<double>() <= 1.0);
    }
    CHECK(mean.at("drr").get<double>() <= 1.0);
    CHECK(mean.at("drr_random").get<double>() <= 1.0);
}
