#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dream/adaptor.hpp"
#include "oracles.hpp"

using namespace dream;

namespace {

std::string clf_bytes(const MalwareClassifier& clf) {
    std::ostringstream out(std::ios::binary);
    save_classifier(clf, out);
    return out.str();
}

std::string det_bytes(const ConceptAutoencoder& det) {
    const char* path = "/tmp/dream_adapt_det.bin";
    save_detector(det, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::remove(path);
    return bytes;
}

ClassifierConfig small_clf_cfg(std::uint64_t seed) {
    ClassifierConfig cfg;
    cfg.hidden = {10};
    cfg.epochs = 15;
    cfg.batch_size = 8;
    cfg.seed = seed;
    return cfg;
}

DetectorConfig small_det_cfg(std::uint64_t seed) {
    DetectorConfig cfg;
    cfg.explicit_dim = 4;
    cfg.implicit_dim = 3;
    cfg.hidden = 12;
    cfg.epochs = 6;
    cfg.batch_size = 8;
    cfg.pair_cap = 32;
    cfg.margin = 3.0;
    cfg.seed = seed;
    return cfg;
}

AnalystFeedback feedback_for(const Dataset& pool, int row, const std::string& family) {
    AnalystFeedback fb;
    fb.sample_id = pool.ids[static_cast<std::size_t>(row)];
    fb.family = family;
    fb.concept_labels = pool.concept_labels.row(row).transpose();
    fb.concept_mask = pool.concept_mask.row(row).transpose();
    return fb;
}

// train on fam0/fam1, pool is the unseen fam2 block
struct SplitFixture {
    Dataset all, train, pool;

    explicit SplitFixture(std::uint64_t seed) : all(oracles::tiny_dataset(3, 10, 6, 4, seed)) {
        std::vector<int> train_rows, pool_rows;
        for (int r = 0; r < all.size(); ++r)
            (all.family[static_cast<std::size_t>(r)] < 2 ? train_rows : pool_rows).push_back(r);
        train = all.subset(train_rows);
        pool = all.subset(pool_rows);
    }
};

}  // namespace

TEST_CASE("feedback files round-trip") {
    const Dataset ds = oracles::tiny_dataset(2, 4, 6, 4, 80);
    std::vector<AnalystFeedback> fb = {feedback_for(ds, 0, "fam1"), feedback_for(ds, 5, "fresh")};
    const char* path = "/tmp/dream_fb_rt.jsonl";
    save_feedback(fb, path);
    const std::vector<AnalystFeedback> back = load_feedback(path);
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].sample_id == fb[i].sample_id);
        CHECK(back[i].family == fb[i].family);
        CHECK(back[i].concept_labels == fb[i].concept_labels);
        CHECK(back[i].concept_mask == fb[i].concept_mask);
    }
    std::remove(path);

    SUBCASE("missing file") { CHECK_THROWS_AS(load_feedback("/nonexistent/fb.jsonl"), IoError); }
    SUBCASE("malformed line is reported with its number") {
        std::ofstream out(path);
        out << R"({"sample_id": 1, "family": "a", "concepts": {"labels": [0], "mask": [1]}})" << "\n";
        out << "not json\n";
        out.close();
        try {
            load_feedback(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
        std::remove(path);
    }
    SUBCASE("missing keys") {
        std::ofstream out(path);
        out << R"({"sample_id": 1, "family": "a"})" << "\n";
        out.close();
        CHECK_THROWS_AS(load_feedback(path), IoError);
        std::remove(path);
    }
}

TEST_CASE("concept feedback rewrites annotations and nothing else") {
    const Dataset ds = oracles::tiny_dataset(2, 4, 6, 4, 81);
    AnalystFeedback fb = feedback_for(ds, 2, "fam0");
    fb.concept_labels = IntVec::Ones(4);
    fb.concept_mask = IntVec::Zero(4);

    const Dataset out = apply_concept_feedback(ds, {fb});
    CHECK(out.concept_labels.row(2) == IntVec::Ones(4).transpose());
    CHECK(out.concept_mask.row(2) == IntVec::Zero(4).transpose());
    CHECK(out.features == ds.features);
    CHECK(out.family == ds.family);
    CHECK(out.ids == ds.ids);
    // untouched rows keep their annotation
    CHECK(out.concept_labels.row(0) == ds.concept_labels.row(0));

    SUBCASE("unknown id") {
        fb.sample_id = 999;
        CHECK_THROWS_AS(apply_concept_feedback(ds, {fb}), InvalidInput);
    }
    SUBCASE("wrong width") {
        fb.concept_labels = IntVec::Ones(3);
        CHECK_THROWS_AS(apply_concept_feedback(ds, {fb}), InvalidInput);
    }
    SUBCASE("non-binary entries") {
        fb.concept_labels(1) = 2;
        CHECK_THROWS_AS(apply_concept_feedback(ds, {fb}), InvalidInput);
    }
}

TEST_CASE("finetune set appends pool rows under their feedback labels") {
    const SplitFixture fx(82);
    std::vector<AnalystFeedback> fb = {feedback_for(fx.pool, 0, "fam2"),
                                       feedback_for(fx.pool, 3, "brand_new"),
                                       feedback_for(fx.pool, 7, "fam0")};
    int n_original = -1;
    const Dataset out = build_finetune_set(fx.train, fx.pool, fb, &n_original);
    CHECK(n_original == fx.train.size());
    REQUIRE(out.size() == fx.train.size() + 3);

    for (int i = 0; i < 3; ++i) {
        const int row = n_original + i;
        const int src = fx.pool.find_id(fb[static_cast<std::size_t>(i)].sample_id);
        CHECK(out.features.row(row) == fx.pool.features.row(src));
        CHECK(out.ids[static_cast<std::size_t>(row)] ==
              fx.pool.ids[static_cast<std::size_t>(src)]);
        CHECK(out.timestamps[static_cast<std::size_t>(row)] ==
              fx.pool.timestamps[static_cast<std::size_t>(src)]);
        CHECK(out.family_name(row) == fb[static_cast<std::size_t>(i)].family);
    }
    // "brand_new" joined the table; existing names were reused
    CHECK(std::count(out.family_names.begin(), out.family_names.end(), "brand_new") == 1);
    CHECK(out.family_names.size() == fx.train.family_names.size() + 1);

    SUBCASE("duplicate feedback ids are rejected") {
        fb.push_back(feedback_for(fx.pool, 0, "fam2"));
        CHECK_THROWS_AS(build_finetune_set(fx.train, fx.pool, fb, nullptr), InvalidInput);
    }
    SUBCASE("feedback ids must resolve in the pool") {
        fb[0].sample_id = 424242;
        CHECK_THROWS_AS(build_finetune_set(fx.train, fx.pool, fb, nullptr), InvalidInput);
    }
}

TEST_CASE("finetune batches oversample feedback without drowning the originals") {
    SUBCASE("small feedback rides along in every batch") {
        std::mt19937_64 rng(1);
        const auto batches = finetune_batches(10, 3, 8, rng);
        // quota 3 of 8, so 5 originals per batch -> 2 batches
        REQUIRE(batches.size() == 2);
        std::vector<int> original_seen;
        for (const auto& b : batches) {
            int fb_count = 0;
            for (int idx : b) {
                if (idx >= 10)
                    ++fb_count;
                else
                    original_seen.push_back(idx);
            }
            CHECK(fb_count == 3);
        }
        std::sort(original_seen.begin(), original_seen.end());
        CHECK(original_seen == std::vector<int>({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
    }
    SUBCASE("large feedback is dealt round-robin with balanced counts") {
        std::mt19937_64 rng(2);
        const auto batches = finetune_batches(10, 7, 8, rng);
        // quota min(7, 4) = 4, originals 4 per batch -> 3 batches
        REQUIRE(batches.size() == 3);
        std::map<int, int> fb_uses;
        for (const auto& b : batches) {
            int fb_count = 0;
            std::set<int> in_batch;
            for (int idx : b)
                if (idx >= 10) {
                    ++fb_count;
                    ++fb_uses[idx];
                    CHECK(in_batch.insert(idx).second);  // no repeats inside one batch
                    CHECK(idx < 17);
                }
            CHECK(fb_count == 4);
        }
        CHECK(fb_uses.size() == 7);  // every feedback row used at least once
        int lo = 1 << 30, hi = 0;
        for (const auto& [idx, n] : fb_uses) {
            lo = std::min(lo, n);
            hi = std::max(hi, n);
        }
        CHECK(hi - lo <= 1);
    }
    SUBCASE("no feedback reduces to plain batching") {
        std::mt19937_64 rng(3);
        const auto batches = finetune_batches(10, 0, 4, rng);
        REQUIRE(batches.size() == 3);
        int total = 0;
        for (const auto& b : batches) total += static_cast<int>(b.size());
        CHECK(total == 10);
    }
    SUBCASE("same seed, same plan") {
        std::mt19937_64 a(7), b(7);
        CHECK(finetune_batches(12, 5, 6, a) == finetune_batches(12, 5, 6, b));
    }
    SUBCASE("bad arguments") {
        std::mt19937_64 rng(1);
        CHECK_THROWS_AS(finetune_batches(0, 3, 8, rng), InvalidInput);
        CHECK_THROWS_AS(finetune_batches(10, 3, 0, rng), InvalidInput);
    }
}

TEST_CASE("novel labels keep first-seen order") {
    const Dataset ds = oracles::tiny_dataset(2, 4, 6, 4, 83);
    const MalwareClassifier clf = train_classifier(ds, small_clf_cfg(84));
    std::vector<AnalystFeedback> fb = {
        feedback_for(ds, 0, "fam1"), feedback_for(ds, 1, "zeta"), feedback_for(ds, 2, "alpha"),
        feedback_for(ds, 3, "zeta")};
    CHECK(novel_labels(clf, fb) == std::vector<std::string>({"zeta", "alpha"}));
    CHECK(novel_labels(clf, {}).empty());
}

TEST_CASE("adaptor config validation") {
    AdaptorConfig cfg;
    CHECK_NOTHROW(validate_config(cfg));
    cfg.epochs = 0;
    CHECK_THROWS_AS(validate_config(cfg), InvalidInput);
    cfg = {};
    cfg.lr_decay = 0.0;
    CHECK_THROWS_AS(validate_config(cfg), InvalidInput);
    cfg = {};
    cfg.lr_decay = 1.5;
    CHECK_THROWS_AS(validate_config(cfg), InvalidInput);
    cfg = {};
    cfg.stability_threshold = 0.0;
    CHECK_THROWS_AS(validate_config(cfg), InvalidInput);
    cfg = {};
    cfg.ce_weight = -1.0;
    CHECK_THROWS_AS(validate_config(cfg), InvalidInput);
    cfg = {};
    cfg.classifier_lr = -1e-3;
    CHECK_THROWS_AS(validate_config(cfg), InvalidInput);
}

TEST_CASE("baseline retraining ignores concepts and tolerates empty feedback") {
    const SplitFixture fx(85);
    const MalwareClassifier clf = train_classifier(fx.train, small_clf_cfg(86));

    SUBCASE("empty feedback returns the classifier unchanged with a warning") {
        AdaptationReport report;
        const MalwareClassifier out = retrain_baseline(clf, fx.train, fx.pool, {}, {}, &report);
        CHECK(clf_bytes(out) == clf_bytes(clf));
        REQUIRE(report.warnings.size() == 1);
    }
    SUBCASE("scrambling concept annotations changes nothing") {
        std::vector<AnalystFeedback> fb = {feedback_for(fx.pool, 0, "fam2"),
                                           feedback_for(fx.pool, 4, "fam2")};
        AdaptorConfig cfg;
        cfg.epochs = 6;
        cfg.batch_size = 8;
        const MalwareClassifier a = retrain_baseline(clf, fx.train, fx.pool, fb, cfg);

        for (auto& f : fb) {
            f.concept_labels = IntVec::Ones(f.concept_labels.size()) - f.concept_labels;
            f.concept_mask = IntVec::Zero(f.concept_mask.size());
        }
        const MalwareClassifier b = retrain_baseline(clf, fx.train, fx.pool, fb, cfg);
        CHECK(clf_bytes(a) == clf_bytes(b));
    }
}

TEST_CASE("joint adaptation degenerates to baseline retraining when decoupled") {
    const SplitFixture fx(87);
    const MalwareClassifier clf = train_classifier(fx.train, small_clf_cfg(88));

    DetectorConfig dcfg = small_det_cfg(89);
    dcfg.lambda_pre = 0.0;
    dcfg.lambda_rel = 0.0;
    const ConceptAutoencoder det = train_detector(fx.train, nullptr, dcfg);

    const std::vector<AnalystFeedback> fb = {feedback_for(fx.pool, 1, "fam2"),
                                             feedback_for(fx.pool, 5, "fam2"),
                                             feedback_for(fx.pool, 8, "fam2")};
    AdaptorConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.detector_lr = 0.0;
    cfg.seed = 13;

    const MalwareClassifier base = retrain_baseline(clf, fx.train, fx.pool, fb, cfg);
    const auto [joint_clf, joint_det] = adapt_dream(clf, det, fx.train, fx.pool, fb, cfg);

    CHECK(clf_bytes(joint_clf) == clf_bytes(base));
    CHECK(det_bytes(joint_det) == det_bytes(det));
}

TEST_CASE("stability schedule only ever lowers the detector rate") {
    const SplitFixture fx(90);
    const MalwareClassifier clf = train_classifier(fx.train, small_clf_cfg(91));
    const ConceptAutoencoder det = train_detector(fx.train, &clf, small_det_cfg(92));
    const std::vector<AnalystFeedback> fb = {feedback_for(fx.pool, 0, "fam2"),
                                             feedback_for(fx.pool, 2, "fam2")};

    AdaptorConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.seed = 5;

    SUBCASE("a threshold above every loss fires each epoch") {
        cfg.stability_threshold = 1e9;
        AdaptationReport report;
        adapt_dream(clf, det, fx.train, fx.pool, fb, cfg, &report);
        CHECK(report.threshold_used == 1e9);
        REQUIRE(report.schedule.size() == 5);
        double lr = cfg.detector_lr;
        for (std::size_t i = 0; i < report.schedule.size(); ++i) {
            const ScheduleEvent& ev = report.schedule[i];
            CHECK(ev.epoch == static_cast<int>(i));
            CHECK(ev.lr_before == doctest::Approx(lr));
            CHECK(ev.lr_after == doctest::Approx(lr * cfg.lr_decay));
            CHECK(ev.lr_after <= ev.lr_before);
            lr = ev.lr_after;
        }
        REQUIRE(report.epoch_det.size() == 5);
        REQUIRE(report.epoch_total.size() == 5);
    }
    SUBCASE("decay of one disables the schedule") {
        cfg.stability_threshold = 1e9;
        cfg.lr_decay = 1.0;
        AdaptationReport report;
        adapt_dream(clf, det, fx.train, fx.pool, fb, cfg, &report);
        CHECK(report.schedule.empty());
    }
    SUBCASE("auto threshold is half the starting loss") {
        AdaptationReport report;
        adapt_dream(clf, det, fx.train, fx.pool, fb, cfg, &report);
        CHECK(report.threshold_used > 0.0);
        CHECK(report.threshold_used < 1e9);
    }
    SUBCASE("empty feedback leaves both models untouched") {
        AdaptationReport report;
        const auto [c2, d2] = adapt_dream(clf, det, fx.train, fx.pool, {}, cfg, &report);
        CHECK(clf_bytes(c2) == clf_bytes(clf));
        CHECK(det_bytes(d2) == det_bytes(det));
        REQUIRE(report.warnings.size() == 1);
    }
}

TEST_CASE("joint adaptation validates model and vocabulary widths") {
    const SplitFixture fx(93);
    const MalwareClassifier clf = train_classifier(fx.train, small_clf_cfg(94));
    const std::vector<AnalystFeedback> fb = {feedback_for(fx.pool, 0, "fam2")};

    SUBCASE("feature width mismatch") {
        const ConceptAutoencoder wrong = make_autoencoder(9, small_det_cfg(95));
        CHECK_THROWS_AS(adapt_dream(clf, wrong, fx.train, fx.pool, fb, {}), InvalidInput);
    }
    SUBCASE("explicit width must match the behavior vocabulary") {
        DetectorConfig dcfg = small_det_cfg(96);
        dcfg.explicit_dim = 3;  // four behaviors in the data
        const ConceptAutoencoder wrong = make_autoencoder(6, dcfg);
        CHECK_THROWS_AS(adapt_dream(clf, wrong, fx.train, fx.pool, fb, {}), InvalidInput);
    }
}

TEST_CASE("adaptation actually learns a new family") {
    const SplitFixture fx(97);
    const MalwareClassifier clf = train_classifier(fx.train, small_clf_cfg(98));
    const ConceptAutoencoder det = train_detector(fx.train, &clf, small_det_cfg(99));
    CHECK(clf.label_index("fam2") < 0);

    std::vector<AnalystFeedback> fb;
    std::vector<int> held_out;
    for (int r = 0; r < fx.pool.size(); ++r) {
        if (r < 5)
            fb.push_back(feedback_for(fx.pool, r, "fam2"));
        else
            held_out.push_back(r);
    }

    AdaptorConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.seed = 3;
    const auto [adapted, adapted_det] = adapt_dream(clf, det, fx.train, fx.pool, fb, cfg);

    REQUIRE(adapted.label_index("fam2") >= 0);
    int hits = 0;
    for (int r : held_out) {
        const Prediction p = predict(adapted, fx.pool.features.row(r));
        if (adapted.labels[static_cast<std::size_t>(p.label)] == "fam2") ++hits;
    }
    CHECK(static_cast<double>(hits) / static_cast<double>(held_out.size()) >= 0.8);
}
