#include "dream/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

namespace dream {

using nlohmann::json;

// ---- split ---------------------------------------------------------------------

HoldoutSplit holdout_split(const Dataset& data, const std::string& heldout_family,
                           double train_fraction) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw InvalidInput("holdout_split: train fraction must lie in (0,1)");
    const auto held_it =
        std::find(data.family_names.begin(), data.family_names.end(), heldout_family);
    if (held_it == data.family_names.end())
        throw InvalidInput("holdout_split: family not in dataset: " + heldout_family);
    const int held = static_cast<int>(held_it - data.family_names.begin());
    if (std::count(data.family.begin(), data.family.end(), held) == 0)
        throw InvalidInput("holdout_split: family has no rows: " + heldout_family);

    HoldoutSplit split;
    std::vector<int> train_rows, id_rows, drift_rows;
    for (int f : data.families_present()) {
        std::vector<int> rows;
        for (int r = 0; r < data.size(); ++r)
            if (data.family[static_cast<std::size_t>(r)] == f) rows.push_back(r);
        if (f == held) {
            drift_rows.insert(drift_rows.end(), rows.begin(), rows.end());
            continue;
        }
        if (static_cast<int>(rows.size()) < 5) {
            emit_warning(&split.warnings,
                         "holdout_split: family " + data.family_names[static_cast<std::size_t>(f)] +
                             " has fewer than 5 rows; kept whole in train");
            train_rows.insert(train_rows.end(), rows.begin(), rows.end());
            continue;
        }
        std::sort(rows.begin(), rows.end(), [&](int a, int b) {
            const auto ta = data.timestamps[static_cast<std::size_t>(a)];
            const auto tb = data.timestamps[static_cast<std::size_t>(b)];
            if (ta != tb) return ta < tb;
            return data.ids[static_cast<std::size_t>(a)] < data.ids[static_cast<std::size_t>(b)];
        });
        const auto cut = static_cast<std::size_t>(
            std::floor(train_fraction * static_cast<double>(rows.size())));
        train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
        id_rows.insert(id_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(id_rows.begin(), id_rows.end());
    std::sort(drift_rows.begin(), drift_rows.end());
    split.train = data.subset(train_rows);
    split.id_test = data.subset(id_rows);
    split.drift_test = data.subset(drift_rows);
    return split;
}

// ---- metrics ---------------------------------------------------------------------

double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw InvalidInput("auc_rank: size mismatch");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw InvalidInput("auc_rank: labels must be 0/1");
        n_pos += static_cast<std::size_t>(l);
    }
    if (n_pos == 0 || n_pos == n)
        throw DegenerateTask("auc_rank: AUC undefined for single-class labels");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericalError("auc_rank: non-finite score");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks across ties, 1-based
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k] == 1) pos_rank_sum += rank[k];
    const double n_neg = static_cast<double>(n - n_pos);
    return (pos_rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0) /
           (static_cast<double>(n_pos) * n_neg);
}

double accuracy_score(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    if (y_true.size() != y_pred.size() || y_true.empty())
        throw InvalidInput("accuracy: label vectors must match and be non-empty");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) hits += (y_true[i] == y_pred[i]);
    return static_cast<double>(hits) / static_cast<double>(y_true.size());
}

double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    if (y_true.size() != y_pred.size() || y_true.empty())
        throw InvalidInput("macro_f1: label vectors must match and be non-empty");
    std::set<int> classes(y_true.begin(), y_true.end());
    classes.insert(y_pred.begin(), y_pred.end());
    double total = 0.0;
    for (int c : classes) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < y_true.size(); ++i) {
            const bool t = y_true[i] == c, p = y_pred[i] == c;
            tp += (t && p);
            fp += (!t && p);
            fn += (t && !p);
        }
        const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) +
                             static_cast<double>(fn);
        total += denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
    }
    return total / static_cast<double>(classes.size());
}

// ---- simulated analyst --------------------------------------------------------------

std::vector<AnalystFeedback> oracle_label(const Dataset& pool,
                                          const std::vector<std::int64_t>& ids, double rho,
                                          std::uint64_t seed, const ConceptAutoencoder* det,
                                          const ClassCentroids* centroids) {
    if (!(rho >= 0.0 && rho < 1.0)) throw InvalidInput("oracle_label: rho must lie in [0,1)");
    std::vector<AnalystFeedback> feedback;
    std::vector<int> rows;
    for (std::int64_t id : ids) {
        const int r = pool.find_id(id);
        if (r < 0) throw InvalidInput("oracle_label: unknown sample id " + std::to_string(id));
        rows.push_back(r);
        AnalystFeedback fb;
        fb.sample_id = id;
        fb.family = pool.family_name(r);
        fb.concept_labels = pool.concept_labels.row(r).transpose();
        fb.concept_mask = pool.concept_mask.row(r).transpose();
        feedback.push_back(std::move(fb));
    }

    const auto noisy = static_cast<std::size_t>(
        std::llround(rho * static_cast<double>(feedback.size())));
    if (noisy == 0) return feedback;
    if (!det || !centroids)
        throw InvalidInput("oracle_label: noise requires a detector and centroids");

    std::vector<std::size_t> order(feedback.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < noisy; ++k) {
        AnalystFeedback& fb = feedback[order[k]];
        const Vec z =
            det->encode(pool.features.row(rows[order[k]])).row(0).transpose();
        std::string best;
        double best_dist = 0.0;
        for (const auto& [name, c] : *centroids) {
            if (name == fb.family) continue;
            const double d = (z - c).norm();
            if (best.empty() || d < best_dist) {
                best = name;
                best_dist = d;
            }
        }
        if (best.empty())
            throw DegenerateTask("oracle_label: no alternative family available for noise");
        fb.family = best;  // concepts stay true
    }
    return feedback;
}

// ---- config --------------------------------------------------------------------------

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

void merge_synthetic(const json& j, SyntheticSpec& s) {
    maybe(j, "feature_dim", s.feature_dim);
    maybe(j, "family_count", s.family_count);
    maybe(j, "behavior_count", s.behavior_count);
    maybe(j, "block_size", s.block_size);
    maybe(j, "family_behaviors", s.family_behaviors);
    maybe(j, "flip_noise", s.flip_noise);
    maybe(j, "samples_per_family", s.samples_per_family);
    maybe(j, "mask_drop_rate", s.mask_drop_rate);
    maybe(j, "id_base", s.id_base);
    maybe(j, "seed", s.seed);
}

void merge_classifier(const json& j, ClassifierConfig& c) {
    maybe(j, "hidden", c.hidden);
    maybe(j, "epochs", c.epochs);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "learning_rate", c.learning_rate);
    maybe(j, "seed", c.seed);
}

void merge_detector(const json& j, DetectorConfig& d) {
    maybe(j, "lambda_rec", d.lambda_rec);
    maybe(j, "lambda_sep", d.lambda_sep);
    maybe(j, "lambda_pre", d.lambda_pre);
    maybe(j, "lambda_rel", d.lambda_rel);
    maybe(j, "margin", d.margin);
    maybe(j, "explicit_dim", d.explicit_dim);
    maybe(j, "implicit_dim", d.implicit_dim);
    maybe(j, "hidden", d.hidden);
    maybe(j, "epochs", d.epochs);
    maybe(j, "batch_size", d.batch_size);
    maybe(j, "learning_rate", d.learning_rate);
    maybe(j, "pair_cap", d.pair_cap);
    maybe(j, "seed", d.seed);
}

void merge_explainer(const json& j, ExplainerConfig& e) {
    maybe(j, "alpha_u", e.alpha_u);
    maybe(j, "alpha_s", e.alpha_s);
    maybe(j, "steps", e.steps);
    maybe(j, "threshold", e.threshold);
    maybe(j, "learning_rate", e.learning_rate);
    maybe(j, "elastic_mix", e.elastic_mix);
    maybe(j, "seed", e.seed);
}

void merge_adaptor(const json& j, AdaptorConfig& a) {
    maybe(j, "epochs", a.epochs);
    maybe(j, "batch_size", a.batch_size);
    maybe(j, "classifier_lr", a.classifier_lr);
    maybe(j, "detector_lr", a.detector_lr);
    maybe(j, "stability_threshold", a.stability_threshold);
    maybe(j, "lr_decay", a.lr_decay);
    maybe(j, "ce_weight", a.ce_weight);
    maybe(j, "det_weight", a.det_weight);
    maybe(j, "seed", a.seed);
}

json synthetic_to_json(const SyntheticSpec& s) {
    return {{"feature_dim", s.feature_dim},
            {"family_count", s.family_count},
            {"behavior_count", s.behavior_count},
            {"block_size", s.block_size},
            {"family_behaviors", s.family_behaviors},
            {"flip_noise", s.flip_noise},
            {"samples_per_family", s.samples_per_family},
            {"mask_drop_rate", s.mask_drop_rate},
            {"id_base", s.id_base},
            {"seed", s.seed}};
}

json classifier_to_json(const ClassifierConfig& c) {
    return {{"hidden", c.hidden},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"seed", c.seed}};
}

json detector_to_json(const DetectorConfig& d) {
    return {{"lambda_rec", d.lambda_rec},   {"lambda_sep", d.lambda_sep},
            {"lambda_pre", d.lambda_pre},   {"lambda_rel", d.lambda_rel},
            {"margin", d.margin},           {"explicit_dim", d.explicit_dim},
            {"implicit_dim", d.implicit_dim}, {"hidden", d.hidden},
            {"epochs", d.epochs},           {"batch_size", d.batch_size},
            {"learning_rate", d.learning_rate}, {"pair_cap", d.pair_cap},
            {"seed", d.seed}};
}

json explainer_to_json(const ExplainerConfig& e) {
    return {{"alpha_u", e.alpha_u},   {"alpha_s", e.alpha_s},
            {"steps", e.steps},       {"threshold", e.threshold},
            {"learning_rate", e.learning_rate}, {"elastic_mix", e.elastic_mix},
            {"seed", e.seed}};
}

json adaptor_to_json(const AdaptorConfig& a) {
    return {{"epochs", a.epochs},
            {"batch_size", a.batch_size},
            {"classifier_lr", a.classifier_lr},
            {"detector_lr", a.detector_lr},
            {"stability_threshold", a.stability_threshold},
            {"lr_decay", a.lr_decay},
            {"ce_weight", a.ce_weight},
            {"det_weight", a.det_weight},
            {"seed", a.seed}};
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // each argument passes through its own finalizer so no linear combination
    // of the raw inputs can collide two substreams
    const auto fin = [](std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    };
    const std::uint64_t ha = fin(a + 0x9e3779b97f4a7c15ull);
    return fin(ha ^ (fin(b + 0x632be59bd9b4e019ull) + 0x9e3779b97f4a7c15ull + (ha << 6) + (ha >> 2)));
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    if (j.contains("data")) merge_synthetic(j.at("data"), cfg.data);
    if (j.contains("classifier")) merge_classifier(j.at("classifier"), cfg.classifier);
    if (j.contains("detector")) merge_detector(j.at("detector"), cfg.detector);
    if (j.contains("cade")) merge_detector(j.at("cade"), cfg.cade);
    if (j.contains("nce")) {
        maybe(j.at("nce"), "k", cfg.nce.k);
        maybe(j.at("nce"), "beta", cfg.nce.beta);
    }
    maybe(j, "transcendent_folds", cfg.transcendent_folds);
    if (j.contains("explainer")) merge_explainer(j.at("explainer"), cfg.explainer);
    if (j.contains("adaptor")) merge_adaptor(j.at("adaptor"), cfg.adaptor);
    maybe(j, "detectors", cfg.detectors);
    maybe(j, "adaptors", cfg.adaptors);
    maybe(j, "budgets", cfg.budgets);
    maybe(j, "seeds", cfg.seeds);
    maybe(j, "heldout_families", cfg.heldout_families);
    maybe(j, "ranking_detector", cfg.ranking_detector);
    maybe(j, "oracle_noise", cfg.oracle_noise);
    maybe(j, "explanation_samples", cfg.explanation_samples);
    maybe(j, "explanation_spaces", cfg.explanation_spaces);
    maybe(j, "train_fraction", cfg.train_fraction);

    if (cfg.budgets.empty() || !std::is_sorted(cfg.budgets.begin(), cfg.budgets.end()))
        throw InvalidInput("experiment config: budgets must be ascending");
    for (int b : cfg.budgets)
        if (b < 0) throw InvalidInput("experiment config: budgets must be non-negative");
    if (cfg.seeds.empty()) throw InvalidInput("experiment config: at least one seed required");
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["data"] = synthetic_to_json(cfg.data);
    j["classifier"] = classifier_to_json(cfg.classifier);
    j["detector"] = detector_to_json(cfg.detector);
    j["cade"] = detector_to_json(cfg.cade);
    j["nce"] = {{"k", cfg.nce.k}, {"beta", cfg.nce.beta}};
    j["transcendent_folds"] = cfg.transcendent_folds;
    j["explainer"] = explainer_to_json(cfg.explainer);
    j["adaptor"] = adaptor_to_json(cfg.adaptor);
    j["detectors"] = cfg.detectors;
    j["adaptors"] = cfg.adaptors;
    j["budgets"] = cfg.budgets;
    j["seeds"] = cfg.seeds;
    j["heldout_families"] = cfg.heldout_families;
    j["ranking_detector"] = cfg.ranking_detector;
    j["oracle_noise"] = cfg.oracle_noise;
    j["explanation_samples"] = cfg.explanation_samples;
    j["explanation_spaces"] = cfg.explanation_spaces;
    j["train_fraction"] = cfg.train_fraction;
    return j;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("config file: " + std::string(e.what()));
    }
    return config_from_json(j);
}

// ---- experiment plumbing ----------------------------------------------------------------

namespace {

std::vector<std::string> heldout_list(const ExperimentConfig& cfg) {
    if (!cfg.heldout_families.empty()) return cfg.heldout_families;
    std::vector<std::string> names;
    for (int f = 0; f < cfg.data.family_count; ++f) names.push_back("fam" + std::to_string(f));
    return names;
}

struct PhaseTimer {
    std::string label;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    explicit PhaseTimer(std::string l) : label(std::move(l)) {}
    ~PhaseTimer() {
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - start)
                            .count();
        std::cerr << "[timing] " << label << ": " << static_cast<double>(ms) / 1000.0 << "s\n";
    }
};

}  // namespace

ExperimentCell prepare_cell(const ExperimentConfig& cfg, const std::string& heldout_family,
                            std::uint64_t seed) {
    PhaseTimer timer("prepare " + heldout_family + " seed " + std::to_string(seed));
    ExperimentCell cell;
    cell.heldout_family = heldout_family;
    cell.seed = seed;
    const std::uint64_t tag = mix_seed(seed, fnv1a(heldout_family));

    SyntheticSpec spec = cfg.data;
    spec.seed = mix_seed(cfg.data.seed, seed);
    cell.data = generate_synthetic(spec);
    cell.split = holdout_split(cell.data, heldout_family, cfg.train_fraction);

    ClassifierConfig ccfg = cfg.classifier;
    ccfg.seed = mix_seed(cfg.classifier.seed, mix_seed(tag, 0xC1ull));
    cell.clf = train_classifier(cell.split.train, ccfg);

    DetectorConfig dcfg = cfg.detector;
    dcfg.seed = mix_seed(cfg.detector.seed, mix_seed(tag, 0xD2ull));
    cell.det = train_detector(cell.split.train, &cell.clf, dcfg);
    cell.centroids = class_centroids(cell.det, cell.split.train);
    return cell;
}

namespace {

struct DetectorSet {
    std::unique_ptr<TranscendentModel> transcendent;
    std::unique_ptr<CadeModel> cade;
    std::unique_ptr<NceDetector> nce;
    std::vector<std::pair<std::string, std::unique_ptr<DriftDetector>>> scorers;
};

DetectorSet build_detectors(const ExperimentConfig& cfg, const ExperimentCell& cell,
                            const std::vector<std::string>& names) {
    DetectorSet set;
    const std::uint64_t tag = mix_seed(cell.seed, fnv1a(cell.heldout_family));
    for (const auto& name : names) {
        if (name == "prob") {
            set.scorers.emplace_back(name, std::make_unique<ProbabilityDetector>(cell.clf));
        } else if (name == "crd") {
            set.scorers.emplace_back(name, std::make_unique<CrdDetector>(cell.det, cell.clf));
        } else if (name == "transcendent") {
            PhaseTimer timer("transcendent fit " + cell.heldout_family + " seed " +
                             std::to_string(cell.seed));
            set.transcendent = std::make_unique<TranscendentModel>(transcendent_fit(
                cell.split.train, cfg.classifier, cfg.transcendent_folds, mix_seed(tag, 0x7ull)));
            set.scorers.emplace_back(name, std::make_unique<TranscendentDetector>(*set.transcendent));
        } else if (name == "cade") {
            PhaseTimer timer("cade fit " + cell.heldout_family + " seed " +
                             std::to_string(cell.seed));
            DetectorConfig ccfg = cfg.cade;
            ccfg.seed = mix_seed(tag, 0xCADull);
            set.cade = std::make_unique<CadeModel>(cade_fit(cell.split.train, ccfg));
            set.scorers.emplace_back(name, std::make_unique<CadeDetector>(*set.cade));
        } else if (name == "nce") {
            set.nce = std::make_unique<NceDetector>(cell.det, cell.clf, cell.split.train, cfg.nce);
        } else {
            throw InvalidInput("unknown detector: " + name);
        }
    }
    return set;
}

const DriftDetector& scorer_by_name(const DetectorSet& set, const std::string& name) {
    if (name == "nce" && set.nce) return *set.nce;
    for (const auto& [n, scorer] : set.scorers)
        if (n == name && scorer) return *scorer;
    throw InvalidInput("detector not built: " + name);
}

}  // namespace

json run_detection_experiment(const ExperimentConfig& cfg) {
    json cells = json::array();
    std::map<std::string, std::vector<double>> auc_by_detector;
    for (const auto& family : heldout_list(cfg)) {
        for (std::uint64_t seed : cfg.seeds) {
            ExperimentCell cell = prepare_cell(cfg, family, seed);
            DetectorSet set = build_detectors(cfg, cell, cfg.detectors);

            const Dataset pool = concat(cell.split.id_test, cell.split.drift_test);
            std::vector<int> labels(static_cast<std::size_t>(pool.size()), 0);
            for (int r = cell.split.id_test.size(); r < pool.size(); ++r)
                labels[static_cast<std::size_t>(r)] = 1;

            json cell_json = {{"heldout_family", family}, {"seed", seed}};
            json aucs;
            for (const auto& name : cfg.detectors) {
                const Vec scores = scorer_by_name(set, name).score_batch(pool.features);
                const double auc =
                    auc_rank({scores.begin(), scores.end()}, labels);
                aucs[name] = auc;
                auc_by_detector[name].push_back(auc);
            }
            cell_json["auc"] = aucs;
            cells.push_back(std::move(cell_json));
        }
    }
    json mean;
    for (const auto& [name, values] : auc_by_detector)
        mean[name] = std::accumulate(values.begin(), values.end(), 0.0) /
                     static_cast<double>(values.size());
    return {{"experiment", "detection"},
            {"config", config_to_json(cfg)},
            {"cells", cells},
            {"mean_auc", mean}};
}

namespace {

// Rows of the pool ordered by descending drift score, score ties by lower id.
std::vector<int> ranked_rows(const Dataset& pool, const Vec& scores) {
    std::vector<int> order(static_cast<std::size_t>(pool.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores(a) != scores(b)) return scores(a) > scores(b);
        return pool.ids[static_cast<std::size_t>(a)] < pool.ids[static_cast<std::size_t>(b)];
    });
    return order;
}

struct EvalLabels {
    std::vector<int> y_true, y_pred;
};

EvalLabels evaluate_predictions(const MalwareClassifier& clf, const Dataset& eval) {
    EvalLabels out;
    std::map<std::string, int> ids;
    const Mat probs = predict_batch(clf, eval.features);
    for (int r = 0; r < eval.size(); ++r) {
        const auto t = ids.try_emplace(eval.family_name(r), static_cast<int>(ids.size()));
        out.y_true.push_back(t.first->second);
        Vec p = probs.row(r).transpose();
        const std::string& pred = clf.labels[static_cast<std::size_t>(argmax_lowest(p))];
        const auto q = ids.try_emplace(pred, static_cast<int>(ids.size()));
        out.y_pred.push_back(q.first->second);
    }
    return out;
}

}  // namespace

json run_adaptation_experiment(const ExperimentConfig& cfg) {
    json cells = json::array();
    // (budget, adaptor) -> accumulated metrics
    std::map<int, std::map<std::string, std::vector<double>>> f1_acc, acc_acc;
    std::map<int, std::vector<double>> drift_hits;

    for (const auto& family : heldout_list(cfg)) {
        for (std::uint64_t seed : cfg.seeds) {
            ExperimentCell cell = prepare_cell(cfg, family, seed);
            DetectorSet set = build_detectors(cfg, cell, {cfg.ranking_detector});
            const Dataset pool = concat(cell.split.id_test, cell.split.drift_test);
            const Vec scores = scorer_by_name(set, cfg.ranking_detector).score_batch(pool.features);
            const std::vector<int> order = ranked_rows(pool, scores);
            const std::uint64_t tag = mix_seed(cell.seed, fnv1a(family));

            for (int budget : cfg.budgets) {
                int b = budget;
                if (b > pool.size()) {
                    emit_warning(nullptr, "adaptation: budget " + std::to_string(b) +
                                              " exceeds pool size " + std::to_string(pool.size()) +
                                              "; clamped");
                    b = pool.size();
                }
                std::vector<std::int64_t> selected_ids;
                std::vector<bool> picked(static_cast<std::size_t>(pool.size()), false);
                int hits = 0;
                for (int k = 0; k < b; ++k) {
                    const int row = order[static_cast<std::size_t>(k)];
                    picked[static_cast<std::size_t>(row)] = true;
                    selected_ids.push_back(pool.ids[static_cast<std::size_t>(row)]);
                    if (pool.family_name(row) == family) ++hits;
                }
                const auto feedback = oracle_label(pool, selected_ids, cfg.oracle_noise,
                                                   mix_seed(tag, 0xFEEDull), &cell.det,
                                                   &cell.centroids);
                std::vector<int> eval_rows;
                for (int r = 0; r < pool.size(); ++r)
                    if (!picked[static_cast<std::size_t>(r)]) eval_rows.push_back(r);
                const Dataset eval = pool.subset(eval_rows);

                AdaptorConfig acfg = cfg.adaptor;
                acfg.seed = mix_seed(cfg.adaptor.seed, mix_seed(tag, 0xADull));

                json result = {{"heldout_family", family},
                               {"seed", seed},
                               {"budget", budget},
                               {"drift_in_budget", hits}};
                for (const auto& adaptor : cfg.adaptors) {
                    PhaseTimer timer(adaptor + " " + family + " seed " + std::to_string(seed) +
                                     " budget " + std::to_string(budget));
                    MalwareClassifier updated;
                    if (adaptor == "retrain_baseline") {
                        AdaptationReport rep;
                        updated = retrain_baseline(cell.clf, cell.split.train, pool, feedback,
                                                   acfg, &rep);
                    } else if (adaptor == "adapt_dream") {
                        AdaptationReport rep;
                        auto [clf2, det2] = adapt_dream(cell.clf, cell.det, cell.split.train, pool,
                                                        feedback, acfg, &rep);
                        updated = std::move(clf2);
                    } else {
                        throw InvalidInput("unknown adaptor: " + adaptor);
                    }
                    const EvalLabels labels = evaluate_predictions(updated, eval);
                    const double f1 = macro_f1(labels.y_true, labels.y_pred);
                    const double acc = accuracy_score(labels.y_true, labels.y_pred);
                    result[adaptor] = {{"f1", f1}, {"accuracy", acc}};
                    f1_acc[budget][adaptor].push_back(f1);
                    acc_acc[budget][adaptor].push_back(acc);
                }
                drift_hits[budget].push_back(static_cast<double>(hits));
                cells.push_back(std::move(result));
            }
        }
    }

    json mean = json::array();
    for (int budget : cfg.budgets) {
        json row = {{"budget", budget}};
        const auto& hs = drift_hits[budget];
        row["drift_in_budget"] =
            std::accumulate(hs.begin(), hs.end(), 0.0) / static_cast<double>(hs.size());
        for (const auto& adaptor : cfg.adaptors) {
            const auto& f1s = f1_acc[budget][adaptor];
            const auto& accs = acc_acc[budget][adaptor];
            row[adaptor] = {
                {"f1", std::accumulate(f1s.begin(), f1s.end(), 0.0) / static_cast<double>(f1s.size())},
                {"accuracy",
                 std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size())}};
        }
        mean.push_back(std::move(row));
    }
    return {{"experiment", "adaptation"},
            {"config", config_to_json(cfg)},
            {"cells", cells},
            {"mean", mean}};
}

json run_explanation_experiment(const ExperimentConfig& cfg) {
    json cells = json::array();
    std::map<std::string, std::vector<double>> cbp_opt, cbp_rnd, drr_opt, drr_rnd;

    for (const auto& family : heldout_list(cfg)) {
        for (std::uint64_t seed : cfg.seeds) {
            ExperimentCell cell = prepare_cell(cfg, family, seed);
            if (cell.split.drift_test.size() == 0)
                throw DegenerateTask("explanation: no drift samples for family " + family);
            const CrdDetector crd(cell.det, cell.clf);
            const std::uint64_t tag = mix_seed(cell.seed, fnv1a(family));

            std::vector<int> rows(static_cast<std::size_t>(cell.split.drift_test.size()));
            std::iota(rows.begin(), rows.end(), 0);
            std::mt19937_64 rng(mix_seed(tag, 0xE1ull));
            std::shuffle(rows.begin(), rows.end(), rng);
            const int count = std::min<int>(cfg.explanation_samples,
                                            static_cast<int>(rows.size()));

            PhaseTimer timer("explanations " + family + " seed " + std::to_string(seed));
            for (int k = 0; k < count; ++k) {
                const RowVec x_d = cell.split.drift_test.features.row(rows[static_cast<std::size_t>(k)]);
                const Reference ref =
                    select_reference(cell.det, cell.clf, cell.split.train, cell.centroids, x_d);
                for (const auto& space : cfg.explanation_spaces) {
                    ExplainerConfig ecfg = cfg.explainer;
                    ecfg.seed = mix_seed(cfg.explainer.seed, mix_seed(tag, static_cast<std::uint64_t>(k)));
                    const ExplanationResult res =
                        space == "concept"
                            ? explain_concept(cell.det, cell.clf, cell.centroids, x_d,
                                              ref.features, ecfg, ref.sample_id)
                            : explain_feature(cell.det, cell.clf, cell.centroids, x_d,
                                              ref.features, ecfg, ref.sample_id);
                    const int sparsity = res.mask.sum();
                    const ExplanationResult rnd = random_explainer(
                        cell.det, cell.clf, cell.centroids, x_d, ref.features, space, sparsity,
                        mix_seed(ecfg.seed, 0x4a4dull), ref.sample_id);

                    RowVec pert_opt, z_opt, pert_rnd, z_rnd;
                    apply_binary_mask(cell.det, x_d, ref.features, res.mask, space, &pert_opt, &z_opt);
                    apply_binary_mask(cell.det, x_d, ref.features, rnd.mask, space, &pert_rnd, &z_rnd);
                    double cbp_o, cbp_r, drr_o, drr_r;
                    try {
                        cbp_o = metric_cbp(crd, cell.split.train, ref.family, pert_opt);
                        cbp_r = metric_cbp(crd, cell.split.train, ref.family, pert_rnd);
                        drr_o = metric_drr(cell.det, x_d, ref.features, z_opt);
                        drr_r = metric_drr(cell.det, x_d, ref.features, z_rnd);
                    } catch (const DegenerateTask&) {
                        continue;  // drift sample coincides with reference
                    }
                    cbp_opt[space].push_back(cbp_o);
                    cbp_rnd[space].push_back(cbp_r);
                    drr_opt[space].push_back(drr_o);
                    drr_rnd[space].push_back(drr_r);
                    cells.push_back({{"heldout_family", family},
                                     {"seed", seed},
                                     {"space", space},
                                     {"drift_id", cell.split.drift_test.ids[static_cast<std::size_t>(
                                                      rows[static_cast<std::size_t>(k)])]},
                                     {"sparsity", sparsity},
                                     {"cbp", cbp_o},
                                     {"cbp_random", cbp_r},
                                     {"drr", drr_o},
                                     {"drr_random", drr_r}});
                }
            }
        }
    }

    auto mean_of = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    json mean;
    for (const auto& [space, values] : cbp_opt) {
        if (values.empty()) continue;
        mean[space] = {{"cbp", mean_of(values)},
                       {"cbp_random", mean_of(cbp_rnd[space])},
                       {"drr", mean_of(drr_opt[space])},
                       {"drr_random", mean_of(drr_rnd[space])},
                       {"samples", values.size()}};
    }
    if (mean.empty()) throw DegenerateTask("explanation: no explainable drift samples");
    return {{"experiment", "explanation"},
            {"config", config_to_json(cfg)},
            {"cells", cells},
            {"mean", mean}};
}

json budget_curve(const json& adaptation_report, double target_accuracy) {
    if (!adaptation_report.contains("mean"))
        throw InvalidInput("budget_curve: not an adaptation report (missing mean table)");
    json curve;
    curve["target_accuracy"] = target_accuracy;
    json minimal = json::object();
    for (const auto& row : adaptation_report.at("mean")) {
        for (auto& [key, value] : row.items()) {
            if (!value.is_object() || !value.contains("accuracy")) continue;
            if (minimal.contains(key) && !minimal.at(key).is_null()) continue;
            if (value.at("accuracy").get<double>() >= target_accuracy)
                minimal[key] = row.at("budget");
            else if (!minimal.contains(key))
                minimal[key] = nullptr;  // not reached (yet)
        }
    }
    curve["minimal_budget"] = minimal;
    return curve;
}

void write_json_report(const json& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << report.dump(2) << "\n";
    if (!out) throw IoError("failed writing report: " + path);
}

void write_adaptation_csv(const json& adaptation_report, const std::string& path) {
    if (!adaptation_report.contains("mean"))
        throw InvalidInput("write_adaptation_csv: not an adaptation report");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << "budget,adaptor,f1,accuracy,mean_drift_in_budget\n";
    for (const auto& row : adaptation_report.at("mean")) {
        for (auto& [key, value] : row.items()) {
            if (!value.is_object() || !value.contains("f1")) continue;
            out << row.at("budget").get<int>() << "," << key << ","
                << value.at("f1").get<double>() << "," << value.at("accuracy").get<double>() << ","
                << row.at("drift_in_budget").get<double>() << "\n";
        }
    }
    if (!out) throw IoError("failed writing csv: " + path);
}

}  // namespace dream
