#include "dream/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace dream {

Vec DriftDetector::score_batch(const Mat& X) const {
    Vec out(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) out(r) = score(X.row(r)).value;
    return out;
}

ProbabilityDetector::ProbabilityDetector(const MalwareClassifier& clf) : clf_(clf) {}

DriftScore ProbabilityDetector::score(const RowVec& x) const {
    const Prediction p = predict(clf_, x);
    return {-p.probabilities(p.label), tag_, {}};
}

CrdDetector::CrdDetector(const ConceptAutoencoder& det, const MalwareClassifier& clf)
    : CrdDetector(det, clf, det.config.lambda_rel) {}

CrdDetector::CrdDetector(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                         double lambda_rel)
    : det_(det), clf_(clf), lambda_rel_(lambda_rel) {}

DriftScore CrdDetector::score(const RowVec& x) const {
    return {crd_score_value(det_, clf_, x, lambda_rel_), tag_, {}};
}

// ---- cross-conformal scorer --------------------------------------------------

namespace {

double negated_max_prob(const MalwareClassifier& clf, const RowVec& x, int* label = nullptr) {
    const Prediction p = predict(clf, x);
    if (label) *label = p.label;
    return -p.probabilities(p.label);
}

}  // namespace

TranscendentModel transcendent_fit(const Dataset& data, const ClassifierConfig& clf_cfg, int k,
                                   std::uint64_t seed) {
    if (k < 2) throw InvalidInput("transcendent_fit: need at least two folds");
    if (data.size() == 0) throw InvalidInput("transcendent_fit: empty dataset");

    // Stratified assignment: shuffle each family's rows, deal them round-robin.
    std::vector<std::vector<int>> fold_rows(static_cast<std::size_t>(k));
    std::mt19937_64 rng(seed ^ 0xf01d5ull);
    for (int f : data.families_present()) {
        std::vector<int> rows;
        for (int r = 0; r < data.size(); ++r)
            if (data.family[static_cast<std::size_t>(r)] == f) rows.push_back(r);
        if (static_cast<int>(rows.size()) < k)
            throw DegenerateTask("transcendent_fit: family " +
                                 data.family_names[static_cast<std::size_t>(f)] + " has " +
                                 std::to_string(rows.size()) + " rows, fewer than " +
                                 std::to_string(k) + " folds");
        std::shuffle(rows.begin(), rows.end(), rng);
        for (std::size_t i = 0; i < rows.size(); ++i)
            fold_rows[i % static_cast<std::size_t>(k)].push_back(rows[i]);
    }

    TranscendentModel tm;
    tm.folds = k;
    for (int i = 0; i < k; ++i) {
        std::vector<int> train_rows;
        for (int j = 0; j < k; ++j)
            if (j != i)
                train_rows.insert(train_rows.end(), fold_rows[static_cast<std::size_t>(j)].begin(),
                                  fold_rows[static_cast<std::size_t>(j)].end());
        std::sort(train_rows.begin(), train_rows.end());
        ClassifierConfig fold_cfg = clf_cfg;
        fold_cfg.seed = seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(i + 1));
        MalwareClassifier fold_clf = train_classifier(data.subset(train_rows), fold_cfg);

        std::map<std::string, std::vector<double>> cal;
        for (int r : fold_rows[static_cast<std::size_t>(i)]) {
            int label = 0;
            const double u = negated_max_prob(fold_clf, data.features.row(r), &label);
            cal[fold_clf.labels[static_cast<std::size_t>(label)]].push_back(u);
        }
        for (auto& [name, us] : cal) std::sort(us.begin(), us.end());
        tm.fold_classifiers.push_back(std::move(fold_clf));
        tm.calibration.push_back(std::move(cal));
    }
    return tm;
}

DriftScore transcendent_score(const TranscendentModel& tm, const RowVec& x) {
    if (tm.folds == 0 || tm.fold_classifiers.empty())
        throw StateError("transcendent_score: model not fitted");
    DriftScore score;
    score.detector = "transcendent";
    for (int i = 0; i < tm.folds; ++i) {
        const MalwareClassifier& clf = tm.fold_classifiers[static_cast<std::size_t>(i)];
        int label = 0;
        const double u = negated_max_prob(clf, x, &label);
        const auto& cal = tm.calibration[static_cast<std::size_t>(i)];
        const auto it = cal.find(clf.labels[static_cast<std::size_t>(label)]);
        if (it == cal.end() || it->second.empty()) continue;  // fold skipped
        const auto& us = it->second;
        const auto ge = us.end() - std::lower_bound(us.begin(), us.end(), u);
        score.fold_p_values.push_back(static_cast<double>(ge) / static_cast<double>(us.size()));
    }
    if (score.fold_p_values.empty())
        throw DegenerateTask("transcendent_score: no fold has calibration data for this class");
    std::vector<double> ps = score.fold_p_values;
    std::sort(ps.begin(), ps.end());
    const std::size_t n = ps.size();
    const double median = (n % 2 == 1) ? ps[n / 2] : 0.5 * (ps[n / 2 - 1] + ps[n / 2]);
    score.value = 1.0 - median;
    return score;
}

namespace {
constexpr char kTrnMagic[8] = {'D', 'T', 'R', 'N', 'V', '0', '0', '1'};
}

void save_transcendent(const TranscendentModel& tm, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(kTrnMagic, sizeof(kTrnMagic));
    const auto folds = static_cast<std::uint32_t>(tm.folds);
    out.write(reinterpret_cast<const char*>(&folds), sizeof(folds));
    auto write_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    for (int i = 0; i < tm.folds; ++i) {
        save_classifier(tm.fold_classifiers[static_cast<std::size_t>(i)], out);
        const auto& cal = tm.calibration[static_cast<std::size_t>(i)];
        write_u32(static_cast<std::uint32_t>(cal.size()));
        for (const auto& [name, us] : cal) {
            write_u32(static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(static_cast<std::uint32_t>(us.size()));
            out.write(reinterpret_cast<const char*>(us.data()),
                      static_cast<std::streamsize>(us.size() * sizeof(double)));
        }
    }
    if (!out) throw IoError("failed writing transcendent model: " + path);
}

TranscendentModel load_transcendent(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kTrnMagic, sizeof(magic)) != 0)
        throw IoError("bad transcendent file: magic mismatch");
    auto read_u32 = [&]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!in) throw IoError("transcendent file truncated");
        return v;
    };
    TranscendentModel tm;
    tm.folds = static_cast<int>(read_u32());
    for (int i = 0; i < tm.folds; ++i) {
        tm.fold_classifiers.push_back(load_classifier(in));
        std::map<std::string, std::vector<double>> cal;
        const std::uint32_t classes = read_u32();
        for (std::uint32_t c = 0; c < classes; ++c) {
            const std::uint32_t name_len = read_u32();
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            const std::uint32_t count = read_u32();
            std::vector<double> us(count);
            in.read(reinterpret_cast<char*>(us.data()),
                    static_cast<std::streamsize>(count * sizeof(double)));
            if (!in) throw IoError("transcendent file truncated");
            cal[std::move(name)] = std::move(us);
        }
        tm.calibration.push_back(std::move(cal));
    }
    return tm;
}

// ---- CADE ----------------------------------------------------------------------

CadeModel cade_fit(const Dataset& data, DetectorConfig cfg) {
    cfg.lambda_pre = 0.0;
    cfg.lambda_rel = 0.0;
    CadeModel model;
    model.autoencoder = train_detector(data, nullptr, cfg);
    model.centroids = class_centroids(model.autoencoder, data);
    return model;
}

DriftScore cade_score(const CadeModel& model, const RowVec& x) {
    if (model.centroids.empty()) throw StateError("cade_score: model has no centroids");
    const Vec z = model.autoencoder.encode(x).row(0).transpose();
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [name, c] : model.centroids) best = std::min(best, (z - c).norm());
    return {best, "cade", {}};
}

// ---- neighborhood cross-entropy ---------------------------------------------------

namespace {

double pseudo_ce(const MalwareClassifier& clf, const RowVec& x) {
    const Prediction p = predict(clf, x);
    return -safe_log(p.probabilities(p.label));
}

// Indices of the k nearest rows, distance ties broken by lower row index.
std::vector<int> nearest_rows(const Mat& latents, const Vec& z, int k) {
    std::vector<std::pair<double, int>> dist;
    dist.reserve(static_cast<std::size_t>(latents.rows()));
    for (Eigen::Index r = 0; r < latents.rows(); ++r)
        dist.emplace_back((latents.row(r).transpose() - z).squaredNorm(), static_cast<int>(r));
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) rows.push_back(dist[static_cast<std::size_t>(i)].second);
    return rows;
}

int clamp_k(const NceConfig& cfg, int train_size, std::vector<std::string>* warnings) {
    if (cfg.k < 0) throw InvalidInput("nce: neighborhood size must be non-negative");
    if (!(cfg.beta >= 0)) throw InvalidInput("nce: beta must be non-negative");
    if (cfg.k > train_size) {
        emit_warning(warnings, "nce: k " + std::to_string(cfg.k) + " exceeds training size " +
                                   std::to_string(train_size) + "; clamped");
        return train_size;
    }
    return cfg.k;
}

}  // namespace

DriftScore nce_score(const ConceptAutoencoder& det, const MalwareClassifier& clf, const RowVec& x,
                     const Dataset& train, const NceConfig& cfg,
                     std::vector<std::string>* warnings) {
    if (train.size() == 0) throw InvalidInput("nce_score: empty training data");
    const int k = clamp_k(cfg, train.size(), warnings);
    double total = pseudo_ce(clf, x);
    double weight = 1.0;
    if (k > 0) {
        const Mat latents = det.encode(train.features);
        const Vec z = det.encode(x).row(0).transpose();
        for (int r : nearest_rows(latents, z, k)) {
            total += cfg.beta * pseudo_ce(clf, train.features.row(r));
            weight += cfg.beta;
        }
    }
    return {total / weight, "nce", {}};
}

NceDetector::NceDetector(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                         const Dataset& train, const NceConfig& cfg)
    : det_(det), clf_(clf), cfg_(cfg) {
    if (train.size() == 0) throw InvalidInput("nce: empty training data");
    cfg_.k = clamp_k(cfg, train.size(), nullptr);
    train_latents_ = det.encode(train.features);
    train_ce_.resize(train.size());
    for (int r = 0; r < train.size(); ++r) train_ce_(r) = pseudo_ce(clf, train.features.row(r));
}

DriftScore NceDetector::score(const RowVec& x) const {
    double total = pseudo_ce(clf_, x);
    double weight = 1.0;
    if (cfg_.k > 0) {
        const Vec z = det_.encode(x).row(0).transpose();
        for (int r : nearest_rows(train_latents_, z, cfg_.k)) {
            total += cfg_.beta * train_ce_(r);
            weight += cfg_.beta;
        }
    }
    return {total / weight, tag_, {}};
}

}  // namespace dream
