#include "dream/adaptor.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace dream {

using nlohmann::json;

void validate_config(const AdaptorConfig& cfg) {
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw InvalidInput("adaptor config: epochs and batch size must be positive");
    if (!(cfg.classifier_lr >= 0) || !(cfg.detector_lr >= 0))
        throw InvalidInput("adaptor config: learning rates must be non-negative");
    if (!(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0))
        throw InvalidInput("adaptor config: lr decay must lie in (0,1]");
    if (cfg.stability_threshold == 0.0)
        throw InvalidInput("adaptor config: stability threshold must be positive (or negative for auto)");
    if (!(cfg.ce_weight >= 0) || !(cfg.det_weight >= 0))
        throw InvalidInput("adaptor config: term weights must be non-negative");
}

// ---- feedback plumbing ---------------------------------------------------------

void save_feedback(const std::vector<AnalystFeedback>& feedback, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    for (const auto& fb : feedback) {
        json j;
        j["sample_id"] = fb.sample_id;
        j["family"] = fb.family;
        j["concepts"] = {{"labels", std::vector<int>(fb.concept_labels.begin(), fb.concept_labels.end())},
                         {"mask", std::vector<int>(fb.concept_mask.begin(), fb.concept_mask.end())}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("failed writing feedback: " + path);
}

std::vector<AnalystFeedback> load_feedback(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path);
    std::vector<AnalystFeedback> feedback;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            AnalystFeedback fb;
            fb.sample_id = j.at("sample_id").get<std::int64_t>();
            fb.family = j.at("family").get<std::string>();
            const auto labels = j.at("concepts").at("labels").get<std::vector<int>>();
            const auto mask = j.at("concepts").at("mask").get<std::vector<int>>();
            fb.concept_labels = Eigen::Map<const IntVec>(labels.data(), static_cast<Eigen::Index>(labels.size()));
            fb.concept_mask = Eigen::Map<const IntVec>(mask.data(), static_cast<Eigen::Index>(mask.size()));
            feedback.push_back(std::move(fb));
        } catch (const json::exception& e) {
            throw IoError("feedback line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return feedback;
}

namespace {

void validate_feedback_concepts(const AnalystFeedback& fb, int behavior_count) {
    if (fb.concept_labels.size() != behavior_count || fb.concept_mask.size() != behavior_count)
        throw InvalidInput("feedback for sample " + std::to_string(fb.sample_id) +
                           ": concept vectors must have length " + std::to_string(behavior_count));
    for (Eigen::Index i = 0; i < fb.concept_labels.size(); ++i)
        if ((fb.concept_labels(i) != 0 && fb.concept_labels(i) != 1) ||
            (fb.concept_mask(i) != 0 && fb.concept_mask(i) != 1))
            throw InvalidInput("feedback for sample " + std::to_string(fb.sample_id) +
                               ": concept entries must be 0/1");
}

}  // namespace

Dataset apply_concept_feedback(const Dataset& data, const std::vector<AnalystFeedback>& feedback) {
    Dataset out = data;
    for (const auto& fb : feedback) {
        const int row = out.find_id(fb.sample_id);
        if (row < 0)
            throw InvalidInput("apply_concept_feedback: unknown sample id " +
                               std::to_string(fb.sample_id));
        validate_feedback_concepts(fb, out.behavior_count());
        out.concept_labels.row(row) = fb.concept_labels.transpose();
        out.concept_mask.row(row) = fb.concept_mask.transpose();
    }
    return out;
}

Dataset build_finetune_set(const Dataset& train, const Dataset& pool,
                           const std::vector<AnalystFeedback>& feedback, int* n_original) {
    if (train.feature_dim() != pool.feature_dim())
        throw InvalidInput("build_finetune_set: train and pool feature widths differ");
    if (train.behavior_names != pool.behavior_names)
        throw InvalidInput("build_finetune_set: behavior vocabularies differ");
    std::set<std::int64_t> seen;
    for (const auto& fb : feedback)
        if (!seen.insert(fb.sample_id).second)
            throw InvalidInput("build_finetune_set: duplicate feedback for sample " +
                               std::to_string(fb.sample_id));

    Dataset out = train;
    if (n_original) *n_original = train.size();
    const int extra = static_cast<int>(feedback.size());
    out.features.conservativeResize(train.size() + extra, Eigen::NoChange);
    out.concept_labels.conservativeResize(train.size() + extra, Eigen::NoChange);
    out.concept_mask.conservativeResize(train.size() + extra, Eigen::NoChange);

    int row = train.size();
    for (const auto& fb : feedback) {
        const int src = pool.find_id(fb.sample_id);
        if (src < 0)
            throw InvalidInput("build_finetune_set: sample id " + std::to_string(fb.sample_id) +
                               " not found in pool");
        validate_feedback_concepts(fb, train.behavior_count());
        auto it = std::find(out.family_names.begin(), out.family_names.end(), fb.family);
        int fam;
        if (it == out.family_names.end()) {
            fam = static_cast<int>(out.family_names.size());
            out.family_names.push_back(fb.family);
        } else {
            fam = static_cast<int>(it - out.family_names.begin());
        }
        out.features.row(row) = pool.features.row(src);
        out.concept_labels.row(row) = fb.concept_labels.transpose();
        out.concept_mask.row(row) = fb.concept_mask.transpose();
        out.family.push_back(fam);
        out.timestamps.push_back(pool.timestamps[static_cast<std::size_t>(src)]);
        out.ids.push_back(pool.ids[static_cast<std::size_t>(src)]);
        ++row;
    }
    validate_dataset(out);
    return out;
}

std::vector<std::vector<int>> finetune_batches(int n_original, int n_feedback, int batch_size,
                                               std::mt19937_64& rng) {
    if (n_original < 1) throw InvalidInput("finetune_batches: need at least one original row");
    if (batch_size < 1) throw InvalidInput("finetune_batches: batch size must be positive");

    std::vector<int> originals(static_cast<std::size_t>(n_original));
    std::iota(originals.begin(), originals.end(), 0);
    std::shuffle(originals.begin(), originals.end(), rng);

    const int quota = n_feedback > 0 ? std::min(n_feedback, std::max(1, batch_size / 2)) : 0;
    std::vector<int> fb(static_cast<std::size_t>(n_feedback));
    std::iota(fb.begin(), fb.end(), n_original);
    if (n_feedback > 0) std::shuffle(fb.begin(), fb.end(), rng);

    const int per_batch = std::max(1, batch_size - quota);
    std::vector<std::vector<int>> batches;
    int k = 0;
    for (int start = 0; start < n_original; start += per_batch, ++k) {
        const int stop = std::min(n_original, start + per_batch);
        std::vector<int> batch(originals.begin() + start, originals.begin() + stop);
        if (n_feedback <= quota) {
            batch.insert(batch.end(), fb.begin(), fb.end());
        } else {
            for (int t = 0; t < quota; ++t)
                batch.push_back(fb[static_cast<std::size_t>((k * quota + t) % n_feedback)]);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

std::vector<std::string> novel_labels(const MalwareClassifier& clf,
                                      const std::vector<AnalystFeedback>& feedback) {
    std::vector<std::string> fresh;
    for (const auto& fb : feedback)
        if (clf.label_index(fb.family) < 0 &&
            std::find(fresh.begin(), fresh.end(), fb.family) == fresh.end())
            fresh.push_back(fb.family);
    return fresh;
}

// ---- the two adaptors -------------------------------------------------------------

namespace {

constexpr std::uint64_t kBatchTag = 0xba7c4ull;
constexpr std::uint64_t kPairTag = 0x9a125ull;
constexpr std::uint64_t kExpandTag = 0xe79a2dull;
constexpr std::uint64_t kMeasureTag = 0x3ea5ull;

struct FinetunePrep {
    Dataset combined;
    int n_original = 0;
    MalwareClassifier clf;           // output layer already expanded if needed
    std::vector<int> targets;        // CE targets against the (expanded) label set
};

FinetunePrep prepare_finetune(const MalwareClassifier& clf, const Dataset& train,
                              const Dataset& pool, const std::vector<AnalystFeedback>& feedback,
                              const AdaptorConfig& cfg) {
    FinetunePrep prep;
    prep.combined = build_finetune_set(train, pool, feedback, &prep.n_original);
    const auto fresh = novel_labels(clf, feedback);
    prep.clf = fresh.empty() ? clf : expand_output_layer(clf, fresh, cfg.seed ^ kExpandTag);
    prep.targets = label_targets(prep.clf, prep.combined);
    return prep;
}

Mat gather_rows(const Mat& src, const std::vector<int>& rows) {
    Mat out(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    return out;
}

}  // namespace

MalwareClassifier retrain_baseline(const MalwareClassifier& clf, const Dataset& train,
                                   const Dataset& pool,
                                   const std::vector<AnalystFeedback>& feedback,
                                   const AdaptorConfig& cfg, AdaptationReport* report) {
    validate_config(cfg);
    if (feedback.empty()) {
        emit_warning(report ? &report->warnings : nullptr,
                     "retrain_baseline: empty feedback; classifier returned unchanged");
        return clf;
    }
    FinetunePrep prep = prepare_finetune(clf, train, pool, feedback, cfg);

    AdamState opt = make_adam(prep.clf.net, cfg.classifier_lr);
    std::mt19937_64 batch_rng(cfg.seed ^ kBatchTag);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = finetune_batches(prep.n_original, static_cast<int>(feedback.size()),
                                              cfg.batch_size, batch_rng);
        double epoch_ce = 0.0;
        for (const auto& rows : batches) {
            Mat X = gather_rows(prep.combined.features, rows);
            std::vector<int> y;
            y.reserve(rows.size());
            for (int r : rows) y.push_back(prep.targets[static_cast<std::size_t>(r)]);
            ForwardCache cache = forward_cached(prep.clf.net, X);
            Mat dprobs;
            epoch_ce += cfg.ce_weight * cross_entropy(cache.output(), y, &dprobs);
            dprobs *= cfg.ce_weight;
            adam_step(opt, prep.clf.net, backward(prep.clf.net, cache, dprobs));
        }
        if (report) report->epoch_total.push_back(epoch_ce / static_cast<double>(batches.size()));
    }
    return prep.clf;
}

std::pair<MalwareClassifier, ConceptAutoencoder> adapt_dream(
    const MalwareClassifier& clf, const ConceptAutoencoder& det, const Dataset& train,
    const Dataset& pool, const std::vector<AnalystFeedback>& feedback, const AdaptorConfig& cfg,
    AdaptationReport* report) {
    validate_config(cfg);
    if (feedback.empty()) {
        emit_warning(report ? &report->warnings : nullptr,
                     "adapt_dream: empty feedback; models returned unchanged");
        return {clf, det};
    }
    if (det.feature_dim() != train.feature_dim() || clf.input_width() != train.feature_dim())
        throw InvalidInput("adapt_dream: model widths do not match the data");

    FinetunePrep prep = prepare_finetune(clf, train, pool, feedback, cfg);
    ConceptAutoencoder adapted_det = det;
    JointWeights w = weights_from(det.config);
    w.ce_weight = cfg.ce_weight;
    w.det_weight = cfg.det_weight;
    const bool want_pre = w.lambda_pre > 0.0 && det.explicit_dim > 0;
    if (want_pre && prep.combined.behavior_count() != det.explicit_dim)
        throw InvalidInput("adapt_dream: behavior vocabulary does not match detector's explicit width");

    const int n_fb = static_cast<int>(feedback.size());

    auto make_batch = [&](const std::vector<int>& rows) {
        JointBatch batch;
        batch.X = gather_rows(prep.combined.features, rows);
        batch.families.reserve(rows.size());
        batch.ce_targets.reserve(rows.size());
        for (int r : rows) {
            batch.families.push_back(prep.combined.family[static_cast<std::size_t>(r)]);
            batch.ce_targets.push_back(prep.targets[static_cast<std::size_t>(r)]);
        }
        if (want_pre) {
            batch.concept_labels.resize(static_cast<Eigen::Index>(rows.size()), det.explicit_dim);
            batch.concept_mask.resize(static_cast<Eigen::Index>(rows.size()), det.explicit_dim);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                batch.concept_labels.row(static_cast<Eigen::Index>(i)) =
                    prep.combined.concept_labels.row(rows[i]);
                batch.concept_mask.row(static_cast<Eigen::Index>(i)) =
                    prep.combined.concept_mask.row(rows[i]);
            }
        }
        return batch;
    };

    // Baseline detector loss before any update, for the auto threshold.
    double threshold = cfg.stability_threshold;
    if (threshold < 0.0) {
        std::mt19937_64 measure_rng(cfg.seed ^ kMeasureTag);
        double total = 0.0;
        int count = 0;
        for (int start = 0; start < prep.combined.size(); start += cfg.batch_size) {
            const int stop = std::min(prep.combined.size(), start + cfg.batch_size);
            std::vector<int> rows(static_cast<std::size_t>(stop - start));
            std::iota(rows.begin(), rows.end(), start);
            JointBatch batch = make_batch(rows);
            if (w.lambda_sep > 0.0)
                batch.pairs = sample_pairs(static_cast<int>(rows.size()), det.config.pair_cap,
                                           measure_rng);
            total += joint_objective(adapted_det, &prep.clf, batch, w, nullptr, false).det;
            ++count;
        }
        threshold = 0.5 * total / std::max(1, count);
    }
    if (report) report->threshold_used = threshold;

    AdamState clf_opt = make_adam(prep.clf.net, cfg.classifier_lr);
    AdamState enc_opt = make_adam(adapted_det.encoder, cfg.detector_lr);
    AdamState dec_opt = make_adam(adapted_det.decoder, cfg.detector_lr);
    std::mt19937_64 batch_rng(cfg.seed ^ kBatchTag);
    std::mt19937_64 pair_rng(cfg.seed ^ kPairTag);
    double det_lr = cfg.detector_lr;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches =
            finetune_batches(prep.n_original, n_fb, cfg.batch_size, batch_rng);
        double epoch_total = 0.0, epoch_det = 0.0;
        for (const auto& rows : batches) {
            JointBatch batch = make_batch(rows);
            if (w.lambda_sep > 0.0)
                batch.pairs =
                    sample_pairs(static_cast<int>(rows.size()), det.config.pair_cap, pair_rng);
            JointGrads grads;
            const JointTerms terms = joint_objective(adapted_det, &prep.clf, batch, w, &grads, true);
            adam_step(clf_opt, prep.clf.net, grads.classifier);
            adam_step(enc_opt, adapted_det.encoder, grads.encoder);
            adam_step(dec_opt, adapted_det.decoder, grads.decoder);
            epoch_total += terms.total;
            epoch_det += terms.det;
        }
        const double mean_det = epoch_det / static_cast<double>(batches.size());
        if (report) {
            report->epoch_total.push_back(epoch_total / static_cast<double>(batches.size()));
            report->epoch_det.push_back(mean_det);
        }
        if (mean_det < threshold && cfg.lr_decay < 1.0) {
            const double next = det_lr * cfg.lr_decay;
            if (report) report->schedule.push_back({epoch, mean_det, det_lr, next});
            det_lr = next;
            enc_opt.learning_rate = det_lr;
            dec_opt.learning_rate = det_lr;
        }
    }
    return {std::move(prep.clf), std::move(adapted_det)};
}

}  // namespace dream
