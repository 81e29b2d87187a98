#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dream/classifier.hpp"
#include "dream/dataset.hpp"
#include "dream/detector.hpp"

namespace dream {

struct AnalystFeedback {
    std::int64_t sample_id = -1;
    std::string family;
    IntVec concept_labels;
    IntVec concept_mask;
};

struct AdaptorConfig {
    int epochs = 20;
    int batch_size = 32;
    double classifier_lr = 1e-3;
    double detector_lr = 1e-3;
    double stability_threshold = -1.0;  // negative = half the starting detector loss
    double lr_decay = 0.5;              // eta; 1 keeps the detector rate constant
    double ce_weight = 1.0;             // balance between CE and detector terms
    double det_weight = 1.0;
    std::uint64_t seed = 1;
};

void validate_config(const AdaptorConfig& cfg);

struct ScheduleEvent {
    int epoch = 0;
    double mean_det_loss = 0.0;
    double lr_before = 0.0;
    double lr_after = 0.0;
};

struct AdaptationReport {
    std::vector<ScheduleEvent> schedule;
    std::vector<double> epoch_total;
    std::vector<double> epoch_det;
    double threshold_used = 0.0;
    std::vector<std::string> warnings;
};

// ---- feedback plumbing -------------------------------------------------------

void save_feedback(const std::vector<AnalystFeedback>& feedback, const std::string& path);
std::vector<AnalystFeedback> load_feedback(const std::string& path);

// Replaces the concept annotation of the referenced rows, everything else
// untouched. Ids must resolve inside `data`.
Dataset apply_concept_feedback(const Dataset& data, const std::vector<AnalystFeedback>& feedback);

// Training set for fine-tuning: all original rows followed by one row per
// feedback entry (features pulled from the pool by id, family and concepts
// taken from the feedback). Families unseen in the name table are appended.
// n_original reports where the feedback block starts.
Dataset build_finetune_set(const Dataset& train, const Dataset& pool,
                           const std::vector<AnalystFeedback>& feedback, int* n_original);

// Deterministic epoch plan shared by both adaptors. Feedback rows are
// oversampled into every batch (capped at half the batch size; a larger
// feedback list is dealt round-robin across the epoch's batches) so tiny
// budgets are not drowned out by the original data.
std::vector<std::vector<int>> finetune_batches(int n_original, int n_feedback, int batch_size,
                                               std::mt19937_64& rng);

// Labels the feedback introduces that the classifier lacks, in first-seen order.
std::vector<std::string> novel_labels(const MalwareClassifier& clf,
                                      const std::vector<AnalystFeedback>& feedback);

// ---- the two adaptors ----------------------------------------------------------

// Label-only fine-tuning on original + newly labeled rows; concept revisions
// are never read. Expands the output layer first when feedback names new
// families. Empty feedback returns the classifier unchanged with a warning.
MalwareClassifier retrain_baseline(const MalwareClassifier& clf, const Dataset& train,
                                   const Dataset& pool,
                                   const std::vector<AnalystFeedback>& feedback,
                                   const AdaptorConfig& cfg, AdaptationReport* report = nullptr);

// Joint update of classifier and detector:
//   ce_weight*L_ce(theta) + det_weight*L_det(psi) + lambda_rel*L_rel(theta, psi)
// where L_det = l0*L_rec + l1*L_sep + l2*L_pre and the lambdas come from the
// detector's training config. Label feedback enters the CE term, concept
// feedback the presence term. Once an epoch's mean L_det falls below the
// stability threshold, the detector learning rate is scaled by lr_decay for
// all later epochs (never increased).
std::pair<MalwareClassifier, ConceptAutoencoder> adapt_dream(
    const MalwareClassifier& clf, const ConceptAutoencoder& det, const Dataset& train,
    const Dataset& pool, const std::vector<AnalystFeedback>& feedback, const AdaptorConfig& cfg,
    AdaptationReport* report = nullptr);

}  // namespace dream
