#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dream/classifier.hpp"
#include "dream/dataset.hpp"
#include "dream/detector.hpp"

namespace dream {

struct DriftScore {
    double value = 0.0;  // higher = more drift
    std::string detector;
    std::vector<double> fold_p_values;  // filled by the cross-conformal scorer
};

// Uniform scoring surface: the harness ranks and compares detectors through
// this. Implementations are immutable once constructed.
class DriftDetector {
public:
    virtual ~DriftDetector() = default;
    virtual DriftScore score(const RowVec& x) const = 0;
    virtual const std::string& tag() const = 0;

    Vec score_batch(const Mat& X) const;
};

// u = -max_y M(x)[y]
class ProbabilityDetector : public DriftDetector {
public:
    explicit ProbabilityDetector(const MalwareClassifier& clf);
    DriftScore score(const RowVec& x) const override;
    const std::string& tag() const override { return tag_; }

private:
    const MalwareClassifier& clf_;
    std::string tag_ = "prob";
};

class CrdDetector : public DriftDetector {
public:
    CrdDetector(const ConceptAutoencoder& det, const MalwareClassifier& clf);
    CrdDetector(const ConceptAutoencoder& det, const MalwareClassifier& clf, double lambda_rel);
    DriftScore score(const RowVec& x) const override;
    const std::string& tag() const override { return tag_; }
    double lambda_rel() const { return lambda_rel_; }

private:
    const ConceptAutoencoder& det_;
    const MalwareClassifier& clf_;
    double lambda_rel_;
    std::string tag_ = "crd";
};

// ---- cross-conformal scorer --------------------------------------------------

struct TranscendentModel {
    int folds = 0;
    std::vector<MalwareClassifier> fold_classifiers;
    // per fold: predicted-class name -> ascending calibration uncertainties
    std::vector<std::map<std::string, std::vector<double>>> calibration;
};

// Stratified seeded k-fold split; fold i's classifier trains on everything
// outside fold i and calibrates on fold i, keyed by the label the fold
// classifier assigns to each calibration row.
TranscendentModel transcendent_fit(const Dataset& data, const ClassifierConfig& clf_cfg, int k,
                                   std::uint64_t seed);

// Per fold: p = share of calibration points (for x's predicted class under
// that fold) at least as uncertain as x; score = 1 - median(fold p-values).
DriftScore transcendent_score(const TranscendentModel& tm, const RowVec& x);

void save_transcendent(const TranscendentModel& tm, const std::string& path);
TranscendentModel load_transcendent(const std::string& path);

class TranscendentDetector : public DriftDetector {
public:
    explicit TranscendentDetector(const TranscendentModel& tm) : tm_(tm) {}
    DriftScore score(const RowVec& x) const override { return transcendent_score(tm_, x); }
    const std::string& tag() const override { return tag_; }

private:
    const TranscendentModel& tm_;
    std::string tag_ = "transcendent";
};

// ---- CADE ---------------------------------------------------------------------

struct CadeModel {
    ConceptAutoencoder autoencoder;
    ClassCentroids centroids;  // the only training-data residue
};

// Autoencoder with reconstruction + separation only; concept and reliability
// weights are forced to zero, so no classifier ever enters the fit.
CadeModel cade_fit(const Dataset& data, DetectorConfig cfg);

DriftScore cade_score(const CadeModel& model, const RowVec& x);

class CadeDetector : public DriftDetector {
public:
    explicit CadeDetector(const CadeModel& model) : model_(model) {}
    DriftScore score(const RowVec& x) const override { return cade_score(model_, x); }
    const std::string& tag() const override { return tag_; }

private:
    const CadeModel& model_;
    std::string tag_ = "cade";
};

// ---- neighborhood cross-entropy -------------------------------------------------

struct NceConfig {
    int k = 5;          // 0 scores the sample alone
    double beta = 1.0;  // weight of each neighbor against the sample itself
};

// Pseudo cross-entropy -log M(.)[argmax] averaged over x and its k nearest
// training neighbors in latent space:
//   (ce(x) + beta * sum_neighbors ce) / (1 + beta * k)
DriftScore nce_score(const ConceptAutoencoder& det, const MalwareClassifier& clf, const RowVec& x,
                     const Dataset& train, const NceConfig& cfg,
                     std::vector<std::string>* warnings = nullptr);

// Precomputed latents + per-row pseudo-CE for repeated scoring.
class NceDetector : public DriftDetector {
public:
    NceDetector(const ConceptAutoencoder& det, const MalwareClassifier& clf, const Dataset& train,
                const NceConfig& cfg);
    DriftScore score(const RowVec& x) const override;
    const std::string& tag() const override { return tag_; }

private:
    const ConceptAutoencoder& det_;
    const MalwareClassifier& clf_;
    NceConfig cfg_;
    Mat train_latents_;
    Vec train_ce_;
    std::string tag_ = "nce";
};

}  // namespace dream
