#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dream/classifier.hpp"
#include "dream/dataset.hpp"
#include "dream/nn.hpp"

namespace dream {

struct DetectorConfig {
    double lambda_rec = 1.0;
    double lambda_sep = 1.0;
    double lambda_pre = 1.0;
    double lambda_rel = 1.0;
    double margin = 10.0;
    int explicit_dim = 10;
    int implicit_dim = 22;
    int hidden = 512;
    int epochs = 30;
    int batch_size = 64;
    double learning_rate = 1e-3;
    int pair_cap = 512;
    std::uint64_t seed = 1;
};

void validate_config(const DetectorConfig& cfg);

// Autoencoder with the latent split [explicit | implicit]. The concept head is
// a fixed sigmoid read-out over the explicit units, kept as a one-layer net
// with identity weights so it serializes like any other net.
struct ConceptAutoencoder {
    DenseNet encoder;
    DenseNet decoder;
    DenseNet concept_head;
    int explicit_dim = 0;
    DetectorConfig config;

    int latent_dim() const { return encoder.output_width(); }
    int implicit_dim() const { return latent_dim() - explicit_dim; }
    int feature_dim() const { return encoder.input_width(); }

    Mat encode(const Mat& X) const { return forward(encoder, X); }
    Mat decode(const Mat& Z) const { return forward(decoder, Z); }
    Mat reconstruct(const Mat& X) const { return decode(encode(X)); }
    Mat concept_probabilities(const Mat& Z) const;
};

ConceptAutoencoder make_autoencoder(int feature_dim, const DetectorConfig& cfg);

// ---- loss terms ------------------------------------------------------------
// Scalar forms mirror the training objective exactly; gradient outputs are
// with respect to the argument named in the parameter.

// Mean over the batch of the squared L2 reconstruction error.
double loss_rec(const Mat& X, const Mat& Xhat, Mat* dxhat = nullptr);

using PairList = std::vector<std::pair<int, int>>;

// All unordered pairs of [0,n) when their count fits the cap, otherwise `cap`
// distinct pairs drawn without replacement.
PairList sample_pairs(int n, int cap, std::mt19937_64& rng);
PairList all_pairs(int n);

// Contrastive separation over latent pairs: squared distance for same-family
// pairs, squared hinge max(0, margin - d) for cross-family pairs, averaged
// over the pair list.
double loss_sep(const Mat& Z, const std::vector<int>& labels, double margin,
                const PairList& pairs, Mat* dz = nullptr);
double loss_sep(const Mat& Z, const std::vector<int>& labels, double margin);

// Masked binary cross-entropy on concept probabilities, summed over concepts
// and averaged over the batch.
double loss_pre(const Mat& probs, const IntMat& labels, const IntMat& mask, Mat* dprobs = nullptr);

// Cross-entropy between two probability tables (soft labels P, predictions Q),
// summed over classes, averaged over rows.
double loss_rel(const Mat& P, const Mat& Q, Mat* dp = nullptr, Mat* dq = nullptr);

// Reliability loss as used at scoring time: soft labels from clf(X),
// predictions from clf(Xhat).
double loss_rel(const MalwareClassifier& clf, const Mat& X, const Mat& Xhat);

// ---- composite objective ---------------------------------------------------
// One evaluation of
//   ce_weight * L_ce + det_weight * (l0*L_rec + l1*L_sep + l2*L_pre) + l3*L_rel
// with gradients for the encoder, the decoder, and (optionally) the
// classifier. Detector training calls it with the CE term off and the
// classifier frozen; the joint adaptor turns everything on; gradient tests
// difference the same code path they train with.

struct JointBatch {
    Mat X;
    std::vector<int> families;     // per-row family for the separation term
    IntMat concept_labels;         // n x explicit_dim
    IntMat concept_mask;           // n x explicit_dim
    std::vector<int> ce_targets;   // classifier-space targets; empty disables CE
    PairList pairs;
};

struct JointWeights {
    double lambda_rec = 1.0;
    double lambda_sep = 1.0;
    double lambda_pre = 1.0;
    double lambda_rel = 1.0;
    double margin = 10.0;
    double ce_weight = 1.0;
    double det_weight = 1.0;
};

JointWeights weights_from(const DetectorConfig& cfg);

struct JointTerms {
    double ce = 0.0, rec = 0.0, sep = 0.0, pre = 0.0, rel = 0.0;
    double det = 0.0;    // l0*rec + l1*sep + l2*pre (schedule quantity)
    double total = 0.0;  // ce_weight*ce + det_weight*det + l3*rel
};

struct JointGrads {
    NetGrads encoder;
    NetGrads decoder;
    NetGrads classifier;
};

// clf may be null only when lambda_rel == 0 and no CE targets are given.
// update_classifier controls whether classifier gradients are produced; the
// classifier itself is never mutated here.
JointTerms joint_objective(const ConceptAutoencoder& det, const MalwareClassifier* clf,
                           const JointBatch& batch, const JointWeights& w, JointGrads* grads,
                           bool update_classifier);

// ---- training and scoring ---------------------------------------------------

struct DetectorTrainReport {
    std::vector<double> epoch_total;
    std::vector<double> epoch_det;
    std::vector<std::string> warnings;
};

// Minimizes the detector objective over encoder+decoder; the classifier is
// read-only throughout. clf may be null only when lambda_rel == 0.
ConceptAutoencoder train_detector(const Dataset& data, const MalwareClassifier* clf,
                                  const DetectorConfig& cfg,
                                  DetectorTrainReport* report = nullptr);

// Drift score u = -log M(x)[argmax] + lambda_rel * L_rel(x, f(x)). Needs only
// the two frozen models; no training data is consulted.
double crd_score_value(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                       const RowVec& x, double lambda_rel, std::int64_t sample_id = -1);
Vec crd_score_batch(const ConceptAutoencoder& det, const MalwareClassifier& clf, const Mat& X,
                    double lambda_rel);

using ClassCentroids = std::map<std::string, Vec>;

ClassCentroids class_centroids(const ConceptAutoencoder& det, const Dataset& data);

void save_detector(const ConceptAutoencoder& det, const std::string& path);
ConceptAutoencoder load_detector(const std::string& path);

void save_centroids(const ClassCentroids& centroids, const std::string& path);
ClassCentroids load_centroids(const std::string& path);

}  // namespace dream
