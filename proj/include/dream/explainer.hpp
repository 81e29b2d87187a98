#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "dream/baselines.hpp"
#include "dream/classifier.hpp"
#include "dream/dataset.hpp"
#include "dream/detector.hpp"

namespace dream {

struct ExplainerConfig {
    double alpha_u = 1.0;       // weight of the uncertainty terms
    double alpha_s = -1.0;      // sparsity weight; negative = 0.05 / mask length
    int steps = 500;
    double threshold = 0.5;     // binarization cut on the relaxed mask
    double learning_rate = 0.05;
    double elastic_mix = 0.0;   // 0 = L1 regularizer, 1 = squared; blend between
    std::uint64_t seed = 0;
};

struct ExplanationResult {
    std::string space;  // "concept" | "feature"
    std::string reference_family;
    std::int64_t reference_id = -1;
    IntVec mask;
    double pre_score = 0.0;
    double post_score = 0.0;
    double pre_distance = 0.0;   // latent distance drift -> reference
    double post_distance = 0.0;  // same distance after masking
};

struct Reference {
    std::string family;
    std::int64_t sample_id = -1;
    RowVec features;
};

// Reference = the training sample of the predicted family whose latent lies
// nearest that family's centroid; distance ties go to the lowest sample id.
Reference select_reference(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                           const Dataset& train, const ClassCentroids& centroids,
                           const RowVec& x_d);

// ---- objectives -------------------------------------------------------------
// Both objectives are exposed as pure (value, gradient) functions of the mask
// logits so their gradients can be checked by differencing; the optimizers
// below run Adam on exactly these.

struct ExplainContext {
    RowVec x_d, x_r;
    RowVec z_d, z_r;    // encoder latents of the two samples
    Vec centroid;       // centroid of the predicted family
    RowVec ref_probs;   // M(f(x_r)): frozen soft labels for the concept objective
    double alpha_s = 0.0;
};

ExplainContext make_explain_context(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                    const ClassCentroids& centroids, const RowVec& x_d,
                                    const RowVec& x_r, const ExplainerConfig& cfg,
                                    bool concept_space);

// || z' - c || + alpha_u * (pseudo-CE(x') + CE(M(f(x_r)), M(x'))) + alpha_s * reg(m)
// with z' = z_d (1-m) + z_r m, x' = decode(z'), m = sigmoid(logits).
double concept_objective(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                         const ExplainContext& ctx, const RowVec& logits,
                         const ExplainerConfig& cfg, RowVec* dlogits);

// Same shape over a feature mask: x' = x_d (1-m) + x_r m, z' = encode(x'),
// uncertainty CE(M(x'), M(decode(z'))) plus pseudo-CE(x').
double feature_objective(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                         const ExplainContext& ctx, const RowVec& logits,
                         const ExplainerConfig& cfg, RowVec* dlogits);

// ---- explainers ---------------------------------------------------------------
// Post metrics are always recomputed under the binarized mask.

ExplanationResult explain_concept(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                  const ClassCentroids& centroids, const RowVec& x_d,
                                  const RowVec& x_r, const ExplainerConfig& cfg,
                                  std::int64_t reference_id = -1);

ExplanationResult explain_feature(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                  const ClassCentroids& centroids, const RowVec& x_d,
                                  const RowVec& x_r, const ExplainerConfig& cfg,
                                  std::int64_t reference_id = -1);

// Uniformly random mask of exactly `size` ones, metrics computed the same way
// as for the optimized explainers.
ExplanationResult random_explainer(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                   const ClassCentroids& centroids, const RowVec& x_d,
                                   const RowVec& x_r, const std::string& space, int size,
                                   std::uint64_t seed, std::int64_t reference_id = -1);

// The perturbed object and its latent under a given binary mask; shared by the
// optimized and random explainers and usable directly in tests.
void apply_binary_mask(const ConceptAutoencoder& det, const RowVec& x_d, const RowVec& x_r,
                       const IntVec& mask, const std::string& space, RowVec* perturbed,
                       RowVec* perturbed_latent);

// Share of the family's training rows scoring at least as high as the
// perturbed sample under the given detector.
double metric_cbp(const DriftDetector& detector, const Dataset& train, const std::string& family,
                  const RowVec& perturbed);

// (d0 - d1)/d0 for latent distances drift->reference before/after perturbation.
double metric_drr(const ConceptAutoencoder& det, const RowVec& x_d, const RowVec& x_r,
                  const RowVec& perturbed_latent);

nlohmann::json explanation_to_json(const ExplanationResult& result,
                                   const std::vector<std::string>& behavior_names);

}  // namespace dream
