#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dream/adaptor.hpp"
#include "dream/baselines.hpp"
#include "dream/classifier.hpp"
#include "dream/dataset.hpp"
#include "dream/detector.hpp"
#include "dream/explainer.hpp"
#include "dream/synthetic.hpp"

namespace dream {

// ---- split and metrics --------------------------------------------------------

struct HoldoutSplit {
    Dataset train;
    Dataset id_test;     // drift label 0
    Dataset drift_test;  // drift label 1
    std::vector<std::string> warnings;
};

// drift_test = every row of the held-out family; each remaining family is cut
// 80:20 by ascending timestamp (earliest into train). Families under 5 rows
// stay whole in train with a warning.
HoldoutSplit holdout_split(const Dataset& data, const std::string& heldout_family,
                           double train_fraction = 0.8);

// Rank-statistic AUC with ties counted half. Labels are 0/1; both classes
// must be present.
double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels);

double accuracy_score(const std::vector<int>& y_true, const std::vector<int>& y_pred);

// Mean per-class F1 over every label present in y_true or y_pred; a class
// with zero precision+recall contributes 0.
double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred);

// ---- simulated analyst -----------------------------------------------------------

// True family + true concepts per requested id. A seeded floor(rho*n + 0.5)
// subset gets its family swapped for the nearest other family by
// latent-centroid distance (concepts stay true). det/centroids may be null
// when rho is 0.
std::vector<AnalystFeedback> oracle_label(const Dataset& pool,
                                          const std::vector<std::int64_t>& ids, double rho,
                                          std::uint64_t seed, const ConceptAutoencoder* det,
                                          const ClassCentroids* centroids);

// ---- experiment driver -------------------------------------------------------------

struct ExperimentConfig {
    SyntheticSpec data;
    ClassifierConfig classifier;
    DetectorConfig detector;
    DetectorConfig cade;  // presence/reliability weights forced to 0 at fit
    NceConfig nce;
    int transcendent_folds = 10;
    ExplainerConfig explainer;
    AdaptorConfig adaptor;

    std::vector<std::string> detectors = {"prob", "transcendent", "cade", "crd", "nce"};
    std::vector<std::string> adaptors = {"retrain_baseline", "adapt_dream"};
    std::vector<int> budgets = {10, 20, 30, 40, 100};
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<std::string> heldout_families;  // empty = every family in turn
    std::string ranking_detector = "crd";       // orders the labeling queue
    double oracle_noise = 0.0;
    int explanation_samples = 20;
    std::vector<std::string> explanation_spaces = {"concept"};
    double train_fraction = 0.8;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::string& path);

// One trained world: models fitted on the training side of a hold-out split.
struct ExperimentCell {
    std::string heldout_family;
    std::uint64_t seed = 0;
    Dataset data;
    HoldoutSplit split;
    MalwareClassifier clf;
    ConceptAutoencoder det;
    ClassCentroids centroids;
};

ExperimentCell prepare_cell(const ExperimentConfig& cfg, const std::string& heldout_family,
                            std::uint64_t seed);

nlohmann::json run_detection_experiment(const ExperimentConfig& cfg);
nlohmann::json run_adaptation_experiment(const ExperimentConfig& cfg);
nlohmann::json run_explanation_experiment(const ExperimentConfig& cfg);

// Smallest evaluated budget whose mean accuracy reaches the target, per
// adaptor, from a run_adaptation_experiment report. Null = not reached.
nlohmann::json budget_curve(const nlohmann::json& adaptation_report, double target_accuracy);

void write_json_report(const nlohmann::json& report, const std::string& path);

// Per-budget table (budget, adaptor, mean F1, mean accuracy, mean drift hits)
// from an adaptation report.
void write_adaptation_csv(const nlohmann::json& adaptation_report, const std::string& path);

// mix of two seeds for deriving per-cell substreams
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace dream
