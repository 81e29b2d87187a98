#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dream/dataset.hpp"
#include "dream/nn.hpp"

namespace dream {

struct ClassifierConfig {
    std::vector<int> hidden = {100, 30};
    int epochs = 50;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
};

// Dense softmax family classifier. `labels` fixes the output index of each
// family name; a frozen instance is immutable and safe to score concurrently.
struct MalwareClassifier {
    DenseNet net;
    std::vector<std::string> labels;

    int input_width() const { return net.input_width(); }
    int class_count() const { return static_cast<int>(labels.size()); }
    int label_index(const std::string& name) const;  // -1 when absent
};

struct Prediction {
    Vec probabilities;
    int label;  // argmax, ties to the lowest index
};

struct ClassifierTrainReport {
    std::vector<double> epoch_ce;
    double train_accuracy = 0.0;
};

// Trains on all rows of `data`; the label set is the ordered list of family
// names present. Deterministic given config.seed.
MalwareClassifier train_classifier(const Dataset& data, const ClassifierConfig& cfg,
                                   ClassifierTrainReport* report = nullptr);

Mat predict_batch(const MalwareClassifier& clf, const Mat& X);
Prediction predict(const MalwareClassifier& clf, const RowVec& x);

int argmax_lowest(const Vec& probabilities);

// Copies the classifier, widening the softmax layer for `new_labels`. Hidden
// parameters and existing output columns are preserved bit-exactly; the new
// columns draw from a fresh stream under `seed`.
MalwareClassifier expand_output_layer(const MalwareClassifier& clf,
                                      const std::vector<std::string>& new_labels,
                                      std::uint64_t seed);

// Targets for cross-entropy training: position of each row's family in the
// classifier label list. Throws when a family is missing from the label set.
std::vector<int> label_targets(const MalwareClassifier& clf, const Dataset& data);

void save_classifier(const MalwareClassifier& clf, std::ostream& out);
MalwareClassifier load_classifier(std::istream& in);
void save_classifier(const MalwareClassifier& clf, const std::string& path);
MalwareClassifier load_classifier(const std::string& path);

}  // namespace dream
