#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dream/nn.hpp"

namespace dream {

// Per-sample concept annotation: labels in {0,1}, mask 1 where the label is
// known. Both run over the shared behavior vocabulary of the dataset.
struct ConceptLabelSet {
    IntVec labels;
    IntVec mask;
};

// Column-table layout: features as one matrix, everything else as parallel
// vectors indexed by row. Families are interned against family_names.
struct Dataset {
    Mat features;              // n x feature_dim, every value in [0,1]
    std::vector<int> family;   // n entries, index into family_names
    IntMat concept_labels;     // n x behavior_count, {0,1}
    IntMat concept_mask;       // n x behavior_count, {0,1}
    std::vector<std::int64_t> timestamps;
    std::vector<std::int64_t> ids;
    std::vector<std::string> family_names;
    std::vector<std::string> behavior_names;

    int size() const { return static_cast<int>(features.rows()); }
    int feature_dim() const { return static_cast<int>(features.cols()); }
    int behavior_count() const { return static_cast<int>(behavior_names.size()); }

    const std::string& family_name(int row) const;
    ConceptLabelSet concepts(int row) const;

    // Keeps the full name tables so family indices stay stable across subsets.
    Dataset subset(const std::vector<int>& rows) const;

    // Row index for a sample id, or -1.
    int find_id(std::int64_t id) const;

    // Distinct family indices present, ascending.
    std::vector<int> families_present() const;
};

// Throws InvalidInput describing the first violated invariant.
void validate_dataset(const Dataset& ds);

// One JSON object per line. Line 1 is a header carrying the schema tag,
// feature_dim, and the behavior/family name tables; every following line is a
// sample. save/load round-trips a valid dataset exactly.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

Dataset concat(const Dataset& a, const Dataset& b);

}  // namespace dream
