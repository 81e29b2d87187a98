#pragma once

#include <cstdint>
#include <vector>

#include "dream/dataset.hpp"

namespace dream {

// Block-structured malware-family generator. Behavior b owns the feature
// block [b*block_size, (b+1)*block_size). A family prototype sets the blocks
// of its behavior set to 1 and everything else to 0; each sample is the
// prototype with independent per-feature flips at rate flip_noise. Concept
// labels are the behavior indicator of the family; mask entries drop to 0 at
// mask_drop_rate. Timestamps increase within each family.
struct SyntheticSpec {
    int feature_dim = 200;
    int family_count = 8;
    int behavior_count = 10;
    int block_size = 12;
    std::vector<std::vector<int>> family_behaviors;  // empty -> default table
    double flip_noise = 0.05;
    int samples_per_family = 150;
    double mask_drop_rate = 0.1;
    std::int64_t id_base = 0;  // ids run id_base, id_base+1, ...
    std::uint64_t seed = 7;
};

// The behavior sets used when SyntheticSpec.family_behaviors is empty. The
// first eight are fixed overlapping sets (every set shares behavior 0 except
// the last, which is disjoint); extra families beyond eight get seeded random
// non-empty subsets.
std::vector<std::vector<int>> default_family_behaviors(int family_count, int behavior_count,
                                                       std::uint64_t seed);

Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace dream
