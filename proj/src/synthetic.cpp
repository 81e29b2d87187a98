#include "dream/synthetic.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace dream {

std::vector<std::vector<int>> default_family_behaviors(int family_count, int behavior_count,
                                                       std::uint64_t seed) {
    // Overlapping sets make held-out families ambiguous rather than trivially
    // separable, but no set may contain another: a held-out superset family
    // would carry all the evidence of the nested training family and the
    // classifier would stay confidently wrong on it, which no model-coupled
    // score can detect. Every family keeps at least one behavior each other
    // family lacks; family 7 is an isolated singleton so one hold-out case has
    // no shared behavior with anything in training.
    static const std::vector<std::vector<int>> base = {
        {0, 1, 7, 8}, {0, 2, 6, 8}, {0, 2, 7, 8}, {0, 3, 6, 7},
        {0, 1, 6, 9}, {0, 5, 8},    {0, 3, 9},    {4},
    };
    std::vector<std::vector<int>> sets;
    for (int f = 0; f < family_count && f < static_cast<int>(base.size()); ++f) {
        std::vector<int> s;
        for (int b : base[static_cast<std::size_t>(f)])
            if (b < behavior_count) s.push_back(b);
        if (s.empty()) s.push_back(f % behavior_count);
        sets.push_back(std::move(s));
    }
    std::mt19937_64 rng(seed ^ 0x5e7Full);
    std::bernoulli_distribution coin(0.3);
    while (static_cast<int>(sets.size()) < family_count) {
        std::vector<int> s;
        for (int b = 0; b < behavior_count; ++b)
            if (coin(rng)) s.push_back(b);
        if (s.empty()) s.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(behavior_count)));
        sets.push_back(std::move(s));
    }
    return sets;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.feature_dim <= 0 || spec.family_count <= 0 || spec.behavior_count <= 0 ||
        spec.block_size <= 0 || spec.samples_per_family <= 0)
        throw InvalidInput("generate_synthetic: counts must be positive");
    if (spec.behavior_count * spec.block_size > spec.feature_dim)
        throw InvalidInput("generate_synthetic: behavior blocks do not fit in the feature space");
    if (!(spec.flip_noise >= 0.0 && spec.flip_noise < 0.5))
        throw InvalidInput("generate_synthetic: flip noise must lie in [0, 0.5)");
    if (!(spec.mask_drop_rate >= 0.0 && spec.mask_drop_rate <= 1.0))
        throw InvalidInput("generate_synthetic: mask drop rate must lie in [0, 1]");

    auto behaviors = spec.family_behaviors.empty()
                         ? default_family_behaviors(spec.family_count, spec.behavior_count, spec.seed)
                         : spec.family_behaviors;
    if (static_cast<int>(behaviors.size()) != spec.family_count)
        throw InvalidInput("generate_synthetic: one behavior set per family required");
    for (const auto& s : behaviors) {
        if (s.empty()) throw InvalidInput("generate_synthetic: family behavior set is empty");
        for (int b : s)
            if (b < 0 || b >= spec.behavior_count)
                throw InvalidInput("generate_synthetic: behavior index outside vocabulary");
    }

    Dataset ds;
    for (int f = 0; f < spec.family_count; ++f) ds.family_names.push_back("fam" + std::to_string(f));
    for (int b = 0; b < spec.behavior_count; ++b) ds.behavior_names.push_back("b" + std::to_string(b));

    const int n = spec.family_count * spec.samples_per_family;
    ds.features = Mat::Zero(n, spec.feature_dim);
    ds.concept_labels = IntMat::Zero(n, spec.behavior_count);
    ds.concept_mask = IntMat::Zero(n, spec.behavior_count);

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    int row = 0;
    std::int64_t next_id = spec.id_base;
    for (int f = 0; f < spec.family_count; ++f) {
        RowVec prototype = RowVec::Zero(spec.feature_dim);
        for (int b : behaviors[static_cast<std::size_t>(f)])
            prototype.segment(b * spec.block_size, spec.block_size).setOnes();

        for (int s = 0; s < spec.samples_per_family; ++s, ++row) {
            RowVec x = prototype;
            for (int j = 0; j < spec.feature_dim; ++j)
                if (unit(rng) < spec.flip_noise) x(j) = 1.0 - x(j);
            ds.features.row(row) = x;
            ds.family.push_back(f);
            for (int b : behaviors[static_cast<std::size_t>(f)]) ds.concept_labels(row, b) = 1;
            for (int b = 0; b < spec.behavior_count; ++b)
                ds.concept_mask(row, b) = (unit(rng) < spec.mask_drop_rate) ? 0 : 1;
            ds.timestamps.push_back(s);
            ds.ids.push_back(next_id++);
        }
    }
    validate_dataset(ds);
    return ds;
}

}  // namespace dream
