// Independent reference implementations used by the unit and acceptance
// suites: central finite differences over network parameters, quadratic-time
// AUC, exhaustive nearest-neighbor scoring, and direct metric recounts. These
// are deliberately written the slow, obvious way.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dream/baselines.hpp"
#include "dream/classifier.hpp"
#include "dream/dataset.hpp"
#include "dream/detector.hpp"
#include "dream/nn.hpp"

namespace oracles {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// Central difference d f / d *slot with the slot restored afterwards.
inline double fd_slope(double* slot, const std::function<double()>& f, double h = 1e-6) {
    const double orig = *slot;
    *slot = orig + h;
    const double up = f();
    *slot = orig - h;
    const double down = f();
    *slot = orig;
    return (up - down) / (2.0 * h);
}

// Worst relative error between analytic net gradients and finite differences
// of `loss` over every weight and bias of `net`. `loss` must recompute the
// objective from the net's current parameters; `grads` must correspond to the
// unperturbed point.
inline double fd_check_net(dream::DenseNet& net, const dream::NetGrads& grads,
                           const std::function<double()>& loss, double h = 1e-6) {
    double worst = 0.0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        dream::Layer& layer = net.layers[l];
        for (int r = 0; r < layer.weights.rows(); ++r)
            for (int c = 0; c < layer.weights.cols(); ++c) {
                const double fd = fd_slope(&layer.weights(r, c), loss, h);
                worst = std::max(worst, rel_err(fd, grads.dweights[l](r, c)));
            }
        for (int c = 0; c < layer.bias.size(); ++c) {
            const double fd = fd_slope(&layer.bias(c), loss, h);
            worst = std::max(worst, rel_err(fd, grads.dbias[l](c)));
        }
    }
    return worst;
}

// Worst relative error for the gradient of `loss` with respect to a row
// vector argument (mask logits, single-sample inputs).
inline double fd_check_vec(dream::RowVec& x, const dream::RowVec& grad,
                           const std::function<double()>& loss, double h = 1e-6) {
    double worst = 0.0;
    for (int i = 0; i < x.size(); ++i) {
        const double fd = fd_slope(&x(i), loss, h);
        worst = std::max(worst, rel_err(fd, grad(i)));
    }
    return worst;
}

// Pairwise AUC: share of (positive, negative) pairs ranked correctly, ties
// counted half.
inline double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
    double good = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                good += 1.0;
            else if (scores[i] == scores[j])
                good += 0.5;
        }
    }
    return good / static_cast<double>(pairs);
}

// Exhaustive neighborhood pseudo cross-entropy: full sort by latent distance
// (ties by row), then the weighted average over the sample and its k
// neighbors.
inline double nce_exhaustive(const dream::ConceptAutoencoder& det,
                             const dream::MalwareClassifier& clf, const dream::RowVec& x,
                             const dream::Dataset& train, int k, double beta) {
    const dream::RowVec z = det.encode(x).row(0);
    const dream::Mat train_z = det.encode(train.features);
    std::vector<std::pair<double, int>> by_dist;
    for (int r = 0; r < train.size(); ++r)
        by_dist.emplace_back((train_z.row(r) - z).squaredNorm(), r);
    std::sort(by_dist.begin(), by_dist.end());

    auto pseudo_ce = [&](const dream::RowVec& row) {
        const dream::Vec p = dream::predict(clf, row).probabilities;
        return -std::log(std::max(p.maxCoeff(), dream::kLogFloor));
    };
    double total = pseudo_ce(x);
    const int kk = std::min<int>(k, train.size());
    for (int i = 0; i < kk; ++i)
        total += beta * pseudo_ce(train.features.row(by_dist[static_cast<std::size_t>(i)].second));
    return total / (1.0 + beta * kk);
}

// Direct recount of the conformity share behind metric_cbp.
inline double cbp_direct(const dream::DriftDetector& detector, const dream::Dataset& train,
                         const std::string& family, const dream::RowVec& perturbed) {
    const double u = detector.score(perturbed).value;
    int total = 0, at_least = 0;
    for (int r = 0; r < train.size(); ++r) {
        if (train.family_name(r) != family) continue;
        ++total;
        if (detector.score(train.features.row(r)).value >= u) ++at_least;
    }
    return static_cast<double>(at_least) / static_cast<double>(total);
}

// Per-family latent means computed the obvious way.
inline dream::ClassCentroids centroids_direct(const dream::ConceptAutoencoder& det,
                                              const dream::Dataset& data) {
    const dream::Mat Z = det.encode(data.features);
    dream::ClassCentroids out;
    std::map<std::string, int> counts;
    for (int r = 0; r < data.size(); ++r) {
        const std::string& name = data.family_name(r);
        auto [it, fresh] = out.try_emplace(name, dream::Vec::Zero(Z.cols()));
        it->second += Z.row(r).transpose();
        ++counts[name];
    }
    for (auto& [name, sum] : out) sum /= static_cast<double>(counts[name]);
    return out;
}

// Small dense dataset for unit tests: `families` block-structured classes in
// `dim` features with `per_family` rows each, plus concept labels over
// `behaviors` concepts.
inline dream::Dataset tiny_dataset(int families, int per_family, int dim, int behaviors,
                                   std::uint64_t seed) {
    dream::Dataset ds;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int n = families * per_family;
    ds.features = dream::Mat::Zero(n, dim);
    ds.concept_labels = dream::IntMat::Zero(n, behaviors);
    ds.concept_mask = dream::IntMat::Ones(n, behaviors);
    for (int f = 0; f < families; ++f) ds.family_names.push_back("fam" + std::to_string(f));
    for (int b = 0; b < behaviors; ++b) ds.behavior_names.push_back("b" + std::to_string(b));
    int row = 0;
    for (int f = 0; f < families; ++f) {
        for (int s = 0; s < per_family; ++s, ++row) {
            for (int d = 0; d < dim; ++d) {
                const bool on = (d % families) == f;
                const double noise = 0.2 * unit(rng);
                ds.features(row, d) = on ? 1.0 - noise : noise;
            }
            for (int b = 0; b < behaviors; ++b)
                ds.concept_labels(row, b) = ((b % families) == f) ? 1 : 0;
            ds.family.push_back(f);
            ds.timestamps.push_back(s);
            ds.ids.push_back(row);
        }
    }
    return ds;
}

}  // namespace oracles
