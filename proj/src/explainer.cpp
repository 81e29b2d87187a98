#include "dream/explainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace dream {

using nlohmann::json;

Reference select_reference(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                           const Dataset& train, const ClassCentroids& centroids,
                           const RowVec& x_d) {
    const Prediction pred = predict(clf, x_d);
    const std::string family = clf.labels[static_cast<std::size_t>(pred.label)];
    const auto cit = centroids.find(family);
    if (cit == centroids.end())
        throw DegenerateTask("select_reference: no centroid for predicted family " + family);

    int best_row = -1;
    double best_dist = 0.0;
    std::int64_t best_id = 0;
    for (int r = 0; r < train.size(); ++r) {
        if (train.family_name(r) != family) continue;
        const double d = (det.encode(train.features.row(r)).row(0).transpose() - cit->second).norm();
        const std::int64_t id = train.ids[static_cast<std::size_t>(r)];
        if (best_row < 0 || d < best_dist || (d == best_dist && id < best_id)) {
            best_row = r;
            best_dist = d;
            best_id = id;
        }
    }
    if (best_row < 0)
        throw DegenerateTask("select_reference: predicted family " + family +
                             " absent from training data");
    return {family, best_id, train.features.row(best_row)};
}

ExplainContext make_explain_context(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                    const ClassCentroids& centroids, const RowVec& x_d,
                                    const RowVec& x_r, const ExplainerConfig& cfg,
                                    bool concept_space) {
    if (x_d.size() != det.feature_dim() || x_r.size() != det.feature_dim())
        throw InvalidInput("explain: sample width does not match detector");
    ExplainContext ctx;
    ctx.x_d = x_d;
    ctx.x_r = x_r;
    ctx.z_d = det.encode(x_d).row(0);
    ctx.z_r = det.encode(x_r).row(0);
    const Prediction pred = predict(clf, x_d);
    const std::string family = clf.labels[static_cast<std::size_t>(pred.label)];
    const auto cit = centroids.find(family);
    if (cit == centroids.end())
        throw DegenerateTask("explain: no centroid for predicted family " + family);
    ctx.centroid = cit->second;
    ctx.ref_probs = predict_batch(clf, det.reconstruct(x_r)).row(0);
    const int mask_len = concept_space ? det.latent_dim() : det.feature_dim();
    ctx.alpha_s = cfg.alpha_s >= 0.0 ? cfg.alpha_s : 0.05 / static_cast<double>(mask_len);
    return ctx;
}

namespace {

// reg(m) = sum (1-mix)*m + mix*m^2 over the relaxed mask (m is in (0,1), so
// the L1 part is just m).
double sparsity_reg(const RowVec& m, double mix, RowVec* dm) {
    if (dm) *dm = RowVec::Constant(m.size(), 1.0 - mix) + 2.0 * mix * m;
    return ((1.0 - mix) * m.array() + mix * m.array().square()).sum();
}

double pseudo_ce_term(const RowVec& q, RowVec* dq) {
    Vec qv = q.transpose();
    const int label = argmax_lowest(qv);
    if (dq) {
        dq->setZero(q.size());
        if (q(label) >= kLogFloor) (*dq)(label) = -1.0 / q(label);
    }
    return -safe_log(q(label));
}

// CE of predictions q against frozen soft labels p.
double soft_ce_term(const RowVec& p, const RowVec& q, RowVec* dq) {
    if (dq) dq->setZero(q.size());
    double total = 0.0;
    for (Eigen::Index c = 0; c < q.size(); ++c) {
        total -= p(c) * safe_log(q(c));
        if (dq && q(c) >= kLogFloor) (*dq)(c) = -p(c) / q(c);
    }
    return total;
}

double deviation_term(const RowVec& z, const Vec& centroid, RowVec* dz) {
    const RowVec diff = z - centroid.transpose();
    const double d = diff.norm();
    if (dz) {
        if (d > kLogFloor)
            *dz = diff / d;
        else
            dz->setZero(z.size());
    }
    return d;
}

struct AdamVec {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;
    RowVec m, v;

    explicit AdamVec(Eigen::Index n, double lr_) : lr(lr_), m(RowVec::Zero(n)), v(RowVec::Zero(n)) {}

    void step(RowVec& param, const RowVec& grad) {
        if (!grad.allFinite()) throw TrainingDivergence("explainer: non-finite mask gradient");
        ++t;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        param.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    }
};

void validate_explainer_config(const ExplainerConfig& cfg) {
    if (cfg.steps < 1) throw InvalidInput("explainer config: steps must be >= 1");
    if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0))
        throw InvalidInput("explainer config: threshold must lie in (0,1)");
    if (!(cfg.alpha_u >= 0.0)) throw InvalidInput("explainer config: alpha_u must be >= 0");
    if (!(cfg.learning_rate > 0.0)) throw InvalidInput("explainer config: learning rate must be > 0");
    if (!(cfg.elastic_mix >= 0.0 && cfg.elastic_mix <= 1.0))
        throw InvalidInput("explainer config: elastic mix must lie in [0,1]");
}

}  // namespace

double concept_objective(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                         const ExplainContext& ctx, const RowVec& logits,
                         const ExplainerConfig& cfg, RowVec* dlogits) {
    if (logits.size() != det.latent_dim())
        throw InvalidInput("concept_objective: logit width must equal latent width");
    const RowVec m = logits.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    const RowVec z = ctx.z_d.cwiseProduct(RowVec::Ones(m.size()) - m) + ctx.z_r.cwiseProduct(m);

    ForwardCache dec_cache = forward_cached(det.decoder, z);
    ForwardCache clf_cache = forward_cached(clf.net, dec_cache.output());
    const RowVec q = clf_cache.output().row(0);

    RowVec dz_dev, dq_ce, dq_rel, dm_reg;
    const double dev = deviation_term(z, ctx.centroid, dlogits ? &dz_dev : nullptr);
    const double ce = pseudo_ce_term(q, dlogits ? &dq_ce : nullptr);
    const double rel = soft_ce_term(ctx.ref_probs, q, dlogits ? &dq_rel : nullptr);
    const double reg = sparsity_reg(m, cfg.elastic_mix, dlogits ? &dm_reg : nullptr);
    const double value = dev + cfg.alpha_u * (ce + rel) + ctx.alpha_s * reg;

    if (dlogits) {
        const Mat dq = (cfg.alpha_u * (dq_ce + dq_rel)).eval();
        NetGrads clf_back = backward(clf.net, clf_cache, dq);
        NetGrads dec_back = backward(det.decoder, dec_cache, clf_back.dinput);
        const RowVec dz = dec_back.dinput.row(0) + dz_dev;
        const RowVec dm = dz.cwiseProduct(ctx.z_r - ctx.z_d) + ctx.alpha_s * dm_reg;
        *dlogits = dm.cwiseProduct(m.cwiseProduct(RowVec::Ones(m.size()) - m));
    }
    return value;
}

double feature_objective(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                         const ExplainContext& ctx, const RowVec& logits,
                         const ExplainerConfig& cfg, RowVec* dlogits) {
    if (logits.size() != det.feature_dim())
        throw InvalidInput("feature_objective: logit width must equal feature width");
    const RowVec m = logits.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    const RowVec x = ctx.x_d.cwiseProduct(RowVec::Ones(m.size()) - m) + ctx.x_r.cwiseProduct(m);

    ForwardCache enc_cache = forward_cached(det.encoder, x);
    ForwardCache dec_cache = forward_cached(det.decoder, enc_cache.output());
    ForwardCache p_cache = forward_cached(clf.net, x);                  // M(x')
    ForwardCache q_cache = forward_cached(clf.net, dec_cache.output()); // M(f(x'))
    const RowVec p = p_cache.output().row(0);
    const RowVec q = q_cache.output().row(0);

    RowVec dz_dev, dp_ce, dq_rel, dm_reg;
    const double dev = deviation_term(enc_cache.output().row(0), ctx.centroid,
                                      dlogits ? &dz_dev : nullptr);
    const double ce = pseudo_ce_term(p, dlogits ? &dp_ce : nullptr);
    // soft labels p depend on the mask here, so the rel term needs gradients
    // through both arguments
    double rel = 0.0;
    RowVec dp_rel = RowVec::Zero(p.size());
    for (Eigen::Index c = 0; c < q.size(); ++c) {
        const double lq = safe_log(q(c));
        rel -= p(c) * lq;
        dp_rel(c) = -lq;
    }
    if (dlogits) {
        dq_rel.setZero(q.size());
        for (Eigen::Index c = 0; c < q.size(); ++c)
            if (q(c) >= kLogFloor) dq_rel(c) = -p(c) / q(c);
    }
    const double reg = sparsity_reg(m, cfg.elastic_mix, dlogits ? &dm_reg : nullptr);
    const double value = dev + cfg.alpha_u * (ce + rel) + ctx.alpha_s * reg;

    if (dlogits) {
        // prediction-side path: clf on f(x') -> decoder -> encoder -> x'
        NetGrads q_back = backward(clf.net, q_cache, (cfg.alpha_u * dq_rel).eval());
        NetGrads dec_back = backward(det.decoder, dec_cache, q_back.dinput);
        NetGrads enc_back =
            backward(det.encoder, enc_cache, (dec_back.dinput.row(0) + dz_dev).eval());
        // soft-label-side path: clf on x' directly
        NetGrads p_back =
            backward(clf.net, p_cache, (cfg.alpha_u * (dp_ce + dp_rel)).eval());
        const RowVec dx = enc_back.dinput.row(0) + p_back.dinput.row(0);
        const RowVec dm = dx.cwiseProduct(ctx.x_r - ctx.x_d) + ctx.alpha_s * dm_reg;
        *dlogits = dm.cwiseProduct(m.cwiseProduct(RowVec::Ones(m.size()) - m));
    }
    return value;
}

void apply_binary_mask(const ConceptAutoencoder& det, const RowVec& x_d, const RowVec& x_r,
                       const IntVec& mask, const std::string& space, RowVec* perturbed,
                       RowVec* perturbed_latent) {
    if (space == "concept") {
        if (mask.size() != det.latent_dim())
            throw InvalidInput("apply_binary_mask: concept mask must cover the latent space");
        const RowVec z_d = det.encode(x_d).row(0);
        const RowVec z_r = det.encode(x_r).row(0);
        RowVec z(z_d.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = mask(i) ? z_r(i) : z_d(i);
        if (perturbed_latent) *perturbed_latent = z;
        if (perturbed) *perturbed = det.decode(z).row(0);
    } else if (space == "feature") {
        if (mask.size() != det.feature_dim())
            throw InvalidInput("apply_binary_mask: feature mask must cover the feature space");
        RowVec x(x_d.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = mask(i) ? x_r(i) : x_d(i);
        if (perturbed) *perturbed = x;
        if (perturbed_latent) *perturbed_latent = det.encode(x).row(0);
    } else {
        throw InvalidInput("apply_binary_mask: unknown space " + space);
    }
}

namespace {

ExplanationResult finalize_result(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                  const RowVec& x_d, const RowVec& x_r, const IntVec& mask,
                                  const std::string& space, const std::string& family,
                                  std::int64_t reference_id) {
    ExplanationResult result;
    result.space = space;
    result.reference_family = family;
    result.reference_id = reference_id;
    result.mask = mask;

    RowVec perturbed, z_pert;
    apply_binary_mask(det, x_d, x_r, mask, space, &perturbed, &z_pert);
    const double lambda = det.config.lambda_rel;
    result.pre_score = crd_score_value(det, clf, x_d, lambda);
    result.post_score = crd_score_value(det, clf, perturbed, lambda);
    const RowVec z_d = det.encode(x_d).row(0);
    const RowVec z_r = det.encode(x_r).row(0);
    result.pre_distance = (z_d - z_r).norm();
    result.post_distance = (z_pert - z_r).norm();
    return result;
}

ExplanationResult run_mask_optimizer(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                     const ClassCentroids& centroids, const RowVec& x_d,
                                     const RowVec& x_r, const ExplainerConfig& cfg,
                                     std::int64_t reference_id, bool concept_space) {
    validate_explainer_config(cfg);
    const ExplainContext ctx =
        make_explain_context(det, clf, centroids, x_d, x_r, cfg, concept_space);
    const int len = concept_space ? det.latent_dim() : det.feature_dim();

    RowVec logits = RowVec::Constant(len, -2.0);  // start mostly off
    AdamVec opt(len, cfg.learning_rate);
    for (int step = 0; step < cfg.steps; ++step) {
        RowVec grad;
        const double value = concept_space
                                 ? concept_objective(det, clf, ctx, logits, cfg, &grad)
                                 : feature_objective(det, clf, ctx, logits, cfg, &grad);
        if (!std::isfinite(value))
            throw TrainingDivergence("explainer: non-finite objective at step " +
                                     std::to_string(step));
        opt.step(logits, grad);
    }

    IntVec mask(len);
    for (int i = 0; i < len; ++i)
        mask(i) = 1.0 / (1.0 + std::exp(-logits(i))) >= cfg.threshold ? 1 : 0;

    const Prediction pred = predict(clf, x_d);
    return finalize_result(det, clf, x_d, x_r, mask, concept_space ? "concept" : "feature",
                           clf.labels[static_cast<std::size_t>(pred.label)], reference_id);
}

}  // namespace

ExplanationResult explain_concept(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                  const ClassCentroids& centroids, const RowVec& x_d,
                                  const RowVec& x_r, const ExplainerConfig& cfg,
                                  std::int64_t reference_id) {
    return run_mask_optimizer(det, clf, centroids, x_d, x_r, cfg, reference_id, true);
}

ExplanationResult explain_feature(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                  const ClassCentroids& centroids, const RowVec& x_d,
                                  const RowVec& x_r, const ExplainerConfig& cfg,
                                  std::int64_t reference_id) {
    return run_mask_optimizer(det, clf, centroids, x_d, x_r, cfg, reference_id, false);
}

ExplanationResult random_explainer(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                                   const ClassCentroids& centroids, const RowVec& x_d,
                                   const RowVec& x_r, const std::string& space, int size,
                                   std::uint64_t seed, std::int64_t reference_id) {
    const int len = space == "concept" ? det.latent_dim() : det.feature_dim();
    if (size < 0 || size > len)
        throw InvalidInput("random_explainer: mask size " + std::to_string(size) +
                           " outside [0, " + std::to_string(len) + "]");
    std::vector<int> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    IntVec mask = IntVec::Zero(len);
    for (int i = 0; i < size; ++i) mask(idx[static_cast<std::size_t>(i)]) = 1;

    const Prediction pred = predict(clf, x_d);
    const std::string family = clf.labels[static_cast<std::size_t>(pred.label)];
    if (!centroids.count(family))
        throw DegenerateTask("random_explainer: no centroid for predicted family " + family);
    return finalize_result(det, clf, x_d, x_r, mask, space, family, reference_id);
}

double metric_cbp(const DriftDetector& detector, const Dataset& train, const std::string& family,
                  const RowVec& perturbed) {
    const double u = detector.score(perturbed).value;
    int total = 0, at_least = 0;
    for (int r = 0; r < train.size(); ++r) {
        if (train.family_name(r) != family) continue;
        ++total;
        if (detector.score(train.features.row(r)).value >= u) ++at_least;
    }
    if (total == 0) throw InvalidInput("metric_cbp: family " + family + " has no training rows");
    return static_cast<double>(at_least) / static_cast<double>(total);
}

double metric_drr(const ConceptAutoencoder& det, const RowVec& x_d, const RowVec& x_r,
                  const RowVec& perturbed_latent) {
    const RowVec z_d = det.encode(x_d).row(0);
    const RowVec z_r = det.encode(x_r).row(0);
    const double d0 = (z_d - z_r).norm();
    if (d0 <= 0.0)
        throw DegenerateTask("metric_drr: drift sample coincides with reference in latent space");
    const double d1 = (perturbed_latent - z_r).norm();
    return (d0 - d1) / d0;
}

json explanation_to_json(const ExplanationResult& result,
                         const std::vector<std::string>& behavior_names) {
    json j;
    j["space"] = result.space;
    j["reference_family"] = result.reference_family;
    j["reference_id"] = result.reference_id;
    std::vector<int> indices;
    for (int i = 0; i < result.mask.size(); ++i)
        if (result.mask(i)) indices.push_back(i);
    j["mask_indices"] = indices;
    j["mask_length"] = result.mask.size();
    if (result.space == "concept") {
        std::vector<std::string> named;
        for (int i : indices) {
            if (i < static_cast<int>(behavior_names.size()))
                named.push_back(behavior_names[static_cast<std::size_t>(i)]);
            else
                named.push_back("implicit_" + std::to_string(i - static_cast<int>(behavior_names.size())));
        }
        j["concepts"] = named;
    }
    j["pre_score"] = result.pre_score;
    j["post_score"] = result.post_score;
    j["pre_distance"] = result.pre_distance;
    j["post_distance"] = result.post_distance;
    return j;
}

}  // namespace dream
