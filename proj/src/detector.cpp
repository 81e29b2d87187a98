#include "dream/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace dream {

using nlohmann::json;

void validate_config(const DetectorConfig& cfg) {
    const bool nonneg = cfg.lambda_rec >= 0 && cfg.lambda_sep >= 0 && cfg.lambda_pre >= 0 &&
                        cfg.lambda_rel >= 0;
    if (!nonneg) throw InvalidInput("detector config: loss weights must be non-negative");
    if (cfg.lambda_rec + cfg.lambda_sep + cfg.lambda_pre + cfg.lambda_rel <= 0.0)
        throw InvalidInput("detector config: at least one loss weight must be positive");
    if (!(cfg.margin > 0)) throw InvalidInput("detector config: margin must be positive");
    if (cfg.explicit_dim < 0 || cfg.implicit_dim < 0 || cfg.explicit_dim + cfg.implicit_dim < 1)
        throw InvalidInput("detector config: latent widths invalid");
    if (cfg.hidden < 1) throw InvalidInput("detector config: hidden width must be positive");
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw InvalidInput("detector config: epochs and batch size must be positive");
    if (cfg.pair_cap < 1) throw InvalidInput("detector config: pair cap must be positive");
    if (!(cfg.learning_rate > 0)) throw InvalidInput("detector config: learning rate must be positive");
}

Mat ConceptAutoencoder::concept_probabilities(const Mat& Z) const {
    if (Z.cols() != latent_dim()) throw InvalidInput("concept_probabilities: latent width mismatch");
    if (explicit_dim == 0) return Mat(Z.rows(), 0);
    return forward(concept_head, Z.leftCols(explicit_dim));
}

ConceptAutoencoder make_autoencoder(int feature_dim, const DetectorConfig& cfg) {
    validate_config(cfg);
    if (feature_dim < 1) throw InvalidInput("make_autoencoder: feature dim must be positive");
    ConceptAutoencoder det;
    det.explicit_dim = cfg.explicit_dim;
    det.config = cfg;
    const int latent = cfg.explicit_dim + cfg.implicit_dim;
    det.encoder = make_dense_net({feature_dim, cfg.hidden, latent},
                                 {Activation::relu, Activation::identity}, cfg.seed ^ 0xE11Cull);
    det.decoder = make_dense_net({latent, cfg.hidden, feature_dim},
                                 {Activation::relu, Activation::sigmoid}, cfg.seed ^ 0xDECull);
    if (cfg.explicit_dim > 0) {
        Layer head;
        head.weights = Mat::Identity(cfg.explicit_dim, cfg.explicit_dim);
        head.bias = Vec::Zero(cfg.explicit_dim);
        head.activation = Activation::sigmoid;
        det.concept_head.layers.push_back(std::move(head));
        det.concept_head.seed = cfg.seed;
    }
    return det;
}

// ---- loss terms ------------------------------------------------------------

double loss_rec(const Mat& X, const Mat& Xhat, Mat* dxhat) {
    if (X.rows() != Xhat.rows() || X.cols() != Xhat.cols())
        throw InvalidInput("loss_rec: shape mismatch");
    if (X.rows() == 0) throw InvalidInput("loss_rec: empty batch");
    const double n = static_cast<double>(X.rows());
    if (dxhat) *dxhat = 2.0 * (Xhat - X) / n;
    return (X - Xhat).squaredNorm() / n;
}

PairList all_pairs(int n) {
    PairList pairs;
    pairs.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    return pairs;
}

PairList sample_pairs(int n, int cap, std::mt19937_64& rng) {
    if (n < 2) return {};
    if (cap < 1) throw InvalidInput("sample_pairs: cap must be positive");
    const long long total = static_cast<long long>(n) * (n - 1) / 2;
    if (total <= cap) return all_pairs(n);
    std::set<std::pair<int, int>> chosen;
    std::uniform_int_distribution<int> pick(0, n - 1);
    while (static_cast<int>(chosen.size()) < cap) {
        int i = pick(rng), j = pick(rng);
        if (i == j) continue;
        if (i > j) std::swap(i, j);
        chosen.emplace(i, j);
    }
    return {chosen.begin(), chosen.end()};
}

double loss_sep(const Mat& Z, const std::vector<int>& labels, double margin,
                const PairList& pairs, Mat* dz) {
    if (static_cast<Eigen::Index>(labels.size()) != Z.rows())
        throw InvalidInput("loss_sep: one label per latent row required");
    if (Z.rows() < 2 || pairs.empty())
        throw DegenerateTask("loss_sep: need at least one pair of samples");
    if (!Z.allFinite()) throw InvalidInput("loss_sep: non-finite latent");
    if (dz) *dz = Mat::Zero(Z.rows(), Z.cols());

    const double scale = 1.0 / static_cast<double>(pairs.size());
    double total = 0.0;
    for (const auto& [i, j] : pairs) {
        if (i < 0 || j < 0 || i >= Z.rows() || j >= Z.rows() || i == j)
            throw InvalidInput("loss_sep: pair index out of range");
        const RowVec diff = Z.row(i) - Z.row(j);
        const double d = diff.norm();
        if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
            total += d * d;
            if (dz) {
                dz->row(i) += scale * 2.0 * diff;
                dz->row(j) -= scale * 2.0 * diff;
            }
        } else {
            const double hinge = margin - d;
            if (hinge > 0.0) {
                total += hinge * hinge;
                // d(hinge^2)/dz_i = -2*hinge * (z_i - z_j)/d; flat at d = 0
                if (dz && d > kLogFloor) {
                    dz->row(i) -= scale * 2.0 * hinge / d * diff;
                    dz->row(j) += scale * 2.0 * hinge / d * diff;
                }
            }
        }
    }
    return total * scale;
}

double loss_sep(const Mat& Z, const std::vector<int>& labels, double margin) {
    return loss_sep(Z, labels, margin, all_pairs(static_cast<int>(Z.rows())), nullptr);
}

double loss_pre(const Mat& probs, const IntMat& labels, const IntMat& mask, Mat* dprobs) {
    if (labels.rows() != probs.rows() || labels.cols() != probs.cols() ||
        mask.rows() != probs.rows() || mask.cols() != probs.cols())
        throw InvalidInput("loss_pre: probs, labels, and mask must share shape");
    if (probs.rows() == 0) throw InvalidInput("loss_pre: empty batch");
    const double n = static_cast<double>(probs.rows());
    if (dprobs) *dprobs = Mat::Zero(probs.rows(), probs.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        for (Eigen::Index c = 0; c < probs.cols(); ++c) {
            if (mask(r, c) == 0) continue;
            const double p = probs(r, c);
            if (labels(r, c) == 1) {
                total -= safe_log(p);
                if (dprobs && p >= kLogFloor) (*dprobs)(r, c) -= 1.0 / (p * n);
            } else {
                total -= safe_log(1.0 - p);
                if (dprobs && 1.0 - p >= kLogFloor) (*dprobs)(r, c) += 1.0 / ((1.0 - p) * n);
            }
        }
    }
    return total / n;
}

double loss_rel(const Mat& P, const Mat& Q, Mat* dp, Mat* dq) {
    if (P.rows() != Q.rows() || P.cols() != Q.cols())
        throw InvalidInput("loss_rel: probability tables must share shape");
    if (P.rows() == 0) throw InvalidInput("loss_rel: empty batch");
    const double n = static_cast<double>(P.rows());
    if (dp) dp->resize(P.rows(), P.cols());
    if (dq) *dq = Mat::Zero(Q.rows(), Q.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
        for (Eigen::Index c = 0; c < P.cols(); ++c) {
            const double lq = safe_log(Q(r, c));
            total -= P(r, c) * lq;
            if (dp) (*dp)(r, c) = -lq / n;
            if (dq && Q(r, c) >= kLogFloor) (*dq)(r, c) = -P(r, c) / (Q(r, c) * n);
        }
    }
    return total / n;
}

double loss_rel(const MalwareClassifier& clf, const Mat& X, const Mat& Xhat) {
    if (X.cols() != clf.input_width() || Xhat.cols() != clf.input_width())
        throw InvalidInput("loss_rel: width does not match classifier input");
    return loss_rel(predict_batch(clf, X), predict_batch(clf, Xhat));
}

// ---- composite objective ----------------------------------------------------

JointWeights weights_from(const DetectorConfig& cfg) {
    JointWeights w;
    w.lambda_rec = cfg.lambda_rec;
    w.lambda_sep = cfg.lambda_sep;
    w.lambda_pre = cfg.lambda_pre;
    w.lambda_rel = cfg.lambda_rel;
    w.margin = cfg.margin;
    return w;
}

JointTerms joint_objective(const ConceptAutoencoder& det, const MalwareClassifier* clf,
                           const JointBatch& batch, const JointWeights& w, JointGrads* grads,
                           bool update_classifier) {
    const Eigen::Index n = batch.X.rows();
    if (n == 0) throw InvalidInput("joint_objective: empty batch");
    if (batch.X.cols() != det.feature_dim())
        throw InvalidInput("joint_objective: feature width does not match encoder");
    const bool want_ce = !batch.ce_targets.empty();
    const bool want_rel = w.lambda_rel > 0.0;
    if ((want_ce || want_rel) && clf == nullptr)
        throw InvalidInput("joint_objective: classifier required for CE or reliability terms");
    const bool want_sep = w.lambda_sep > 0.0 && !batch.pairs.empty();
    const bool want_pre = w.lambda_pre > 0.0 && det.explicit_dim > 0;
    if (want_pre && (batch.concept_labels.rows() != n || batch.concept_labels.cols() != det.explicit_dim ||
                     batch.concept_mask.rows() != n || batch.concept_mask.cols() != det.explicit_dim))
        throw InvalidInput("joint_objective: concept annotation shape mismatch");
    if (want_sep && static_cast<Eigen::Index>(batch.families.size()) != n)
        throw InvalidInput("joint_objective: one family per row required for separation term");

    ForwardCache enc_cache = forward_cached(det.encoder, batch.X);
    const Mat& Z = enc_cache.output();
    ForwardCache dec_cache = forward_cached(det.decoder, Z);
    const Mat& Xhat = dec_cache.output();

    JointTerms terms;
    Mat drec, dz_sep, dpe, dp_rel, dq_rel, dp_ce;

    if (w.lambda_rec > 0.0) terms.rec = loss_rec(batch.X, Xhat, grads ? &drec : nullptr);
    if (want_sep)
        terms.sep = loss_sep(Z, batch.families, w.margin, batch.pairs, grads ? &dz_sep : nullptr);

    ForwardCache head_cache;
    if (want_pre) {
        head_cache = forward_cached(det.concept_head, Z.leftCols(det.explicit_dim));
        terms.pre = loss_pre(head_cache.output(), batch.concept_labels, batch.concept_mask,
                             grads ? &dpe : nullptr);
    }

    ForwardCache p_cache, q_cache;
    if (want_ce || want_rel) p_cache = forward_cached(clf->net, batch.X);
    if (want_rel) {
        q_cache = forward_cached(clf->net, Xhat);
        terms.rel = loss_rel(p_cache.output(), q_cache.output(), grads ? &dp_rel : nullptr,
                             grads ? &dq_rel : nullptr);
    }
    if (want_ce) terms.ce = cross_entropy(p_cache.output(), batch.ce_targets, grads ? &dp_ce : nullptr);

    terms.det = w.lambda_rec * terms.rec + w.lambda_sep * terms.sep + w.lambda_pre * terms.pre;
    terms.total = w.ce_weight * terms.ce + w.det_weight * terms.det + w.lambda_rel * terms.rel;

    if (!grads) return terms;

    // Reconstruction-side gradient: the reliability term reaches Xhat through
    // the classifier's second forward pass.
    Mat dxhat = Mat::Zero(n, batch.X.cols());
    if (w.lambda_rec > 0.0) dxhat += (w.det_weight * w.lambda_rec) * drec;
    if (want_rel) {
        NetGrads q_back = backward(clf->net, q_cache, (w.lambda_rel * dq_rel).eval());
        dxhat += q_back.dinput;
        if (update_classifier) {
            if (grads->classifier.dweights.empty()) grads->classifier = zero_grads(clf->net);
            accumulate(grads->classifier, q_back);
        }
    }

    NetGrads dec_back = backward(det.decoder, dec_cache, dxhat);
    grads->decoder = dec_back;
    grads->decoder.dinput.resize(0, 0);

    Mat dz = std::move(dec_back.dinput);
    if (want_sep) dz += (w.det_weight * w.lambda_sep) * dz_sep;
    if (want_pre) {
        NetGrads head_back =
            backward(det.concept_head, head_cache, (w.det_weight * w.lambda_pre) * dpe);
        dz.leftCols(det.explicit_dim) += head_back.dinput;
    }
    grads->encoder = backward(det.encoder, enc_cache, dz);
    grads->encoder.dinput.resize(0, 0);

    if (update_classifier && (want_ce || want_rel)) {
        Mat dp = Mat::Zero(n, p_cache.output().cols());
        if (want_ce) dp += w.ce_weight * dp_ce;
        if (want_rel) dp += w.lambda_rel * dp_rel;
        NetGrads p_back = backward(clf->net, p_cache, dp);
        if (grads->classifier.dweights.empty()) grads->classifier = zero_grads(clf->net);
        accumulate(grads->classifier, p_back);
    }
    return terms;
}

// ---- training ----------------------------------------------------------------

ConceptAutoencoder train_detector(const Dataset& data, const MalwareClassifier* clf,
                                  const DetectorConfig& cfg, DetectorTrainReport* report) {
    validate_config(cfg);
    if (data.size() == 0) throw InvalidInput("train_detector: empty dataset");
    if (cfg.lambda_rel > 0.0) {
        if (clf == nullptr)
            throw InvalidInput("train_detector: reliability weight > 0 needs a classifier");
        if (clf->input_width() != data.feature_dim())
            throw InvalidInput("train_detector: classifier input width mismatch");
        for (int f : data.families_present())
            if (clf->label_index(data.family_names[static_cast<std::size_t>(f)]) < 0)
                throw InvalidInput("train_detector: classifier lacks family " +
                                   data.family_names[static_cast<std::size_t>(f)]);
    }
    if (cfg.lambda_pre > 0.0) {
        if (data.behavior_count() != cfg.explicit_dim)
            throw InvalidInput("train_detector: explicit width " + std::to_string(cfg.explicit_dim) +
                               " must equal behavior vocabulary size " +
                               std::to_string(data.behavior_count()));
        if (data.concept_mask.sum() == 0)
            emit_warning(report ? &report->warnings : nullptr,
                         "train_detector: all concept labels masked out; presence term contributes 0");
    }

    ConceptAutoencoder det = make_autoencoder(data.feature_dim(), cfg);
    AdamState enc_opt = make_adam(det.encoder, cfg.learning_rate);
    AdamState dec_opt = make_adam(det.decoder, cfg.learning_rate);
    const JointWeights w = weights_from(cfg);

    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5u);
    std::mt19937_64 pair_rng(cfg.seed ^ 0xbeefull);
    std::vector<int> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_total = 0.0, epoch_det = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const int bn = static_cast<int>(stop - start);
            JointBatch batch;
            batch.X.resize(bn, data.feature_dim());
            batch.families.resize(static_cast<std::size_t>(bn));
            if (cfg.lambda_pre > 0.0) {
                batch.concept_labels.resize(bn, cfg.explicit_dim);
                batch.concept_mask.resize(bn, cfg.explicit_dim);
            }
            for (int i = 0; i < bn; ++i) {
                const int r = order[start + static_cast<std::size_t>(i)];
                batch.X.row(i) = data.features.row(r);
                batch.families[static_cast<std::size_t>(i)] = data.family[static_cast<std::size_t>(r)];
                if (cfg.lambda_pre > 0.0) {
                    batch.concept_labels.row(i) = data.concept_labels.row(r);
                    batch.concept_mask.row(i) = data.concept_mask.row(r);
                }
            }
            if (cfg.lambda_sep > 0.0) batch.pairs = sample_pairs(bn, cfg.pair_cap, pair_rng);

            JointGrads grads;
            JointTerms terms = joint_objective(det, clf, batch, w, &grads, false);
            adam_step(enc_opt, det.encoder, grads.encoder);
            adam_step(dec_opt, det.decoder, grads.decoder);
            epoch_total += terms.total;
            epoch_det += terms.det;
            ++batches;
        }
        if (report) {
            report->epoch_total.push_back(epoch_total / std::max(1, batches));
            report->epoch_det.push_back(epoch_det / std::max(1, batches));
        }
    }
    return det;
}

// ---- scoring ------------------------------------------------------------------

Vec crd_score_batch(const ConceptAutoencoder& det, const MalwareClassifier& clf, const Mat& X,
                    double lambda_rel) {
    if (X.cols() != clf.input_width() || X.cols() != det.feature_dim())
        throw InvalidInput("crd_score: sample width mismatch");
    const Mat P = predict_batch(clf, X);
    Vec scores(X.rows());
    Mat Q;
    if (lambda_rel > 0.0) Q = predict_batch(clf, det.reconstruct(X));
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        Vec p = P.row(r).transpose();
        double u = -safe_log(p(argmax_lowest(p)));
        if (lambda_rel > 0.0) {
            double rel = 0.0;
            for (Eigen::Index c = 0; c < P.cols(); ++c) rel -= P(r, c) * safe_log(Q(r, c));
            u += lambda_rel * rel;
        }
        scores(r) = u;
    }
    return scores;
}

double crd_score_value(const ConceptAutoencoder& det, const MalwareClassifier& clf,
                       const RowVec& x, double lambda_rel, std::int64_t sample_id) {
    const double u = crd_score_batch(det, clf, x, lambda_rel)(0);
    if (!std::isfinite(u))
        throw NumericalError("crd_score: non-finite score for sample id " +
                             std::to_string(sample_id));
    return u;
}

ClassCentroids class_centroids(const ConceptAutoencoder& det, const Dataset& data) {
    if (data.size() == 0) throw InvalidInput("class_centroids: empty dataset");
    const Mat Z = det.encode(data.features);
    ClassCentroids centroids;
    std::map<std::string, int> counts;
    for (int r = 0; r < data.size(); ++r) {
        const std::string& name = data.family_name(r);
        auto [it, fresh] = centroids.try_emplace(name, Vec::Zero(Z.cols()));
        it->second += Z.row(r).transpose();
        counts[name] += 1;
    }
    for (auto& [name, c] : centroids) c /= static_cast<double>(counts[name]);
    return centroids;
}

// ---- serialization --------------------------------------------------------------

namespace {

constexpr char kDetMagic[8] = {'D', 'D', 'E', 'T', 'V', '0', '0', '1'};

json config_to_json(const DetectorConfig& cfg) {
    return json{{"lambda_rec", cfg.lambda_rec},   {"lambda_sep", cfg.lambda_sep},
                {"lambda_pre", cfg.lambda_pre},   {"lambda_rel", cfg.lambda_rel},
                {"margin", cfg.margin},           {"explicit_dim", cfg.explicit_dim},
                {"implicit_dim", cfg.implicit_dim}, {"hidden", cfg.hidden},
                {"epochs", cfg.epochs},           {"batch_size", cfg.batch_size},
                {"learning_rate", cfg.learning_rate}, {"pair_cap", cfg.pair_cap},
                {"seed", cfg.seed}};
}

DetectorConfig config_from_json(const json& j) {
    DetectorConfig cfg;
    cfg.lambda_rec = j.at("lambda_rec").get<double>();
    cfg.lambda_sep = j.at("lambda_sep").get<double>();
    cfg.lambda_pre = j.at("lambda_pre").get<double>();
    cfg.lambda_rel = j.at("lambda_rel").get<double>();
    cfg.margin = j.at("margin").get<double>();
    cfg.explicit_dim = j.at("explicit_dim").get<int>();
    cfg.implicit_dim = j.at("implicit_dim").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.pair_cap = j.at("pair_cap").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

}  // namespace

void save_detector(const ConceptAutoencoder& det, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(kDetMagic, sizeof(kDetMagic));
    const std::string cfg = config_to_json(det.config).dump();
    const auto len = static_cast<std::uint32_t>(cfg.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    save_net(det.encoder, out);
    save_net(det.decoder, out);
    save_net(det.concept_head, out);
    if (!out) throw IoError("failed writing detector: " + path);
}

ConceptAutoencoder load_detector(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kDetMagic, sizeof(magic)) != 0)
        throw IoError("bad detector file: magic mismatch");
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in) throw IoError("detector file truncated");
    std::string cfg_text(len, '\0');
    in.read(cfg_text.data(), len);
    if (!in) throw IoError("detector file truncated");
    ConceptAutoencoder det;
    try {
        det.config = config_from_json(json::parse(cfg_text));
    } catch (const json::exception& e) {
        throw IoError("detector file: bad config record: " + std::string(e.what()));
    }
    det.explicit_dim = det.config.explicit_dim;
    det.encoder = load_net(in);
    det.decoder = load_net(in);
    det.concept_head = load_net(in);
    if (det.encoder.output_width() != det.config.explicit_dim + det.config.implicit_dim)
        throw IoError("detector file: encoder width does not match config");
    return det;
}

void save_centroids(const ClassCentroids& centroids, const std::string& path) {
    json j = json::object();
    for (const auto& [name, c] : centroids) j[name] = std::vector<double>(c.begin(), c.end());
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing centroids: " + path);
}

ClassCentroids load_centroids(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("centroid file: " + std::string(e.what()));
    }
    ClassCentroids centroids;
    for (auto& [name, arr] : j.items()) {
        const auto v = arr.get<std::vector<double>>();
        centroids[name] = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    return centroids;
}

}  // namespace dream
