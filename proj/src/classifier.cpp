#include "dream/classifier.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace dream {

int MalwareClassifier::label_index(const std::string& name) const {
    auto it = std::find(labels.begin(), labels.end(), name);
    return it == labels.end() ? -1 : static_cast<int>(it - labels.begin());
}

int argmax_lowest(const Vec& probabilities) {
    int best = 0;
    for (int i = 1; i < probabilities.size(); ++i)
        if (probabilities(i) > probabilities(best)) best = i;
    return best;
}

std::vector<int> label_targets(const MalwareClassifier& clf, const Dataset& data) {
    std::vector<int> targets;
    targets.reserve(static_cast<std::size_t>(data.size()));
    for (int r = 0; r < data.size(); ++r) {
        const int idx = clf.label_index(data.family_name(r));
        if (idx < 0)
            throw InvalidInput("label_targets: family not in classifier label set: " +
                               data.family_name(r));
        targets.push_back(idx);
    }
    return targets;
}

MalwareClassifier train_classifier(const Dataset& data, const ClassifierConfig& cfg,
                                   ClassifierTrainReport* report) {
    if (data.size() == 0) throw InvalidInput("train_classifier: empty dataset");
    if (cfg.epochs <= 0 || cfg.batch_size <= 0)
        throw InvalidInput("train_classifier: epochs and batch size must be positive");

    MalwareClassifier clf;
    for (int f : data.families_present())
        clf.labels.push_back(data.family_names[static_cast<std::size_t>(f)]);
    if (clf.labels.size() < 2)
        throw DegenerateTask("train_classifier: need at least two families, got " +
                             std::to_string(clf.labels.size()));

    std::vector<int> widths = {data.feature_dim()};
    std::vector<Activation> acts;
    for (int h : cfg.hidden) {
        widths.push_back(h);
        acts.push_back(Activation::relu);
    }
    widths.push_back(clf.class_count());
    acts.push_back(Activation::softmax);
    clf.net = make_dense_net(widths, acts, cfg.seed);

    const auto targets = label_targets(clf, data);
    AdamState opt = make_adam(clf.net, cfg.learning_rate);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<int> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_ce = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<int> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                  order.begin() + static_cast<std::ptrdiff_t>(stop));
            Mat X(static_cast<Eigen::Index>(rows.size()), data.feature_dim());
            std::vector<int> y(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                X.row(static_cast<Eigen::Index>(i)) = data.features.row(rows[i]);
                y[i] = targets[static_cast<std::size_t>(rows[i])];
            }
            ForwardCache cache = forward_cached(clf.net, X);
            Mat dprobs;
            epoch_ce += cross_entropy(cache.output(), y, &dprobs);
            ++batches;
            NetGrads grads = backward(clf.net, cache, dprobs);
            adam_step(opt, clf.net, grads);
        }
        if (report) report->epoch_ce.push_back(epoch_ce / std::max(1, batches));
    }

    if (report) {
        Mat probs = predict_batch(clf, data.features);
        int hits = 0;
        for (int r = 0; r < data.size(); ++r) {
            Vec p = probs.row(r).transpose();
            if (argmax_lowest(p) == targets[static_cast<std::size_t>(r)]) ++hits;
        }
        report->train_accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
    }
    return clf;
}

Mat predict_batch(const MalwareClassifier& clf, const Mat& X) { return forward(clf.net, X); }

Prediction predict(const MalwareClassifier& clf, const RowVec& x) {
    if (x.size() != clf.input_width())
        throw InvalidInput("predict: sample width " + std::to_string(x.size()) +
                           " does not match classifier input " + std::to_string(clf.input_width()));
    Prediction p;
    p.probabilities = forward(clf.net, x).row(0).transpose();
    p.label = argmax_lowest(p.probabilities);
    return p;
}

MalwareClassifier expand_output_layer(const MalwareClassifier& clf,
                                      const std::vector<std::string>& new_labels,
                                      std::uint64_t seed) {
    std::set<std::string> existing(clf.labels.begin(), clf.labels.end());
    std::set<std::string> fresh;
    for (const auto& l : new_labels) {
        if (existing.count(l)) throw InvalidInput("expand_output_layer: label already present: " + l);
        if (!fresh.insert(l).second)
            throw InvalidInput("expand_output_layer: duplicate new label: " + l);
    }
    MalwareClassifier out = clf;
    if (new_labels.empty()) return out;

    Layer& head = out.net.layers.back();
    const int in = head.input_width();
    const int old_width = head.output_width();
    const int width = old_width + static_cast<int>(new_labels.size());
    Mat w(in, width);
    w.leftCols(old_width) = head.weights;
    Vec b = Vec::Zero(width);
    b.head(old_width) = head.bias;

    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int r = 0; r < in; ++r)
        for (int c = old_width; c < width; ++c) w(r, c) = dist(rng);

    head.weights = std::move(w);
    head.bias = std::move(b);
    out.net.seed = seed;
    out.labels.insert(out.labels.end(), new_labels.begin(), new_labels.end());
    return out;
}

namespace {
constexpr char kClfMagic[8] = {'D', 'C', 'L', 'F', 'V', '0', '0', '1'};
}

void save_classifier(const MalwareClassifier& clf, std::ostream& out) {
    out.write(kClfMagic, sizeof(kClfMagic));
    const auto count = static_cast<std::uint32_t>(clf.labels.size());
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& label : clf.labels) {
        const auto len = static_cast<std::uint32_t>(label.size());
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(label.data(), static_cast<std::streamsize>(label.size()));
    }
    save_net(clf.net, out);
    if (!out) throw IoError("failed writing classifier");
}

MalwareClassifier load_classifier(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kClfMagic, sizeof(magic)) != 0)
        throw IoError("bad classifier file: magic mismatch");
    MalwareClassifier clf;
    std::uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in) throw IoError("classifier file truncated");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!in) throw IoError("classifier file truncated");
        std::string label(len, '\0');
        in.read(label.data(), len);
        if (!in) throw IoError("classifier file truncated");
        clf.labels.push_back(std::move(label));
    }
    clf.net = load_net(in);
    if (clf.net.output_width() != static_cast<int>(clf.labels.size()))
        throw IoError("classifier file: label count does not match net head");
    return clf;
}

void save_classifier(const MalwareClassifier& clf, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    save_classifier(clf, out);
}

MalwareClassifier load_classifier(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    return load_classifier(in);
}

}  // namespace dream
