#include "dream/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; big-endian hosts are not supported");

namespace dream {

std::string activation_name(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::softmax: return "softmax";
    }
    throw InvalidInput("unknown activation code");
}

Activation activation_from_name(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "softmax") return Activation::softmax;
    throw InvalidInput("unknown activation name: " + name);
}

int DenseNet::input_width() const {
    if (layers.empty()) throw StateError("net has no layers");
    return layers.front().input_width();
}

int DenseNet::output_width() const {
    if (layers.empty()) throw StateError("net has no layers");
    return layers.back().output_width();
}

std::size_t DenseNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.bias.size();
    return n;
}

DenseNet make_dense_net(const std::vector<int>& widths,
                        const std::vector<Activation>& activations,
                        std::uint64_t seed) {
    if (widths.size() < 2)
        throw InvalidInput("make_dense_net: need at least input and output widths");
    if (activations.size() != widths.size() - 1)
        throw InvalidInput("make_dense_net: one activation per layer required");
    for (int w : widths)
        if (w <= 0) throw InvalidInput("make_dense_net: widths must be positive");

    DenseNet net;
    net.seed = seed;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        Layer layer;
        const int in = widths[i];
        const int out = widths[i + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        layer.weights.resize(in, out);
        for (int r = 0; r < in; ++r)
            for (int c = 0; c < out; ++c) layer.weights(r, c) = dist(rng);
        layer.bias = Vec::Zero(out);
        layer.activation = activations[i];
        net.layers.push_back(std::move(layer));
    }
    return net;
}

Mat apply_activation(Activation a, const Mat& pre) {
    switch (a) {
        case Activation::identity:
            return pre;
        case Activation::relu:
            return pre.cwiseMax(0.0);
        case Activation::sigmoid:
            return pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        case Activation::softmax: {
            Mat out(pre.rows(), pre.cols());
            for (Eigen::Index r = 0; r < pre.rows(); ++r) {
                const double m = pre.row(r).maxCoeff();
                RowVec e = (pre.row(r).array() - m).exp();
                out.row(r) = e / e.sum();
            }
            return out;
        }
    }
    throw InvalidInput("unknown activation code");
}

ForwardCache forward_cached(const DenseNet& net, const Mat& batch) {
    if (net.layers.empty()) throw StateError("forward: net has no layers");
    if (batch.cols() != net.input_width())
        throw InvalidInput("forward: batch width " + std::to_string(batch.cols()) +
                           " does not match net input width " + std::to_string(net.input_width()));
    ForwardCache cache;
    cache.input = batch;
    const Mat* x = &cache.input;
    for (const auto& layer : net.layers) {
        Mat pre = (*x * layer.weights).rowwise() + layer.bias.transpose();
        cache.post.push_back(apply_activation(layer.activation, pre));
        cache.pre.push_back(std::move(pre));
        x = &cache.post.back();
    }
    return cache;
}

Mat forward(const DenseNet& net, const Mat& batch) {
    return forward_cached(net, batch).post.back();
}

NetGrads zero_grads(const DenseNet& net) {
    NetGrads g;
    for (const auto& layer : net.layers) {
        g.dweights.push_back(Mat::Zero(layer.weights.rows(), layer.weights.cols()));
        g.dbias.push_back(Vec::Zero(layer.bias.size()));
    }
    return g;
}

void accumulate(NetGrads& into, const NetGrads& grads, double scale) {
    if (into.dweights.size() != grads.dweights.size())
        throw InvalidInput("accumulate: gradient layer counts differ");
    for (std::size_t i = 0; i < grads.dweights.size(); ++i) {
        into.dweights[i] += scale * grads.dweights[i];
        into.dbias[i] += scale * grads.dbias[i];
    }
}

static Mat activation_backward(Activation a, const Mat& pre, const Mat& post, const Mat& gpost) {
    switch (a) {
        case Activation::identity:
            return gpost;
        case Activation::relu:
            return (pre.array() > 0.0).select(gpost, 0.0);
        case Activation::sigmoid:
            return gpost.array() * post.array() * (1.0 - post.array());
        case Activation::softmax: {
            Mat gpre(gpost.rows(), gpost.cols());
            for (Eigen::Index r = 0; r < gpost.rows(); ++r) {
                const double dot = gpost.row(r).dot(post.row(r));
                gpre.row(r) = post.row(r).array() * (gpost.row(r).array() - dot);
            }
            return gpre;
        }
    }
    throw InvalidInput("unknown activation code");
}

NetGrads backward(const DenseNet& net, const ForwardCache& cache, const Mat& output_grad) {
    const std::size_t n = net.layers.size();
    if (cache.pre.size() != n || cache.post.size() != n)
        throw StateError("backward: cache does not match net layout");
    if (output_grad.rows() != cache.input.rows() || output_grad.cols() != net.output_width())
        throw InvalidInput("backward: output gradient shape mismatch");

    NetGrads grads;
    grads.dweights.resize(n);
    grads.dbias.resize(n);
    Mat gpost = output_grad;
    for (std::size_t i = n; i-- > 0;) {
        const Layer& layer = net.layers[i];
        if (cache.pre[i].cols() != layer.output_width())
            throw StateError("backward: cache does not match net layout");
        Mat gpre = activation_backward(layer.activation, cache.pre[i], cache.post[i], gpost);
        const Mat& input = (i == 0) ? cache.input : cache.post[i - 1];
        grads.dweights[i] = input.transpose() * gpre;
        grads.dbias[i] = gpre.colwise().sum().transpose();
        gpost = gpre * layer.weights.transpose();
    }
    grads.dinput = std::move(gpost);
    return grads;
}

AdamState make_adam(const DenseNet& net, double learning_rate) {
    if (!(learning_rate >= 0.0))
        throw InvalidInput("make_adam: learning rate must be non-negative");
    AdamState s;
    s.learning_rate = learning_rate;
    for (const auto& layer : net.layers) {
        s.m_weights.push_back(Mat::Zero(layer.weights.rows(), layer.weights.cols()));
        s.v_weights.push_back(Mat::Zero(layer.weights.rows(), layer.weights.cols()));
        s.m_bias.push_back(Vec::Zero(layer.bias.size()));
        s.v_bias.push_back(Vec::Zero(layer.bias.size()));
    }
    return s;
}

void adam_step(AdamState& opt, DenseNet& net, const NetGrads& grads) {
    if (opt.m_weights.size() != net.layers.size())
        throw StateError("adam_step: optimizer state does not match net");
    if (grads.dweights.size() != net.layers.size())
        throw InvalidInput("adam_step: gradients do not match net");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (!all_finite(grads.dweights[i]) || !grads.dbias[i].allFinite())
            throw TrainingDivergence("non-finite gradient in layer " + std::to_string(i));
    }

    opt.step_count += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        auto update = [&](auto& m, auto& v, auto& param, const auto& g) {
            m = opt.beta1 * m + (1.0 - opt.beta1) * g;
            v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
            param.array() -=
                opt.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt.epsilon);
        };
        update(opt.m_weights[i], opt.v_weights[i], net.layers[i].weights, grads.dweights[i]);
        update(opt.m_bias[i], opt.v_bias[i], net.layers[i].bias, grads.dbias[i]);
    }
}

double cross_entropy(const Mat& probs, const std::vector<int>& targets, Mat* dprobs) {
    const Eigen::Index n = probs.rows();
    if (static_cast<Eigen::Index>(targets.size()) != n)
        throw InvalidInput("cross_entropy: one target per row required");
    if (n == 0) throw InvalidInput("cross_entropy: empty batch");
    if (dprobs) *dprobs = Mat::Zero(probs.rows(), probs.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= probs.cols())
            throw InvalidInput("cross_entropy: target out of range");
        const double p = probs(r, t);
        total -= safe_log(p);
        if (dprobs && p >= kLogFloor) (*dprobs)(r, t) = -1.0 / (p * static_cast<double>(n));
    }
    return total / static_cast<double>(n);
}

bool all_finite(const Mat& m) { return m.allFinite(); }

// ---- serialization -------------------------------------------------------

namespace {

constexpr char kNetMagic[8] = {'D', 'N', 'E', 'T', 'V', '0', '0', '1'};

template <typename T>
void write_raw(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError("model file truncated");
    return value;
}

void write_matrix(std::ostream& out, const Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) write_raw<double>(out, m(r, c));
}

void read_matrix(std::istream& in, Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = read_raw<double>(in);
}

}  // namespace

void save_net(const DenseNet& net, std::ostream& out) {
    out.write(kNetMagic, sizeof(kNetMagic));
    write_raw<std::uint64_t>(out, net.seed);
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& layer : net.layers) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(layer.input_width()));
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(layer.output_width()));
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(layer.activation));
        write_matrix(out, layer.weights);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) write_raw<double>(out, layer.bias(i));
    }
    if (!out) throw IoError("failed writing net");
}

DenseNet load_net(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kNetMagic, sizeof(magic)) != 0)
        throw IoError("bad net file: magic mismatch");
    DenseNet net;
    net.seed = read_raw<std::uint64_t>(in);
    const auto n_layers = read_raw<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        Layer layer;
        const auto in_w = read_raw<std::uint32_t>(in);
        const auto out_w = read_raw<std::uint32_t>(in);
        const auto act = read_raw<std::uint32_t>(in);
        if (act > static_cast<std::uint32_t>(Activation::softmax))
            throw IoError("bad net file: unknown activation code");
        if (in_w == 0 || out_w == 0) throw IoError("bad net file: zero layer width");
        layer.activation = static_cast<Activation>(act);
        layer.weights.resize(in_w, out_w);
        read_matrix(in, layer.weights);
        layer.bias.resize(out_w);
        for (std::uint32_t b = 0; b < out_w; ++b) layer.bias(b) = read_raw<double>(in);
        net.layers.push_back(std::move(layer));
    }
    return net;
}

void save_net(const DenseNet& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    save_net(net, out);
}

DenseNet load_net(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    return load_net(in);
}

}  // namespace dream
