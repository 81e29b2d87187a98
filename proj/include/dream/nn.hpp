#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dream/errors.hpp"

namespace dream {

using Mat = Eigen::MatrixXd;     // rows are samples
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using IntVec = Eigen::VectorXi;
using IntMat = Eigen::MatrixXi;

// Probabilities are floored at this value before any log() so that losses and
// their gradients stay finite; below the floor the gradient contribution is
// dropped (subgradient 0).
inline constexpr double kLogFloor = 1e-12;

inline double safe_log(double p) { return std::log(p < kLogFloor ? kLogFloor : p); }

enum class Activation : std::uint32_t {
    identity = 0,
    relu = 1,
    sigmoid = 2,
    softmax = 3,
};

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct Layer {
    Mat weights;  // input_width x output_width
    Vec bias;     // output_width
    Activation activation = Activation::identity;

    int input_width() const { return static_cast<int>(weights.rows()); }
    int output_width() const { return static_cast<int>(weights.cols()); }
};

// Plain fully connected net. Weight init is uniform in +-1/sqrt(fan_in) from a
// dedicated mt19937_64 stream, biases start at zero, so a (widths, seed) pair
// pins every parameter bit-exactly.
struct DenseNet {
    std::vector<Layer> layers;
    std::uint64_t seed = 0;

    int input_width() const;
    int output_width() const;
    std::size_t parameter_count() const;
};

DenseNet make_dense_net(const std::vector<int>& widths,
                        const std::vector<Activation>& activations,
                        std::uint64_t seed);

// Everything backward() needs: the batch plus pre/post activation of each layer.
struct ForwardCache {
    Mat input;
    std::vector<Mat> pre;
    std::vector<Mat> post;

    const Mat& output() const { return post.back(); }
};

Mat apply_activation(Activation a, const Mat& pre);

ForwardCache forward_cached(const DenseNet& net, const Mat& batch);
Mat forward(const DenseNet& net, const Mat& batch);

struct NetGrads {
    std::vector<Mat> dweights;
    std::vector<Vec> dbias;
    Mat dinput;
};

NetGrads zero_grads(const DenseNet& net);
void accumulate(NetGrads& into, const NetGrads& grads, double scale = 1.0);

// Reverse-mode pass for dLoss/d(output); softmax rows use the full Jacobian
// d pre_j = p_j * (g_j - sum_k g_k p_k) so any loss can sit on top.
NetGrads backward(const DenseNet& net, const ForwardCache& cache, const Mat& output_grad);

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step_count = 0;
    std::vector<Mat> m_weights, v_weights;
    std::vector<Vec> m_bias, v_bias;
};

AdamState make_adam(const DenseNet& net, double learning_rate);

// One Adam update with bias correction. Throws TrainingDivergence if any
// gradient entry is non-finite.
void adam_step(AdamState& opt, DenseNet& net, const NetGrads& grads);

// Softmax cross entropy against integer targets, averaged over the batch.
// Returns the scalar and fills dprobs (gradient w.r.t. the probability matrix).
double cross_entropy(const Mat& probs, const std::vector<int>& targets, Mat* dprobs = nullptr);

bool all_finite(const Mat& m);

// Binary little-endian format, magic "DNETV001". Matrices are written row-major.
void save_net(const DenseNet& net, std::ostream& out);
DenseNet load_net(std::istream& in);
void save_net(const DenseNet& net, const std::string& path);
DenseNet load_net(const std::string& path);

}  // namespace dream
