#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "cardiq/image.hpp"
#include "cardiq/types.hpp"

namespace cardiq::net {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Feature maps are stored as (channels x H*W) matrices, pixel index = y*W + x.

template <class T>
struct Conv2d {
    Mat<T> w;  // out_ch x (in_ch * k * k)
    Vec<T> b;  // out_ch
    int k = 3;
    int in_ch = 0;
    int out_ch = 0;
};

template <class T>
struct InstanceNorm {
    Vec<T> gamma;
    Vec<T> beta;
};

template <class T>
struct Dense {
    Mat<T> w;
    Vec<T> b;
};

template <class T>
struct ConvBlock {
    Conv2d<T> conv1, conv2;
    InstanceNorm<T> norm1, norm2;
};

template <class T>
struct VaeStage {
    Conv2d<T> conv;
    InstanceNorm<T> norm;
};

template <class T>
struct UNetWeights {
    std::vector<ConvBlock<T>> enc;  // level i maps to width * 2^i channels
    ConvBlock<T> bottleneck;
    std::vector<ConvBlock<T>> dec;  // level i consumes concat(up, skip_i)
    Conv2d<T> head;                 // 1x1 to num_classes
};

template <class T>
struct VaeWeights {
    std::vector<VaeStage<T>> enc;  // conv + norm + relu + 2x2 maxpool per stage
    Dense<T> fc_mu, fc_logvar, fc_dec;
    std::vector<VaeStage<T>> dec;  // 2x upsample + conv + norm + relu per stage
    Conv2d<T> head;                // 3x3 to num_classes
};

struct Hyperparams {
    int depth = 3;      // U-Net pooling levels
    int width = 8;      // U-Net base channels
    int latent = 16;    // VAE latent dimension
    int vae_depth = 3;  // VAE pooling stages
    int vae_width = 4;  // VAE base channels
    int image_side = 128;
    int num_classes = 4;
    double lambda_prior = 0.1;
    double w_ce = 1.0;
    double w_dice = 1.0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int epochs = 100;
    std::uint64_t seed = 20210704;

    void validate() const;
};

struct NetworkParams {
    Hyperparams hp;
    UNetWeights<double> unet;
    VaeWeights<double> vae;
};

/// Single-precision copy for the latency-budgeted inference path.
struct NetworkParamsF {
    Hyperparams hp;
    UNetWeights<float> unet;
    VaeWeights<float> vae;
};
NetworkParamsF to_float(const NetworkParams& params);

/// He-normal weight init, unit norm scales, zero biases; deterministic.
NetworkParams init_params(const Hyperparams& hp, std::uint64_t seed);

/// View of one parameter tensor; enumeration order is fixed and shared by
/// the optimizer, the serializer and the gradient checker.
struct TensorRef {
    double* data;
    long size;
    std::vector<long> extents;
};
std::vector<TensorRef> tensor_refs(NetworkParams& params);

struct TrainConfig {
    int epochs = 100;
    int batch_size = 4;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double lambda_prior = 0.1;
    // The shape-prior weight ramps linearly from 0 to lambda_prior over this
    // many epochs (an absolute count, so loss-history prefixes do not depend
    // on the total epoch budget). Keeps the untrained VAE's gradients from
    // drowning the segmentation signal early on.
    int prior_warmup_epochs = 100;
    double w_ce = 1.0;
    double w_dice = 1.0;
    std::uint64_t seed = 20210704;
    bool augment = false;  // seeded flips/translations

    void validate() const;
};

struct TrainSample {
    Image image;        // standardized, image_side x image_side
    LabelImage labels;  // same grid
};

struct TrainResult {
    NetworkParams params;
    std::vector<double> loss_history;  // mean composite loss per epoch
};

/// Joint U-Net + VAE training with a bias-corrected moment optimizer.
/// Deterministic given the seed; throws DivergenceError naming the epoch if
/// the loss turns non-finite.
TrainResult train(const std::vector<TrainSample>& dataset, const Hyperparams& arch,
                  const TrainConfig& cfg);

/// Per-pixel class logits, (num_classes x side*side).
Eigen::MatrixXd unet_logits(const NetworkParams& params, const Image& image);

/// Column-wise softmax (class axis).
Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& z);

/// Argmax labels; ties resolved to the lowest class id.
LabelImage predict_labels(const NetworkParams& params, const Image& image);
LabelImage predict_labels(const NetworkParamsF& params, const Image& image);

struct VaeTerms {
    double reconstruction = 0.0;
    double kl = 0.0;
};

/// VAE shape-prior terms on predicted mask probabilities
/// (num_classes x side*side, columns summing to 1). The latent sample is
/// mu + sigma * eps with eps drawn from the seed.
VaeTerms shape_prior_terms(const NetworkParams& params, const Eigen::MatrixXd& mask_probs,
                           std::uint64_t seed);

/// w_ce * cross-entropy + w_dice * (1 - soft Dice) + lambda * (recon + kl).
double total_loss(const Eigen::MatrixXd& logits, const LabelImage& labels,
                  const VaeTerms& vae_terms, const TrainConfig& cfg);

/// Composite loss as a pure function of the parameters (the quantity the
/// gradient checker differentiates).
double composite_loss(const NetworkParams& params, const TrainSample& sample,
                      const TrainConfig& cfg, std::uint64_t noise_seed);

/// Analytic gradients for every parameter tensor; returns the loss.
/// grad has the same shapes as params (tensor_refs order matches).
double composite_loss_and_grad(const NetworkParams& params, const TrainSample& sample,
                               const TrainConfig& cfg, std::uint64_t noise_seed,
                               NetworkParams& grad);

/// In-place z-score normalization shared by training and inference.
void standardize(Image& image);

/// Versioned binary params file: magic "CDIQ", little-endian.
void save_params(const std::filesystem::path& path, const NetworkParams& params);
NetworkParams load_params(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_params(const NetworkParams& params);
NetworkParams deserialize_params(const std::vector<std::uint8_t>& bytes);

// Raw convolution entry points, exposed so tests can compare them against
// an independent direct-convolution oracle.
Eigen::MatrixXd conv2d_forward(const Conv2d<double>& conv, const Eigen::MatrixXd& x,
                               int height, int width);
void conv2d_backward(const Conv2d<double>& conv, const Eigen::MatrixXd& x, int height,
                     int width, const Eigen::MatrixXd& d_out, Eigen::MatrixXd& d_w,
                     Eigen::VectorXd& d_b, Eigen::MatrixXd& d_x);

}  // namespace cardiq::net
