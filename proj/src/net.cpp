#include "cardiq/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "cardiq/errors.hpp"
#include "cardiq/rng.hpp"

// Feature maps are (H*W x channels), pixel index p = y*W + x, so that each
// channel is a contiguous column and per-channel normalization, pooling and
// im2col segment copies all walk contiguous memory. Convolution is
// im2col + GEMM: cols(HW x in*k*k) * w(in*k*k x out).

namespace cardiq::net {

namespace {

constexpr double kNormEps = 1e-5;

using MatI = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

int pow2(int e) { return 1 << e; }

// ---------------------------------------------------------------- im2col --

// Fills every element (padding written explicitly), so callers can reuse a
// scratch buffer without re-zeroing 10+ MB per convolution.
template <class T>
void im2col(const Mat<T>& x, int height, int width, int k, Mat<T>& cols) {
    const int pad = (k - 1) / 2;
    const int in_ch = static_cast<int>(x.cols());
    cols.resize(static_cast<long>(height) * width, static_cast<long>(in_ch) * k * k);
    for (int c = 0; c < in_ch; ++c) {
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
                const long col_idx = (static_cast<long>(c) * k + dy) * k + dx;
                const int x_lo = std::max(0, pad - dx);
                const int x_hi = std::min(width, width + pad - dx);
                for (int y = 0; y < height; ++y) {
                    const long row = static_cast<long>(y) * width;
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= height || x_lo >= x_hi) {
                        cols.col(col_idx).segment(row, width).setZero();
                        continue;
                    }
                    if (x_lo > 0) cols.col(col_idx).segment(row, x_lo).setZero();
                    cols.col(col_idx).segment(row + x_lo, x_hi - x_lo) =
                        x.col(c).segment(static_cast<long>(sy) * width + x_lo + dx - pad,
                                         x_hi - x_lo);
                    if (x_hi < width)
                        cols.col(col_idx).segment(row + x_hi, width - x_hi).setZero();
                }
            }
        }
    }
}

template <class T>
Mat<T>& conv_scratch_cols() {
    thread_local Mat<T> scratch;
    return scratch;
}

template <class T>
Mat<T>& conv_scratch_dcols() {
    thread_local Mat<T> scratch;
    return scratch;
}

template <class T>
void col2im_accumulate(const Mat<T>& cols, int height, int width, int k, Mat<T>& dx) {
    const int pad = (k - 1) / 2;
    const int in_ch = static_cast<int>(dx.cols());
    for (int c = 0; c < in_ch; ++c) {
        for (int dy = 0; dy < k; ++dy) {
            for (int dx_off = 0; dx_off < k; ++dx_off) {
                const long col_idx = (static_cast<long>(c) * k + dy) * k + dx_off;
                const int x_lo = std::max(0, pad - dx_off);
                const int x_hi = std::min(width, width + pad - dx_off);
                if (x_lo >= x_hi) continue;
                for (int y = 0; y < height; ++y) {
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= height) continue;
                    dx.col(c).segment(static_cast<long>(sy) * width + x_lo + dx_off - pad,
                                      x_hi - x_lo) +=
                        cols.col(col_idx).segment(static_cast<long>(y) * width + x_lo,
                                                  x_hi - x_lo);
                }
            }
        }
    }
}

template <class T>
Mat<T> conv_forward_t(const Conv2d<T>& conv, const Mat<T>& x, int height, int width) {
    Mat<T>& cols = conv_scratch_cols<T>();
    im2col(x, height, width, conv.k, cols);
    Mat<T> y = cols * conv.w;
    y.rowwise() += conv.b.transpose();
    return y;
}

// Variant that hands the im2col matrix back to the caller; the traced
// training path stores it so backward skips rebuilding it.
template <class T>
Mat<T> conv_forward_keep_cols(const Conv2d<T>& conv, const Mat<T>& x, int height,
                              int width, Mat<T>& cols) {
    im2col(x, height, width, conv.k, cols);
    Mat<T> y = cols * conv.w;
    y.rowwise() += conv.b.transpose();
    return y;
}

template <class T>
void conv_backward_cols(const Conv2d<T>& conv, const Mat<T>& cols, long in_channels,
                        int height, int width, const Mat<T>& d_out, Mat<T>& d_w,
                        Vec<T>& d_b, Mat<T>& d_x) {
    d_w.noalias() = cols.transpose() * d_out;
    d_b = d_out.colwise().sum();
    Mat<T>& d_cols = conv_scratch_dcols<T>();
    d_cols.noalias() = d_out * conv.w.transpose();
    d_x.setZero(static_cast<long>(height) * width, in_channels);
    col2im_accumulate(d_cols, height, width, conv.k, d_x);
}

template <class T>
void conv_backward_t(const Conv2d<T>& conv, const Mat<T>& x, int height, int width,
                     const Mat<T>& d_out, Mat<T>& d_w, Vec<T>& d_b, Mat<T>& d_x) {
    Mat<T> cols;
    im2col(x, height, width, conv.k, cols);
    conv_backward_cols(conv, cols, x.cols(), height, width, d_out, d_w, d_b, d_x);
}

// ---------------------------------------------------------- instance norm --

template <class T>
void instnorm_forward(const InstanceNorm<T>& norm, Mat<T>& z, Mat<T>& xhat, Vec<T>& inv_std) {
    const long n = z.rows();
    xhat.resize(z.rows(), z.cols());
    inv_std.resize(z.cols());
    for (long c = 0; c < z.cols(); ++c) {
        const T mean = z.col(c).mean();
        const T var = (z.col(c).array() - mean).square().sum() / static_cast<T>(n);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
        inv_std(c) = inv;
        xhat.col(c) = (z.col(c).array() - mean) * inv;
        z.col(c) = xhat.col(c) * norm.gamma(c) + Vec<T>::Constant(n, norm.beta(c));
    }
}

template <class T>
void instnorm_backward(const InstanceNorm<T>& norm, const Mat<T>& xhat,
                       const Vec<T>& inv_std, const Mat<T>& d_y, Vec<T>& d_gamma,
                       Vec<T>& d_beta, Mat<T>& d_z) {
    const long n = xhat.rows();
    d_gamma.resize(xhat.cols());
    d_beta.resize(xhat.cols());
    d_z.resize(xhat.rows(), xhat.cols());
    for (long c = 0; c < xhat.cols(); ++c) {
        d_gamma(c) = (d_y.col(c).array() * xhat.col(c).array()).sum();
        d_beta(c) = d_y.col(c).sum();
        const T g = norm.gamma(c);
        const T sum_dxhat = g * d_y.col(c).sum();
        const T sum_dxhat_xhat = g * (d_y.col(c).array() * xhat.col(c).array()).sum();
        d_z.col(c) = (inv_std(c) / static_cast<T>(n)) *
                     (static_cast<T>(n) * g * d_y.col(c).array() - sum_dxhat -
                      xhat.col(c).array() * sum_dxhat_xhat);
    }
}

// ------------------------------------------------------------ pool / up --

template <class T>
Mat<T> maxpool_forward(const Mat<T>& x, int height, int width, MatI& idx) {
    const int oh = height / 2, ow = width / 2;
    const long channels = x.cols();
    Mat<T> y(static_cast<long>(oh) * ow, channels);
    idx.resize(static_cast<long>(oh) * ow, channels);
    for (long c = 0; c < channels; ++c) {
        for (int y2 = 0; y2 < oh; ++y2) {
            for (int x2 = 0; x2 < ow; ++x2) {
                T best{};
                int best_idx = -1;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int p = (2 * y2 + dy) * width + 2 * x2 + dx;
                        const T v = x(p, c);
                        if (best_idx < 0 || v > best) {
                            best = v;
                            best_idx = p;
                        }
                    }
                }
                y(static_cast<long>(y2) * ow + x2, c) = best;
                idx(static_cast<long>(y2) * ow + x2, c) = best_idx;
            }
        }
    }
    return y;
}

template <class T>
Mat<T> maxpool_backward(const Mat<T>& d_y, const MatI& idx, int in_height, int in_width) {
    Mat<T> d_x = Mat<T>::Zero(static_cast<long>(in_height) * in_width, d_y.cols());
    for (long c = 0; c < d_y.cols(); ++c)
        for (long p = 0; p < d_y.rows(); ++p) d_x(idx(p, c), c) += d_y(p, c);
    return d_x;
}

template <class T>
Mat<T> upsample2_forward(const Mat<T>& x, int height, int width) {
    const int oh = 2 * height, ow = 2 * width;
    Mat<T> y(static_cast<long>(oh) * ow, x.cols());
    for (long c = 0; c < x.cols(); ++c)
        for (int yy = 0; yy < oh; ++yy)
            for (int xx = 0; xx < ow; ++xx)
                y(static_cast<long>(yy) * ow + xx, c) =
                    x(static_cast<long>(yy / 2) * width + xx / 2, c);
    return y;
}

template <class T>
Mat<T> upsample2_backward(const Mat<T>& d_y, int in_height, int in_width) {
    const int ow = 2 * in_width;
    Mat<T> d_x = Mat<T>::Zero(static_cast<long>(in_height) * in_width, d_y.cols());
    for (long c = 0; c < d_y.cols(); ++c)
        for (int yy = 0; yy < 2 * in_height; ++yy)
            for (int xx = 0; xx < ow; ++xx)
                d_x(static_cast<long>(yy / 2) * in_width + xx / 2, c) +=
                    d_y(static_cast<long>(yy) * ow + xx, c);
    return d_x;
}

// ------------------------------------------------------------ conv block --

template <class T>
struct BlockTrace {
    Mat<T> cols1, cols2;  // im2col matrices, reused by backward
    Mat<T> xhat1;
    Vec<T> inv1;
    Mat<T> a1;
    Mat<T> xhat2;
    Vec<T> inv2;
    Mat<T> out;
};

template <class T>
Mat<T> block_forward_infer(const ConvBlock<T>& blk, const Mat<T>& x, int h, int w) {
    Mat<T> z = conv_forward_t(blk.conv1, x, h, w);
    Mat<T> xhat;
    Vec<T> inv;
    instnorm_forward(blk.norm1, z, xhat, inv);
    z = z.cwiseMax(T(0));
    Mat<T> z2 = conv_forward_t(blk.conv2, z, h, w);
    instnorm_forward(blk.norm2, z2, xhat, inv);
    return z2.cwiseMax(T(0));
}

template <class T>
Mat<T> block_forward_traced(const ConvBlock<T>& blk, const Mat<T>& x, int h, int w,
                            BlockTrace<T>& tr) {
    Mat<T> z = conv_forward_keep_cols(blk.conv1, x, h, w, tr.cols1);
    instnorm_forward(blk.norm1, z, tr.xhat1, tr.inv1);
    tr.a1 = z.cwiseMax(T(0));
    Mat<T> z2 = conv_forward_keep_cols(blk.conv2, tr.a1, h, w, tr.cols2);
    instnorm_forward(blk.norm2, z2, tr.xhat2, tr.inv2);
    tr.out = z2.cwiseMax(T(0));
    return tr.out;
}

template <class T>
struct BlockGrads {
    Mat<T> d_w1, d_w2;
    Vec<T> d_b1, d_b2;
    Vec<T> d_gamma1, d_beta1, d_gamma2, d_beta2;
};

template <class T>
Mat<T> block_backward(const ConvBlock<T>& blk, const BlockTrace<T>& tr, int h, int w,
                      const Mat<T>& d_out, BlockGrads<T>& g) {
    Mat<T> d = d_out.cwiseProduct((tr.out.array() > T(0)).template cast<T>().matrix());
    Mat<T> d_z2;
    instnorm_backward(blk.norm2, tr.xhat2, tr.inv2, d, g.d_gamma2, g.d_beta2, d_z2);
    Mat<T> d_a1;
    conv_backward_cols(blk.conv2, tr.cols2, tr.a1.cols(), h, w, d_z2, g.d_w2, g.d_b2,
                       d_a1);
    d_a1 = d_a1.cwiseProduct((tr.a1.array() > T(0)).template cast<T>().matrix());
    Mat<T> d_z1;
    instnorm_backward(blk.norm1, tr.xhat1, tr.inv1, d_a1, g.d_gamma1, g.d_beta1, d_z1);
    Mat<T> d_in;
    conv_backward_cols(blk.conv1, tr.cols1, blk.conv1.in_ch, h, w, d_z1, g.d_w1, g.d_b1,
                       d_in);
    return d_in;
}

// ------------------------------------------------------------ U-Net pass --

template <class T>
struct UNetTrace {
    std::vector<BlockTrace<T>> enc;
    std::vector<MatI> pool_idx;
    BlockTrace<T> bottleneck;
    std::vector<BlockTrace<T>> dec;  // indexed by level
    Mat<T> head_cols;
};

template <class T>
Mat<T> unet_forward_infer(const UNetWeights<T>& u, const Mat<T>& input, int side) {
    const int depth = static_cast<int>(u.enc.size());
    std::vector<Mat<T>> skips(depth);
    Mat<T> x = input;
    int h = side, w = side;
    for (int i = 0; i < depth; ++i) {
        skips[i] = block_forward_infer(u.enc[i], x, h, w);
        MatI idx;
        x = maxpool_forward(skips[i], h, w, idx);
        h /= 2;
        w /= 2;
    }
    x = block_forward_infer(u.bottleneck, x, h, w);
    for (int i = depth - 1; i >= 0; --i) {
        Mat<T> up = upsample2_forward(x, h, w);
        h *= 2;
        w *= 2;
        Mat<T> cat(up.rows(), up.cols() + skips[i].cols());
        cat << up, skips[i];
        x = block_forward_infer(u.dec[i], cat, h, w);
    }
    Mat<T> logits = conv_forward_t(u.head, x, h, w);
    return logits;
}

template <class T>
Mat<T> unet_forward_traced(const UNetWeights<T>& u, const Mat<T>& input, int side,
                           UNetTrace<T>& tr) {
    const int depth = static_cast<int>(u.enc.size());
    tr.enc.resize(depth);
    tr.pool_idx.resize(depth);
    tr.dec.resize(depth);
    Mat<T> x = input;
    int h = side, w = side;
    for (int i = 0; i < depth; ++i) {
        block_forward_traced(u.enc[i], x, h, w, tr.enc[i]);
        x = maxpool_forward(tr.enc[i].out, h, w, tr.pool_idx[i]);
        h /= 2;
        w /= 2;
    }
    x = block_forward_traced(u.bottleneck, x, h, w, tr.bottleneck);
    for (int i = depth - 1; i >= 0; --i) {
        Mat<T> up = upsample2_forward(x, h, w);
        h *= 2;
        w *= 2;
        Mat<T> cat(up.rows(), up.cols() + tr.enc[i].out.cols());
        cat << up, tr.enc[i].out;
        x = block_forward_traced(u.dec[i], cat, h, w, tr.dec[i]);
    }
    return conv_forward_keep_cols(u.head, x, h, w, tr.head_cols);
}

template <class T>
struct UNetGrads {
    std::vector<BlockGrads<T>> enc;
    BlockGrads<T> bottleneck;
    std::vector<BlockGrads<T>> dec;
    Mat<T> d_head_w;
    Vec<T> d_head_b;
};

// d_logits is (HW x classes); returns gradient w.r.t. the network input.
template <class T>
Mat<T> unet_backward(const UNetWeights<T>& u, const UNetTrace<T>& tr, int side,
                     const Mat<T>& d_logits, UNetGrads<T>& g) {
    const int depth = static_cast<int>(u.enc.size());
    g.enc.resize(depth);
    g.dec.resize(depth);

    int h = side, w = side;
    Mat<T> d_x;
    conv_backward_cols(u.head, tr.head_cols, u.head.in_ch, h, w, d_logits, g.d_head_w,
                       g.d_head_b, d_x);

    std::vector<Mat<T>> d_skip(depth);
    for (int i = 0; i < depth; ++i) {
        Mat<T> d_cat = block_backward(u.dec[i], tr.dec[i], h, w, d_x, g.dec[i]);
        const long up_ch = d_cat.cols() - tr.enc[i].out.cols();
        d_skip[i] = d_cat.rightCols(tr.enc[i].out.cols());
        h /= 2;
        w /= 2;
        d_x = upsample2_backward(Mat<T>(d_cat.leftCols(up_ch)), h, w);
    }
    d_x = block_backward(u.bottleneck, tr.bottleneck, h, w, d_x, g.bottleneck);
    for (int i = depth - 1; i >= 0; --i) {
        h *= 2;
        w *= 2;
        Mat<T> d_f = maxpool_backward(d_x, tr.pool_idx[i], h, w) + d_skip[i];
        d_x = block_backward(u.enc[i], tr.enc[i], h, w, d_f, g.enc[i]);
    }
    return d_x;
}

// -------------------------------------------------------------- VAE pass --

template <class T>
struct VaeStageTrace {
    Mat<T> cols;    // conv im2col, reused by backward
    Mat<T> xhat;
    Vec<T> inv;
    Mat<T> out;     // post-relu
    MatI pool_idx;  // encoder stages only
};

template <class T>
struct VaeTrace {
    std::vector<VaeStageTrace<T>> enc;
    Vec<T> flat;          // encoder output flattened
    Vec<T> mu, logvar, eps, z;
    Vec<T> h;             // fc_dec output, post-relu
    std::vector<VaeStageTrace<T>> dec;
    Mat<T> head_cols;
    Mat<T> logq;          // decoder log-probabilities (HW x classes)
    int spatial;          // encoder output side
};

struct VaeForwardResult {
    double reconstruction = 0.0;
    double kl = 0.0;
};

// probs is (HW x classes) with rows summing to 1.
template <class T>
VaeForwardResult vae_forward_traced(const VaeWeights<T>& v, const Hyperparams& hp,
                                    const Mat<T>& probs, std::uint64_t seed,
                                    VaeTrace<T>& tr) {
    const int depth = hp.vae_depth;
    tr.enc.resize(depth);
    tr.dec.resize(depth);
    Mat<T> x = probs;
    int h = hp.image_side, w = hp.image_side;
    for (int j = 0; j < depth; ++j) {
        VaeStageTrace<T>& st = tr.enc[j];
        Mat<T> z = conv_forward_keep_cols(v.enc[j].conv, x, h, w, st.cols);
        instnorm_forward(v.enc[j].norm, z, st.xhat, st.inv);
        st.out = z.cwiseMax(T(0));
        x = maxpool_forward(st.out, h, w, st.pool_idx);
        h /= 2;
        w /= 2;
    }
    tr.spatial = h;
    tr.flat = Eigen::Map<const Vec<T>>(x.data(), x.size());
    tr.mu = v.fc_mu.w * tr.flat + v.fc_mu.b;
    tr.logvar = v.fc_logvar.w * tr.flat + v.fc_logvar.b;
    if (!tr.mu.allFinite() || !tr.logvar.allFinite())
        throw DivergenceError("shape prior: non-finite encoder output");

    Rng rng(seed);
    tr.eps.resize(tr.mu.size());
    for (long i = 0; i < tr.eps.size(); ++i) tr.eps(i) = static_cast<T>(rng.normal());
    tr.z = tr.mu + ((tr.logvar * T(0.5)).array().exp() * tr.eps.array()).matrix();

    Vec<T> hvec = v.fc_dec.w * tr.z + v.fc_dec.b;
    tr.h = hvec.cwiseMax(T(0));
    const long cv = v.fc_dec.w.rows() / (static_cast<long>(h) * w);
    Mat<T> y = Eigen::Map<const Mat<T>>(tr.h.data(), static_cast<long>(h) * w, cv);
    for (int m = 0; m < depth; ++m) {
        VaeStageTrace<T>& st = tr.dec[m];
        Mat<T> up = upsample2_forward(y, h, w);
        h *= 2;
        w *= 2;
        Mat<T> z = conv_forward_keep_cols(v.dec[m].conv, up, h, w, st.cols);
        instnorm_forward(v.dec[m].norm, z, st.xhat, st.inv);
        st.out = z.cwiseMax(T(0));
        y = st.out;
    }
    Mat<T> dec_logits = conv_forward_keep_cols(v.head, y, h, w, tr.head_cols);

    // Row-wise log-softmax.
    tr.logq.resize(dec_logits.rows(), dec_logits.cols());
    for (long p = 0; p < dec_logits.rows(); ++p) {
        const T m = dec_logits.row(p).maxCoeff();
        const T lse = m + std::log((dec_logits.row(p).array() - m).exp().sum());
        tr.logq.row(p) = dec_logits.row(p).array() - lse;
    }

    VaeForwardResult res;
    const double inv_hw = 1.0 / static_cast<double>(probs.rows());
    res.reconstruction = -inv_hw * static_cast<double>(
                             (probs.array() * tr.logq.array()).sum());
    res.kl = -0.5 * static_cast<double>(
                 (Vec<T>::Ones(tr.mu.size()) + tr.logvar - tr.mu.cwiseProduct(tr.mu) -
                  tr.logvar.array().exp().matrix())
                     .sum());
    return res;
}

template <class T>
struct VaeGrads {
    std::vector<BlockGrads<T>> enc;  // uses d_w1/d_b1/d_gamma1/d_beta1 slots
    Mat<T> d_mu_w, d_logvar_w, d_dec_w;
    Vec<T> d_mu_b, d_logvar_b, d_dec_b;
    std::vector<BlockGrads<T>> dec;
    Mat<T> d_head_w;
    Vec<T> d_head_b;
};

// Backward of scale * (reconstruction + kl) w.r.t. VAE weights and input
// probabilities. Returns d(probs), the encoder-input gradient; the recon
// target term -scale/HW * logq is also included here.
template <class T>
Mat<T> vae_backward(const VaeWeights<T>& v, const Hyperparams& hp, const Mat<T>& probs,
                    const VaeTrace<T>& tr, T scale, VaeGrads<T>& g) {
    const int depth = hp.vae_depth;
    g.enc.resize(depth);
    g.dec.resize(depth);
    const long hw = probs.rows();
    const T inv_hw = T(1) / static_cast<T>(hw);

    // Reconstruction CE through the decoder softmax: d logits = (q - p)/HW.
    Mat<T> d_logits = (tr.logq.array().exp() - probs.array()).matrix() * (scale * inv_hw);

    int h = hp.image_side, w = hp.image_side;
    Mat<T> d_y;
    conv_backward_cols(v.head, tr.head_cols, v.head.in_ch, h, w, d_logits, g.d_head_w,
                       g.d_head_b, d_y);

    for (int m = depth - 1; m >= 0; --m) {
        const VaeStageTrace<T>& st = tr.dec[m];
        Mat<T> d = d_y.cwiseProduct((st.out.array() > T(0)).template cast<T>().matrix());
        Mat<T> d_z;
        instnorm_backward(v.dec[m].norm, st.xhat, st.inv, d, g.dec[m].d_gamma1,
                          g.dec[m].d_beta1, d_z);
        Mat<T> d_up;
        conv_backward_cols(v.dec[m].conv, st.cols, v.dec[m].conv.in_ch, h, w, d_z,
                           g.dec[m].d_w1, g.dec[m].d_b1, d_up);
        h /= 2;
        w /= 2;
        d_y = upsample2_backward(d_up, h, w);
    }

    // d_y is the gradient at the reshaped fc_dec output (post-relu).
    Vec<T> d_h = Eigen::Map<const Vec<T>>(d_y.data(), d_y.size());
    d_h = d_h.cwiseProduct((tr.h.array() > T(0)).template cast<T>().matrix());
    g.d_dec_w.noalias() = d_h * tr.z.transpose();
    g.d_dec_b = d_h;
    Vec<T> d_z = v.fc_dec.w.transpose() * d_h;

    // Reparameterization plus the KL terms.
    Vec<T> sigma = (tr.logvar * T(0.5)).array().exp().matrix();
    Vec<T> d_mu = d_z + scale * tr.mu;
    Vec<T> d_logvar = (d_z.array() * tr.eps.array() * sigma.array() * T(0.5)).matrix() +
                      scale * T(0.5) * (tr.logvar.array().exp() - T(1)).matrix();

    g.d_mu_w.noalias() = d_mu * tr.flat.transpose();
    g.d_mu_b = d_mu;
    g.d_logvar_w.noalias() = d_logvar * tr.flat.transpose();
    g.d_logvar_b = d_logvar;
    Vec<T> d_flat = v.fc_mu.w.transpose() * d_mu + v.fc_logvar.w.transpose() * d_logvar;

    const long enc_cv = tr.enc.empty() ? probs.cols() : tr.enc.back().out.cols();
    Mat<T> d_x = Eigen::Map<const Mat<T>>(d_flat.data(),
                                          static_cast<long>(tr.spatial) * tr.spatial, enc_cv);
    h = tr.spatial;
    w = tr.spatial;
    for (int j = depth - 1; j >= 0; --j) {
        const VaeStageTrace<T>& st = tr.enc[j];
        h *= 2;
        w *= 2;
        Mat<T> d_out = maxpool_backward(d_x, st.pool_idx, h, w);
        d_out = d_out.cwiseProduct((st.out.array() > T(0)).template cast<T>().matrix());
        Mat<T> d_z2;
        instnorm_backward(v.enc[j].norm, st.xhat, st.inv, d_out, g.enc[j].d_gamma1,
                          g.enc[j].d_beta1, d_z2);
        Mat<T> d_in;
        conv_backward_cols(v.enc[j].conv, st.cols, v.enc[j].conv.in_ch, h, w, d_z2,
                           g.enc[j].d_w1, g.enc[j].d_b1, d_in);
        d_x = d_in;
    }

    // Target-side reconstruction term: d/dp of -1/HW * sum p * logq.
    d_x -= tr.logq * (scale * inv_hw);
    return d_x;
}

// ------------------------------------------------------------- builders --

template <class T>
Conv2d<T> make_conv(int in_ch, int out_ch, int k, Rng& rng) {
    Conv2d<T> c;
    c.k = k;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.w.resize(static_cast<long>(in_ch) * k * k, out_ch);
    const double sd = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    for (long j = 0; j < c.w.cols(); ++j)
        for (long i = 0; i < c.w.rows(); ++i) c.w(i, j) = static_cast<T>(rng.normal(0.0, sd));
    c.b = Vec<T>::Zero(out_ch);
    return c;
}

template <class T>
InstanceNorm<T> make_norm(int channels) {
    return {Vec<T>::Ones(channels), Vec<T>::Zero(channels)};
}

template <class T>
Dense<T> make_dense(int in_dim, int out_dim, Rng& rng) {
    Dense<T> d;
    d.w.resize(out_dim, in_dim);
    const double sd = std::sqrt(2.0 / static_cast<double>(in_dim));
    for (long j = 0; j < d.w.cols(); ++j)
        for (long i = 0; i < d.w.rows(); ++i) d.w(i, j) = static_cast<T>(rng.normal(0.0, sd));
    d.b = Vec<T>::Zero(out_dim);
    return d;
}

template <class T>
ConvBlock<T> make_block(int in_ch, int out_ch, Rng& rng) {
    ConvBlock<T> b;
    b.conv1 = make_conv<T>(in_ch, out_ch, 3, rng);
    b.norm1 = make_norm<T>(out_ch);
    b.conv2 = make_conv<T>(out_ch, out_ch, 3, rng);
    b.norm2 = make_norm<T>(out_ch);
    return b;
}

int vae_dec_out_ch(const Hyperparams& hp, int m) {
    const int e = hp.vae_depth - 2 - m;
    return e >= 0 ? hp.vae_width * pow2(e) : hp.vae_width;
}

}  // namespace

void Hyperparams::validate() const {
    if (depth < 1 || width < 1 || latent < 1 || vae_depth < 1 || vae_width < 1)
        throw ValidationError("hyperparams: sizes must be >= 1");
    if (num_classes < 2) throw ValidationError("hyperparams: need >= 2 classes");
    if (image_side % pow2(depth) != 0 || image_side % pow2(vae_depth) != 0)
        throw ValidationError("hyperparams: image side must be divisible by 2^depth");
    if (image_side / pow2(depth) < 1 || image_side / pow2(vae_depth) < 1)
        throw ValidationError("hyperparams: too many levels for the image side");
    if (lambda_prior < 0.0) throw ValidationError("hyperparams: lambda_prior must be >= 0");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: batch size must be >= 1");
    if (w_ce < 0.0 || w_dice < 0.0 || lambda_prior < 0.0)
        throw ValidationError("train config: loss weights must be >= 0");
    if (w_ce + w_dice <= 0.0)
        throw ValidationError("train config: w_ce + w_dice must be positive");
    if (!(learning_rate >= 0.0)) throw ValidationError("train config: bad learning rate");
    if (prior_warmup_epochs < 0)
        throw ValidationError("train config: warmup epochs must be >= 0");
}

NetworkParams init_params(const Hyperparams& hp, std::uint64_t seed) {
    hp.validate();
    Rng rng(seed);
    NetworkParams p;
    p.hp = hp;
    p.hp.seed = seed;

    for (int i = 0; i < hp.depth; ++i) {
        const int in_ch = i == 0 ? 1 : hp.width * pow2(i - 1);
        p.unet.enc.push_back(make_block<double>(in_ch, hp.width * pow2(i), rng));
    }
    p.unet.bottleneck =
        make_block<double>(hp.width * pow2(hp.depth - 1), hp.width * pow2(hp.depth), rng);
    for (int i = 0; i < hp.depth; ++i)
        p.unet.dec.push_back(make_block<double>(3 * hp.width * pow2(i), hp.width * pow2(i), rng));
    p.unet.head = make_conv<double>(hp.width, hp.num_classes, 1, rng);

    for (int j = 0; j < hp.vae_depth; ++j) {
        const int in_ch = j == 0 ? hp.num_classes : hp.vae_width * pow2(j - 1);
        const int out_ch = hp.vae_width * pow2(j);
        p.vae.enc.push_back({make_conv<double>(in_ch, out_ch, 3, rng), make_norm<double>(out_ch)});
    }
    const int spatial = hp.image_side / pow2(hp.vae_depth);
    const int cv = hp.vae_width * pow2(hp.vae_depth - 1);
    const int flat = cv * spatial * spatial;
    p.vae.fc_mu = make_dense<double>(flat, hp.latent, rng);
    p.vae.fc_logvar = make_dense<double>(flat, hp.latent, rng);
    p.vae.fc_dec = make_dense<double>(hp.latent, flat, rng);
    int in_ch = cv;
    for (int m = 0; m < hp.vae_depth; ++m) {
        const int out_ch = vae_dec_out_ch(hp, m);
        p.vae.dec.push_back({make_conv<double>(in_ch, out_ch, 3, rng), make_norm<double>(out_ch)});
        in_ch = out_ch;
    }
    p.vae.head = make_conv<double>(in_ch, hp.num_classes, 3, rng);
    return p;
}

namespace {

void add_mat(std::vector<TensorRef>& refs, Eigen::MatrixXd& m) {
    refs.push_back({m.data(), m.size(), {m.rows(), m.cols()}});
}
void add_vec(std::vector<TensorRef>& refs, Eigen::VectorXd& v) {
    refs.push_back({v.data(), v.size(), {v.size()}});
}
void add_block(std::vector<TensorRef>& refs, ConvBlock<double>& b) {
    add_mat(refs, b.conv1.w);
    add_vec(refs, b.conv1.b);
    add_vec(refs, b.norm1.gamma);
    add_vec(refs, b.norm1.beta);
    add_mat(refs, b.conv2.w);
    add_vec(refs, b.conv2.b);
    add_vec(refs, b.norm2.gamma);
    add_vec(refs, b.norm2.beta);
}

}  // namespace

std::vector<TensorRef> tensor_refs(NetworkParams& p) {
    std::vector<TensorRef> refs;
    for (auto& b : p.unet.enc) add_block(refs, b);
    add_block(refs, p.unet.bottleneck);
    for (auto& b : p.unet.dec) add_block(refs, b);
    add_mat(refs, p.unet.head.w);
    add_vec(refs, p.unet.head.b);
    for (auto& s : p.vae.enc) {
        add_mat(refs, s.conv.w);
        add_vec(refs, s.conv.b);
        add_vec(refs, s.norm.gamma);
        add_vec(refs, s.norm.beta);
    }
    add_mat(refs, p.vae.fc_mu.w);
    add_vec(refs, p.vae.fc_mu.b);
    add_mat(refs, p.vae.fc_logvar.w);
    add_vec(refs, p.vae.fc_logvar.b);
    add_mat(refs, p.vae.fc_dec.w);
    add_vec(refs, p.vae.fc_dec.b);
    for (auto& s : p.vae.dec) {
        add_mat(refs, s.conv.w);
        add_vec(refs, s.conv.b);
        add_vec(refs, s.norm.gamma);
        add_vec(refs, s.norm.beta);
    }
    add_mat(refs, p.vae.head.w);
    add_vec(refs, p.vae.head.b);
    return refs;
}

namespace {

template <class Src, class Dst>
void cast_conv(const Conv2d<Src>& a, Conv2d<Dst>& b) {
    b.k = a.k;
    b.in_ch = a.in_ch;
    b.out_ch = a.out_ch;
    b.w = a.w.template cast<Dst>();
    b.b = a.b.template cast<Dst>();
}
template <class Src, class Dst>
void cast_block(const ConvBlock<Src>& a, ConvBlock<Dst>& b) {
    cast_conv(a.conv1, b.conv1);
    cast_conv(a.conv2, b.conv2);
    b.norm1 = {a.norm1.gamma.template cast<Dst>(), a.norm1.beta.template cast<Dst>()};
    b.norm2 = {a.norm2.gamma.template cast<Dst>(), a.norm2.beta.template cast<Dst>()};
}

}  // namespace

NetworkParamsF to_float(const NetworkParams& p) {
    NetworkParamsF f;
    f.hp = p.hp;
    f.unet.enc.resize(p.unet.enc.size());
    f.unet.dec.resize(p.unet.dec.size());
    for (std::size_t i = 0; i < p.unet.enc.size(); ++i) cast_block(p.unet.enc[i], f.unet.enc[i]);
    cast_block(p.unet.bottleneck, f.unet.bottleneck);
    for (std::size_t i = 0; i < p.unet.dec.size(); ++i) cast_block(p.unet.dec[i], f.unet.dec[i]);
    cast_conv(p.unet.head, f.unet.head);
    f.vae.enc.resize(p.vae.enc.size());
    f.vae.dec.resize(p.vae.dec.size());
    for (std::size_t i = 0; i < p.vae.enc.size(); ++i) {
        cast_conv(p.vae.enc[i].conv, f.vae.enc[i].conv);
        f.vae.enc[i].norm = {p.vae.enc[i].norm.gamma.cast<float>(),
                             p.vae.enc[i].norm.beta.cast<float>()};
    }
    f.vae.fc_mu = {p.vae.fc_mu.w.cast<float>(), p.vae.fc_mu.b.cast<float>()};
    f.vae.fc_logvar = {p.vae.fc_logvar.w.cast<float>(), p.vae.fc_logvar.b.cast<float>()};
    f.vae.fc_dec = {p.vae.fc_dec.w.cast<float>(), p.vae.fc_dec.b.cast<float>()};
    for (std::size_t i = 0; i < p.vae.dec.size(); ++i) {
        cast_conv(p.vae.dec[i].conv, f.vae.dec[i].conv);
        f.vae.dec[i].norm = {p.vae.dec[i].norm.gamma.cast<float>(),
                             p.vae.dec[i].norm.beta.cast<float>()};
    }
    cast_conv(p.vae.head, f.vae.head);
    return f;
}

// -------------------------------------------------------------- forward --

namespace {

template <class T>
Mat<T> image_to_input(const Image& image) {
    Mat<T> x(image.size(), 1);
    long p = 0;
    for (long r = 0; r < image.rows(); ++r)
        for (long c = 0; c < image.cols(); ++c) x(p++, 0) = static_cast<T>(image(r, c));
    return x;
}

void check_image(const Hyperparams& hp, const Image& image) {
    if (image.rows() != hp.image_side || image.cols() != hp.image_side)
        throw ValidationError("network input must be " + std::to_string(hp.image_side) +
                              "x" + std::to_string(hp.image_side));
    if (!image.allFinite()) throw ValidationError("network input must be finite");
}

template <class T>
LabelImage argmax_labels(const Mat<T>& logits_hw_by_c, int side) {
    LabelImage out(side, side);
    for (long p = 0; p < logits_hw_by_c.rows(); ++p) {
        int best = 0;
        T best_v = logits_hw_by_c(p, 0);
        for (long c = 1; c < logits_hw_by_c.cols(); ++c)
            if (logits_hw_by_c(p, c) > best_v) {  // strict: ties keep the lowest id
                best_v = logits_hw_by_c(p, c);
                best = static_cast<int>(c);
            }
        out(p / side, p % side) = static_cast<std::uint8_t>(best);
    }
    return out;
}

}  // namespace

Eigen::MatrixXd unet_logits(const NetworkParams& params, const Image& image) {
    check_image(params.hp, image);
    Mat<double> x = image_to_input<double>(image);
    Mat<double> y = unet_forward_infer(params.unet, x, params.hp.image_side);
    return y.transpose();  // classes x HW
}

Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& z) {
    Eigen::MatrixXd p(z.rows(), z.cols());
    for (long c = 0; c < z.cols(); ++c) {
        const double m = z.col(c).maxCoeff();
        Eigen::VectorXd e = (z.col(c).array() - m).exp();
        p.col(c) = e / e.sum();
    }
    return p;
}

LabelImage predict_labels(const NetworkParams& params, const Image& image) {
    check_image(params.hp, image);
    Mat<double> x = image_to_input<double>(image);
    Mat<double> y = unet_forward_infer(params.unet, x, params.hp.image_side);
    return argmax_labels(y, params.hp.image_side);
}

LabelImage predict_labels(const NetworkParamsF& params, const Image& image) {
    check_image(params.hp, image);
    Mat<float> x = image_to_input<float>(image);
    Mat<float> y = unet_forward_infer(params.unet, x, params.hp.image_side);
    return argmax_labels(y, params.hp.image_side);
}

void standardize(Image& image) {
    const double mean = image.mean();
    const double sd = std::sqrt((image.array() - mean).square().mean());
    image = (image.array() - mean) / (sd + 1e-8);
}

// ---------------------------------------------------------------- losses --

VaeTerms shape_prior_terms(const NetworkParams& params, const Eigen::MatrixXd& mask_probs,
                           std::uint64_t seed) {
    const long hw = static_cast<long>(params.hp.image_side) * params.hp.image_side;
    if (mask_probs.rows() != params.hp.num_classes || mask_probs.cols() != hw)
        throw ValidationError("shape_prior_terms: probs must be classes x side^2");
    for (long p = 0; p < mask_probs.cols(); ++p) {
        const double s = mask_probs.col(p).sum();
        if (std::abs(s - 1.0) > 1e-6)
            throw ValidationError("shape_prior_terms: probabilities must sum to 1 per pixel");
    }
    VaeTrace<double> tr;
    Mat<double> probs = mask_probs.transpose();  // HW x classes
    VaeForwardResult r = vae_forward_traced(params.vae, params.hp, probs, seed, tr);
    return {r.reconstruction, r.kl};
}

namespace {

// Cross-entropy (mean over pixels) from logits, plus its gradient seed.
double cross_entropy(const Mat<double>& logits, const LabelImage& labels, int side,
                     Mat<double>* d_logits, double weight) {
    const long hw = logits.rows();
    double ce = 0.0;
    for (long p = 0; p < hw; ++p) {
        const double m = logits.row(p).maxCoeff();
        const double lse = m + std::log((logits.row(p).array() - m).exp().sum());
        const int lab = labels(p / side, p % side);
        ce += lse - logits(p, lab);
        if (d_logits) {
            d_logits->row(p) +=
                weight / static_cast<double>(hw) *
                ((logits.row(p).array() - lse).exp().matrix() -
                 Eigen::RowVectorXd::Unit(logits.cols(), lab));
        }
    }
    return ce / static_cast<double>(hw);
}

// Soft Dice over foreground classes with +1 smoothing; optionally
// accumulates d(1 - dice)/d(probs) into d_probs (HW x classes layout).
double soft_dice(const Mat<double>& probs, const LabelImage& labels, int side,
                 Mat<double>* d_probs, double weight) {
    const long classes = probs.cols();
    const long hw = probs.rows();
    double mean_dice = 0.0;
    const double n_fg = static_cast<double>(classes - 1);
    for (long c = 1; c < classes; ++c) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (long p = 0; p < hw; ++p) {
            const bool g = labels(p / side, p % side) == c;
            inter += g ? probs(p, c) : 0.0;
            psum += probs(p, c);
            tsum += g ? 1.0 : 0.0;
        }
        const double num = 2.0 * inter + 1.0;
        const double den = psum + tsum + 1.0;
        mean_dice += num / den / n_fg;
        if (d_probs) {
            for (long p = 0; p < hw; ++p) {
                const bool g = labels(p / side, p % side) == c;
                const double dd = ((g ? 2.0 : 0.0) * den - num) / (den * den);
                // d(1 - mean dice)/dp = -dd / n_fg
                (*d_probs)(p, c) += weight * (-dd / n_fg);
            }
        }
    }
    return mean_dice;
}

}  // namespace

double total_loss(const Eigen::MatrixXd& logits, const LabelImage& labels,
                  const VaeTerms& vae_terms, const TrainConfig& cfg) {
    cfg.validate();
    const int side = static_cast<int>(labels.rows());
    Mat<double> l = logits.transpose();  // HW x classes
    if (l.rows() != static_cast<long>(side) * side)
        throw ValidationError("total_loss: logits/labels shape mismatch");
    const double ce = cross_entropy(l, labels, side, nullptr, 0.0);
    Mat<double> probs(l.rows(), l.cols());
    for (long p = 0; p < l.rows(); ++p) {
        const double m = l.row(p).maxCoeff();
        Eigen::RowVectorXd e = (l.row(p).array() - m).exp();
        probs.row(p) = e / e.sum();
    }
    const double dice = soft_dice(probs, labels, side, nullptr, 0.0);
    return cfg.w_ce * ce + cfg.w_dice * (1.0 - dice) +
           cfg.lambda_prior * (vae_terms.reconstruction + vae_terms.kl);
}

namespace {

// Shared forward/backward of the full training objective for one sample.
double composite_impl(const NetworkParams& params, const TrainSample& sample,
                      const TrainConfig& cfg, std::uint64_t noise_seed,
                      NetworkParams* grad) {
    const Hyperparams& hp = params.hp;
    check_image(hp, sample.image);
    if (sample.labels.rows() != hp.image_side || sample.labels.cols() != hp.image_side)
        throw ValidationError("train sample labels must match the image side");
    const int side = hp.image_side;
    const long hw = static_cast<long>(side) * side;

    Mat<double> x = image_to_input<double>(sample.image);
    UNetTrace<double> utr;
    Mat<double> logits = unet_forward_traced(params.unet, x, side, utr);
    const long classes = logits.cols();

    // Loss stage runs on the transposed (classes x HW) layout so each
    // pixel's class vector is contiguous.
    Mat<double> zt = logits.transpose();
    Mat<double> probs_t(classes, hw);
    Mat<double> d_zt = Mat<double>::Zero(classes, hw);
    Mat<double> d_pt = Mat<double>::Zero(classes, hw);

    double ce = 0.0;
    for (long p = 0; p < hw; ++p) {
        const auto z = zt.col(p);
        const double m = z.maxCoeff();
        Eigen::VectorXd e = (z.array() - m).exp();
        const double sum = e.sum();
        probs_t.col(p) = e / sum;
        const int lab = sample.labels(p / side, p % side);
        ce += m + std::log(sum) - z(lab);
        if (grad) {
            d_zt.col(p) = cfg.w_ce / static_cast<double>(hw) * probs_t.col(p);
            d_zt(lab, p) -= cfg.w_ce / static_cast<double>(hw);
        }
    }
    ce /= static_cast<double>(hw);

    // Soft Dice over foreground classes, +1 smoothing.
    double mean_dice = 0.0;
    const double n_fg = static_cast<double>(classes - 1);
    for (long c = 1; c < classes; ++c) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (long p = 0; p < hw; ++p) {
            const bool g = sample.labels(p / side, p % side) == c;
            inter += g ? probs_t(c, p) : 0.0;
            psum += probs_t(c, p);
            tsum += g ? 1.0 : 0.0;
        }
        const double num = 2.0 * inter + 1.0;
        const double den = psum + tsum + 1.0;
        mean_dice += num / den / n_fg;
        if (grad) {
            for (long p = 0; p < hw; ++p) {
                const bool g = sample.labels(p / side, p % side) == c;
                const double dd = ((g ? 2.0 : 0.0) * den - num) / (den * den);
                d_pt(c, p) -= cfg.w_dice * dd / n_fg;
            }
        }
    }

    double recon = 0.0, kl = 0.0;
    VaeTrace<double> vtr;
    const bool use_vae = cfg.lambda_prior > 0.0;
    Mat<double> probs;  // HW x classes view for the VAE
    if (use_vae) {
        probs = probs_t.transpose();
        VaeForwardResult vres =
            vae_forward_traced(params.vae, hp, probs, noise_seed, vtr);
        recon = vres.reconstruction;
        kl = vres.kl;
    }

    const double loss =
        cfg.w_ce * ce + cfg.w_dice * (1.0 - mean_dice) + cfg.lambda_prior * (recon + kl);
    if (!grad) return loss;

    UNetGrads<double> ug;
    VaeGrads<double> vg;
    if (use_vae) {
        Mat<double> d_probs_vae = vae_backward(params.vae, hp, probs, vtr,
                                               cfg.lambda_prior, vg);
        d_pt += d_probs_vae.transpose();
    }

    // Softmax backward for every term that differentiated through probs.
    for (long p = 0; p < hw; ++p) {
        const double dot = d_pt.col(p).dot(probs_t.col(p));
        d_zt.col(p) += (probs_t.col(p).array() * (d_pt.col(p).array() - dot)).matrix();
    }
    Mat<double> d_logits = d_zt.transpose();
    unet_backward(params.unet, utr, side, d_logits, ug);

    // Pack gradients into the params-shaped output.
    grad->hp = hp;
    auto put_block = [](ConvBlock<double>& dst, const BlockGrads<double>& src) {
        dst.conv1.w = src.d_w1;
        dst.conv1.b = src.d_b1;
        dst.norm1.gamma = src.d_gamma1;
        dst.norm1.beta = src.d_beta1;
        dst.conv2.w = src.d_w2;
        dst.conv2.b = src.d_b2;
        dst.norm2.gamma = src.d_gamma2;
        dst.norm2.beta = src.d_beta2;
    };
    grad->unet.enc.resize(hp.depth);
    grad->unet.dec.resize(hp.depth);
    for (int i = 0; i < hp.depth; ++i) {
        put_block(grad->unet.enc[i], ug.enc[i]);
        put_block(grad->unet.dec[i], ug.dec[i]);
    }
    put_block(grad->unet.bottleneck, ug.bottleneck);
    grad->unet.head.w = ug.d_head_w;
    grad->unet.head.b = ug.d_head_b;
    grad->unet.head.k = 1;

    grad->vae.enc.resize(hp.vae_depth);
    grad->vae.dec.resize(hp.vae_depth);
    if (use_vae) {
        for (int j = 0; j < hp.vae_depth; ++j) {
            grad->vae.enc[j].conv.w = vg.enc[j].d_w1;
            grad->vae.enc[j].conv.b = vg.enc[j].d_b1;
            grad->vae.enc[j].norm.gamma = vg.enc[j].d_gamma1;
            grad->vae.enc[j].norm.beta = vg.enc[j].d_beta1;
            grad->vae.dec[j].conv.w = vg.dec[j].d_w1;
            grad->vae.dec[j].conv.b = vg.dec[j].d_b1;
            grad->vae.dec[j].norm.gamma = vg.dec[j].d_gamma1;
            grad->vae.dec[j].norm.beta = vg.dec[j].d_beta1;
        }
        // Member-wise copies: replacing whole structs would swap the Eigen
        // buffers out from under callers holding tensor_refs views.
        grad->vae.fc_mu.w = vg.d_mu_w;
        grad->vae.fc_mu.b = vg.d_mu_b;
        grad->vae.fc_logvar.w = vg.d_logvar_w;
        grad->vae.fc_logvar.b = vg.d_logvar_b;
        grad->vae.fc_dec.w = vg.d_dec_w;
        grad->vae.fc_dec.b = vg.d_dec_b;
        grad->vae.head.w = vg.d_head_w;
        grad->vae.head.b = vg.d_head_b;
    } else {
        // lambda_prior = 0: the VAE does not enter the graph, gradient is 0.
        grad->vae = params.vae;
        for (auto& s : grad->vae.enc) {
            s.conv.w.setZero();
            s.conv.b.setZero();
            s.norm.gamma.setZero();
            s.norm.beta.setZero();
        }
        for (auto& s : grad->vae.dec) {
            s.conv.w.setZero();
            s.conv.b.setZero();
            s.norm.gamma.setZero();
            s.norm.beta.setZero();
        }
        grad->vae.fc_mu.w.setZero();
        grad->vae.fc_mu.b.setZero();
        grad->vae.fc_logvar.w.setZero();
        grad->vae.fc_logvar.b.setZero();
        grad->vae.fc_dec.w.setZero();
        grad->vae.fc_dec.b.setZero();
        grad->vae.head.w.setZero();
        grad->vae.head.b.setZero();
    }
    return loss;
}

}  // namespace

double composite_loss(const NetworkParams& params, const TrainSample& sample,
                      const TrainConfig& cfg, std::uint64_t noise_seed) {
    return composite_impl(params, sample, cfg, noise_seed, nullptr);
}

double composite_loss_and_grad(const NetworkParams& params, const TrainSample& sample,
                               const TrainConfig& cfg, std::uint64_t noise_seed,
                               NetworkParams& grad) {
    return composite_impl(params, sample, cfg, noise_seed, &grad);
}

// --------------------------------------------------------------- training --

namespace {

TrainSample augment_sample(const TrainSample& s, Rng& rng) {
    TrainSample out = s;
    if (rng.uniform() < 0.5) {
        out.image = out.image.rowwise().reverse().eval();
        out.labels = out.labels.rowwise().reverse().eval();
    }
    const int max_shift = 5;
    const int dr = static_cast<int>(rng.uniform_index(2 * max_shift + 1)) - max_shift;
    const int dc = static_cast<int>(rng.uniform_index(2 * max_shift + 1)) - max_shift;
    if (dr != 0 || dc != 0) {
        Image img = Image::Zero(s.image.rows(), s.image.cols());
        LabelImage lab = LabelImage::Constant(s.labels.rows(), s.labels.cols(), 0);
        for (long r = 0; r < img.rows(); ++r) {
            const long sr = r - dr;
            if (sr < 0 || sr >= img.rows()) continue;
            for (long c = 0; c < img.cols(); ++c) {
                const long sc = c - dc;
                if (sc < 0 || sc >= img.cols()) continue;
                img(r, c) = out.image(sr, sc);
                lab(r, c) = out.labels(sr, sc);
            }
        }
        out.image = std::move(img);
        out.labels = std::move(lab);
    }
    return out;
}

}  // namespace

TrainResult train(const std::vector<TrainSample>& dataset, const Hyperparams& arch,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw ValidationError("train: dataset must be non-empty");

    Hyperparams hp = arch;
    hp.lambda_prior = cfg.lambda_prior;
    hp.w_ce = cfg.w_ce;
    hp.w_dice = cfg.w_dice;
    hp.learning_rate = cfg.learning_rate;
    hp.beta1 = cfg.beta1;
    hp.beta2 = cfg.beta2;
    hp.epochs = cfg.epochs;
    hp.seed = cfg.seed;

    TrainResult result;
    result.params = init_params(hp, cfg.seed);
    NetworkParams grad = init_params(hp, 0);
    NetworkParams accum = init_params(hp, 0);
    NetworkParams m1 = init_params(hp, 0);
    NetworkParams m2 = init_params(hp, 0);
    auto p_refs = tensor_refs(result.params);
    auto g_refs = tensor_refs(grad);
    auto a_refs = tensor_refs(accum);
    auto m1_refs = tensor_refs(m1);
    auto m2_refs = tensor_refs(m2);
    for (auto& r : m1_refs) std::fill(r.data, r.data + r.size, 0.0);
    for (auto& r : m2_refs) std::fill(r.data, r.data + r.size, 0.0);

    Rng shuffle_rng = Rng(cfg.seed).fork(7);
    const int n = static_cast<int>(dataset.size());
    long step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<int>(shuffle_rng.uniform_index(i + 1))]);

        // Linear shape-prior warmup.
        TrainConfig epoch_cfg = cfg;
        if (cfg.prior_warmup_epochs > 0 && epoch < cfg.prior_warmup_epochs)
            epoch_cfg.lambda_prior =
                cfg.lambda_prior * static_cast<double>(epoch) / cfg.prior_warmup_epochs;

        double epoch_loss = 0.0;
        int pos = 0;
        while (pos < n) {
            const int batch = std::min(cfg.batch_size, n - pos);
            for (auto& r : a_refs) std::fill(r.data, r.data + r.size, 0.0);
            for (int k = 0; k < batch; ++k) {
                const int idx = order[pos + k];
                const std::uint64_t noise_seed =
                    cfg.seed * 1000003ULL + static_cast<std::uint64_t>(epoch) * 10007ULL +
                    static_cast<std::uint64_t>(pos + k);
                double loss;
                if (cfg.augment) {
                    Rng aug_rng = Rng(cfg.seed).fork(100 + epoch).fork(idx);
                    TrainSample s = augment_sample(dataset[idx], aug_rng);
                    loss = composite_loss_and_grad(result.params, s, epoch_cfg, noise_seed,
                                                   grad);
                } else {
                    loss = composite_loss_and_grad(result.params, dataset[idx], epoch_cfg,
                                                   noise_seed, grad);
                }
                epoch_loss += loss;
                for (std::size_t t = 0; t < a_refs.size(); ++t)
                    Eigen::Map<Eigen::VectorXd>(a_refs[t].data, a_refs[t].size) +=
                        Eigen::Map<Eigen::VectorXd>(g_refs[t].data, g_refs[t].size);
            }
            // Bias-corrected first/second moment update on the batch mean.
            ++step;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t t = 0; t < p_refs.size(); ++t) {
                Eigen::Map<Eigen::VectorXd> p(p_refs[t].data, p_refs[t].size);
                Eigen::Map<Eigen::VectorXd> g(a_refs[t].data, a_refs[t].size);
                Eigen::Map<Eigen::VectorXd> ma(m1_refs[t].data, m1_refs[t].size);
                Eigen::Map<Eigen::VectorXd> vb(m2_refs[t].data, m2_refs[t].size);
                g /= static_cast<double>(batch);
                ma = cfg.beta1 * ma + (1.0 - cfg.beta1) * g;
                vb = cfg.beta2 * vb.array().matrix() +
                     (1.0 - cfg.beta2) * g.array().square().matrix();
                p.array() -= cfg.learning_rate * (ma.array() / bc1) /
                             ((vb.array() / bc2).sqrt() + 1e-8);
            }
            pos += batch;
        }
        epoch_loss /= n;
        if (!std::isfinite(epoch_loss))
            throw DivergenceError("training diverged at epoch " + std::to_string(epoch));
        result.loss_history.push_back(epoch_loss);
    }
    return result;
}

// ---------------------------------------------------------- serialization --

namespace {

constexpr char kMagic[4] = {'C', 'D', 'I', 'Q'};
constexpr std::uint16_t kFormatVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size())
        throw TruncationError("params file: truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_params(const NetworkParams& params) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put<std::uint16_t>(out, kFormatVersion);
    const Hyperparams& hp = params.hp;
    put<std::int32_t>(out, hp.depth);
    put<std::int32_t>(out, hp.width);
    put<std::int32_t>(out, hp.latent);
    put<std::int32_t>(out, hp.vae_depth);
    put<std::int32_t>(out, hp.vae_width);
    put<std::int32_t>(out, hp.image_side);
    put<std::int32_t>(out, hp.num_classes);
    put<std::int32_t>(out, hp.epochs);
    put<double>(out, hp.lambda_prior);
    put<double>(out, hp.w_ce);
    put<double>(out, hp.w_dice);
    put<double>(out, hp.learning_rate);
    put<double>(out, hp.beta1);
    put<double>(out, hp.beta2);
    put<std::uint64_t>(out, hp.seed);

    auto refs = tensor_refs(const_cast<NetworkParams&>(params));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(refs.size()));
    for (const auto& r : refs) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.extents.size()));
        for (long e : r.extents) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
        for (long i = 0; i < r.size; ++i) put<double>(out, r.data[i]);
    }
    return out;
}

NetworkParams deserialize_params(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("params file: bad magic (expected CDIQ)");
    pos = 4;
    const auto version = take<std::uint16_t>(bytes, pos);
    if (version != kFormatVersion)
        throw FormatError("params file: unknown format version " + std::to_string(version));

    Hyperparams hp;
    hp.depth = take<std::int32_t>(bytes, pos);
    hp.width = take<std::int32_t>(bytes, pos);
    hp.latent = take<std::int32_t>(bytes, pos);
    hp.vae_depth = take<std::int32_t>(bytes, pos);
    hp.vae_width = take<std::int32_t>(bytes, pos);
    hp.image_side = take<std::int32_t>(bytes, pos);
    hp.num_classes = take<std::int32_t>(bytes, pos);
    hp.epochs = take<std::int32_t>(bytes, pos);
    hp.lambda_prior = take<double>(bytes, pos);
    hp.w_ce = take<double>(bytes, pos);
    hp.w_dice = take<double>(bytes, pos);
    hp.learning_rate = take<double>(bytes, pos);
    hp.beta1 = take<double>(bytes, pos);
    hp.beta2 = take<double>(bytes, pos);
    hp.seed = take<std::uint64_t>(bytes, pos);

    NetworkParams params = init_params(hp, hp.seed);
    params.hp = hp;
    auto refs = tensor_refs(params);
    const auto count = take<std::uint32_t>(bytes, pos);
    if (count != refs.size())
        throw FormatError("params file: tensor count does not match hyperparams");
    for (auto& r : refs) {
        const auto rank = take<std::uint32_t>(bytes, pos);
        if (rank != r.extents.size())
            throw FormatError("params file: tensor rank mismatch");
        for (std::size_t d = 0; d < rank; ++d) {
            const auto extent = take<std::uint32_t>(bytes, pos);
            if (static_cast<long>(extent) != r.extents[d])
                throw FormatError("params file: tensor extent mismatch");
        }
        for (long i = 0; i < r.size; ++i) r.data[i] = take<double>(bytes, pos);
    }
    return params;
}

void save_params(const std::filesystem::path& path, const NetworkParams& params) {
    auto bytes = serialize_params(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("params: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("params: short write to " + path.string());
}

NetworkParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("params: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_params(bytes);
}

// ------------------------------------------------------------ raw convs --

Eigen::MatrixXd conv2d_forward(const Conv2d<double>& conv, const Eigen::MatrixXd& x,
                               int height, int width) {
    return conv_forward_t(conv, x, height, width);
}

void conv2d_backward(const Conv2d<double>& conv, const Eigen::MatrixXd& x, int height,
                     int width, const Eigen::MatrixXd& d_out, Eigen::MatrixXd& d_w,
                     Eigen::VectorXd& d_b, Eigen::MatrixXd& d_x) {
    conv_backward_t(conv, x, height, width, d_out, d_w, d_b, d_x);
}

}  // namespace cardiq::net
