#include <doctest.h>

#include <cmath>

#include "cardiq/errors.hpp"
#include "cardiq/net.hpp"
#include "cardiq/rng.hpp"
#include "support/oracles.hpp"

using namespace cardiq;

namespace {

net::Hyperparams tiny_hp() {
    net::Hyperparams hp;
    hp.depth = 2;
    hp.width = 2;
    hp.latent = 4;
    hp.vae_depth = 2;
    hp.vae_width = 2;
    hp.image_side = 8;
    return hp;
}

net::TrainSample random_sample(int side, std::uint64_t seed) {
    Rng rng(seed);
    net::TrainSample s;
    s.image.resize(side, side);
    s.labels.resize(side, side);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            s.image(r, c) = rng.normal(0, 1);
            s.labels(r, c) = static_cast<std::uint8_t>(rng.uniform_index(4));
        }
    return s;
}

}  // namespace

TEST_CASE("convolution matches the direct-convolution oracle, forward and backward") {
    Rng rng(71);
    for (int k : {1, 3}) {
        for (int h = 4; h <= 8; ++h) {
            for (int w = 4; w <= 8; ++w) {
                const int cin = 1 + static_cast<int>(rng.uniform_index(3));
                const int cout = 1 + static_cast<int>(rng.uniform_index(3));
                net::Conv2d<double> conv;
                conv.k = k;
                conv.in_ch = cin;
                conv.out_ch = cout;
                conv.w.resize(cin * k * k, cout);
                conv.b.resize(cout);
                for (long i = 0; i < conv.w.size(); ++i) conv.w.data()[i] = rng.normal(0, 1);
                for (long i = 0; i < cout; ++i) conv.b(i) = rng.normal(0, 1);
                Eigen::MatrixXd x(h * w, cin);
                for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(0, 1);

                Eigen::MatrixXd y = net::conv2d_forward(conv, x, h, w);
                Eigen::MatrixXd y_oracle =
                    oracles::naive_conv_forward(conv.w, conv.b, x, h, w, k);
                CHECK((y - y_oracle).cwiseAbs().maxCoeff() < 1e-10);

                Eigen::MatrixXd d_out(h * w, cout);
                for (long i = 0; i < d_out.size(); ++i) d_out.data()[i] = rng.normal(0, 1);
                Eigen::MatrixXd dw, dx, dw_o, dx_o;
                Eigen::VectorXd db, db_o;
                net::conv2d_backward(conv, x, h, w, d_out, dw, db, dx);
                oracles::naive_conv_backward(conv.w, x, h, w, k, d_out, dw_o, db_o, dx_o);
                CHECK((dw - dw_o).cwiseAbs().maxCoeff() < 1e-10);
                CHECK((db - db_o).cwiseAbs().maxCoeff() < 1e-10);
                CHECK((dx - dx_o).cwiseAbs().maxCoeff() < 1e-10);
            }
        }
    }
}

TEST_CASE("1x1 identity convolution reproduces its input channel") {
    net::Conv2d<double> conv;
    conv.k = 1;
    conv.in_ch = 1;
    conv.out_ch = 1;
    conv.w = Eigen::MatrixXd::Ones(1, 1);
    conv.b = Eigen::VectorXd::Zero(1);
    Rng rng(72);
    Eigen::MatrixXd x(6 * 6, 1);
    for (long i = 0; i < x.size(); ++i) x(i, 0) = rng.uniform(-3, 3);
    Eigen::MatrixXd y = net::conv2d_forward(conv, x, 6, 6);
    CHECK((y - x).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("all-zero parameters give exactly uniform softmax") {
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 5);
    for (auto ref : net::tensor_refs(p)) std::fill(ref.data, ref.data + ref.size, 0.0);
    auto sample = random_sample(hp.image_side, 6);
    Eigen::MatrixXd logits = net::unet_logits(p, sample.image);
    Eigen::MatrixXd probs = net::softmax_columns(logits);
    CHECK((probs.array() - 0.25).abs().maxCoeff() < 1e-15);
}

TEST_CASE("softmax columns sum to 1 for random parameters") {
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 7);
    auto sample = random_sample(hp.image_side, 8);
    Eigen::MatrixXd probs = net::softmax_columns(net::unet_logits(p, sample.image));
    for (long c = 0; c < probs.cols(); ++c)
        CHECK(std::abs(probs.col(c).sum() - 1.0) < 1e-6);
    CHECK(probs.minCoeff() >= 0.0);
}

TEST_CASE("unet rejects mis-shaped input") {
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 9);
    Image wrong = Image::Zero(16, 16);
    CHECK_THROWS_AS(net::unet_logits(p, wrong), ValidationError);
}

TEST_CASE("total_loss on perfect and uniform predictions") {
    const int side = 8;
    Rng rng(73);
    LabelImage labels(side, side);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
            labels(r, c) = static_cast<std::uint8_t>(rng.uniform_index(4));

    net::TrainConfig cfg;
    cfg.lambda_prior = 0.0;

    // Perfect one-hot-ish logits: big margin on the true class.
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(4, side * side);
    for (int p = 0; p < side * side; ++p) logits(labels(p / side, p % side), p) = 60.0;
    const double loss = net::total_loss(logits, labels, {}, cfg);
    CHECK(loss >= 0.0);
    CHECK(loss < 1e-4);

    // Uniform logits: cross-entropy is exactly ln 4 per pixel.
    net::TrainConfig ce_only = cfg;
    ce_only.w_dice = 0.0;
    const double uniform = net::total_loss(Eigen::MatrixXd::Zero(4, side * side), labels,
                                           {}, ce_only);
    CHECK(uniform == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("total_loss is non-negative for random inputs") {
    Rng rng(74);
    const int side = 8;
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::MatrixXd logits(4, side * side);
        for (long i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal(0, 5);
        LabelImage labels(side, side);
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c)
                labels(r, c) = static_cast<std::uint8_t>(rng.uniform_index(4));
        net::VaeTerms vt{std::abs(rng.normal(0, 1)), std::abs(rng.normal(0, 1))};
        net::TrainConfig cfg;
        CHECK(net::total_loss(logits, labels, vt, cfg) >= 0.0);
    }
}

TEST_CASE("shape prior KL closed-form cases") {
    // Zero weights force mu = 0 and logvar = 0: KL is exactly 0.
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 11);
    for (auto ref : net::tensor_refs(p)) std::fill(ref.data, ref.data + ref.size, 0.0);
    const long hw = static_cast<long>(hp.image_side) * hp.image_side;
    Eigen::MatrixXd probs = Eigen::MatrixXd::Constant(4, hw, 0.25);
    auto terms = net::shape_prior_terms(p, probs, 42);
    CHECK(terms.kl == doctest::Approx(0.0));
    CHECK(terms.reconstruction > 0.0);

    // Single latent with mu = 1, sigma = 1: KL = 0.5.
    net::Hyperparams hp1 = tiny_hp();
    hp1.latent = 1;
    net::NetworkParams p1 = net::init_params(hp1, 12);
    for (auto ref : net::tensor_refs(p1)) std::fill(ref.data, ref.data + ref.size, 0.0);
    p1.vae.fc_mu.b(0) = 1.0;
    auto t1 = net::shape_prior_terms(p1, probs, 42);
    CHECK(t1.kl == doctest::Approx(0.5));
}

TEST_CASE("shape prior KL is non-negative for random encoders") {
    auto hp = tiny_hp();
    const long hw = static_cast<long>(hp.image_side) * hp.image_side;
    Rng rng(75);
    for (int trial = 0; trial < 60; ++trial) {
        net::NetworkParams p = net::init_params(hp, 100 + trial);
        Eigen::MatrixXd probs(4, hw);
        for (long c = 0; c < hw; ++c) {
            double total = 0.0;
            for (int k = 0; k < 4; ++k) {
                probs(k, c) = rng.uniform(0.01, 1.0);
                total += probs(k, c);
            }
            probs.col(c) /= total;
        }
        auto terms = net::shape_prior_terms(p, probs, trial);
        CHECK(terms.kl >= 0.0);
        CHECK(std::isfinite(terms.reconstruction));
    }
}

TEST_CASE("shape prior rejects unnormalized probabilities") {
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 13);
    const long hw = static_cast<long>(hp.image_side) * hp.image_side;
    Eigen::MatrixXd bad = Eigen::MatrixXd::Constant(4, hw, 0.3);
    CHECK_THROWS_AS(net::shape_prior_terms(p, bad, 1), ValidationError);
}

TEST_CASE("params serialization roundtrip and error paths") {
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 14);
    auto bytes = net::serialize_params(p);
    CHECK(bytes[0] == 'C');
    CHECK(bytes[1] == 'D');
    CHECK(bytes[2] == 'I');
    CHECK(bytes[3] == 'Q');

    net::NetworkParams q = net::deserialize_params(bytes);
    CHECK(q.hp.depth == hp.depth);
    CHECK(q.hp.latent == hp.latent);
    auto pr = net::tensor_refs(p);
    auto qr = net::tensor_refs(q);
    REQUIRE(pr.size() == qr.size());
    for (std::size_t i = 0; i < pr.size(); ++i) {
        REQUIRE(pr[i].size == qr[i].size);
        for (long j = 0; j < pr[i].size; ++j) CHECK(pr[i].data[j] == qr[i].data[j]);
    }

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(net::deserialize_params(bad_magic), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 99;
    CHECK_THROWS_AS(net::deserialize_params(bad_version), FormatError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 11);
    CHECK_THROWS_AS(net::deserialize_params(truncated), TruncationError);
}

TEST_CASE("training determinism, zero-lr flatness and loss history") {
    auto hp = tiny_hp();
    std::vector<net::TrainSample> data = {random_sample(8, 21), random_sample(8, 22)};
    net::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 5;

    auto a = net::train(data, hp, cfg);
    auto b = net::train(data, hp, cfg);
    CHECK(a.loss_history == b.loss_history);
    auto ar = net::tensor_refs(a.params);
    auto br = net::tensor_refs(b.params);
    for (std::size_t i = 0; i < ar.size(); ++i)
        for (long j = 0; j < ar[i].size; ++j) CHECK(ar[i].data[j] == br[i].data[j]);
    CHECK(a.loss_history.size() == 3);
    for (double l : a.loss_history) CHECK(std::isfinite(l));

    net::TrainConfig frozen = cfg;
    frozen.learning_rate = 0.0;
    frozen.lambda_prior = 0.0;  // VAE sampling varies per step by design
    auto c = net::train(data, hp, frozen);
    CHECK(c.loss_history[0] == doctest::Approx(c.loss_history[1]).epsilon(1e-15));
    CHECK(c.loss_history[1] == doctest::Approx(c.loss_history[2]).epsilon(1e-15));
}

TEST_CASE("diverging training names the epoch") {
    auto hp = tiny_hp();
    std::vector<net::TrainSample> data = {random_sample(8, 23)};
    net::TrainConfig cfg;
    cfg.epochs = 8;
    cfg.learning_rate = 1e12;
    try {
        net::train(data, hp, cfg);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("float and double inference agree") {
    auto hp = tiny_hp();
    net::NetworkParams p = net::init_params(hp, 31);
    auto sample = random_sample(8, 32);
    LabelImage d = net::predict_labels(p, sample.image);
    LabelImage f = net::predict_labels(net::to_float(p), sample.image);
    int disagreements = 0;
    for (long r = 0; r < d.rows(); ++r)
        for (long c = 0; c < d.cols(); ++c) disagreements += d(r, c) != f(r, c);
    // Ties at float precision can flip a rare pixel; bulk must agree.
    CHECK(disagreements <= 1);
}
