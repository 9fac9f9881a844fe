#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "desk/checkpoint.hpp"
#include "desk/nn.hpp"

using namespace desk;

namespace {

Tensor random_batch(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Scalar loss for gradient checking: weighted sum of the network output so
// every output component contributes.
double probe_loss(const NetworkSpec& spec, const NetworkParams& params, const Tensor& input,
                  const Tensor& weights, uint64_t rng_seed) {
    Rng rng(rng_seed);
    Tensor out = forward(spec, params, input, Mode::Train, rng);
    return (out.vec().array() * weights.vec().array()).sum();
}

// Central finite differences against backward() for every parameter.
// Returns the max relative error over all parameter components.
double max_fd_error(const NetworkSpec& spec, NetworkParams params, const Tensor& input,
                    uint64_t probe_seed) {
    Rng wrng(99);
    ForwardCache cache;
    Rng frng(probe_seed);
    Tensor out = forward(spec, params, input, Mode::Train, frng, &cache);
    Tensor weights = random_batch(out.shape(), wrng);

    NetworkParams analytic = backward(spec, params, cache, weights);

    const double h = 1e-5;
    double worst = 0.0;
    for (auto& [idx, g] : analytic.layers) {
        for (Tensor* which : {&params.layers[idx].w, &params.layers[idx].b}) {
            Tensor& grad = which == &params.layers[idx].w ? g.w : g.b;
            for (Eigen::Index k = 0; k < which->size(); ++k) {
                const double saved = (*which)[k];
                (*which)[k] = saved + h;
                const double up = probe_loss(spec, params, input, weights, probe_seed);
                (*which)[k] = saved - h;
                const double down = probe_loss(spec, params, input, weights, probe_seed);
                (*which)[k] = saved;
                const double fd = (up - down) / (2 * h);
                const double re =
                    std::abs(fd - grad[k]) / std::max(1e-6, std::abs(fd) + std::abs(grad[k]));
                worst = std::max(worst, re);
            }
        }
    }
    return worst;
}

NetworkSpec tiny_conv_net() {
    NetworkSpec spec;
    spec.input_shape = {6, 6, 2};
    spec.layers = {LayerDesc::conv(3, 3, 3, 1), LayerDesc::relu(),    LayerDesc::maxpool(2, 2),
                   LayerDesc::dropout(0.25),    LayerDesc::flatten(), LayerDesc::fully_connected(5),
                   LayerDesc::relu(),           LayerDesc::dropout(0.5),
                   LayerDesc::fully_connected(3), LayerDesc::softmax_output()};
    spec.fc_split = 4;
    return spec;
}

}  // namespace

TEST_CASE("spec validation catches bad stacks") {
    NetworkSpec s;
    s.input_shape = {4, 4, 1};
    s.layers = {LayerDesc::flatten(), LayerDesc::fully_connected(2)};
    CHECK_THROWS_AS(s.validate(), ConfigError);  // no output layer
    s.layers.push_back(LayerDesc::softmax_output());
    s.validate();

    NetworkSpec bad = s;
    bad.fc_split = 2;  // marker after the first fully connected layer
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    NetworkSpec badrate = s;
    badrate.layers.insert(badrate.layers.begin(), LayerDesc::dropout(1.0));
    CHECK_THROWS_AS(badrate.validate(), ConfigError);

    NetworkSpec pool = s;
    pool.layers.insert(pool.layers.begin(), LayerDesc::maxpool(3, 3));
    CHECK_THROWS_AS(pool.validate(), ConfigError);  // 4x4 not divisible by 3
}

TEST_CASE("softmax output rows sum to one") {
    NetworkSpec spec;
    spec.input_shape = {7};
    spec.layers = {LayerDesc::fully_connected(4), LayerDesc::softmax_output()};
    Rng rng(21);
    NetworkParams params = NetworkParams::init(spec, rng);
    Tensor input = random_batch({9, 7}, rng, -3, 3);
    Rng frng(1);
    Tensor out = forward(spec, params, input, Mode::Eval, frng);
    for (int r = 0; r < out.dim(0); ++r) {
        double sum = 0;
        for (int c = 0; c < out.dim(1); ++c) {
            sum += out.at(r, c);
            CHECK(out.at(r, c) >= 0.0);
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("all-zero weights with sigmoid head give exactly 0.5") {
    NetworkSpec spec;
    spec.input_shape = {5};
    spec.layers = {LayerDesc::fully_connected(1), LayerDesc::sigmoid_output()};
    NetworkParams params = NetworkParams::zeros_like(spec);
    Rng rng(2);
    Tensor input = random_batch({4, 5}, rng);
    Rng frng(1);
    Tensor out = forward(spec, params, input, Mode::Eval, frng);
    for (int r = 0; r < out.dim(0); ++r) CHECK(out.at(r, 0) == 0.5);
}

TEST_CASE("forward is reproducible bit-exactly for a fixed seed") {
    NetworkSpec spec = tiny_conv_net();
    spec.validate();
    Rng rng(77);
    NetworkParams params = NetworkParams::init(spec, rng);
    Tensor input = random_batch({2, 6, 6, 2}, rng);
    Rng f1(42), f2(42);
    Tensor a = forward(spec, params, input, Mode::Train, f1);
    Tensor b = forward(spec, params, input, Mode::Train, f2);
    REQUIRE(a.size() == b.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("forward rejects mismatched input naming the spec shape") {
    NetworkSpec spec = tiny_conv_net();
    NetworkParams params = NetworkParams::zeros_like(spec);
    Rng rng(1);
    Tensor wrong({2, 5, 5, 2});
    CHECK_THROWS_AS(forward(spec, params, wrong, Mode::Eval, rng), DimensionError);
}

TEST_CASE("zero output grad gives all-zero gradients") {
    NetworkSpec spec = tiny_conv_net();
    Rng rng(5);
    NetworkParams params = NetworkParams::init(spec, rng);
    Tensor input = random_batch({3, 6, 6, 2}, rng);
    ForwardCache cache;
    Rng frng(9);
    Tensor out = forward(spec, params, input, Mode::Train, frng, &cache);
    NetworkParams grads = backward(spec, params, cache, Tensor(out.shape()));
    for (const auto& [idx, g] : grads.layers) {
        (void)idx;
        CHECK(g.w.vec().cwiseAbs().maxCoeff() == 0.0);
        CHECK(g.b.vec().cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("scalar linear net gradient is forced by the chain rule") {
    // y = w*x with x=2: dL/dw must be 2 when dL/dy = 1.
    NetworkSpec spec;
    spec.input_shape = {1};
    spec.layers = {LayerDesc::fully_connected(1), LayerDesc::sigmoid_output()};
    NetworkParams params = NetworkParams::zeros_like(spec);
    params.layers[0].w.at(0, 0) = 0.75;
    Tensor input = Tensor::from_vector({1, 1}, (Vector(1) << 2.0).finished());
    ForwardCache cache;
    Rng rng(1);
    forward(spec, params, input, Mode::Train, rng, &cache);
    // Inject at the pre-activation so the sigmoid does not scale the probe.
    Tensor g(std::vector<int>{1, 1});
    g[0] = 1.0;
    NetworkParams grads = backward_from_preactivation(spec, params, cache, g);
    CHECK(grads.layers[0].w.at(0, 0) == doctest::Approx(2.0));
    CHECK(grads.layers[0].b.at(0) == doctest::Approx(1.0));
}

TEST_CASE("finite differences: composite net and every layer kind") {
    Rng rng(31);
    NetworkSpec spec = tiny_conv_net();
    spec.validate();
    NetworkParams params = NetworkParams::init(spec, rng);
    Tensor input = random_batch({2, 6, 6, 2}, rng);
    CHECK(max_fd_error(spec, params, input, 1234) < 1e-4);

    // sigmoid head variant
    NetworkSpec sig;
    sig.input_shape = {4, 4, 1};
    sig.layers = {LayerDesc::conv(2, 2, 2), LayerDesc::relu(), LayerDesc::maxpool(3, 3),
                  LayerDesc::flatten(), LayerDesc::fully_connected(1),
                  LayerDesc::sigmoid_output()};
    sig.fc_split = 4;
    sig.validate();
    NetworkParams sp = NetworkParams::init(sig, rng);
    Tensor sinput = random_batch({3, 4, 4, 1}, rng);
    CHECK(max_fd_error(sig, sp, sinput, 77) < 1e-4);
}

TEST_CASE("backward rejects a cache built by another spec") {
    NetworkSpec a = tiny_conv_net();
    NetworkSpec b = tiny_conv_net();
    Rng rng(3);
    NetworkParams pa = NetworkParams::init(a, rng);
    Tensor input = random_batch({1, 6, 6, 2}, rng);
    ForwardCache cache;
    Rng frng(4);
    Tensor out = forward(a, pa, input, Mode::Train, frng, &cache);
    CHECK_THROWS_AS(backward(b, pa, cache, Tensor(out.shape())), Error);
}

TEST_CASE("hinge loss values and subgradients") {
    auto a = hinge_loss(5.0, 1);
    CHECK(a.loss == 0.0);
    CHECK(a.grad == 0.0);
    auto b = hinge_loss(0.0, 1);
    CHECK(b.loss == 1.0);
    CHECK(b.grad == -1.0);
    auto c = hinge_loss(-0.5, 0);
    CHECK(c.loss == doctest::Approx(0.5));
    CHECK(c.grad == 1.0);
    // subgradient at the hinge point is 0
    auto d = hinge_loss(1.0, 1);
    CHECK(d.loss == 0.0);
    CHECK(d.grad == 0.0);
}

TEST_CASE("sgd step arithmetic, momentum recurrence, zero gradient") {
    NetworkSpec spec;
    spec.input_shape = {1};
    spec.layers = {LayerDesc::fully_connected(1), LayerDesc::sigmoid_output()};
    NetworkParams p = NetworkParams::zeros_like(spec);
    p.layers[0].w.at(0, 0) = 1.0;
    NetworkParams g = NetworkParams::zeros_like(spec);
    g.layers[0].w.at(0, 0) = 1.0;
    SgdState st;
    sgd_step(p, g, st, 0.1, 0.0);
    CHECK(p.layers[0].w.at(0, 0) == doctest::Approx(0.9));

    // two steps with momentum 0.9, g=1, lr=0.1, from p=0 -> p = -0.29
    NetworkParams p2 = NetworkParams::zeros_like(spec);
    SgdState st2;
    sgd_step(p2, g, st2, 0.1, 0.9);
    sgd_step(p2, g, st2, 0.1, 0.9);
    CHECK(p2.layers[0].w.at(0, 0) == doctest::Approx(-0.29));

    NetworkParams zero_g = NetworkParams::zeros_like(spec);
    NetworkParams before = p2;
    SgdState st3;
    sgd_step(p2, zero_g, st3, 0.1, 0.9);
    CHECK(p2.layers[0].w.at(0, 0) == before.layers[0].w.at(0, 0));
}

TEST_CASE("inverted dropout keeps the activation expectation") {
    NetworkSpec spec;
    spec.input_shape = {1};
    spec.layers = {LayerDesc::dropout(0.4), LayerDesc::fully_connected(1),
                   LayerDesc::sigmoid_output()};
    NetworkParams params = NetworkParams::zeros_like(spec);
    params.layers[1].w.at(0, 0) = 1.0;

    Tensor input = Tensor::from_vector({1, 1}, (Vector(1) << 1.0).finished());
    Rng rng(123);
    double sum = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        ForwardCache cache;
        forward(spec, params, input, Mode::Train, rng, &cache);
        sum += cache.preactivation[0];
    }
    CHECK(std::abs(sum / n - 1.0) < 0.02);

    // eval mode never consumes the rng and is deterministic
    Rng r1(5);
    Tensor e1 = forward(spec, params, input, Mode::Eval, r1);
    uint64_t next_after = r1.next_u64();
    CHECK(next_after == Rng(5).next_u64());
    CHECK(e1[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("train_classifier separates synthetic blobs and replays") {
    // 2-class linearly separable 4x4 blobs: class 0 bright top, class 1
    // bright bottom.
    LabeledImageSet data;
    data.label_names = {0, 1};
    Rng gen(17);
    for (int n = 0; n < 80; ++n) {
        int label = n % 2;
        Tensor img({4, 4, 1});
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                double base = (label == 0) == (y < 2) ? 0.9 : 0.1;
                img.at(y, x, 0) = base + gen.uniform(-0.05, 0.05);
            }
        data.images.push_back(img);
        data.labels.push_back(label);
        data.splits.push_back(n < 60 ? Split::Train : Split::Validation);
        data.source_ids.push_back(n);
    }

    NetworkSpec spec;
    spec.input_shape = {4, 4, 1};
    spec.layers = {LayerDesc::flatten(), LayerDesc::fully_connected(8), LayerDesc::relu(),
                   LayerDesc::fully_connected(2), LayerDesc::softmax_output()};
    spec.fc_split = 1;

    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.max_epochs = 50;
    cfg.patience = 50;
    cfg.improvement_threshold = 0.0;
    cfg.seed = 7;

    Rng prng(7);
    NetworkParams params = NetworkParams::init(spec, prng);
    TrainHistory hist = train_classifier(spec, params, data, cfg);
    CHECK(hist.best_val_accuracy == doctest::Approx(1.0));
    CHECK(static_cast<int>(hist.epochs.size()) <= 50);

    // determinism: same seed -> identical history
    Rng prng2(7);
    NetworkParams params2 = NetworkParams::init(spec, prng2);
    TrainHistory hist2 = train_classifier(spec, params2, data, cfg);
    REQUIRE(hist.epochs.size() == hist2.epochs.size());
    for (size_t i = 0; i < hist.epochs.size(); ++i) {
        CHECK(hist.epochs[i].train_loss == hist2.epochs[i].train_loss);
        CHECK(hist.epochs[i].val_accuracy == hist2.epochs[i].val_accuracy);
    }
    CHECK(params.checksum() == params2.checksum());

    // returned params match the best epoch accuracy
    double returned_acc =
        classification_accuracy(spec, params, data, data.indices_of(Split::Validation));
    CHECK(returned_acc == doctest::Approx(hist.best_val_accuracy));

    // stopping-rule edge: impossible threshold stops after 1 + patience epochs
    TrainConfig stop_cfg = cfg;
    stop_cfg.patience = 1;
    stop_cfg.improvement_threshold = 1.0;
    Rng prng3(7);
    NetworkParams params3 = NetworkParams::init(spec, prng3);
    TrainHistory hist3 = train_classifier(spec, params3, data, stop_cfg);
    CHECK(static_cast<int>(hist3.epochs.size()) == 2);
}

TEST_CASE("train_classifier rejects empty splits") {
    LabeledImageSet data;
    data.label_names = {0, 1};
    for (int n = 0; n < 4; ++n) {
        data.images.push_back(Tensor({2, 2, 1}));
        data.labels.push_back(n % 2);
        data.splits.push_back(Split::Train);
        data.source_ids.push_back(n);
    }
    NetworkSpec spec;
    spec.input_shape = {2, 2, 1};
    spec.layers = {LayerDesc::flatten(), LayerDesc::fully_connected(2),
                   LayerDesc::softmax_output()};
    spec.fc_split = 1;
    NetworkParams params = NetworkParams::zeros_like(spec);
    TrainConfig cfg;
    CHECK_THROWS_AS(train_classifier(spec, params, data, cfg), Error);
}

TEST_CASE("checkpoint round trip is bit exact") {
    NetworkSpec spec = tiny_conv_net();
    Rng rng(55);
    NetworkParams params = NetworkParams::init(spec, rng);
    const std::string path = "ckpt_test.json";
    save_network(path, spec, params, 987);
    LoadedNetwork loaded = load_network(path);
    CHECK(loaded.seed == 987);
    CHECK(loaded.spec.to_json() == spec.to_json());
    REQUIRE(loaded.params.same_shapes(params));
    CHECK(loaded.params.checksum() == params.checksum());
    for (const auto& [idx, lp] : params.layers) {
        const auto& other = loaded.params.layers.at(idx);
        for (Eigen::Index i = 0; i < lp.w.size(); ++i) CHECK(lp.w[i] == other.w[i]);
        for (Eigen::Index i = 0; i < lp.b.size(); ++i) CHECK(lp.b[i] == other.b[i]);
    }
    std::remove("ckpt_test.json");
    std::remove("ckpt_test.bin");
}
