// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "uqloc/mdn.hpp"
#include "uqloc/net.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

using namespace uqloc;
using namespace uqloc::net;

namespace {

LossFn nll()
{
    return [](const Eigen::MatrixXd &raw, const Eigen::MatrixXd &t, Eigen::MatrixXd *g) {
        return mdn::batch_nll(raw, t, g);
    };
}

MlpConfig small(Eigen::Index in, std::vector<Eigen::Index> widths, double rate, std::uint64_t seed)
{
    MlpConfig c;
    c.input_dim = in;
    c.hidden_widths = std::move(widths);
    c.output_units = mdn::raw_size(3);
    c.dropout_rate = rate;
    c.dropout_layers.clear();
    for (int l = 1; l <= static_cast<int>(c.hidden_widths.size()) && l <= 3; ++l)
        c.dropout_layers.push_back(l);
    c.init_std = 0.5;
    c.seed = seed;
    return c;
}

// Random biases keep pre-activations off the ReLU kink, where central
// differences see half the slope.
ModelParams with_random_biases(ModelParams p, std::uint64_t seed)
{
    Rng rng(seed);
    std::normal_distribution<double> n(0, 0.2);
    for (auto &l : p.layers)
        for (Eigen::Index i = 0; i < l.bias.size(); ++i)
            l.bias(i) = n(rng);
    return p;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0)
{
    Rng rng(seed);
    std::normal_distribution<double> n(0, scale);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m(i) = n(rng);
    return m;
}

std::vector<std::uint64_t> seeds_for(Eigen::Index n, std::uint64_t base)
{
    std::vector<std::uint64_t> s;
    for (Eigen::Index i = 0; i < n; ++i)
        s.push_back(derive_seed(base, "col", {static_cast<std::uint64_t>(i)}));
    return s;
}

// Targets follow a smooth function of the inputs.
TensorSet toy_set(Eigen::Index n, std::uint64_t seed)
{
    TensorSet t;
    t.inputs = random_matrix(4, n, seed);
    t.targets.resize(2, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        t.targets(0, i) = 0.5 + 0.3 * std::tanh(t.inputs(0, i) - t.inputs(1, i));
        t.targets(1, i) = 0.5 + 0.2 * t.inputs(2, i) * t.inputs(3, i) / 3;
    }
    return t;
}

} // namespace

TEST_CASE("initialization")
{
    MlpConfig cfg;
    cfg.input_dim = 256;
    cfg.seed = 17;
    const auto a = init_params(cfg);
    const auto b = init_params(cfg);
    REQUIRE(a.layers.size() == 5);
    CHECK(a.layers[0].weight.rows() == 512);
    CHECK(a.layers[0].weight.cols() == 256);
    CHECK(a.layers[4].weight.rows() == 15);
    CHECK(a.layers[4].weight.cols() == 64);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(a.layers[l].weight == b.layers[l].weight);
        CHECK(a.layers[l].bias.isZero(0.0));
        if (l > 0)
            CHECK(a.layers[l].weight.cols() == a.layers[l - 1].weight.rows());
    }
    const auto &w = a.layers[0].weight;
    const double mean = w.mean();
    const double var = (w.array() - mean).square().sum() / static_cast<double>(w.size() - 1);
    CHECK(var >= 0.008);
    CHECK(var <= 0.012);
    cfg.seed = 18;
    CHECK(init_params(cfg).layers[0].weight != w);
}

TEST_CASE("config validation")
{
    MlpConfig m = small(3, {4}, 0.1, 1);
    CHECK_NOTHROW(m.validate());
    m.dropout_rate = 1.0;
    CHECK_THROWS(m.validate());
    m.dropout_rate = 0.1;
    m.output_units = 7;
    CHECK_THROWS(m.validate());

    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    t.patience = t.max_epochs + 1;
    CHECK_THROWS(t.validate());
    t.patience = 1;
    t.learning_rate = 0.0;
    CHECK_THROWS(t.validate());
    t.learning_rate = 1e-3;
    t.batch_size = 0;
    CHECK_THROWS(t.validate());
}

TEST_CASE("forward pass")
{
    auto p = init_params(small(6, {8, 5, 7}, 0.0, 3));
    const Eigen::MatrixXd x = random_matrix(6, 9, 4);
    const auto seeds = seeds_for(9, 1);
    CHECK(forward(p, x, Mode::train, seeds) == forward(p, x, Mode::eval));

    const Eigen::MatrixXd out = forward(p, x, Mode::eval);
    CHECK(out.rows() == 15);
    for (Eigen::Index c = 0; c < x.cols(); ++c)
        CHECK((out.col(c) - oracle::mlp_forward(p, x.col(c))).cwiseAbs().maxCoeff() < 1e-12);

    auto zero = p.zeros_like();
    CHECK(forward(zero, Eigen::MatrixXd(Eigen::MatrixXd::Zero(6, 3)), Mode::eval).isZero(0.0));

    auto d = init_params(small(6, {8, 5, 7}, 0.3, 3));
    CHECK(forward(d, x, Mode::mc_dropout, seeds) == forward(d, x, Mode::mc_dropout, seeds));
    CHECK(forward(d, x, Mode::mc_dropout, seeds) != forward(d, x, Mode::mc_dropout, seeds_for(9, 2)));
    // A column's mask depends on its own seed only.
    const Eigen::MatrixXd full = forward(d, x, Mode::mc_dropout, seeds);
    const std::vector<std::uint64_t> one{seeds[4]};
    CHECK((forward(d, Eigen::MatrixXd(x.col(4)), Mode::mc_dropout, one) - full.col(4)).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(forward(p, Eigen::MatrixXd(Eigen::MatrixXd::Zero(5, 2)), Mode::eval), std::invalid_argument);
    CHECK_THROWS_AS(forward(d, x, Mode::train), std::invalid_argument);
}

TEST_CASE("inverted dropout preserves the expectation")
{
    MlpConfig cfg = small(5, {40}, 0.3, 8);
    cfg.dropout_layers = {1};
    const auto p = with_random_biases(init_params(cfg), 9);
    const int n = 20000;
    const Eigen::MatrixXd batch = random_matrix(5, 1, 9).replicate(1, n);
    const auto cache = forward_cached(p, batch, Mode::mc_dropout, seeds_for(n, 10));
    const Eigen::VectorXd clean = cache.relu[0].col(0);
    const Eigen::VectorXd mean = cache.inputs[1].rowwise().mean();
    int active = 0;
    for (Eigen::Index i = 0; i < clean.size(); ++i) {
        if (clean(i) <= 0) {
            CHECK(mean(i) == 0.0);
            continue;
        }
        ++active;
        CHECK(std::abs(mean(i) - clean(i)) <= 0.02 * clean(i));
    }
    CHECK(active > 10);

    const auto masks = draw_masks<double>(cfg, seeds_for(n, 10));
    const double kept = (masks[0].array() > 0).cast<double>().mean();
    CHECK(kept == doctest::Approx(0.7).epsilon(0.01));
    CHECK(masks[0].maxCoeff() == doctest::Approx(1.0 / 0.7));
}

TEST_CASE("gradients match finite differences")
{
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::Index in = 2 + trial % 4;
        std::vector<Eigen::Index> widths;
        for (int l = 0; l < 1 + trial % 3; ++l)
            widths.push_back(2 + (trial + l) % 7);
        const double rate = (trial % 2) ? 0.25 : 0.0;
        auto p = with_random_biases(init_params(small(in, widths, rate, 100 + trial)), 500 + trial);
        const Eigen::MatrixXd x = random_matrix(in, 5, 200 + trial);
        const Eigen::MatrixXd t = random_matrix(2, 5, 300 + trial, 0.5);
        const auto seeds = seeds_for(5, 400 + trial);

        const auto lg = backward(p, x, t, nll(), Mode::train, seeds);
        auto f = [&](const Eigen::VectorXd &v) {
            auto q = p;
            oracle::unflatten(v, q);
            return mdn::batch_nll(forward(q, x, Mode::train, seeds), t, nullptr);
        };
        const Eigen::VectorXd fd = oracle::finite_difference(f, oracle::flatten(p), 1e-6);
        const Eigen::VectorXd an = oracle::flatten(lg.grads);
        const Eigen::ArrayXd denom = fd.cwiseAbs().cwiseMax(an.cwiseAbs()).array().max(1e-6);
        CHECK(((fd - an).array().abs() / denom).maxCoeff() < 1e-4);
        CHECK(lg.loss == doctest::Approx(f(oracle::flatten(p))).epsilon(1e-14));
    }
}

TEST_CASE("duplicated batch leaves the mean gradient unchanged")
{
    auto p = init_params(small(3, {6, 4}, 0.0, 5));
    const Eigen::MatrixXd x = random_matrix(3, 4, 6);
    const Eigen::MatrixXd t = random_matrix(2, 4, 7, 0.5);
    Eigen::MatrixXd x2(3, 8), t2(2, 8);
    x2 << x, x;
    t2 << t, t;
    const auto a = backward(p, x, t, nll(), Mode::eval);
    const auto b = backward(p, x2, t2, nll(), Mode::eval);
    CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-14));
    CHECK((oracle::flatten(a.grads) - oracle::flatten(b.grads)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("gradient clipping")
{
    auto p = init_params(small(1, {2}, 0.0, 1));
    auto g = p.zeros_like();
    g.layers[0].weight << 0.5, -2.0;
    g.layers[0].bias << 1.0, -1.0;
    g.layers[1].weight.setConstant(0.25);
    clip_gradients(g, 1.0);
    CHECK(g.layers[0].weight(0, 0) == 0.5);
    CHECK(g.layers[0].weight(1, 0) == -1.0);
    CHECK(g.layers[0].bias(0) == 1.0);
    CHECK(g.layers[0].bias(1) == -1.0);
    CHECK(g.layers[1].weight.isConstant(0.25));
}

TEST_CASE("adam")
{
    auto p = init_params(small(3, {4}, 0.0, 2));
    const auto start = oracle::flatten(p);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    auto g = p.zeros_like();
    Eigen::VectorXd gv = random_matrix(start.size(), 1, 3);
    oracle::unflatten(gv, g);
    auto state = AdamState::for_params(p);
    adam_step(p, g, cfg, state, 1);
    const Eigen::VectorXd step = oracle::flatten(p) - start;
    for (Eigen::Index i = 0; i < step.size(); ++i) {
        const double expect = -cfg.learning_rate * gv(i) / (std::abs(gv(i)) + cfg.adam_eps);
        REQUIRE(step(i) == doctest::Approx(expect).epsilon(1e-9));
    }

    auto q = init_params(small(3, {4}, 0.0, 2));
    auto s2 = AdamState::for_params(q);
    adam_step(q, q.zeros_like(), cfg, s2, 1);
    CHECK(oracle::flatten(q) == start);

    auto r = init_params(small(3, {4}, 0.0, 2));
    auto s3 = AdamState::for_params(r);
    adam_step(r, g, cfg, s3, 1);
    CHECK(oracle::flatten(r) == oracle::flatten(p));
    CHECK_THROWS(adam_step(r, g, cfg, s3, 0));
}

TEST_CASE("training")
{
    const auto train_set = toy_set(20, 1);
    const auto val_set = toy_set(10, 2);
    MlpConfig m = small(4, {16, 8}, 0.0, 3);
    m.init_std = 0.3;
    TrainConfig t;
    t.batch_size = 8;
    t.max_epochs = 60;
    t.patience = 60;
    t.learning_rate = 3e-3;
    t.seed = 4;

    const double before = evaluate_loss(init_params(m), train_set, nll());
    const auto r = train(m, t, train_set, val_set, nll());
    CHECK(r.history.size() == 60);
    CHECK(evaluate_loss(r.params, train_set, nll()) < before);

    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    for (const auto &h : r.history)
        if (h.val_loss < best) {
            best = h.val_loss;
            best_epoch = h.epoch;
        }
    CHECK(r.best_epoch == best_epoch);
    CHECK(evaluate_loss(r.params, val_set, nll()) == best);

    const auto again = train(m, t, train_set, val_set, nll());
    CHECK(history_to_csv(again.history) == history_to_csv(r.history));
    CHECK(oracle::flatten(again.params) == oracle::flatten(r.params));

    t.patience = 0;
    const auto quick = train(m, t, train_set, val_set, nll());
    const auto &h = quick.history;
    REQUIRE(h.size() >= 2);
    for (std::size_t i = 1; i + 1 < h.size(); ++i)
        CHECK(h[i].val_loss < h[i - 1].val_loss);
    CHECK(h.back().val_loss >= h[h.size() - 2].val_loss);

    MlpConfig dm = m;
    dm.dropout_rate = 0.2;
    dm.dropout_layers = {1, 2};
    t.patience = 5;
    t.max_epochs = 10;
    const auto d1 = train(dm, t, train_set, val_set, nll());
    const auto d2 = train(dm, t, train_set, val_set, nll());
    CHECK(oracle::flatten(d1.params) == oracle::flatten(d2.params));
}

TEST_CASE("divergence is reported with context")
{
    const auto s = toy_set(12, 5);
    MlpConfig m = small(4, {6}, 0.0, 6);
    TrainConfig t;
    t.batch_size = 4;
    t.max_epochs = 3;
    t.patience = 3;
    int calls = 0;
    LossFn poisoned = [&](const Eigen::MatrixXd &raw, const Eigen::MatrixXd &tg, Eigen::MatrixXd *g) {
        if (g && ++calls == 5)
            throw std::domain_error("non-finite loss");
        return mdn::batch_nll(raw, tg, g);
    };
    CHECK_THROWS_WITH_AS(train(m, t, s, s, poisoned), doctest::Contains("epoch 2, batch 1"), TrainingError);

    auto p = init_params(m);
    p.layers[0].weight(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS(backward(p, s.inputs, s.targets, nll(), Mode::eval));
}

TEST_CASE("checkpoint round trip")
{
    MlpConfig m = small(4, {6, 3}, 0.1, 7);
    const auto p = init_params(m);
    NormalizationState norm;
    norm.delta_norm = 0.0123;
    norm.target_min = {1.5, -2};
    norm.target_max = {30.25, 8};
    const auto dir = std::filesystem::temp_directory_path() / "uqloc_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "m.manifest", p, norm);
    const auto c = load_checkpoint(dir / "m.manifest");
    CHECK(oracle::flatten(c.params) == oracle::flatten(p));
    CHECK(c.params.config.hidden_widths == m.hidden_widths);
    CHECK(c.params.config.dropout_rate == 0.1);
    CHECK(c.normalization.target_max == norm.target_max);
    CHECK(c.normalization.delta_norm == norm.delta_norm);

    std::filesystem::resize_file(dir / "m.bin", 16);
    CHECK_THROWS(load_checkpoint(dir / "m.manifest"));
    CHECK_THROWS(load_checkpoint(dir / "missing.manifest"));
    std::filesystem::remove_all(dir);
}
