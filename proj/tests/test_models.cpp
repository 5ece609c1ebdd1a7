#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dpa/harness/synthetic.hpp"
#include "dpa/models.hpp"
#include "support/oracles.hpp"
#include "support/test_functions.hpp"

using namespace dpa;
using namespace dpa::testing;

namespace {

ModelSpec mlp_spec(std::vector<std::size_t> widths, Activation act = Activation::relu) {
    ModelSpec s;
    s.layer_widths = widths;
    s.input_dim = widths.front();
    s.num_classes = widths.back();
    s.activation = act;
    return s;
}

Dataset tiny(std::vector<std::vector<double>> rows, std::vector<std::size_t> labels, std::size_t k) {
    std::vector<double> flat;
    for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    Dataset d;
    d.inputs = Tensor({rows.size(), rows.front().size()}, flat);
    d.labels = std::move(labels);
    d.num_classes = k;
    return d;
}

}  // namespace

TEST(InitModel, ParamCountAndDeterminism) {
    const ModelSpec spec = mlp_spec({2, 8, 2});
    EXPECT_EQ(spec.param_count(), 42u);
    const ModelState a = init_model(spec, 17);
    const ModelState b = init_model(spec, 17);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.params.numel(), 42u);
    EXPECT_NE(init_model(spec, 18).params, a.params);
}

TEST(InitModel, BiasesZeroAndWeightsWithinBound) {
    const ModelState m = init_model(mlp_spec({2, 8, 2}), 5);
    // layout: W1[8,2], b1[8], W2[2,8], b2[2]
    for (std::size_t i = 16; i < 24; ++i) EXPECT_EQ(m.params[i], 0.0);
    for (std::size_t i = 40; i < 42; ++i) EXPECT_EQ(m.params[i], 0.0);
    const double bound = std::sqrt(6.0 / 10.0);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_LE(std::abs(m.params[i]), bound);
}

TEST(InitModel, InvalidWidthsRejected) {
    ModelSpec s = mlp_spec({3, 4, 2});
    s.input_dim = 2;
    EXPECT_THROW(init_model(s, 0), ConfigError);
    EXPECT_THROW(init_model(mlp_spec({2, 0, 2}), 0), ConfigError);
    ModelSpec c = mlp_spec({2, 2});
    c.num_classes = 3;
    EXPECT_THROW(init_model(c, 0), ConfigError);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
    ModelState m = init_model(mlp_spec({3, 5, 4}), 1);
    for (double& p : m.params.values()) p = 0.0;
    const Tensor z = forward(m, Tensor::vector({0.2, 0.5, 0.9}));
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityAffine) {
    ModelState m = init_model(mlp_spec({2, 2}), 0);
    m.params = Tensor::vector({1, 0, 0, 1, 0, 0});
    const Tensor z = forward(m, Tensor::vector({0.3, -0.2}));
    EXPECT_EQ(z[0], 0.3);
    EXPECT_EQ(z[1], -0.2);
}

TEST(Forward, BatchShapeAndRowsMatchSingles) {
    const ModelState m = random_tanh_mlp(4, 3, 2);
    const Tensor batch({5, 4}, std::vector<double>(20, 0.25));
    const Tensor z = forward(m, batch);
    EXPECT_EQ(z.shape(), (Shape{5, 3}));
    const Tensor one = forward(m, Tensor::vector({0.25, 0.25, 0.25, 0.25}));
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(z.at(i, c), one[c]);
    EXPECT_THROW(forward(m, Tensor::vector({1, 2, 3})), ShapeError);
}

TEST(XentLoss, ClosedForms) {
    const std::vector<double> uniform(10, 0.7);
    EXPECT_NEAR(xent_loss(uniform, 4), std::log(10.0), 1e-15);
    const std::vector<double> big{1000.0, 0.0};
    EXPECT_NEAR(xent_loss(big, 0), 0.0, 1e-300);
    EXPECT_TRUE(std::isfinite(xent_loss(big, 1)));
    const std::vector<double> z{0.5, -0.5};
    EXPECT_NEAR(xent_loss(z, 1), std::log1p(std::exp(1.0)), 1e-15);
    EXPECT_NEAR(xent_loss(z, 1), 1.313262, 1e-6);
    EXPECT_THROW(xent_loss(z, 2), DomainError);
}

TEST(XentLoss, TapeAgreesWithDirectFormula) {
    const ModelState m = random_tanh_mlp(5, 4, 8);
    const Tensor x = Tensor::vector({0.1, 0.9, 0.4, 0.3, 0.6});
    for (std::size_t y = 0; y < 4; ++y) EXPECT_NEAR(ad::evaluate(InputLoss(m, y), x), loss_at(m, x, y), 1e-14);
}

TEST(SgdStep, PlainAndMomentum) {
    ModelState m = init_model(mlp_spec({1, 2}), 0);
    m.params = Tensor::vector({1.0, 0.0, 0.0, 0.0});
    TrainConfig plain;
    plain.learning_rate = 0.1;
    plain.momentum = 0.0;
    const ModelState a = sgd_step(m, Tensor::vector({2.0, 0, 0, 0}), plain);
    EXPECT_NEAR(a.params[0], 0.8, 1e-15);
    const ModelState z = sgd_step(m, Tensor({4}), plain);
    EXPECT_EQ(z.params, m.params);

    TrainConfig mom;
    mom.learning_rate = 0.1;
    mom.momentum = 0.9;
    m.params[0] = 0.0;
    const Tensor g = Tensor::vector({1.0, 0, 0, 0});
    const ModelState s1 = sgd_step(m, g, mom);
    const ModelState s2 = sgd_step(s1, g, mom);
    EXPECT_NEAR(s1.params[0], -0.1, 1e-15);
    EXPECT_NEAR(s2.params[0], -0.29, 1e-15);
}

TEST(SgdStep, Errors) {
    const ModelState m = init_model(mlp_spec({1, 2}), 0);
    EXPECT_THROW(sgd_step(m, Tensor({3}), TrainConfig{}), ShapeError);
    try {
        sgd_step(m, Tensor::vector({0, 0, NAN, 0}), TrainConfig{});
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.index(), 2u);
    }
}

TEST(Accuracy, CountingCases) {
    // zero weights and a positive bias on class 0 → always class 0
    ModelState m = init_model(mlp_spec({1, 3}), 0);
    m.params = Tensor::vector({0, 0, 0, 1, 0, 0});
    std::vector<std::vector<double>> rows(10, {0.5});
    std::vector<std::size_t> labels{0, 0, 0, 0, 1, 1, 1, 2, 2, 2};
    EXPECT_DOUBLE_EQ(accuracy(m, tiny(rows, labels, 3)), 0.4);
    EXPECT_DOUBLE_EQ(accuracy(m, tiny({{0.1}}, {0}, 3)), 1.0);
    Dataset empty;
    empty.inputs = Tensor({1, 1});
    EXPECT_THROW(accuracy(m, empty), EvaluationError);
}

TEST(Accuracy, TiesGoToLowestIndex) {
    ModelState m = init_model(mlp_spec({1, 2}), 0);
    m.params = Tensor({4});
    EXPECT_DOUBLE_EQ(accuracy(m, tiny({{0.3}, {0.7}}, {0, 1}, 2)), 0.5);
}

TEST(Accuracy, HandSetSeparatorOnBlobs) {
    const Dataset blobs = harness::make_synthetic(harness::SyntheticKind::blobs, 200, 2, 3, {.dim = 2});
    // separator: logit difference along the line joining the class means
    std::vector<double> mean[2] = {{0, 0}, {0, 0}};
    std::size_t cnt[2] = {0, 0};
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        for (std::size_t j = 0; j < 2; ++j) mean[blobs.labels[i]][j] += blobs.row(i)[j];
        ++cnt[blobs.labels[i]];
    }
    for (int c = 0; c < 2; ++c)
        for (double& v : mean[c]) v /= double(cnt[c]);
    const double w0 = mean[1][0] - mean[0][0], w1 = mean[1][1] - mean[0][1];
    const double mid0 = 0.5 * (mean[0][0] + mean[1][0]), mid1 = 0.5 * (mean[0][1] + mean[1][1]);
    ModelState m = init_model(mlp_spec({2, 2}), 0);
    m.params = Tensor::vector({0, 0, w0, w1, 0, -(w0 * mid0 + w1 * mid1)});
    EXPECT_GE(accuracy(m, blobs), 0.99);
}

TEST(ParamGradient, MatchesFiniteDifferences) {
    for (Activation act : {Activation::tanh, Activation::relu}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            ModelState m = init_model(mlp_spec({4, 6, 5, 3}, act), seed);
            for (std::size_t i = 0; i < m.params.numel(); ++i)
                if (m.params[i] == 0.0) m.params[i] = 0.1 * double(i % 7) - 0.3;
            const Tensor x = Tensor::vector({0.2, 0.8, 0.5, 0.1});
            const Tensor g = param_gradient(m, x, seed % 3);
            const auto fd = fd_gradient(
                [&](const std::vector<double>& p) {
                    ModelState t = m;
                    t.params = Tensor::vector(p);
                    return loss_at(t, x, seed % 3);
                },
                m.params.values(), 1e-6);
            for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(g[i], fd[i], 1e-4 * (1 + std::abs(fd[i])));
        }
    }
}

TEST(ParamGradient, ConvMlpMatchesFiniteDifferences) {
    ModelSpec s;
    s.architecture = Architecture::conv_mlp;
    s.input_dim = 16;
    s.conv_channels = 2;
    s.conv_kernel = 3;
    s.layer_widths = {8, 5, 3};
    s.num_classes = 3;
    s.activation = Activation::tanh;
    ModelState m = init_model(s, 4);
    EXPECT_EQ(m.params.numel(), s.param_count());
    std::mt19937_64 rng(4);
    for (std::size_t i = 0; i < m.params.numel(); ++i)
        if (m.params[i] == 0.0) m.params[i] = 0.05 * double(i % 5);
    const Tensor x = random_vector(16, rng, 0, 1);
    const Tensor g = param_gradient(m, x, 1);
    const auto fd = fd_gradient(
        [&](const std::vector<double>& p) {
            ModelState t = m;
            t.params = Tensor::vector(p);
            return loss_at(t, x, 1);
        },
        m.params.values(), 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(g[i], fd[i], 1e-4 * (1 + std::abs(fd[i])));
    const Tensor gi = ad::grad_input(InputLoss(m, 1), x);
    const auto fdi = fd_gradient([&](const std::vector<double>& xx) { return loss_at(m, Tensor::vector(xx), 1); },
                                 x.values());
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(gi[i], fdi[i], 1e-4 * (1 + std::abs(fdi[i])));
}

TEST(LogitsJacobian, RowsMatchFiniteDifferences) {
    const ModelState m = random_tanh_mlp(5, 3, 6);
    const Tensor x = Tensor::vector({0.3, 0.1, 0.7, 0.5, 0.9});
    const auto [z, jac] = logits_jacobian(m, x);
    EXPECT_EQ(z, forward(m, x));
    for (std::size_t c = 0; c < 3; ++c) {
        const auto fd =
            fd_gradient([&](const std::vector<double>& xx) { return forward(m, Tensor::vector(xx))[c]; }, x.values());
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(jac.at(c, j), fd[j], 1e-6);
    }
}

TEST(Trainer, SeparableBlobsReachFloor) {
    const Dataset blobs = harness::make_synthetic(harness::SyntheticKind::blobs, 200, 2, 11, {.dim = 2});
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 20;
    const ModelState m = train_model(mlp_spec({2, 8, 2}), blobs, cfg, 1);
    EXPECT_GE(accuracy(m, blobs), 0.98);
}

TEST(Trainer, DeterministicAndBatchSizeChecked) {
    const Dataset blobs = harness::make_synthetic(harness::SyntheticKind::blobs, 40, 2, 2, {.dim = 3});
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    const ModelState a = train_model(mlp_spec({3, 4, 2}), blobs, cfg, 9);
    const ModelState b = train_model(mlp_spec({3, 4, 2}), blobs, cfg, 9);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.velocity, b.velocity);
    cfg.batch_size = 41;
    EXPECT_THROW(train_model(mlp_spec({3, 4, 2}), blobs, cfg, 9), ConfigError);
}
