#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mcl/nn.hpp"
#include "mcl/trainer.hpp"

using namespace mcl;

namespace {

// net that outputs exactly the given logits regardless of input
Mlp fixed_logit_net(int in_dim, std::vector<double> logits) {
    Mlp net;
    Linear l;
    l.in = in_dim;
    l.out = static_cast<int>(logits.size());
    l.w.assign(static_cast<std::size_t>(l.in) * logits.size(), 0.0);
    l.b = std::move(logits);
    net.layers.push_back(std::move(l));
    return net;
}

}  // namespace

TEST_CASE("mlp shapes and zero-weight output") {
    Rng rng(1);
    std::vector<int> dims = {5, 8, 8, 3};
    Mlp net = make_mlp(dims, rng);
    CHECK(net.in_dim() == 5);
    CHECK(net.out_dim() == 3);
    CHECK(net.param_count() == 5 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3);

    for (auto& l : net.layers) {
        std::fill(l.w.begin(), l.w.end(), 0.0);
        std::fill(l.b.begin(), l.b.end(), 0.0);
    }
    std::vector<double> x = {1.0, -2.0, 3.0, 0.5, -0.5};
    for (double v : mlp_forward(net, x)) CHECK(v == 0.0);
}

TEST_CASE("forward output is finite for random inputs") {
    Rng rng(2);
    std::vector<int> dims = {10, 16, 16, 4};
    Mlp net = make_mlp(dims, rng);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(10);
        for (auto& v : x) v = rng.uniform(-20.0, 20.0);
        for (double v : mlp_forward(net, x)) CHECK(std::isfinite(v));
    }
    std::vector<double> wrong(3, 0.0);
    CHECK_THROWS_AS(mlp_forward(net, wrong), ContractError);
}

TEST_CASE("backward matches finite differences on a linear functional") {
    Rng rng(3);
    std::vector<int> dims = {4, 6, 3};
    Mlp net = make_mlp(dims, rng);
    std::vector<double> x = {0.3, -0.7, 1.1, 0.2};
    std::vector<double> c = {0.5, -1.5, 2.0};  // loss = sum c_i y_i

    MlpCache cache;
    mlp_forward(net, x, &cache);
    MlpGrads grads(net);
    mlp_backward(net, cache, c, grads);

    std::vector<double> flat = flatten_params(net);
    const double h = 1e-6;
    std::size_t pos = 0;
    auto loss_at = [&](const std::vector<double>& params) {
        Mlp tmp = net;
        unflatten_params(tmp, params);
        auto y = mlp_forward(tmp, x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += c[i] * y[i];
        return s;
    };
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        for (std::size_t j = 0; j < net.layers[li].w.size(); ++j, ++pos) {
            std::vector<double> pp = flat, pm = flat;
            pp[pos] += h;
            pm[pos] -= h;
            double fd = (loss_at(pp) - loss_at(pm)) / (2 * h);
            CHECK(grads.w[li][j] == Catch::Approx(fd).margin(1e-6));
        }
        for (std::size_t j = 0; j < net.layers[li].b.size(); ++j, ++pos) {
            std::vector<double> pp = flat, pm = flat;
            pp[pos] += h;
            pm[pos] -= h;
            double fd = (loss_at(pp) - loss_at(pm)) / (2 * h);
            CHECK(grads.b[li][j] == Catch::Approx(fd).margin(1e-6));
        }
    }
}

TEST_CASE("adam minimizes a simple quadratic") {
    Mlp net = fixed_logit_net(1, {5.0});  // single bias parameter
    AdamState st(net.param_count());
    for (int it = 0; it < 3000; ++it) {
        MlpGrads g(net);
        g.b[0][0] = 2.0 * net.layers[0].b[0];  // d/db of b^2
        adam_step(net, g, st, 0.01, 0.9, 0.999, 1e-8);
    }
    CHECK(std::abs(net.layers[0].b[0]) < 1e-3);
}

TEST_CASE("flatten and unflatten round-trip") {
    Rng rng(4);
    std::vector<int> dims = {3, 5, 2};
    Mlp net = make_mlp(dims, rng);
    std::vector<double> flat = flatten_params(net);
    Mlp copy = net;
    for (auto& l : copy.layers) std::fill(l.w.begin(), l.w.end(), 0.0);
    unflatten_params(copy, flat);
    CHECK(flatten_params(copy) == flat);
}

TEST_CASE("greedy action breaks ties toward the lowest index") {
    Mlp uniform = fixed_logit_net(4, {0.0, 0.0, 0.0, 0.0});
    std::vector<double> obs(4, 0.3);
    CHECK(act(uniform, obs, ActMode::Greedy, nullptr).action == 0);

    Mlp peaked = fixed_logit_net(4, {0.0, 1e6, 0.0, 0.0});
    auto s = act(peaked, obs, ActMode::Greedy, nullptr);
    CHECK(s.action == 1);
    CHECK(std::exp(s.log_prob) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("greedy action is invariant to a shared logit shift") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> logits(8);
        for (auto& v : logits) v = rng.uniform(-3.0, 3.0);
        std::vector<double> shifted = logits;
        double shift = rng.uniform(-50.0, 50.0);
        for (auto& v : shifted) v += shift;
        Mlp a = fixed_logit_net(2, logits);
        Mlp b = fixed_logit_net(2, shifted);
        std::vector<double> obs = {0.0, 0.0};
        CHECK(act(a, obs, ActMode::Greedy, nullptr).action ==
              act(b, obs, ActMode::Greedy, nullptr).action);
    }
}

TEST_CASE("sampling is reproducible and follows the softmax weights") {
    Mlp net = fixed_logit_net(2, {0.0, std::log(3.0), 0.0});  // probs 0.2, 0.6, 0.2
    std::vector<double> obs = {0.0, 0.0};

    Rng r1(6), r2(6);
    for (int i = 0; i < 50; ++i)
        CHECK(act(net, obs, ActMode::Sample, &r1).action ==
              act(net, obs, ActMode::Sample, &r2).action);

    Rng rng(7);
    std::array<int, 3> counts{};
    const int n = 30000;
    for (int i = 0; i < n; ++i)
        counts[static_cast<std::size_t>(act(net, obs, ActMode::Sample, &rng).action)] += 1;
    CHECK(static_cast<double>(counts[1]) / n == Catch::Approx(0.6).margin(0.02));
    CHECK(static_cast<double>(counts[0]) / n == Catch::Approx(0.2).margin(0.02));
}

TEST_CASE("non-finite logits raise a numerical error") {
    Mlp net = fixed_logit_net(2, {0.0, std::numeric_limits<double>::quiet_NaN()});
    std::vector<double> obs = {0.0, 0.0};
    CHECK_THROWS_AS(act(net, obs, ActMode::Greedy, nullptr), NumericalError);
}
