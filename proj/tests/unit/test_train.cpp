#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "coopgen/coop_train.hpp"

using namespace coopgen;
using T64 = TensorT<double>;

namespace {

LayerSpec dense_layer(int units, const std::string& act = "none") {
    LayerSpec l;
    l.kind = "dense";
    l.units = units;
    l.activation = act;
    return l;
}

ArchDescriptor vec_energy_arch(std::int64_t dim, std::int64_t k, int units = 1,
                               std::vector<LayerSpec> post = {}) {
    ArchDescriptor a;
    a.variant = "cat2img_early";
    a.target_shape = {dim};
    a.cond_shape = {k};
    a.head = "none";
    a.energy_units = units;
    a.post = std::move(post);
    return a;
}

ArchDescriptor vec_generator_arch(std::int64_t dim, std::int64_t k, int latent, std::vector<LayerSpec> post,
                                  const std::string& head = "none") {
    ArchDescriptor a;
    a.variant = "cat2img_early";
    a.target_shape = {dim};
    a.cond_shape = {k};
    a.latent_dim = latent;
    a.head = head;
    a.post = std::move(post);
    return a;
}

T64 onehot(std::int64_t n, std::int64_t k, std::int64_t hot) {
    T64 c({n, k});
    for (std::int64_t i = 0; i < n; ++i) c.at2(i, hot) = 1.0;
    return c;
}

double param_distance(const NamedTensors<double>& a, const NamedTensors<double>& b) {
    double d = 0;
    for (const auto& [name, t] : a) {
        const auto& o = b.at(name);
        for (std::int64_t i = 0; i < t.numel(); ++i) d = std::max(d, std::abs(t[i] - o[i]));
    }
    return d;
}

}  // namespace

TEST_CASE("adam leaves parameters alone on zero gradients") {
    NamedTensors<double> params{{"w", T64::from_data({2}, {1.0, -2.0})}};
    auto st = AdamState<double>::init_like(params);
    adam_step(params, {{"w", T64({2})}}, st, {0.1, 0.9, 0.999, 1e-8});
    CHECK(params.at("w")[0] == 1.0);
    CHECK(params.at("w")[1] == -2.0);
    CHECK(st.t == 1);
}

TEST_CASE("adam single scalar step matches hand arithmetic") {
    NamedTensors<double> params{{"w", T64::from_data({1}, {1.0})}};
    auto st = AdamState<double>::init_like(params);
    const double g = 0.5, lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    adam_step(params, {{"w", T64::from_data({1}, {g})}}, st, {lr, b1, b2, eps});
    const double m = (1 - b1) * g;
    const double v = (1 - b2) * g * g;
    const double mhat = m / (1 - b1);
    const double vhat = v / (1 - b2);
    const double want = 1.0 - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(params.at("w")[0] == doctest::Approx(want).epsilon(1e-15));

    // second step keeps the moments rolling
    adam_step(params, {{"w", T64::from_data({1}, {g})}}, st, {lr, b1, b2, eps});
    const double m2 = b1 * m + (1 - b1) * g;
    const double v2 = b2 * v + (1 - b2) * g * g;
    const double want2 = want - lr * (m2 / (1 - b1 * b1)) / (std::sqrt(v2 / (1 - b2 * b2)) + eps);
    CHECK(params.at("w")[0] == doctest::Approx(want2).epsilon(1e-14));
}

TEST_CASE("solver gradient vanishes when refined equals observed") {
    RngStream rng(1);
    auto model = EnergyModel<double>::make(vec_energy_arch(3, 2, 4, {dense_layer(6, "tanh")}), rng, 0.5, 0.5);
    T64 y = T64::randn({5, 3}, rng);
    auto g = solver_grad(y, y, onehot(5, 2, 0), model);
    for (const auto& [name, t] : g) CHECK(t.max_abs() == 0.0);
}

TEST_CASE("linear-head solver gradient is the moment difference") {
    // f = w . [Y;C]: the gradient of mean f(obs) - mean f(ref) in w is the
    // difference of the average sufficient statistics
    RngStream rng(2);
    auto model = EnergyModel<double>::make(vec_energy_arch(2, 2, 1), rng, 0.5);
    T64 obs = T64::randn({8, 2}, rng);
    T64 ref = T64::randn({8, 2}, rng);
    T64 c({8, 2});
    for (std::int64_t i = 0; i < 8; ++i) c.at2(i, i % 2) = 1.0;
    double fo = 0, fr = 0;
    auto g = solver_grad(obs, ref, c, model, &fo, &fr);
    const auto& gw = g.at("f.head.w");
    for (std::int64_t j = 0; j < 2; ++j) {
        double want = 0;
        for (std::int64_t i = 0; i < 8; ++i) want += (obs.at2(i, j) - ref.at2(i, j)) / 8.0;
        CHECK(gw[j] == doctest::Approx(want).epsilon(1e-12));
    }
    for (std::int64_t j = 0; j < 2; ++j) {
        double want = 0;
        for (std::int64_t i = 0; i < 8; ++i) want += (c.at2(i, j) - c.at2(i, j)) / 8.0;
        CHECK(gw[2 + j] == doctest::Approx(want).epsilon(1e-12));
    }
    CHECK(std::isfinite(fo));
    CHECK(std::isfinite(fr));
}

TEST_CASE("solver gradient matches finite differences of the value difference") {
    RngStream rng(3);
    auto model = EnergyModel<double>::make(vec_energy_arch(2, 2, 3, {dense_layer(5, "tanh")}), rng, 0.4, 0.5);
    T64 obs = T64::randn({4, 2}, rng);
    T64 ref = T64::randn({4, 2}, rng);
    T64 c = onehot(4, 2, 1);
    auto g = solver_grad(obs, ref, c, model);

    auto value_diff = [&](const EnergyModel<double>& m) {
        return (m.energy(obs, c, false).sum() - m.energy(ref, c, false).sum()) / 4.0;
    };
    const double step = 1e-6;
    for (auto& [name, grad] : g) {
        for (std::int64_t i = 0; i < grad.numel(); ++i) {
            EnergyModel<double> mp = model, mm = model;
            mp.params.at(name)[i] += step;
            mm.params.at(name)[i] -= step;
            const double fd = (value_diff(mp) - value_diff(mm)) / (2 * step);
            const double rel = std::abs(grad[i] - fd) / std::max({std::abs(grad[i]), std::abs(fd), 1e-8});
            CHECK(rel < 1e-4);
        }
    }
}

TEST_CASE("initializer gradient vanishes at a perfect fit") {
    RngStream rng(4);
    auto model = GeneratorModel<double>::make(vec_generator_arch(3, 2, 2, {dense_layer(3)}), rng, 0.0, 0.5);
    auto z = model.sample_latent(6, rng);
    T64 c = onehot(6, 2, 0);
    T64 target = model.mean_map(z, c);
    double l2 = 1;
    auto g = initializer_grad(z, c, target, model, nullptr, 0.0, &l2);
    CHECK(l2 == 0.0);
    for (const auto& [name, t] : g) CHECK(t.max_abs() == 0.0);
}

TEST_CASE("scalar linear initializer gradient matches least squares") {
    RngStream rng(5);
    auto model = GeneratorModel<double>::make(vec_generator_arch(1, 1, 1, {dense_layer(1)}), rng, 0.0);
    model.params.at("g.post0.w") = T64::from_data({1, 2}, {0.8, 0.0});
    model.params.at("g.post0.b").fill(0.0);
    const std::int64_t n = 7;
    Latent<double> z;
    z.x = T64::randn({n, 1}, rng);
    z.has_x = true;
    T64 c = onehot(n, 1, 0);
    T64 ytilde = T64::randn({n, 1}, rng);
    auto g = initializer_grad(z, c, ytilde, model, nullptr, 0.0);
    // d/dw (1/n) sum (w x_i - y_i)^2 = (2/n) sum (w x_i - y_i) x_i
    double want = 0;
    for (std::int64_t i = 0; i < n; ++i) want += 2.0 / n * (0.8 * z.x[i] - ytilde[i]) * z.x[i];
    CHECK(g.at("g.post0.w")[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("l1 ground-truth term only enters when requested") {
    RngStream rng(6);
    auto model = GeneratorModel<double>::make(vec_generator_arch(2, 1, 1, {dense_layer(2)}), rng, 0.0, 0.5);
    Latent<double> z;
    z.x = T64::randn({4, 1}, rng);
    z.has_x = true;
    T64 c = onehot(4, 1, 0);
    T64 ytilde = T64::randn({4, 2}, rng);
    T64 truth = T64::randn({4, 2}, rng);
    auto g0 = initializer_grad(z, c, ytilde, model, nullptr, 0.0);
    auto g1 = initializer_grad(z, c, ytilde, model, &truth, 0.0);  // zero weight: same
    CHECK(param_distance(g0, g1) == 0.0);
    double l1 = 0;
    auto g2 = initializer_grad(z, c, ytilde, model, &truth, 100.0, nullptr, &l1);
    CHECK(l1 > 0);
    CHECK(param_distance(g0, g2) > 0);
}

TEST_CASE("degenerate step: no refinement, no residual noise, perfect map") {
    // l = 0 and sigma = 0: the refined batch equals the initial batch, so the
    // mapping-shift gradient is exactly zero.
    RngStream rng(7);
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.langevin.steps = 0;
    cfg.solver_opt.lr = 0.01;
    cfg.init_opt.lr = 0.01;
    auto state = TrainState<double>::make(vec_generator_arch(2, 2, 2, {dense_layer(2)}),
                                          vec_energy_arch(2, 2, 2, {dense_layer(4, "tanh")}), 0.0, 0.5, 11);
    auto before = state.generator.params;
    T64 y = T64::randn({4, 2}, state.rng);
    T64 c = onehot(4, 2, 0);
    auto stats = train_step(y, c, state, cfg, cfg.langevin);
    CHECK(stats.init_loss == 0.0);
    CHECK(param_distance(before, state.generator.params) == 0.0);  // zero grad, zero moments
    CHECK(stats.f_observed_mean != stats.f_refined_mean);          // solver still learns
}

TEST_CASE("objective shift moves the value difference upward") {
    RngStream rng(8);
    auto model = EnergyModel<double>::make(vec_energy_arch(2, 2, 3, {dense_layer(6, "tanh")}), rng, 0.4, 0.5);
    T64 obs = T64::randn({6, 2}, rng);
    T64 ref = T64::randn({6, 2}, rng);
    T64 c = onehot(6, 2, 0);
    auto diff = [&](const EnergyModel<double>& m) {
        return (m.energy(obs, c, false).sum() - m.energy(ref, c, false).sum()) / 6.0;
    };
    auto g = solver_grad(obs, ref, c, model);
    const double before = diff(model);
    EnergyModel<double> after = model;
    for (auto& [name, t] : after.params) t.add_scaled(g.at(name), 1e-3);
    CHECK(diff(after) >= before);
}

TEST_CASE("mapping shift strictly decreases the regression loss") {
    RngStream rng(9);
    auto model = GeneratorModel<double>::make(vec_generator_arch(2, 2, 2, {dense_layer(4, "tanh"), dense_layer(2)}),
                                              rng, 0.0, 0.5);
    auto z = model.sample_latent(5, rng);
    T64 c = onehot(5, 2, 1);
    T64 ytilde = T64::randn({5, 2}, rng);
    double loss_before = 0;
    auto g = initializer_grad(z, c, ytilde, model, nullptr, 0.0, &loss_before);
    GeneratorModel<double> after = model;
    for (auto& [name, t] : after.params) t.add_scaled(g.at(name), -1e-3);
    double loss_after = 0;
    initializer_grad(z, c, ytilde, after, nullptr, 0.0, &loss_after);
    CHECK(loss_after < loss_before);
}

TEST_CASE("latent reuse: the traced latents replay the initial solution") {
    RngStream rng(10);
    TrainConfig cfg;
    cfg.batch_size = 3;
    cfg.langevin.steps = 4;
    cfg.langevin.step_size = 0.02;
    auto state = TrainState<double>::make(vec_generator_arch(2, 2, 2, {dense_layer(3, "tanh"), dense_layer(2)}),
                                          vec_energy_arch(2, 2, 2, {dense_layer(4, "tanh")}), 0.0, 0.5, 21);
    auto gen_before = state.generator;  // value copy: params before the alpha update
    T64 y = T64::randn({3, 2}, state.rng);
    T64 c = onehot(3, 2, 1);
    StepTrace<double> trace;
    train_step(y, c, state, cfg, cfg.langevin, &trace);
    // sigma = 0: Yhat is exactly the mean map of the recorded latents
    CHECK(gen_before.mean_map(trace.latents, c) == trace.y_init);
}

TEST_CASE("training is reproducible and T=0 is a no-op") {
    ToySpec spec;
    spec.family = "gauss_mix";
    spec.k = 2;
    spec.dim = 2;
    spec.means = {{0.5, 0.5}, {-0.5, -0.5}};
    spec.class_std = 0.1;
    spec.seed = 3;
    auto toy = generate_toy<double>(spec, 64);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.langevin.steps = 3;
    cfg.langevin.step_size = 0.05;
    cfg.solver_opt.lr = 0.005;
    cfg.init_opt.lr = 0.005;

    auto run = [&]() {
        auto st = TrainState<double>::make(vec_generator_arch(2, 2, 2, {dense_layer(8, "tanh"), dense_layer(2)}),
                                           vec_energy_arch(2, 2, 2, {dense_layer(8, "tanh")}), 0.3, 0.5, 42);
        train(toy.data, st, cfg);
        return st;
    };
    auto a = run();
    auto b = run();
    CHECK(param_distance(a.generator.params, b.generator.params) == 0.0);
    CHECK(param_distance(a.energy.params, b.energy.params) == 0.0);
    CHECK(a.rng.serialize() == b.rng.serialize());
    CHECK(a.epoch == 2);

    TrainConfig zero = cfg;
    zero.epochs = 0;
    auto st0 = TrainState<double>::make(vec_generator_arch(2, 2, 2, {dense_layer(8, "tanh"), dense_layer(2)}),
                                        vec_energy_arch(2, 2, 2, {dense_layer(8, "tanh")}), 0.3, 0.5, 42);
    auto params0 = st0.generator.params;
    train(toy.data, st0, zero);
    CHECK(param_distance(st0.generator.params, params0) == 0.0);
    CHECK(st0.epoch == 0);
}

TEST_CASE("chain count must match the batch size") {
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.chain_count = 4;
    cfg.langevin.steps = 1;
    cfg.langevin.step_size = 0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.chain_count = 8;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("standalone initializer training recovers a linear-Gaussian factor") {
    // true process: scalar latent, Y = w* x + eps in R^2
    const double wstar0 = 0.9, wstar1 = -0.6, sigma = 0.3;
    RngStream rng(31);
    const std::int64_t n = 600;
    CondDataset<double> data;
    data.cond_onehot = true;
    data.num_classes = 1;
    data.targets = T64({n, 2});
    data.conditions = T64({n, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = rng.normal();
        data.targets.at2(i, 0) = wstar0 * x + sigma * rng.normal();
        data.targets.at2(i, 1) = wstar1 * x + sigma * rng.normal();
        data.conditions.at2(i, 0) = 1.0;
    }

    // closed-form single-factor MLE with known isotropic noise:
    // w = u1 * sqrt(lambda1 - sigma^2) from the sample covariance
    double s00 = 0, s01 = 0, s11 = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        s00 += data.targets.at2(i, 0) * data.targets.at2(i, 0);
        s01 += data.targets.at2(i, 0) * data.targets.at2(i, 1);
        s11 += data.targets.at2(i, 1) * data.targets.at2(i, 1);
    }
    s00 /= n;
    s01 /= n;
    s11 /= n;
    const double tr = s00 + s11, det = s00 * s11 - s01 * s01;
    const double lam1 = tr / 2 + std::sqrt(tr * tr / 4 - det);
    double u0 = s01, u1 = lam1 - s00;
    const double un = std::sqrt(u0 * u0 + u1 * u1);
    u0 /= un;
    u1 /= un;
    const double scale = std::sqrt(std::max(lam1 - sigma * sigma, 0.0));
    const double mle0 = u0 * scale, mle1 = u1 * scale;

    auto model = GeneratorModel<double>::make(vec_generator_arch(2, 1, 1, {dense_layer(2)}), rng, sigma, 0.3);
    LangevinConfig inf;
    inf.steps = 25;
    inf.step_size = 0.15;
    std::vector<double> losses;
    train_initializer_alone(data, model, inf, 250, 64, {0.02, 0.9, 0.999, 1e-8}, rng,
                            [&](std::int64_t, double l) { losses.push_back(l); });

    const double w0 = model.params.at("g.post0.w").at2(0, 0);
    const double w1 = model.params.at("g.post0.w").at2(1, 0);
    // identifiable up to sign
    const double err_plus = std::hypot(w0 - mle0, w1 - mle1);
    const double err_minus = std::hypot(w0 + mle0, w1 + mle1);
    const double rel = std::min(err_plus, err_minus) / std::hypot(mle0, mle1);
    CHECK(rel < 0.10);

    // reconstruction loss trends down (first window of 10 vs last window)
    REQUIRE(losses.size() >= 20);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) head += losses[static_cast<std::size_t>(i)];
    for (int i = 0; i < 10; ++i) tail += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
    CHECK(tail < head);
}

TEST_CASE("zero inference steps degenerate to regression on prior draws") {
    RngStream rng(32);
    CondDataset<double> data;
    data.cond_onehot = true;
    data.num_classes = 1;
    data.targets = T64::randn({64, 2}, rng);
    data.conditions = T64::full({64, 1}, 1.0);
    auto model = GeneratorModel<double>::make(vec_generator_arch(2, 1, 2, {dense_layer(2)}), rng, 0.5, 0.3);
    LangevinConfig inf;
    inf.steps = 0;
    std::vector<double> losses;
    train_initializer_alone(data, model, inf, 30, 32, {0.05, 0.9, 0.999, 1e-8}, rng,
                            [&](std::int64_t, double l) { losses.push_back(l); });
    CHECK(losses.back() < losses.front());
}

TEST_CASE("noise annealing disables the Langevin noise at the configured epoch") {
    ToySpec spec;
    spec.family = "gauss_mix";
    spec.k = 1;
    spec.dim = 1;
    spec.means = {{0.0}};
    spec.class_std = 0.1;
    spec.seed = 4;
    auto toy = generate_toy<double>(spec, 8);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.langevin.steps = 2;
    cfg.langevin.step_size = 0.01;
    cfg.solver_opt.lr = 0;
    cfg.init_opt.lr = 0;

    auto run = [&](TrainConfig c) {
        auto st = TrainState<double>::make(vec_generator_arch(1, 1, 1, {dense_layer(1)}),
                                           vec_energy_arch(1, 1, 1), 0.0, 0.0, 5);
        train(toy.data, st, c);
        return st.rng.serialize();
    };

    // annealing from epoch 0 consumes exactly the draws of a noise-free run
    TrainConfig annealed = cfg;
    annealed.noise_anneal_epoch = 0;
    TrainConfig noiseless = cfg;
    noiseless.langevin.noise_enabled = false;
    TrainConfig noisy = cfg;
    CHECK(run(annealed) == run(noiseless));
    CHECK(run(annealed) != run(noisy));

    // annealing at epoch 1 sits strictly between the two
    TrainConfig mid = cfg;
    mid.noise_anneal_epoch = 1;
    CHECK(run(mid) != run(noisy));
    CHECK(run(mid) != run(annealed));
}
