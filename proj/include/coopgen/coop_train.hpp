#pragma once

#include <chrono>
#include <type_traits>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "coopgen/data.hpp"
#include "coopgen/langevin.hpp"
#include "coopgen/models.hpp"

namespace coopgen {

struct AdamConfig {
    double lr = 0.002;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    NamedTensors<T> m, v;
    std::int64_t t = 0;

    static AdamState init_like(const NamedTensors<T>& params) {
        AdamState s;
        for (const auto& [name, p] : params) {
            s.m.emplace(name, TensorT<T>(p.shape()));
            s.v.emplace(name, TensorT<T>(p.shape()));
        }
        return s;
    }
};

// One Adam descent update with bias correction. Ascent callers negate the
// gradient.
template <typename T>
void adam_step(NamedTensors<T>& params, const NamedTensors<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw ShapeError("adam_step: missing gradient for '" + name + "'");
        const TensorT<T>& g = git->second;
        TensorT<T>& m = state.m.at(name);
        TensorT<T>& v = state.v.at(name);
        if (!p.same_shape(g) || !p.same_shape(m)) throw ShapeError("adam_step: shape mismatch for '" + name + "'");
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
            v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// Ascent gradient of (1/n) sum f(Y_i,C_i) - (1/n) sum f(Ytilde_i,C_i) with
// respect to the solver parameters. The reference term carries no theta and
// cancels from this difference.
template <typename T>
NamedTensors<T> solver_grad(const TensorT<T>& observed, const TensorT<T>& refined, const TensorT<T>& C,
                            const EnergyModel<T>& model, double* f_obs_mean = nullptr,
                            double* f_ref_mean = nullptr) {
    if (observed.dim(0) != refined.dim(0) || observed.dim(0) != C.dim(0))
        throw ShapeError("solver_grad: batch size mismatch");
    const std::int64_t n = observed.dim(0);
    const auto wrt = model.graph.param_names();
    const TensorT<T> plus = TensorT<T>::full({n}, T(1) / static_cast<T>(n));
    const TensorT<T> minus = TensorT<T>::full({n}, -T(1) / static_cast<T>(n));

    Tape<T> tape_obs = model.forward(observed, C);
    NamedTensors<T> grad = backprop(tape_obs, "f", plus, wrt);
    if (f_obs_mean) *f_obs_mean = tape_obs.output("f").sum() / static_cast<double>(n);

    Tape<T> tape_ref = model.forward(refined, C);
    NamedTensors<T> neg = backprop(tape_ref, "f", minus, wrt);
    if (f_ref_mean) *f_ref_mean = tape_ref.output("f").sum() / static_cast<double>(n);

    for (auto& [name, g] : grad) g.add_scaled(neg.at(name), T(1));
    return grad;
}

// Descent gradient of the mapping-shift objective
//   (1/n) sum |Ytilde_i - g(Xhat_i, C_i)|^2
//   + l1_weight * (1/n) sum |Y_i - g(Xhat_i, C_i)|_1        (when given)
// evaluated with exactly the latents (or dropout masks) that produced the
// initial solutions.
template <typename T>
NamedTensors<T> initializer_grad(const Latent<T>& latents, const TensorT<T>& C, const TensorT<T>& refined,
                                 const GeneratorModel<T>& model,
                                 std::type_identity_t<const TensorT<T>*> ground_truth, double l1_weight,
                                 double* l2_loss = nullptr, double* l1_loss = nullptr) {
    const std::int64_t n = refined.dim(0);
    if (latents.batch() != n || C.dim(0) != n) throw ShapeError("initializer_grad: batch size mismatch");
    if (ground_truth && ground_truth->dim(0) != n) throw ShapeError("initializer_grad: ground truth batch mismatch");

    Tape<T> tape = model.forward(latents, C);
    const TensorT<T>& g = tape.output("Y");
    if (!g.same_shape(refined)) throw ShapeError("initializer_grad: refined batch shape mismatch");

    TensorT<T> seed(g.shape());
    double l2 = 0, l1 = 0;
    for (std::int64_t i = 0; i < g.numel(); ++i) {
        const T r = g[i] - refined[i];
        l2 += static_cast<double>(r) * static_cast<double>(r);
        seed[i] = T(2) * r / static_cast<T>(n);
    }
    if (ground_truth && l1_weight > 0) {
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T r = g[i] - (*ground_truth)[i];
            l1 += std::abs(static_cast<double>(r));
            const T s = r > T(0) ? T(1) : (r < T(0) ? T(-1) : T(0));
            seed[i] += static_cast<T>(l1_weight) * s / static_cast<T>(n);
        }
    }
    if (l2_loss) *l2_loss = l2 / static_cast<double>(n);
    if (l1_loss) *l1_loss = l1 / static_cast<double>(n);
    return backprop(tape, "Y", seed, model.graph.param_names());
}

struct TrainConfig {
    int epochs = 1;       // learning iterations T over the dataset
    int batch_size = 64;  // one Langevin chain per conditioned example
    int chain_count = 0;  // 0: same as batch_size
    AdamConfig solver_opt{0.002, 0.5, 0.999, 1e-8};
    AdamConfig init_opt{0.0001, 0.5, 0.999, 1e-8};
    LangevinConfig langevin;
    double l1_weight = 0.0;
    int noise_anneal_epoch = -1;  // >= 0: noise disabled from this epoch on
    std::uint64_t seed = 0;
    int checkpoint_every = 1;
    // Recovery tasks: per-sample update mask (1 = free). When set, the
    // initial solution keeps the condition's observed pixels and the
    // refinement only moves coordinates inside the mask.
    TensorT<double> sample_mask;

    void validate() const {
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (chain_count != 0 && chain_count != batch_size)
            throw ConfigError("train: chain count must equal batch size (one chain per example)");
        if (l1_weight < 0) throw ConfigError("train: l1_weight must be >= 0");
        if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
        langevin.validate();
    }
};

struct StepStats {
    double f_observed_mean = 0;
    double f_refined_mean = 0;
    double solver_grad_norm = 0;
    double init_loss = 0;
    double wall_ms = 0;

    void check_finite() const {
        for (double v : {f_observed_mean, f_refined_mean, solver_grad_norm, init_loss, wall_ms})
            if (!std::isfinite(v)) throw NumericError("non-finite training statistic");
    }
};

template <typename T>
struct TrainState {
    EnergyModel<T> energy;
    GeneratorModel<T> generator;
    AdamState<T> adam_energy, adam_gen;
    std::int64_t epoch = 0;
    RngStream rng;

    static TrainState make(const ArchDescriptor& gen_arch, const ArchDescriptor& energy_arch, double sigma,
                           double ref_std, std::uint64_t seed) {
        TrainState s;
        s.rng = RngStream(seed);
        s.generator = GeneratorModel<T>::make(gen_arch, s.rng, sigma);
        s.energy = EnergyModel<T>::make(energy_arch, s.rng, ref_std);
        s.adam_energy = AdamState<T>::init_like(s.energy.params);
        s.adam_gen = AdamState<T>::init_like(s.generator.params);
        return s;
    }
};

// Optional capture of one iteration's intermediates (latents and the two
// sample stages), e.g. for replay checks and sample dumps.
template <typename T>
struct StepTrace {
    Latent<T> latents;
    TensorT<T> y_init;
    TensorT<T> y_refined;
};

// One cooperative iteration over a batch:
//   (i)   draw latents, map them to initial solutions Yhat = g(X,C) + eps
//   (ii)  refine by Langevin under the current energy
//   (iii) shift the objective: ascend mean f(obs) - mean f(refined)
//   (iv)  shift the mapping: regress g onto the refined solutions, reusing
//         the latents from (i) verbatim
template <typename T>
StepStats train_step(const TensorT<T>& batch_y, const TensorT<T>& batch_c, TrainState<T>& state,
                     const TrainConfig& cfg, const LangevinConfig& lcfg, StepTrace<T>* trace = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    StepStats stats;

    Latent<T> latents = state.generator.sample_latent(batch_y.dim(0), state.rng);
    TensorT<T> y_init = state.generator.generate(latents, batch_c, state.rng);
    LangevinConfig lcfg_local = lcfg;
    if (!cfg.sample_mask.empty()) {
        if (!batch_y.same_shape(batch_c))
            throw ShapeError("train_step: masked recovery requires target-shaped conditions");
        const std::int64_t row = shape_numel(cfg.sample_mask.shape());
        if (row != batch_y.numel() / batch_y.dim(0)) throw ShapeError("train_step: sample_mask shape mismatch");
        TensorT<double> tiled(batch_y.shape());
        for (std::int64_t i = 0; i < batch_y.dim(0); ++i)
            std::copy_n(cfg.sample_mask.data(), row, tiled.data() + i * row);
        for (std::int64_t i = 0; i < y_init.numel(); ++i)
            if (tiled[i] == 0.0) y_init[i] = batch_c[i];
        lcfg_local.update_mask = std::move(tiled);
    }
    TensorT<T> y_ref = refine(y_init, batch_c, state.energy, lcfg_local, state.rng);
    if (trace) {
        trace->latents = latents;
        trace->y_init = y_init;
        trace->y_refined = y_ref;
    }

    NamedTensors<T> g_theta =
        solver_grad(batch_y, y_ref, batch_c, state.energy, &stats.f_observed_mean, &stats.f_refined_mean);
    double norm2 = 0;
    for (auto& [name, g] : g_theta) {
        norm2 += g.squared_norm();
        g.scale_inplace(T(-1));  // ascent
    }
    stats.solver_grad_norm = std::sqrt(norm2);
    adam_step(state.energy.params, g_theta, state.adam_energy, cfg.solver_opt);

    const TensorT<T>* gt = cfg.l1_weight > 0 ? &batch_y : nullptr;
    NamedTensors<T> g_alpha =
        initializer_grad(latents, batch_c, y_ref, state.generator, gt, cfg.l1_weight, &stats.init_loss);
    adam_step(state.generator.params, g_alpha, state.adam_gen, cfg.init_opt);

    stats.wall_ms =
        std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(std::chrono::steady_clock::now() - t0)
            .count();
    stats.check_finite();
    return stats;
}

template <typename T>
struct TrainHooks {
    std::function<void(std::int64_t epoch, std::int64_t step, const StepStats&)> on_step;
    std::function<void(const TrainState<T>&, bool checkpoint_due)> on_epoch_end;
};

// Runs train_step over shuffled mini-batches for cfg.epochs epochs. Resuming
// is implicit: a state with epoch > 0 continues from there with its restored
// RNG, so an interrupted run replayed from a checkpoint is step-identical.
template <typename T>
void train(const CondDataset<T>& data, TrainState<T>& state, const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
    cfg.validate();
    if (data.size() < 1) throw ConfigError("train: empty dataset");
    const std::int64_t n = data.size();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));

    for (std::int64_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        LangevinConfig lcfg = cfg.langevin;
        if (cfg.noise_anneal_epoch >= 0 && epoch >= cfg.noise_anneal_epoch) {
            lcfg.noise_enabled = false;
            lcfg.mh_correction = false;
        }
        std::iota(idx.begin(), idx.end(), 0);
        for (std::int64_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[state.rng.uniform_int(i + 1)]);

        std::int64_t step = 0;
        for (std::int64_t at = 0; at < n; at += cfg.batch_size, ++step) {
            const std::int64_t take = std::min<std::int64_t>(cfg.batch_size, n - at);
            auto [by, bc] = data.slice({idx.data() + at, static_cast<std::size_t>(take)});
            StepStats stats = train_step(by, bc, state, cfg, lcfg);
            if (hooks.on_step) hooks.on_step(epoch, step, stats);
        }
        state.epoch = epoch + 1;
        const bool due = (state.epoch % cfg.checkpoint_every == 0) || state.epoch == cfg.epochs;
        if (hooks.on_epoch_end) hooks.on_epoch_end(state, due);
    }
}

// Standalone maximum-likelihood training of the initializer by alternating
// backprop: infer the latent by posterior Langevin (persistent across
// epochs), then descend the reconstruction loss.
template <typename T>
void train_initializer_alone(const CondDataset<T>& data, GeneratorModel<T>& model, const LangevinConfig& infer_cfg,
                             int epochs, int batch_size, const AdamConfig& opt, RngStream& rng,
                             std::function<void(std::int64_t, double)> on_epoch = {}) {
    if (model.uses_dropout_latent()) throw Error("train_initializer_alone: dropout-latent generators unsupported");
    const std::int64_t n = data.size();
    const std::int64_t d = model.arch.latent_dim;
    TensorT<T> latent_store = TensorT<T>::randn({n, d}, rng);
    AdamState<T> adam = AdamState<T>::init_like(model.params);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));

    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::iota(idx.begin(), idx.end(), 0);
        for (std::int64_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
        double loss_sum = 0;
        std::int64_t steps = 0;
        for (std::int64_t at = 0; at < n; at += batch_size, ++steps) {
            const std::int64_t take = std::min<std::int64_t>(batch_size, n - at);
            auto [by, bc] = data.slice({idx.data() + at, static_cast<std::size_t>(take)});
            TensorT<T> x0({take, d});
            for (std::int64_t i = 0; i < take; ++i)
                std::copy_n(latent_store.data() + idx[static_cast<std::size_t>(at + i)] * d, d, x0.data() + i * d);
            TensorT<T> x = infer_latent_x(by, bc, model, infer_cfg, std::move(x0), rng);
            for (std::int64_t i = 0; i < take; ++i)
                std::copy_n(x.data() + i * d, d, latent_store.data() + idx[static_cast<std::size_t>(at + i)] * d);

            Latent<T> z;
            z.x = std::move(x);
            z.has_x = true;
            double loss = 0;
            NamedTensors<T> grad = initializer_grad(z, bc, by, model, nullptr, 0.0, &loss);
            adam_step(model.params, grad, adam, opt);
            loss_sum += loss;
        }
        if (on_epoch) on_epoch(epoch, loss_sum / static_cast<double>(std::max<std::int64_t>(steps, 1)));
    }
}

}  // namespace coopgen
