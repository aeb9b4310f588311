#pragma once

#include <cmath>
#include <utility>

#include "coopgen/models.hpp"
#include "coopgen/rng.hpp"
#include "coopgen/tensor.hpp"

namespace coopgen {

// Langevin chain settings. `update_mask`, when nonempty, has the full state
// shape (batch included) with 1 marking coordinates that are free to move;
// everything else is left untouched bit-for-bit.
struct LangevinConfig {
    int steps = 0;
    double step_size = 0.0;
    bool noise_enabled = true;
    bool mh_correction = false;
    TensorT<double> update_mask;
    double divergence_bound = 1e3;

    void validate() const {
        if (steps < 0) throw ConfigError("langevin: steps must be >= 0");
        if (steps > 0 && step_size <= 0) throw ConfigError("langevin: step_size must be positive");
        if (mh_correction && !noise_enabled) throw ConfigError("langevin: mh_correction requires noise");
        if (divergence_bound <= 0) throw ConfigError("langevin: divergence_bound must be positive");
    }
};

namespace detail {

template <typename T>
void check_divergence(const TensorT<T>& y, double bound) {
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        const double v = static_cast<double>(y[i]);
        if (!std::isfinite(v) || std::abs(v) > bound)
            throw DivergenceError("langevin state exceeded bound " + std::to_string(bound) +
                                  " (diverging step size?)");
    }
}

// Row-wise softmax with max-shift.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
    const std::int64_t n = a.dim(0), k = a.numel() / a.dim(0);
    TensorT<T> c(a.shape());
    for (std::int64_t i = 0; i < n; ++i) {
        const T* ar = a.data() + i * k;
        T* cr = c.data() + i * k;
        T mx = ar[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, ar[j]);
        T z = 0;
        for (std::int64_t j = 0; j < k; ++j) {
            cr[j] = std::exp(ar[j] - mx);
            z += cr[j];
        }
        for (std::int64_t j = 0; j < k; ++j) cr[j] /= z;
    }
    return c;
}

}  // namespace detail

// Refines Y0 by `steps` iterations of
//   Y <- Y + (delta^2/2) d/dY [f(Y,C) - |Y|^2/(2 s^2)] + delta * noise,
// optionally with a Metropolis-Hastings correction per chain. Chains in the
// batch are independent.
template <typename T>
TensorT<T> refine(const TensorT<T>& y0, const TensorT<T>& C, const EnergyModel<T>& model, const LangevinConfig& cfg,
                  RngStream& rng) {
    cfg.validate();
    TensorT<T> y = y0;
    if (cfg.steps == 0) return y;
    const std::int64_t n = y.dim(0);
    const std::int64_t row = y.numel() / n;
    const T delta = static_cast<T>(cfg.step_size);
    const T half_d2 = delta * delta / T(2);

    const bool masked = !cfg.update_mask.empty();
    if (masked && cfg.update_mask.shape() != y.shape())
        throw ShapeError("refine: update_mask shape must match the state");
    auto free_coord = [&](std::int64_t i) { return !masked || cfg.update_mask[i] != 0.0; };

    TensorT<T> grad = model.energy_grad_y(y, C, true);
    TensorT<T> energy0;
    if (cfg.mh_correction) energy0 = model.energy(y, C, true);

    for (int step = 0; step < cfg.steps; ++step) {
        TensorT<T> noise;
        if (cfg.noise_enabled) noise = TensorT<T>::randn(y.shape(), rng);

        TensorT<T> prop = y;
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            if (!free_coord(i)) continue;
            T v = y[i] + half_d2 * grad[i];
            if (cfg.noise_enabled) v += delta * noise[i];
            prop[i] = v;
        }

        if (!cfg.mh_correction) {
            y = std::move(prop);
            detail::check_divergence(y, cfg.divergence_bound);
            grad = model.energy_grad_y(y, C, true);
            continue;
        }

        // MALA acceptance: N(y + (d^2/2) grad(y), d^2 I) proposals over the
        // free coordinates.
        TensorT<T> grad_prop = model.energy_grad_y(prop, C, true);
        TensorT<T> energy_prop = model.energy(prop, C, true);
        for (std::int64_t i = 0; i < n; ++i) {
            double log_fwd = 0, log_rev = 0;
            for (std::int64_t j = i * row; j < (i + 1) * row; ++j) {
                if (!free_coord(j)) continue;
                const double df = prop[j] - y[j] - half_d2 * grad[j];
                const double dr = y[j] - prop[j] - half_d2 * grad_prop[j];
                log_fwd += df * df;
                log_rev += dr * dr;
            }
            const double log_alpha = (energy_prop[i] - energy0[i]) + (log_fwd - log_rev) / (2.0 * delta * delta);
            if (std::log(rng.uniform() + 1e-300) < log_alpha) {
                for (std::int64_t j = i * row; j < (i + 1) * row; ++j)
                    if (free_coord(j)) y[j] = prop[j];
                energy0[i] = energy_prop[i];
            }
        }
        detail::check_divergence(y, cfg.divergence_bound);
        grad = model.energy_grad_y(y, C, true);
        energy0 = model.energy(y, C, true);
    }
    return y;
}

// Posterior sampling of the latent vector given (Y, C):
//   X <- X + (d^2/2) [ (Y - g(X,C))/sigma^2 . dg/dX - X ] + d * noise
template <typename T>
TensorT<T> infer_latent_x(const TensorT<T>& Y, const TensorT<T>& C, const GeneratorModel<T>& model,
                          const LangevinConfig& cfg, TensorT<T> x0, RngStream& rng) {
    cfg.validate();
    if (model.uses_dropout_latent())
        throw Error("infer_latent_x: latent inference is not defined for dropout-latent generators");
    if (model.arch.latent_dim <= 0) throw Error("infer_latent_x: generator has no latent vector");
    if (model.residual_std <= T(0)) throw Error("infer_latent_x: requires residual_std > 0");
    const T delta = static_cast<T>(cfg.step_size);
    const T half_d2 = delta * delta / T(2);
    const T inv_s2 = T(1) / (model.residual_std * model.residual_std);

    TensorT<T> x = std::move(x0);
    for (int step = 0; step < cfg.steps; ++step) {
        Latent<T> z;
        z.x = x;
        z.has_x = true;
        Tape<T> tape = model.forward(z, C);
        const TensorT<T>& gx = tape.output("Y");
        TensorT<T> seed = Y;
        seed.add_scaled(gx, -T(1));
        seed.scale_inplace(inv_s2);
        TensorT<T> drift = backprop(tape, "Y", seed, {"X"}).at("X");
        drift.add_scaled(x, -T(1));  // standard normal prior
        x.add_scaled(drift, half_d2);
        if (cfg.noise_enabled) {
            TensorT<T> noise = TensorT<T>::randn(x.shape(), rng);
            x.add_scaled(noise, delta);
        }
        detail::check_divergence(x, cfg.divergence_bound);
    }
    return x;
}

// Posterior sampling of the category condition through its softmax
// reparametrization: auxiliary A ~ N(0, I_K) a priori, C = softmax(A).
// Returns (A, C).
template <typename T>
std::pair<TensorT<T>, TensorT<T>> infer_category(const TensorT<T>& Y, const TensorT<T>& X,
                                                 const GeneratorModel<T>& model, const LangevinConfig& cfg,
                                                 TensorT<T> a0, RngStream& rng) {
    cfg.validate();
    if (!model.arch.cond_onehot || model.arch.cond_shape.size() != 1 || model.arch.cond_shape[0] < 2)
        throw Error("infer_category: generator condition is not categorical");
    if (model.residual_std <= T(0)) throw Error("infer_category: requires residual_std > 0");
    const std::int64_t k = model.arch.cond_shape[0];
    const std::int64_t n = a0.dim(0);
    const T delta = static_cast<T>(cfg.step_size);
    const T half_d2 = delta * delta / T(2);
    const T inv_s2 = T(1) / (model.residual_std * model.residual_std);

    TensorT<T> a = std::move(a0);
    for (int step = 0; step < cfg.steps; ++step) {
        TensorT<T> c = detail::softmax_rows(a);
        Latent<T> z;
        z.x = X;
        z.has_x = true;
        Tape<T> tape = model.forward(z, c);
        const TensorT<T>& gx = tape.output("Y");
        TensorT<T> seed = Y;
        seed.add_scaled(gx, -T(1));
        seed.scale_inplace(inv_s2);
        TensorT<T> grad_c = backprop(tape, "Y", seed, {"C"}).at("C");
        // chain rule through softmax: dL/da_j = c_j (dL/dc_j - sum_i c_i dL/dc_i)
        for (std::int64_t i = 0; i < n; ++i) {
            const T* cr = c.data() + i * k;
            T* gr = grad_c.data() + i * k;
            T inner = 0;
            for (std::int64_t j = 0; j < k; ++j) inner += cr[j] * gr[j];
            for (std::int64_t j = 0; j < k; ++j) gr[j] = cr[j] * (gr[j] - inner);
        }
        grad_c.add_scaled(a, -T(1));  // prior
        a.add_scaled(grad_c, half_d2);
        if (cfg.noise_enabled) {
            TensorT<T> noise = TensorT<T>::randn(a.shape(), rng);
            a.add_scaled(noise, delta);
        }
        detail::check_divergence(a, cfg.divergence_bound);
    }
    return {a, detail::softmax_rows(a)};
}

template <typename T>
struct GibbsResult {
    TensorT<T> x;
    TensorT<T> a;
    TensorT<T> c;
};

// Alternates latent and category inference from a random initialization:
// (1) X ~ p(X | Y, C), (2) C = softmax(A), A ~ p(A | Y, X).
template <typename T>
GibbsResult<T> gibbs_infer_xc(const TensorT<T>& Y, const GeneratorModel<T>& model, const LangevinConfig& cfg,
                              int sweeps, RngStream& rng) {
    if (sweeps < 0) throw Error("gibbs_infer_xc: sweeps must be >= 0");
    const std::int64_t n = Y.dim(0);
    GibbsResult<T> r;
    r.x = TensorT<T>::randn({n, model.arch.latent_dim}, rng);
    r.a = TensorT<T>::randn({n, model.arch.cond_shape[0]}, rng);
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        r.x = infer_latent_x(Y, detail::softmax_rows(r.a), model, cfg, std::move(r.x), rng);
        auto [a, c] = infer_category(Y, r.x, model, cfg, std::move(r.a), rng);
        r.a = std::move(a);
        r.c = std::move(c);
    }
    r.c = detail::softmax_rows(r.a);
    return r;
}

}  // namespace coopgen
