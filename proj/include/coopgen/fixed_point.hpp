#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "coopgen/rng.hpp"
#include "coopgen/tensor.hpp"

namespace coopgen {

// Exact-probability analogue of the cooperative loop on a small finite state
// space: no sampling anywhere. The solver is an energy table (one natural
// parameter per state and condition), the initializer a conditional
// distribution table, and the refinement kernel a Metropolis chain on a ring
// of states targeting p(s|c) = softmax_s energy[s,c].
struct DiscreteCoopSystem {
    int n_states = 16;
    int n_cond = 2;
    int mcmc_steps = 1;     // kernel applications per iteration
    double lr_theta = 0.5;  // energy-table ascent rate
    double lr_q = 0.5;      // mixing rate of q toward M q

    // column-per-condition tables, indexed [s + c * n_states]
    std::vector<double> energy;     // theta
    std::vector<double> q;          // initializer conditional
    std::vector<double> data_cond;  // true conditional
    std::vector<double> cond_prior;

    double& at(std::vector<double>& t, int s, int c) { return t[static_cast<std::size_t>(s + c * n_states)]; }
    double at(const std::vector<double>& t, int s, int c) const {
        return t[static_cast<std::size_t>(s + c * n_states)];
    }

    void validate() const {
        const auto sz = static_cast<std::size_t>(n_states) * static_cast<std::size_t>(n_cond);
        if (n_states < 2 || n_cond < 1) throw ConfigError("discrete system: need >= 2 states and >= 1 condition");
        if (energy.size() != sz || q.size() != sz || data_cond.size() != sz)
            throw ConfigError("discrete system: table sizes must be n_states * n_cond");
        if (cond_prior.size() != static_cast<std::size_t>(n_cond))
            throw ConfigError("discrete system: condition prior size mismatch");
        if (mcmc_steps < 1 || lr_theta <= 0 || lr_q <= 0 || lr_q > 1)
            throw ConfigError("discrete system: bad mcmc_steps / learning rates");
        for (int c = 0; c < n_cond; ++c) {
            double sq = 0, sd = 0;
            for (int s = 0; s < n_states; ++s) {
                if (at(q, s, c) < 0 || at(data_cond, s, c) < 0)
                    throw ConfigError("discrete system: negative probability entry");
                sq += at(q, s, c);
                sd += at(data_cond, s, c);
            }
            if (std::abs(sq - 1.0) > 1e-12 || std::abs(sd - 1.0) > 1e-12)
                throw ConfigError("discrete system: distribution rows must sum to 1 within 1e-12");
        }
        double sp = 0;
        for (double v : cond_prior) sp += v;
        if (std::abs(sp - 1.0) > 1e-12) throw ConfigError("discrete system: condition prior must sum to 1");
    }

    std::vector<double> p_theta(int c) const {
        std::vector<double> p(static_cast<std::size_t>(n_states));
        double mx = -1e300;
        for (int s = 0; s < n_states; ++s) mx = std::max(mx, at(energy, s, c));
        double z = 0;
        for (int s = 0; s < n_states; ++s) {
            p[static_cast<std::size_t>(s)] = std::exp(at(energy, s, c) - mx);
            z += p[static_cast<std::size_t>(s)];
        }
        for (auto& v : p) v /= z;
        return p;
    }

    // Single-sweep Metropolis kernel on the ring: propose s +- 1 (each 1/2),
    // accept with min(1, p(s')/p(s)). Row-stochastic with stationary
    // distribution p by detailed balance.
    std::vector<double> metropolis_kernel(const std::vector<double>& p) const {
        const int S = n_states;
        std::vector<double> M(static_cast<std::size_t>(S) * S, 0.0);
        for (int i = 0; i < S; ++i) {
            double stay = 1.0;
            for (int dir : {-1, 1}) {
                const int j = (i + dir + S) % S;
                const double a =
                    std::min(1.0, p[static_cast<std::size_t>(j)] / std::max(p[static_cast<std::size_t>(i)], 1e-300));
                M[static_cast<std::size_t>(i * S + j)] += 0.5 * a;
                stay -= 0.5 * a;
            }
            M[static_cast<std::size_t>(i * S + i)] += stay;
        }
        return M;
    }

    // q M^l (distribution-vector kernel application)
    std::vector<double> apply_kernel(const std::vector<double>& M, std::vector<double> dist, int times) const {
        const int S = n_states;
        std::vector<double> next(static_cast<std::size_t>(S));
        for (int t = 0; t < times; ++t) {
            std::fill(next.begin(), next.end(), 0.0);
            for (int i = 0; i < S; ++i) {
                const double qi = dist[static_cast<std::size_t>(i)];
                if (qi == 0.0) continue;
                const double* row = &M[static_cast<std::size_t>(i * S)];
                for (int j = 0; j < S; ++j) next[static_cast<std::size_t>(j)] += qi * row[j];
            }
            dist.swap(next);
        }
        return dist;
    }

    // Random instance: data conditionals and q from symmetric Dirichlet-like
    // draws, energies from small Gaussians. Deterministic in the seed.
    static DiscreteCoopSystem random(int states, int conds, std::uint64_t seed, int mcmc_steps = 3,
                                     double lr_theta = 0.5, double lr_q = 0.5) {
        DiscreteCoopSystem s;
        s.n_states = states;
        s.n_cond = conds;
        s.mcmc_steps = mcmc_steps;
        s.lr_theta = lr_theta;
        s.lr_q = lr_q;
        const auto sz = static_cast<std::size_t>(states) * static_cast<std::size_t>(conds);
        s.energy.resize(sz);
        s.q.resize(sz);
        s.data_cond.resize(sz);
        s.cond_prior.assign(static_cast<std::size_t>(conds), 1.0 / conds);
        RngStream rng(seed);
        for (auto& v : s.energy) v = 0.3 * rng.normal();
        auto fill_dist = [&](std::vector<double>& t) {
            for (int c = 0; c < conds; ++c) {
                double sum = 0;
                for (int st = 0; st < states; ++st) {
                    const double e = -std::log(std::max(rng.uniform(), 1e-12));  // Exp(1) draw
                    s.at(t, st, c) = e;
                    sum += e;
                }
                for (int st = 0; st < states; ++st) s.at(t, st, c) /= sum;
                // renormalize exactly
                double check = 0;
                for (int st = 0; st < states - 1; ++st) check += s.at(t, st, c);
                s.at(t, states - 1, c) = 1.0 - check;
            }
        };
        fill_dist(s.q);
        fill_dist(s.data_cond);
        return s;
    }
};

struct FixedPointRow {
    std::int64_t iteration = 0;
    double kl_data_p = 0;  // KL(f_data || p_theta)
    double kl_mq_p = 0;    // KL(M q || p_theta)
    double kl_mq_q = 0;    // KL(M q || q)
    double tv_q_stationary = 0;
    double kl_q_p = 0;  // companion quantity for the contraction check
};

namespace detail {

inline double kl_discrete(const std::vector<double>& p, const std::vector<double>& q) {
    double kl = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0) continue;
        kl += p[i] * std::log(p[i] / std::max(q[i], 1e-300));
    }
    return kl;
}

inline double tv_discrete(const std::vector<double>& p, const std::vector<double>& q) {
    double tv = 0;
    for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
    return 0.5 * tv;
}

}  // namespace detail

// Runs the exact cooperative loop:
//   qtilde = M_theta^l q           (solve step, in distribution)
//   theta += lr * (E_data - E_qtilde) of the energy table   (objective shift)
//   q <- (1 - lr_q) q + lr_q qtilde                         (mapping shift)
// recording the divergence diagnostics at the top of every iteration.
inline std::vector<FixedPointRow> fixed_point_sim(DiscreteCoopSystem sys, int iterations) {
    sys.validate();
    const int S = sys.n_states, C = sys.n_cond;
    std::vector<FixedPointRow> trace;
    trace.reserve(static_cast<std::size_t>(iterations));

    for (int it = 0; it < iterations; ++it) {
        FixedPointRow row;
        row.iteration = it;
        std::vector<std::vector<double>> qtilde(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) {
            const double w = sys.cond_prior[static_cast<std::size_t>(c)];
            const std::vector<double> p = sys.p_theta(c);
            const std::vector<double> M = sys.metropolis_kernel(p);
            std::vector<double> qc(static_cast<std::size_t>(S));
            std::vector<double> dc(static_cast<std::size_t>(S));
            for (int s = 0; s < S; ++s) {
                qc[static_cast<std::size_t>(s)] = sys.at(sys.q, s, c);
                dc[static_cast<std::size_t>(s)] = sys.at(sys.data_cond, s, c);
            }
            qtilde[static_cast<std::size_t>(c)] = sys.apply_kernel(M, qc, sys.mcmc_steps);
            const auto& qt = qtilde[static_cast<std::size_t>(c)];

            row.kl_data_p += w * detail::kl_discrete(dc, p);
            row.kl_mq_p += w * detail::kl_discrete(qt, p);
            row.kl_mq_q += w * detail::kl_discrete(qt, qc);
            row.kl_q_p += w * detail::kl_discrete(qc, p);
            // the Metropolis kernel is in detailed balance with p, so p is
            // its stationary distribution
            row.tv_q_stationary += w * detail::tv_discrete(qc, p);
        }
        trace.push_back(row);

        for (int c = 0; c < C; ++c) {
            const double w = sys.cond_prior[static_cast<std::size_t>(c)];
            for (int s = 0; s < S; ++s) {
                sys.at(sys.energy, s, c) +=
                    sys.lr_theta * w * (sys.at(sys.data_cond, s, c) - qtilde[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)]);
                sys.at(sys.q, s, c) = (1.0 - sys.lr_q) * sys.at(sys.q, s, c) +
                                      sys.lr_q * qtilde[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
            }
        }
    }
    return trace;
}

// CSV export: iteration plus the four divergence diagnostics.
inline std::string fixed_point_csv(const std::vector<FixedPointRow>& trace) {
    std::string out = "iteration,kl_data_p,kl_mq_p,kl_mq_q,tv_q_stationary\n";
    char buf[192];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.iteration),
                      r.kl_data_p, r.kl_mq_p, r.kl_mq_q, r.tv_q_stationary);
        out += buf;
    }
    return out;
}

}  // namespace coopgen
