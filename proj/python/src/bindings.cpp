#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "coopgen/checkpoint.hpp"
#include "coopgen/cli_commands.hpp"
#include "coopgen/config.hpp"
#include "coopgen/fixed_point.hpp"
#include "coopgen/metrics.hpp"

namespace py = pybind11;
using namespace coopgen;

namespace {

TensorT<double> from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(static_cast<std::size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = a.shape(i);
    std::vector<double> data(a.data(), a.data() + a.size());
    return TensorT<double>::from_data(std::move(shape), std::move(data));
}

py::array_t<double> to_numpy(const TensorT<double>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy_n(t.data(), t.numel(), out.mutable_data());
    return out;
}

// Double-precision cooperative system driven by the same JSON configuration
// the CLI uses.
class Cooperative {
public:
    explicit Cooperative(const std::string& config_json)
        : cfg_(parse_run_config(nlohmann::json::parse(config_json))) {
        if (!cfg_.has_models) throw ConfigError("Cooperative: config has no model blocks");
        state_ = TrainState<double>::make(cfg_.gen_arch, cfg_.energy_arch, cfg_.residual_std, cfg_.reference_std,
                                          cfg_.seed);
        if (cfg_.data.has_toy) data_ = generate_toy<double>(cfg_.data.toy, cfg_.data.n_train).data;
    }

    py::list train_epochs(int epochs) {
        if (!cfg_.data.has_toy) throw ConfigError("train_epochs: in-process training supports toy data configs");
        TrainConfig t = cfg_.train;
        t.epochs = static_cast<int>(state_.epoch) + epochs;
        py::list records;
        TrainHooks<double> hooks;
        hooks.on_step = [&](std::int64_t epoch, std::int64_t step, const StepStats& s) {
            py::dict d;
            d["epoch"] = epoch;
            d["step"] = step;
            d["f_obs"] = s.f_observed_mean;
            d["f_ref"] = s.f_refined_mean;
            d["solver_grad_norm"] = s.solver_grad_norm;
            d["init_loss"] = s.init_loss;
            records.append(d);
        };
        train(data_, state_, t, hooks);
        return records;
    }

    py::dict sample(int count, std::uint64_t seed) {
        const std::int64_t k = state_.generator.arch.cond_shape[0];
        const std::int64_t n = static_cast<std::int64_t>(count) * k;
        TensorT<double> conditions({n, k});
        std::vector<int> classes(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            conditions.at2(i, i % k) = 1.0;
            classes[static_cast<std::size_t>(i)] = static_cast<int>(i % k);
        }
        RngStream rng(seed);
        Latent<double> z = state_.generator.sample_latent(n, rng);
        TensorT<double> y0 = state_.generator.generate(z, conditions, rng);
        TensorT<double> y1 = refine(y0, conditions, state_.energy, cfg_.train.langevin, rng);
        py::dict out;
        out["initializer"] = to_numpy(y0);
        out["solver"] = to_numpy(y1);
        out["classes"] = py::cast(classes);
        return out;
    }

    py::array_t<double> energy(const py::array_t<double>& y, const py::array_t<double>& c, bool reference) {
        return to_numpy(state_.energy.energy(from_numpy(y), from_numpy(c), reference));
    }

    py::array_t<double> energy_grad(const py::array_t<double>& y, const py::array_t<double>& c, bool reference) {
        return to_numpy(state_.energy.energy_grad_y(from_numpy(y), from_numpy(c), reference));
    }

    py::array_t<double> refine_states(const py::array_t<double>& y0, const py::array_t<double>& c, int steps,
                                      double step_size, bool noise, std::uint64_t seed) {
        LangevinConfig lcfg = cfg_.train.langevin;
        lcfg.steps = steps;
        lcfg.step_size = step_size;
        lcfg.noise_enabled = noise;
        RngStream rng(seed);
        return to_numpy(refine(from_numpy(y0), from_numpy(c), state_.energy, lcfg, rng));
    }

    py::array_t<double> infer_latent(const py::array_t<double>& y, const py::array_t<double>& c, int steps,
                                     double step_size, std::uint64_t seed) {
        LangevinConfig lcfg;
        lcfg.steps = steps;
        lcfg.step_size = step_size;
        lcfg.noise_enabled = true;
        RngStream rng(seed);
        TensorT<double> yt = from_numpy(y);
        TensorT<double> x0({yt.dim(0), state_.generator.arch.latent_dim});
        return to_numpy(infer_latent_x(yt, from_numpy(c), state_.generator, lcfg, std::move(x0), rng));
    }

    void save(const std::string& path) const { save_checkpoint(path, state_); }
    void load(const std::string& path) { state_ = load_checkpoint<double>(path); }
    std::int64_t epoch() const { return state_.epoch; }

private:
    RunConfig cfg_;
    TrainState<double> state_;
    CondDataset<double> data_;
};

}  // namespace

PYBIND11_MODULE(_coopgen, m) {
    m.doc() = "cooperative initializer/solver conditional learning";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DivergenceError>(m, "DivergenceError");

    m.def(
        "psnr",
        [](const py::array_t<double>& a, const py::array_t<double>& b, double peak, py::object mask, double cap) {
            if (mask.is_none()) return psnr(from_numpy(a), from_numpy(b), peak, nullptr, cap);
            TensorT<double> m64 = from_numpy(mask.cast<py::array_t<double>>());
            return psnr(from_numpy(a), from_numpy(b), peak, &m64, cap);
        },
        py::arg("a"), py::arg("b"), py::arg("peak"), py::arg("mask") = py::none(), py::arg("cap_db") = 99.0);

    m.def(
        "ssim",
        [](const py::array_t<double>& a, const py::array_t<double>& b, int window, double k1, double k2, double peak) {
            SsimOptions opt;
            opt.window = window;
            opt.k1 = k1;
            opt.k2 = k2;
            opt.peak = peak;
            return ssim(from_numpy(a), from_numpy(b), opt);
        },
        py::arg("a"), py::arg("b"), py::arg("window") = 8, py::arg("k1") = 0.01, py::arg("k2") = 0.03,
        py::arg("peak") = 2.0);

    m.def(
        "parzen_loglik",
        [](const py::array_t<double>& reference, const py::array_t<double>& test, double bandwidth) {
            ParzenEstimator<double> est{from_numpy(reference), bandwidth};
            auto r = parzen_loglik(est, from_numpy(test));
            return py::make_tuple(r.mean_loglik, r.std_error);
        },
        py::arg("reference"), py::arg("test"), py::arg("bandwidth"));

    m.def(
        "select_bandwidth",
        [](const py::array_t<double>& reference, const py::array_t<double>& validation, std::vector<double> grid) {
            return select_bandwidth(from_numpy(reference), from_numpy(validation), std::move(grid));
        },
        py::arg("reference"), py::arg("validation"), py::arg("grid"));

    m.def("default_bandwidth_grid", &default_bandwidth_grid, py::arg("count") = 20, py::arg("lo") = 0.01,
          py::arg("hi") = 1.0);

    m.def(
        "fixed_point_trace",
        [](int states, int conditions, int iterations, std::uint64_t seed, int mcmc_steps, double lr_theta,
           double lr_q) {
            auto sys = DiscreteCoopSystem::random(states, conditions, seed, mcmc_steps, lr_theta, lr_q);
            auto trace = fixed_point_sim(sys, iterations);
            py::array_t<double> out({static_cast<py::ssize_t>(trace.size()), static_cast<py::ssize_t>(5)});
            auto* p = out.mutable_data();
            for (std::size_t i = 0; i < trace.size(); ++i) {
                p[i * 5 + 0] = trace[i].kl_data_p;
                p[i * 5 + 1] = trace[i].kl_mq_p;
                p[i * 5 + 2] = trace[i].kl_mq_q;
                p[i * 5 + 3] = trace[i].tv_q_stationary;
                p[i * 5 + 4] = trace[i].kl_q_p;
            }
            return out;
        },
        py::arg("states") = 16, py::arg("conditions") = 2, py::arg("iterations") = 500, py::arg("seed") = 0,
        py::arg("mcmc_steps") = 3, py::arg("lr_theta") = 0.5, py::arg("lr_q") = 0.5);

    m.def(
        "toy_gauss_mixture",
        [](int k, const std::vector<std::vector<double>>& means, double class_std, std::int64_t n,
           std::uint64_t seed) {
            ToySpec spec;
            spec.family = "gauss_mix";
            spec.k = k;
            spec.dim = means.empty() ? 0 : static_cast<int>(means.front().size());
            spec.means = means;
            spec.class_std = class_std;
            spec.seed = seed;
            auto toy = generate_toy<double>(spec, n);
            return py::make_tuple(to_numpy(toy.data.targets), to_numpy(toy.data.conditions));
        },
        py::arg("k"), py::arg("means"), py::arg("class_std"), py::arg("n"), py::arg("seed") = 0);

    py::class_<Cooperative>(m, "Cooperative")
        .def(py::init<const std::string&>(), py::arg("config_json"))
        .def("train_epochs", &Cooperative::train_epochs, py::arg("epochs"))
        .def("sample", &Cooperative::sample, py::arg("count"), py::arg("seed") = 0)
        .def("energy", &Cooperative::energy, py::arg("y"), py::arg("c"), py::arg("reference") = true)
        .def("energy_grad", &Cooperative::energy_grad, py::arg("y"), py::arg("c"), py::arg("reference") = true)
        .def("refine", &Cooperative::refine_states, py::arg("y0"), py::arg("c"), py::arg("steps"),
             py::arg("step_size"), py::arg("noise") = true, py::arg("seed") = 0)
        .def("infer_latent", &Cooperative::infer_latent, py::arg("y"), py::arg("c"), py::arg("steps") = 30,
             py::arg("step_size") = 0.1, py::arg("seed") = 0)
        .def("save", &Cooperative::save, py::arg("path"))
        .def("load", &Cooperative::load, py::arg("path"))
        .def_property_readonly("epoch", &Cooperative::epoch);
}
