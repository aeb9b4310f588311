#include "coopgen/config.hpp"

#include <fstream>

namespace coopgen {

using nlohmann::json;
using archjson::reject_unknown;

namespace {

ToySpec parse_toy(const json& j) {
    reject_unknown(j,
                   {"family", "k", "dim", "means", "class_std", "ring_radius0", "ring_radius_step", "ring_std",
                    "ring_modes", "glyph_size", "glyph_max_shift", "seed"},
                   "data.toy");
    ToySpec s;
    s.family = j.value("family", "gauss_mix");
    s.k = j.value("k", 3);
    s.dim = j.value("dim", 2);
    if (j.contains("means")) s.means = j.at("means").get<std::vector<std::vector<double>>>();
    s.class_std = j.value("class_std", 0.1);
    s.ring_radius0 = j.value("ring_radius0", 0.35);
    s.ring_radius_step = j.value("ring_radius_step", 0.25);
    s.ring_std = j.value("ring_std", 0.04);
    s.ring_modes = j.value("ring_modes", 8);
    s.glyph_size = j.value("glyph_size", 8);
    s.glyph_max_shift = j.value("glyph_max_shift", -1);
    s.seed = j.value("seed", std::uint64_t(0));
    s.validate();
    return s;
}

LangevinConfig parse_langevin(const json& j) {
    reject_unknown(j, {"steps", "step_size", "noise", "mh_correction", "divergence_bound"}, "langevin");
    LangevinConfig cfg;
    cfg.steps = j.value("steps", 0);
    cfg.step_size = j.value("step_size", 0.0);
    cfg.noise_enabled = j.value("noise", true);
    cfg.mh_correction = j.value("mh_correction", false);
    cfg.divergence_bound = j.value("divergence_bound", 1e3);
    cfg.validate();
    return cfg;
}

void parse_train(const json& j, TrainConfig& t) {
    reject_unknown(j,
                   {"epochs", "batch_size", "chain_count", "solver_lr", "init_lr", "beta1", "beta2", "adam_eps",
                    "l1_weight", "noise_anneal_epoch", "checkpoint_every"},
                   "train");
    t.epochs = j.value("epochs", 1);
    t.batch_size = j.value("batch_size", 64);
    t.chain_count = j.value("chain_count", 0);
    t.solver_opt.lr = j.value("solver_lr", 0.002);
    t.init_opt.lr = j.value("init_lr", 0.0001);
    const double b1 = j.value("beta1", 0.5), b2 = j.value("beta2", 0.999), eps = j.value("adam_eps", 1e-8);
    if (b1 < 0 || b1 >= 1 || b2 < 0 || b2 >= 1 || eps <= 0) throw ConfigError("train: adam parameters out of range");
    t.solver_opt.beta1 = t.init_opt.beta1 = b1;
    t.solver_opt.beta2 = t.init_opt.beta2 = b2;
    t.solver_opt.eps = t.init_opt.eps = eps;
    if (t.solver_opt.lr < 0 || t.init_opt.lr < 0) throw ConfigError("train: learning rates must be >= 0");
    t.l1_weight = j.value("l1_weight", 0.0);
    t.noise_anneal_epoch = j.value("noise_anneal_epoch", -1);
    t.checkpoint_every = j.value("checkpoint_every", 1);
}

DataConfig parse_data(const json& j) {
    reject_unknown(j, {"toy", "paired", "augment", "n_train", "n_test", "hole"}, "data");
    DataConfig d;
    if (j.contains("toy")) {
        d.has_toy = true;
        d.toy = parse_toy(j.at("toy"));
    }
    if (j.contains("paired")) {
        const json& p = j.at("paired");
        reject_unknown(p, {"condition_dir", "target_dir", "manifest"}, "data.paired");
        d.has_paired = true;
        d.condition_dir = p.at("condition_dir").get<std::string>();
        d.target_dir = p.at("target_dir").get<std::string>();
        d.manifest = p.at("manifest").get<std::string>();
    }
    if (d.has_toy == d.has_paired) throw ConfigError("data: exactly one of 'toy' or 'paired' is required");
    d.augment = j.value("augment", false);
    d.n_train = j.value("n_train", std::int64_t(2048));
    d.n_test = j.value("n_test", std::int64_t(512));
    if (d.n_train < 1 || d.n_test < 1) throw ConfigError("data: n_train and n_test must be positive");
    d.hole = j.value("hole", -1);
    return d;
}

FixedPointRunConfig parse_fixed_point(const json& j) {
    reject_unknown(j, {"states", "conditions", "mcmc_steps", "lr_theta", "lr_q", "iterations", "seed"}, "fixed_point");
    FixedPointRunConfig f;
    f.states = j.value("states", 16);
    f.conditions = j.value("conditions", 2);
    f.mcmc_steps = j.value("mcmc_steps", 3);
    f.lr_theta = j.value("lr_theta", 0.5);
    f.lr_q = j.value("lr_q", 0.5);
    f.iterations = j.value("iterations", 500);
    f.seed = j.value("seed", std::uint64_t(0));
    if (f.states < 2 || f.states > 64) throw ConfigError("fixed_point: states must be in [2, 64]");
    if (f.conditions < 1 || f.mcmc_steps < 1 || f.iterations < 1)
        throw ConfigError("fixed_point: conditions/mcmc_steps/iterations must be positive");
    if (f.lr_theta <= 0 || f.lr_q <= 0 || f.lr_q > 1) throw ConfigError("fixed_point: learning rates out of range");
    return f;
}

ArchDescriptor parse_arch_block(const json& j, const std::string& where, double* std_field,
                                const char* std_key, double std_default) {
    json arch = j;
    if (arch.contains(std_key)) {
        *std_field = arch.at(std_key).get<double>();
        if (*std_field < 0) throw ConfigError(where + ": " + std_key + " must be >= 0");
        arch.erase(std_key);
    } else {
        *std_field = std_default;
    }
    return archjson::arch_from_json(arch, where);
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    reject_unknown(
        j, {"task", "seed", "out_dir", "precision", "threads", "generator", "energy", "langevin", "train", "data",
            "fixed_point"},
        "config");
    RunConfig cfg;
    if (!j.contains("task")) throw ConfigError("config: missing 'task'");
    cfg.task = j.at("task").get<std::string>();
    if (cfg.task != "toy" && cfg.task != "cat2img" && cfg.task != "img2img" && cfg.task != "inpaint" &&
        cfg.task != "fixed_point")
        throw ConfigError("config: unknown task '" + cfg.task + "'");
    cfg.seed = j.value("seed", std::uint64_t(0));
    cfg.out_dir = j.value("out_dir", "out");
    cfg.precision = j.value("precision", 32);
    if (cfg.precision != 32 && cfg.precision != 64) throw ConfigError("config: precision must be 32 or 64");
    cfg.threads = j.value("threads", 1);
    if (cfg.threads < 1) throw ConfigError("config: threads must be >= 1");

    if (cfg.task == "fixed_point") {
        cfg.fixed_point = parse_fixed_point(j.value("fixed_point", json::object()));
        return cfg;
    }

    if (!j.contains("generator") || !j.contains("energy"))
        throw ConfigError("config: '" + cfg.task + "' needs 'generator' and 'energy' blocks");
    cfg.gen_arch = parse_arch_block(j.at("generator"), "generator", &cfg.residual_std, "residual_std", 0.3);
    cfg.energy_arch = parse_arch_block(j.at("energy"), "energy", &cfg.reference_std, "reference_std", 0.016);
    cfg.has_models = true;

    if (j.contains("langevin")) cfg.train.langevin = parse_langevin(j.at("langevin"));
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    cfg.train.seed = cfg.seed;
    if (!j.contains("data")) throw ConfigError("config: missing 'data'");
    cfg.data = parse_data(j.at("data"));
    cfg.train.validate();

    if (cfg.gen_arch.target_shape != cfg.energy_arch.target_shape)
        throw ConfigError("config: generator and energy target shapes differ");
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_run_config(j);
}

}  // namespace coopgen
