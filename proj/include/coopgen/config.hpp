#pragma once

#include <string>

#include <json.hpp>

#include "coopgen/arch.hpp"
#include "coopgen/coop_train.hpp"
#include "coopgen/data.hpp"
#include "coopgen/fixed_point.hpp"

namespace coopgen {

struct DataConfig {
    bool has_toy = false;
    ToySpec toy;
    bool has_paired = false;
    std::string condition_dir, target_dir, manifest;
    bool augment = false;
    std::int64_t n_train = 2048;
    std::int64_t n_test = 512;
    int hole = -1;  // inpaint hole side; -1 = half the image side
};

struct FixedPointRunConfig {
    int states = 16;
    int conditions = 2;
    int mcmc_steps = 3;
    double lr_theta = 0.5;
    double lr_q = 0.5;
    int iterations = 500;
    std::uint64_t seed = 0;
};

// A fully validated run description. Parsing is strict: unknown keys and
// out-of-range values are rejected before any file is touched.
struct RunConfig {
    std::string task;  // toy | cat2img | img2img | inpaint | fixed_point
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    int precision = 32;  // element width in bits for training
    int threads = 1;

    bool has_models = false;
    ArchDescriptor gen_arch;
    ArchDescriptor energy_arch;
    double residual_std = 0.3;
    double reference_std = 0.016;

    TrainConfig train;
    DataConfig data;
    FixedPointRunConfig fixed_point;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace coopgen
