#pragma once

#include <string>

#include "coopgen/config.hpp"

namespace coopgen::cli {

// Process exit codes shared by all commands.
struct ExitCode {
    static constexpr int ok = 0;
    static constexpr int config = 2;
    static constexpr int divergence = 3;
    static constexpr int io = 4;
};

int run_train(const RunConfig& cfg, const std::string& resume_path = "");
int run_sample(const RunConfig& cfg, const std::string& ckpt_path, int count, const std::string& stage);
int run_infer(const RunConfig& cfg, const std::string& ckpt_path, const std::string& target_path, int known_class,
              bool infer_class, int sweeps);
int run_inpaint(const RunConfig& cfg, const std::string& ckpt_path, const std::string& image_path,
                const std::string& mask_path, const std::string& truth_path, int hole);
int run_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& metric, const std::string& stage);
int run_fixed_point(const RunConfig& cfg);

// Full argv interface (the `coopgen` binary is a thin wrapper around this).
int dispatch(int argc, char** argv);

}  // namespace coopgen::cli
