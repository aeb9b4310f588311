#include "coopgen/cli_commands.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "coopgen/checkpoint.hpp"
#include "coopgen/image_io.hpp"
#include "coopgen/metrics.hpp"

namespace coopgen::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTestSeedSalt = 0x7e57da7aULL;

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const DivergenceError*>(&e)) return ExitCode::divergence;
    if (dynamic_cast<const ConfigError*>(&e)) return ExitCode::config;
    if (dynamic_cast<const IoError*>(&e)) return ExitCode::io;
    return ExitCode::config;
}

#define CLI_GUARD_BEGIN try {
#define CLI_GUARD_END                                  \
    }                                                  \
    catch (const std::exception& e) {                  \
        std::cerr << "error: " << e.what() << "\n";    \
        return exit_code_for(e);                       \
    }

std::string ckpt_name(std::int64_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06lld.ckpt", static_cast<long long>(epoch));
    return buf;
}

// Built datasets plus the recovery mask for inpaint tasks.
template <typename T>
struct BuiltData {
    CondDataset<T> train;
    TensorT<double> sample_mask;  // empty unless inpaint
};

template <typename T>
CondDataset<T> make_inpaint_dataset(const CondDataset<T>& base, int hole, TensorT<double>* sample_mask) {
    if (base.targets.rank() != 4) throw ConfigError("inpaint: image targets required");
    const std::int64_t side = base.targets.dim(2);
    const std::int64_t h = hole > 0 ? hole : side / 2;
    auto occ = occlude_center(base.targets, h);
    CondDataset<T> out;
    out.targets = base.targets;
    out.conditions = std::move(occ.condition);
    out.cond_onehot = false;
    if (sample_mask) {
        Shape per = occ.mask.shape();
        per.erase(per.begin());
        TensorT<double> m(per);
        std::copy_n(occ.mask.data(), m.numel(), m.data());
        *sample_mask = std::move(m);
    }
    return out;
}

template <typename T>
CondDataset<T> augment_dataset(const CondDataset<T>& base, RngStream rng) {
    CondDataset<T> out = base;
    const std::int64_t n = base.size();
    Shape ys = base.targets.shape(), cs = base.conditions.shape();
    ys.erase(ys.begin());
    cs.erase(cs.begin());
    for (std::int64_t i = 0; i < n; ++i) {
        TensorT<T> y(ys), c(cs);
        std::copy_n(base.targets.data() + i * y.numel(), y.numel(), y.data());
        std::copy_n(base.conditions.data() + i * c.numel(), c.numel(), c.data());
        RngStream item = rng.fork(static_cast<std::uint64_t>(i));
        auto [ay, ac] = augment_pair(y, c, item);
        std::copy_n(ay.data(), ay.numel(), out.targets.data() + i * ay.numel());
        std::copy_n(ac.data(), ac.numel(), out.conditions.data() + i * ac.numel());
    }
    return out;
}

template <typename T>
BuiltData<T> build_train_data(const RunConfig& cfg) {
    BuiltData<T> built;
    CondDataset<T> base;
    if (cfg.data.has_toy) {
        ToySpec spec = cfg.data.toy;
        base = generate_toy<T>(spec, cfg.data.n_train).data;
    } else {
        base = load_paired_images<T>(cfg.data.condition_dir, cfg.data.target_dir, cfg.data.manifest);
        if (base.size() == 0) throw ConfigError("data: manifest lists no pairs");
    }
    if (cfg.task == "inpaint") {
        built.train = make_inpaint_dataset(base, cfg.data.hole, &built.sample_mask);
    } else if (cfg.task == "img2img" && cfg.data.has_toy) {
        throw ConfigError("img2img task needs paired image data");
    } else {
        built.train = std::move(base);
    }
    return built;
}

template <typename T>
CondDataset<T> build_test_data(const RunConfig& cfg) {
    RunConfig test_cfg = cfg;
    if (test_cfg.data.has_toy) test_cfg.data.toy.seed ^= kTestSeedSalt;
    test_cfg.data.n_train = cfg.data.n_test;
    return build_train_data<T>(test_cfg).train;
}

json stats_record(std::int64_t epoch, std::int64_t step, const StepStats& s) {
    // wall time is reported on the console only: the structured log must be
    // bit-identical across reruns of the same seed
    json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["f_obs"] = s.f_observed_mean;
    j["f_ref"] = s.f_refined_mean;
    j["solver_grad_norm"] = s.solver_grad_norm;
    j["init_loss"] = s.init_loss;
    return j;
}

template <typename T>
int run_train_impl(const RunConfig& cfg, const std::string& resume_path) {
    TrainConfig tcfg = cfg.train;
    BuiltData<T> data = build_train_data<T>(cfg);
    tcfg.sample_mask = data.sample_mask;

    TrainState<T> state;
    if (resume_path.empty()) {
        state = TrainState<T>::make(cfg.gen_arch, cfg.energy_arch, cfg.residual_std, cfg.reference_std, cfg.seed);
    } else {
        state = load_checkpoint<T>(resume_path);
    }

    fs::create_directories(cfg.out_dir);
    const std::string log_path = cfg.out_dir + "/train_log.jsonl";
    std::ofstream log(log_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write " + log_path);

    TrainHooks<T> hooks;
    hooks.on_step = [&](std::int64_t epoch, std::int64_t step, const StepStats& s) {
        log << stats_record(epoch, step, s).dump() << "\n";
    };
    hooks.on_epoch_end = [&](const TrainState<T>& st, bool due) {
        if (due) save_checkpoint(cfg.out_dir + "/" + ckpt_name(st.epoch), st);
    };

    if (cfg.data.augment && tcfg.epochs > state.epoch) {
        // per-epoch jitter: the transform stream depends only on (seed, epoch)
        // so a resumed run sees the same data as an uninterrupted one
        for (std::int64_t epoch = state.epoch; epoch < tcfg.epochs; ++epoch) {
            CondDataset<T> aug = augment_dataset(data.train, RngStream(cfg.seed ^ (0xa06u + static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL)));
            if (cfg.task == "inpaint") aug = make_inpaint_dataset(aug, cfg.data.hole, nullptr);
            TrainConfig one = tcfg;
            one.epochs = static_cast<int>(epoch) + 1;
            train(aug, state, one, hooks);
        }
    } else {
        train(data.train, state, tcfg, hooks);
    }
    log.flush();
    if (!log) throw IoError("log write failed: " + log_path);
    save_checkpoint(cfg.out_dir + "/ckpt_final.ckpt", state);
    std::cout << "trained to epoch " << state.epoch << ", checkpoints in " << cfg.out_dir << "\n";
    return ExitCode::ok;
}

template <typename T>
TensorT<T> sample_stage(TrainState<T>& state, const RunConfig& cfg, const TensorT<T>& conditions,
                        const std::string& stage, RngStream& rng) {
    Latent<T> z = state.generator.sample_latent(conditions.dim(0), rng);
    TensorT<T> y = state.generator.generate(z, conditions, rng);
    if (stage == "solver") y = refine(y, conditions, state.energy, cfg.train.langevin, rng);
    return y;
}

void write_csv_samples(const std::string& path, const TensorT<double>& y, const std::vector<int>& classes) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    const std::int64_t n = y.dim(0), d = y.numel() / n;
    for (std::int64_t i = 0; i < n; ++i) {
        out << classes[static_cast<std::size_t>(i)];
        for (std::int64_t k = 0; k < d; ++k) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(y[i * d + k]));
            out << ',' << buf;
        }
        out << '\n';
    }
}

template <typename T>
int run_sample_impl(const RunConfig& cfg, const std::string& ckpt_path, int count, const std::string& stage) {
    if (stage != "initializer" && stage != "solver") throw ConfigError("sample: stage must be initializer|solver");
    if (count < 0) throw ConfigError("sample: count must be >= 0");
    TrainState<T> state = load_checkpoint<T>(ckpt_path);
    fs::create_directories(cfg.out_dir);
    if (count == 0) return ExitCode::ok;
    RngStream rng(cfg.seed);

    if (state.generator.arch.cond_onehot) {
        const std::int64_t k = state.generator.arch.cond_shape[0];
        const std::int64_t n = static_cast<std::int64_t>(count) * k;
        TensorT<T> conditions({n, k});
        std::vector<int> classes(static_cast<std::size_t>(n));
        // row r, column c of the grid: sample r conditioned on class c
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t cls = i % k;
            conditions.at2(i, cls) = T(1);
            classes[static_cast<std::size_t>(i)] = static_cast<int>(cls);
        }
        TensorT<T> y = sample_stage(state, cfg, conditions, stage, rng);
        if (y.rank() == 4) {
            ImageU8 grid = tile_grid(y, count, k);
            write_image(cfg.out_dir + "/samples_" + stage + ".png", grid);
        } else {
            write_csv_samples(cfg.out_dir + "/samples_" + stage + ".csv", y.template cast<double>(), classes);
        }
    } else {
        CondDataset<T> test = build_test_data<T>(cfg);
        const std::int64_t cols = std::min<std::int64_t>(test.size(), 8);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(cols));
        std::iota(idx.begin(), idx.end(), 0);
        auto [ty, tc] = test.slice(idx);
        // rows = samples per condition, columns = conditions
        Shape batch_shape = tc.shape();
        batch_shape[0] = cols * count;
        TensorT<T> conditions(batch_shape);
        const std::int64_t row = tc.numel() / cols;
        for (std::int64_t r = 0; r < count; ++r)
            for (std::int64_t c = 0; c < cols; ++c)
                std::copy_n(tc.data() + c * row, row, conditions.data() + (r * cols + c) * row);
        TensorT<T> y = sample_stage(state, cfg, conditions, stage, rng);
        write_image(cfg.out_dir + "/samples_" + stage + ".png", tile_grid(y, count, cols));
        write_image(cfg.out_dir + "/samples_conditions.png", tile_grid(tc, 1, cols));
    }
    std::cout << "wrote " << stage << " samples to " << cfg.out_dir << "\n";
    return ExitCode::ok;
}

TensorT<double> read_csv_vector(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<double> vals;
    std::string cell;
    while (std::getline(in, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.empty()) throw IoError("empty vector file " + path);
    const std::int64_t d = static_cast<std::int64_t>(vals.size());
    return TensorT<double>::from_data({1, d}, std::move(vals));
}

template <typename T>
int run_infer_impl(const RunConfig& cfg, const std::string& ckpt_path, const std::string& target_path,
                   int known_class, bool infer_class, int sweeps) {
    TrainState<T> state = load_checkpoint<T>(ckpt_path);
    GeneratorModel<T>& gen = state.generator;
    if (gen.uses_dropout_latent()) throw ConfigError("infer: dropout-latent checkpoints do not support inference");
    if (!gen.arch.cond_onehot) throw ConfigError("infer: categorical-condition checkpoints only");
    const std::int64_t k = gen.arch.cond_shape[0];
    if (!infer_class && (known_class < 0 || known_class >= k)) throw ConfigError("infer: class index out of range");

    TensorT<T> y;
    if (gen.arch.target_shape.size() == 3) {
        ImageU8 img = read_image(target_path);
        auto t = image_to_tensor<T>(img);
        Shape s = t.shape();
        s.insert(s.begin(), 1);
        y = t.reshaped(s);
    } else {
        y = read_csv_vector(target_path).template cast<T>();
    }
    fs::create_directories(cfg.out_dir);
    RngStream rng(cfg.seed);
    LangevinConfig icfg = cfg.train.langevin;

    TensorT<T> x({1, gen.arch.latent_dim});
    TensorT<T> c({1, k});
    if (infer_class) {
        auto r = gibbs_infer_xc(y, gen, icfg, sweeps, rng);
        x = std::move(r.x);
        c = std::move(r.c);
        std::ofstream cf(cfg.out_dir + "/inferred_class.csv");
        for (std::int64_t i = 0; i < k; ++i) cf << (i ? "," : "") << static_cast<double>(c[i]);
        cf << "\n";
    } else {
        c.at2(0, known_class) = T(1);
        x = infer_latent_x(y, c, gen, icfg, TensorT<T>({1, gen.arch.latent_dim}), rng);
    }
    {
        std::ofstream xf(cfg.out_dir + "/inferred_latent.csv");
        for (std::int64_t i = 0; i < x.numel(); ++i) xf << (i ? "," : "") << static_cast<double>(x[i]);
        xf << "\n";
    }

    // style grid: the inferred latent crossed with every class label
    TensorT<T> all_c({k, k});
    for (std::int64_t i = 0; i < k; ++i) all_c.at2(i, i) = T(1);
    Latent<T> z;
    z.x = TensorT<T>({k, gen.arch.latent_dim});
    for (std::int64_t i = 0; i < k; ++i) std::copy_n(x.data(), gen.arch.latent_dim, z.x.data() + i * gen.arch.latent_dim);
    z.has_x = true;
    TensorT<T> grid_y = gen.mean_map(z, all_c);
    if (grid_y.rank() == 4) {
        write_image(cfg.out_dir + "/style_grid.png", tile_grid(grid_y, 1, k));
    } else {
        std::vector<int> classes(static_cast<std::size_t>(k));
        std::iota(classes.begin(), classes.end(), 0);
        write_csv_samples(cfg.out_dir + "/style_grid.csv", grid_y.template cast<double>(), classes);
    }
    std::cout << "inference written to " << cfg.out_dir << "\n";
    return ExitCode::ok;
}

template <typename T>
int run_inpaint_impl(const RunConfig& cfg, const std::string& ckpt_path, const std::string& image_path,
                     const std::string& mask_path, const std::string& truth_path, int hole) {
    TrainState<T> state = load_checkpoint<T>(ckpt_path);
    ImageU8 occluded = read_image(image_path);
    auto cond3 = image_to_tensor<T>(occluded);
    Shape bshape = cond3.shape();
    bshape.insert(bshape.begin(), 1);
    TensorT<T> condition = cond3.reshaped(bshape);

    TensorT<double> mask(condition.shape());
    if (!mask_path.empty()) {
        ImageU8 m = read_image(mask_path);
        if (m.width != occluded.width || m.height != occluded.height)
            throw ConfigError("inpaint: mask and image sizes differ");
        for (std::int64_t c = 0; c < condition.dim(1); ++c)
            for (int y = 0; y < m.height; ++y)
                for (int x = 0; x < m.width; ++x)
                    mask.at4(0, c, y, x) = m.at(y, x, 0) > 127 ? 1.0 : 0.0;
    } else {
        const std::int64_t side = condition.dim(2);
        const std::int64_t h = hole > 0 ? hole : side / 2;
        if (h > side || h > condition.dim(3)) throw ConfigError("inpaint: hole larger than the image");
        auto occ = occlude_center(condition, h);
        mask = std::move(occ.mask);
    }

    fs::create_directories(cfg.out_dir);
    RngStream rng(cfg.seed);
    Latent<T> z = state.generator.sample_latent(1, rng);
    TensorT<T> y_init = state.generator.generate(z, condition, rng);
    for (std::int64_t i = 0; i < y_init.numel(); ++i)
        if (mask[i] == 0.0) y_init[i] = condition[i];  // keep observed pixels
    LangevinConfig lcfg = cfg.train.langevin;
    lcfg.update_mask = mask;
    TensorT<T> y_ref = refine(y_init, condition, state.energy, lcfg, rng);

    auto to_plane = [](const TensorT<T>& t) {
        Shape s = t.shape();
        s.erase(s.begin());
        return t.reshaped(s);
    };
    write_image(cfg.out_dir + "/inpaint_initializer.png", tensor_to_image(to_plane(y_init)));
    write_image(cfg.out_dir + "/inpaint_solver.png", tensor_to_image(to_plane(y_ref)));

    if (!truth_path.empty()) {
        ImageU8 timg = read_image(truth_path);
        auto truth3 = image_to_tensor<T>(timg);
        TensorT<T> truth = truth3.reshaped(condition.shape());
        json rec;
        rec["metric"] = "inpaint";
        rec["psnr_initializer"] = psnr(y_init, truth, 2.0, &mask);
        rec["psnr_solver"] = psnr(y_ref, truth, 2.0, &mask);
        // hole region is rectangular: evaluate structural similarity there
        std::int64_t top = condition.dim(2), left = condition.dim(3), bottom = 0, right = 0;
        for (std::int64_t y = 0; y < condition.dim(2); ++y)
            for (std::int64_t x = 0; x < condition.dim(3); ++x)
                if (mask.at4(0, 0, y, x) == 1.0) {
                    top = std::min(top, y);
                    left = std::min(left, x);
                    bottom = std::max(bottom, y);
                    right = std::max(right, x);
                }
        if (bottom >= top) {
            auto crop = [&](const TensorT<T>& t) {
                return crop_image(to_plane(t), top, left, bottom - top + 1, right - left + 1);
            };
            SsimOptions so;
            so.window = std::min<std::int64_t>(8, bottom - top + 1);
            rec["ssim_initializer"] = ssim(crop(y_init), crop(truth), so);
            rec["ssim_solver"] = ssim(crop(y_ref), crop(truth), so);
        }
        std::ofstream mf(cfg.out_dir + "/metrics.jsonl", std::ios::app);
        mf << rec.dump() << "\n";
        std::cout << rec.dump() << "\n";
    }
    std::cout << "recovered images written to " << cfg.out_dir << "\n";
    return ExitCode::ok;
}

template <typename T>
int run_eval_impl(const RunConfig& cfg, const std::string& ckpt_path, const std::string& metric,
                  const std::string& stage) {
    TrainState<T> state = load_checkpoint<T>(ckpt_path);
    fs::create_directories(cfg.out_dir);
    std::ofstream mf(cfg.out_dir + "/metrics.jsonl", std::ios::app);
    RngStream rng(cfg.seed ^ kTestSeedSalt);

    if (metric == "parzen") {
        if (!state.generator.arch.cond_onehot || state.generator.arch.target_shape.size() != 1)
            throw ConfigError("eval parzen: vector-target categorical tasks only");
        // protocol: fit the window on 10,000 generated samples, pick the
        // bandwidth on a held-out validation half by grid search
        const std::int64_t k = state.generator.arch.cond_shape[0];
        const std::int64_t m = 10000;
        TensorT<T> conditions({m, k});
        for (std::int64_t i = 0; i < m; ++i) conditions.at2(i, rng.uniform_int(k)) = T(1);
        TensorT<T> samples = sample_stage(state, cfg, conditions, stage, rng);

        CondDataset<T> test = build_test_data<T>(cfg);
        const std::int64_t half = test.size() / 2;
        std::vector<std::int64_t> vi(static_cast<std::size_t>(half)), ti(static_cast<std::size_t>(test.size() - half));
        std::iota(vi.begin(), vi.end(), 0);
        std::iota(ti.begin(), ti.end(), half);
        auto [vy, vc] = test.slice(vi);
        auto [ty, tc] = test.slice(ti);

        auto ref64 = samples.template cast<double>();
        const double bw = select_bandwidth(ref64, vy.template cast<double>(), default_bandwidth_grid());
        ParzenEstimator<double> est{ref64, bw};
        auto r = parzen_loglik(est, ty.template cast<double>());
        json rec;
        rec["metric"] = "parzen";
        rec["stage"] = stage;
        rec["bandwidth"] = bw;
        rec["mean_loglik"] = r.mean_loglik;
        rec["std_error"] = r.std_error;
        rec["n_test"] = r.n_test;
        mf << rec.dump() << "\n";
        std::cout << rec.dump() << "\n";
        return ExitCode::ok;
    }

    if (metric == "psnr" || metric == "ssim") {
        if (cfg.task != "inpaint") throw ConfigError("eval " + metric + ": inpaint task only");
        CondDataset<T> base = build_test_data<T>(cfg);
        TensorT<double> sample_mask;
        CondDataset<T> test = make_inpaint_dataset(base, cfg.data.hole, &sample_mask);
        const std::int64_t n = std::min<std::int64_t>(test.size(), 64);
        double acc_init = 0, acc_ref = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            auto [y, c] = test.slice({&i, 1});
            Latent<T> z = state.generator.sample_latent(1, rng);
            TensorT<T> y_init = state.generator.generate(z, c, rng);
            TensorT<double> mask(y.shape());
            std::copy_n(sample_mask.data(), sample_mask.numel(), mask.data());
            for (std::int64_t p = 0; p < y_init.numel(); ++p)
                if (mask[p] == 0.0) y_init[p] = c[p];
            LangevinConfig lcfg = cfg.train.langevin;
            lcfg.update_mask = mask;
            TensorT<T> y_ref = refine(y_init, c, state.energy, lcfg, rng);
            if (metric == "psnr") {
                acc_init += psnr(y_init, y, 2.0, &mask);
                acc_ref += psnr(y_ref, y, 2.0, &mask);
            } else {
                Shape plane = y.shape();
                plane.erase(plane.begin());
                acc_init += ssim(y_init.reshaped(plane), y.reshaped(plane));
                acc_ref += ssim(y_ref.reshaped(plane), y.reshaped(plane));
            }
        }
        json rec;
        rec["metric"] = metric;
        rec["n"] = n;
        rec["initializer_mean"] = acc_init / static_cast<double>(n);
        rec["solver_mean"] = acc_ref / static_cast<double>(n);
        mf << rec.dump() << "\n";
        std::cout << rec.dump() << "\n";
        return ExitCode::ok;
    }
    throw ConfigError("eval: unknown metric '" + metric + "'");
}

}  // namespace

int run_train(const RunConfig& cfg, const std::string& resume_path) {
    CLI_GUARD_BEGIN
    if (!cfg.has_models) throw ConfigError("train: config has no model blocks");
    return cfg.precision == 64 ? run_train_impl<double>(cfg, resume_path) : run_train_impl<float>(cfg, resume_path);
    CLI_GUARD_END
}

int run_sample(const RunConfig& cfg, const std::string& ckpt_path, int count, const std::string& stage) {
    CLI_GUARD_BEGIN
    return checkpoint_dtype(ckpt_path) == 8 ? run_sample_impl<double>(cfg, ckpt_path, count, stage)
                                            : run_sample_impl<float>(cfg, ckpt_path, count, stage);
    CLI_GUARD_END
}

int run_infer(const RunConfig& cfg, const std::string& ckpt_path, const std::string& target_path, int known_class,
              bool infer_class, int sweeps) {
    CLI_GUARD_BEGIN
    return checkpoint_dtype(ckpt_path) == 8
               ? run_infer_impl<double>(cfg, ckpt_path, target_path, known_class, infer_class, sweeps)
               : run_infer_impl<float>(cfg, ckpt_path, target_path, known_class, infer_class, sweeps);
    CLI_GUARD_END
}

int run_inpaint(const RunConfig& cfg, const std::string& ckpt_path, const std::string& image_path,
                const std::string& mask_path, const std::string& truth_path, int hole) {
    CLI_GUARD_BEGIN
    return checkpoint_dtype(ckpt_path) == 8
               ? run_inpaint_impl<double>(cfg, ckpt_path, image_path, mask_path, truth_path, hole)
               : run_inpaint_impl<float>(cfg, ckpt_path, image_path, mask_path, truth_path, hole);
    CLI_GUARD_END
}

int run_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& metric, const std::string& stage) {
    CLI_GUARD_BEGIN
    return checkpoint_dtype(ckpt_path) == 8 ? run_eval_impl<double>(cfg, ckpt_path, metric, stage)
                                            : run_eval_impl<float>(cfg, ckpt_path, metric, stage);
    CLI_GUARD_END
}

int run_fixed_point(const RunConfig& cfg) {
    CLI_GUARD_BEGIN
    const auto& f = cfg.fixed_point;
    auto sys = DiscreteCoopSystem::random(f.states, f.conditions, f.seed, f.mcmc_steps, f.lr_theta, f.lr_q);
    auto trace = fixed_point_sim(sys, f.iterations);
    fs::create_directories(cfg.out_dir);
    const std::string path = cfg.out_dir + "/fixed_point_trace.csv";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << fixed_point_csv(trace);
    if (!out) throw IoError("trace write failed: " + path);
    std::cout << "kl(data||p): " << trace.front().kl_data_p << " -> " << trace.back().kl_data_p << ", tv(q, stationary): "
              << trace.back().tv_q_stationary << "\n";
    std::cout << "trace written to " << path << "\n";
    return ExitCode::ok;
    CLI_GUARD_END
}

int dispatch(int argc, char** argv) {
    CLI::App app{"cooperative fast-initializer / slow-solver conditional learning"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    std::int64_t seed_override = -1;
    int threads = 0, precision = 0;
    auto add_globals = [&](CLI::App* cmd, bool config_required = true) {
        cmd->add_option("--config", config_path, "JSON run configuration")->required(config_required);
        cmd->add_option("--out", out_override, "output directory (overrides config)");
        cmd->add_option("--seed", seed_override, "seed (overrides config)");
        cmd->add_option("--threads", threads, "worker cap (overrides config; this build runs 1)");
        cmd->add_option("--precision", precision, "32 or 64 (overrides config)");
    };
    auto load_cfg = [&]() {
        RunConfig cfg = load_run_config(config_path);
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (seed_override >= 0) {
            cfg.seed = static_cast<std::uint64_t>(seed_override);
            cfg.train.seed = cfg.seed;
        }
        if (threads > 0) cfg.threads = threads;
        if (precision > 0) {
            if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
            cfg.precision = precision;
        }
        return cfg;
    };

    auto* t = app.add_subcommand("train", "cooperative training");
    std::string resume;
    add_globals(t);
    t->add_option("--resume", resume, "checkpoint to resume from");

    auto* s = app.add_subcommand("sample", "draw initializer or solver samples");
    std::string ckpt, stage = "solver";
    int count = 16;
    add_globals(s);
    s->add_option("--ckpt", ckpt, "checkpoint path")->required();
    s->add_option("--count", count, "samples per condition");
    s->add_option("--stage", stage, "initializer | solver");

    auto* i = app.add_subcommand("infer", "latent (and class) inference for a target");
    std::string target;
    int known_class = -1, sweeps = 5;
    bool infer_class = false;
    add_globals(i);
    i->add_option("--ckpt", ckpt, "checkpoint path")->required();
    i->add_option("--target", target, "target file (image or CSV vector)")->required();
    i->add_option("--known-class", known_class, "condition class of the target");
    i->add_flag("--infer-class", infer_class, "infer the class by alternating sampling");
    i->add_option("--sweeps", sweeps, "alternating sweeps for --infer-class");

    auto* p = app.add_subcommand("inpaint", "recover an occluded image");
    std::string image, mask, truth;
    int hole = -1;
    add_globals(p);
    p->add_option("--ckpt", ckpt, "checkpoint path")->required();
    p->add_option("--image", image, "occluded input image")->required();
    p->add_option("--mask", mask, "hole mask image (white = hole)");
    p->add_option("--hole", hole, "central hole side when no mask file is given");
    p->add_option("--truth", truth, "ground truth image for metrics");

    auto* e = app.add_subcommand("eval", "metric evaluation");
    std::string metric;
    add_globals(e);
    e->add_option("--ckpt", ckpt, "checkpoint path")->required();
    e->add_option("--metric", metric, "parzen | psnr | ssim")->required();
    e->add_option("--stage", stage, "initializer | solver");

    auto* f = app.add_subcommand("fixed-point", "exact finite-state diagnostics");
    add_globals(f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? ExitCode::ok : ExitCode::config;
    }

    try {
        if (t->parsed()) return run_train(load_cfg(), resume);
        if (s->parsed()) return run_sample(load_cfg(), ckpt, count, stage);
        if (i->parsed()) return run_infer(load_cfg(), ckpt, target, known_class, infer_class, sweeps);
        if (p->parsed()) return run_inpaint(load_cfg(), ckpt, image, mask, truth, hole);
        if (e->parsed()) return run_eval(load_cfg(), ckpt, metric, stage);
        if (f->parsed()) return run_fixed_point(load_cfg());
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return exit_code_for(ex);
    }
    return ExitCode::config;
}

}  // namespace coopgen::cli
