#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "coopgen/checkpoint.hpp"
#include "coopgen/cli_commands.hpp"
#include "coopgen/image_io.hpp"

using namespace coopgen;
namespace fs = std::filesystem;
using T64 = TensorT<double>;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("coopgen_test_" + std::to_string(RngStream(std::random_device{}()).next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

nlohmann::json toy_config_json(const std::string& out_dir, int epochs = 2) {
    nlohmann::json j;
    j["task"] = "toy";
    j["seed"] = 7;
    j["out_dir"] = out_dir;
    j["precision"] = 64;
    j["generator"] = {{"variant", "cat2img_early"},
                      {"target_shape", {2}},
                      {"cond_shape", {3}},
                      {"latent_dim", 2},
                      {"head", "tanh"},
                      {"residual_std", 0.3},
                      {"post", {{{"kind", "dense"}, {"units", 8}, {"activation", "tanh"}}, {{"kind", "dense"}, {"units", 2}}}}};
    j["energy"] = {{"variant", "cat2img_early"},
                   {"target_shape", {2}},
                   {"cond_shape", {3}},
                   {"head", "none"},
                   {"energy_units", 4},
                   {"reference_std", 0.5},
                   {"post", {{{"kind", "dense"}, {"units", 8}, {"activation", "tanh"}}}}};
    j["langevin"] = {{"steps", 3}, {"step_size", 0.05}};
    j["train"] = {{"epochs", epochs}, {"batch_size", 16}, {"solver_lr", 0.005}, {"init_lr", 0.005}};
    j["data"] = {{"toy",
                  {{"family", "gauss_mix"},
                   {"k", 3},
                   {"means", {{0.5, 0.0}, {-0.4, 0.4}, {-0.4, -0.4}}},
                   {"class_std", 0.1},
                   {"seed", 5}}},
                 {"n_train", 64},
                 {"n_test", 32}};
    return j;
}

std::string write_config(const TempDir& dir, const nlohmann::json& j, const std::string& name = "config.json") {
    const std::string path = dir.file(name);
    std::ofstream out(path);
    out << j.dump(2);
    return path;
}

TrainState<double> tiny_state(std::uint64_t seed) {
    ArchDescriptor ga;
    ga.variant = "cat2img_early";
    ga.target_shape = {2};
    ga.cond_shape = {3};
    ga.latent_dim = 2;
    ga.head = "tanh";
    LayerSpec d1;
    d1.kind = "dense";
    d1.units = 5;
    d1.activation = "tanh";
    LayerSpec d2;
    d2.kind = "dense";
    d2.units = 2;
    ga.post = {d1, d2};
    ArchDescriptor fa;
    fa.variant = "cat2img_early";
    fa.target_shape = {2};
    fa.cond_shape = {3};
    fa.head = "none";
    fa.energy_units = 3;
    LayerSpec f1;
    f1.kind = "dense";
    f1.units = 6;
    f1.activation = "tanh";
    fa.post = {f1};
    return TrainState<double>::make(ga, fa, 0.3, 0.5, seed);
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact including rng state") {
    TempDir dir;
    auto state = tiny_state(123);
    // push the state away from initialization
    ToySpec spec;
    spec.family = "gauss_mix";
    spec.k = 3;
    spec.dim = 2;
    spec.means = {{0.5, 0.0}, {-0.4, 0.4}, {-0.4, -0.4}};
    spec.class_std = 0.1;
    spec.seed = 2;
    auto toy = generate_toy<double>(spec, 32);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.langevin.steps = 2;
    cfg.langevin.step_size = 0.05;
    train(toy.data, state, cfg);

    const std::string p1 = dir.file("a.ckpt");
    save_checkpoint(p1, state);
    auto loaded = load_checkpoint<double>(p1);
    CHECK(loaded.epoch == state.epoch);
    CHECK(loaded.rng.serialize() == state.rng.serialize());
    for (const auto& [name, t] : state.generator.params) CHECK(loaded.generator.params.at(name) == t);
    for (const auto& [name, t] : state.energy.params) CHECK(loaded.energy.params.at(name) == t);
    for (const auto& [name, t] : state.adam_gen.m) CHECK(loaded.adam_gen.m.at(name) == t);
    for (const auto& [name, t] : state.adam_energy.v) CHECK(loaded.adam_energy.v.at(name) == t);
    CHECK(loaded.adam_gen.t == state.adam_gen.t);
    CHECK(loaded.generator.residual_std == state.generator.residual_std);
    CHECK(loaded.energy.reference_std == state.energy.reference_std);

    const std::string p2 = dir.file("b.ckpt");
    save_checkpoint(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("checkpoint version and precision mismatches are hard errors") {
    TempDir dir;
    auto state = tiny_state(1);
    const std::string path = dir.file("x.ckpt");
    save_checkpoint(path, state);
    CHECK(checkpoint_dtype(path) == 8);
    CHECK_THROWS_AS(load_checkpoint<float>(path), IoError);

    // corrupt the version field (bytes 8..11)
    std::string bytes = slurp(path);
    bytes[8] = 0x7f;
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_THROWS_AS(load_checkpoint<double>(path), IoError);
    CHECK_THROWS_AS(checkpoint_dtype(path), IoError);
}

TEST_CASE("run config validation is strict") {
    TempDir dir;
    auto j = toy_config_json(dir.file("out"));
    CHECK_NOTHROW(parse_run_config(j));

    SUBCASE("unknown top-level key") {
        j["bogus"] = 1;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("unknown nested key") {
        j["train"]["bogus"] = 1;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("unknown arch key") {
        j["generator"]["bogus"] = 1;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("bad precision") {
        j["precision"] = 16;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("bad task") {
        j["task"] = "dream";
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("negative learning rate") {
        j["train"]["solver_lr"] = -1.0;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("both data sources") {
        j["data"]["paired"] = {{"condition_dir", "a"}, {"target_dir", "b"}, {"manifest", "m"}};
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("langevin out of range") {
        j["langevin"]["steps"] = -2;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
}

TEST_CASE("invalid config exits with code 2 and writes nothing") {
    TempDir dir;
    auto j = toy_config_json(dir.file("out"));
    j["train"]["bogus"] = true;
    const std::string cfg_path = write_config(dir, j);
    std::string prog = "coopgen", verb = "train", copt = "--config";
    std::vector<char*> argv{prog.data(), verb.data(), copt.data(), const_cast<char*>(cfg_path.c_str())};
    const int rc = cli::dispatch(static_cast<int>(argv.size()), argv.data());
    CHECK(rc == cli::ExitCode::config);
    CHECK_FALSE(fs::exists(dir.file("out")));
}

TEST_CASE("png and pgm round trips are bit-exact") {
    TempDir dir;
    RngStream rng(11);
    SUBCASE("grayscale png") {
        ImageU8 img;
        img.width = 9;
        img.height = 7;
        img.channels = 1;
        img.pixels.resize(63);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
        write_png(dir.file("g.png"), img);
        auto back = read_image(dir.file("g.png"));
        CHECK(back.channels == 1);
        CHECK(back.pixels == img.pixels);
    }
    SUBCASE("rgb png") {
        ImageU8 img;
        img.width = 5;
        img.height = 4;
        img.channels = 3;
        img.pixels.resize(60);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
        write_png(dir.file("c.png"), img);
        auto back = read_image(dir.file("c.png"));
        CHECK(back.channels == 3);
        CHECK(back.pixels == img.pixels);
    }
    SUBCASE("binary pgm") {
        ImageU8 img;
        img.width = 6;
        img.height = 3;
        img.channels = 1;
        img.pixels.resize(18);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
        write_pgm(dir.file("g.pgm"), img);
        auto back = read_image(dir.file("g.pgm"));
        CHECK(back.pixels == img.pixels);
    }
}

TEST_CASE("paired image loading via manifest") {
    TempDir dir;
    fs::create_directories(dir.path / "cond");
    fs::create_directories(dir.path / "tgt");
    RngStream rng(3);
    for (int i = 0; i < 2; ++i) {
        ImageU8 img;
        img.width = 8;
        img.height = 8;
        img.channels = 1;
        img.pixels.resize(64);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
        write_png(dir.file("cond/" + std::to_string(i) + ".png"), img);
        write_png(dir.file("tgt/" + std::to_string(i) + ".png"), img);
    }

    SUBCASE("empty manifest gives an empty dataset") {
        std::ofstream(dir.file("empty.txt")).close();
        auto ds = load_paired_images<double>(dir.file("cond"), dir.file("tgt"), dir.file("empty.txt"));
        CHECK(ds.size() == 0);
    }
    SUBCASE("two pairs load aligned and normalized") {
        std::ofstream m(dir.file("m.txt"));
        m << "0.png 0.png\n1.png 1.png\n";
        m.close();
        auto ds = load_paired_images<double>(dir.file("cond"), dir.file("tgt"), dir.file("m.txt"));
        CHECK(ds.size() == 2);
        CHECK(ds.targets.shape() == Shape{2, 1, 8, 8});
        for (std::int64_t i = 0; i < ds.targets.numel(); ++i) {
            CHECK(ds.targets[i] >= -1.0);
            CHECK(ds.targets[i] <= 1.0);
        }
        // denormalizing recovers the stored bytes exactly
        std::vector<std::int64_t> first{0};
        auto [y0, c0] = ds.slice(first);
        auto img = tensor_to_image(y0.reshaped({1, 8, 8}));
        auto orig = read_image(dir.file("tgt/0.png"));
        CHECK(img.pixels == orig.pixels);
    }
    SUBCASE("missing file names the offender") {
        std::ofstream m(dir.file("m2.txt"));
        m << "0.png missing.png\n";
        m.close();
        try {
            load_paired_images<double>(dir.file("cond"), dir.file("tgt"), dir.file("m2.txt"));
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("missing.png") != std::string::npos);
        }
    }
    SUBCASE("size mismatch names the pair") {
        ImageU8 small;
        small.width = 4;
        small.height = 4;
        small.channels = 1;
        small.pixels.assign(16, 100);
        write_png(dir.file("tgt/small.png"), small);
        std::ofstream m(dir.file("m3.txt"));
        m << "0.png small.png\n";
        m.close();
        try {
            load_paired_images<double>(dir.file("cond"), dir.file("tgt"), dir.file("m3.txt"));
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("small.png") != std::string::npos);
        }
    }
    SUBCASE("undecodable file is an error") {
        std::ofstream bad(dir.file("tgt/bad.png"), std::ios::binary);
        bad << "not an image";
        bad.close();
        std::ofstream m(dir.file("m4.txt"));
        m << "0.png bad.png\n";
        m.close();
        CHECK_THROWS_AS(load_paired_images<double>(dir.file("cond"), dir.file("tgt"), dir.file("m4.txt")), IoError);
    }
}

TEST_CASE("train command: empty run, determinism, resume") {
    TempDir dir;
    SUBCASE("zero epochs write an initialized checkpoint and an empty log") {
        auto j = toy_config_json(dir.file("out0"), 0);
        RunConfig cfg = parse_run_config(j);
        CHECK(cli::run_train(cfg) == cli::ExitCode::ok);
        CHECK(fs::exists(dir.file("out0/ckpt_final.ckpt")));
        CHECK(slurp(dir.file("out0/train_log.jsonl")).empty());
        auto st = load_checkpoint<double>(dir.file("out0/ckpt_final.ckpt"));
        CHECK(st.epoch == 0);
    }
    SUBCASE("two identical runs produce identical logs and checkpoints") {
        RunConfig c1 = parse_run_config(toy_config_json(dir.file("outA")));
        RunConfig c2 = parse_run_config(toy_config_json(dir.file("outB")));
        CHECK(cli::run_train(c1) == 0);
        CHECK(cli::run_train(c2) == 0);
        CHECK(slurp(dir.file("outA/train_log.jsonl")) == slurp(dir.file("outB/train_log.jsonl")));
        CHECK(slurp(dir.file("outA/ckpt_final.ckpt")) == slurp(dir.file("outB/ckpt_final.ckpt")));
        CHECK_FALSE(slurp(dir.file("outA/train_log.jsonl")).empty());
    }
    SUBCASE("kill-and-resume matches the uninterrupted run") {
        RunConfig full = parse_run_config(toy_config_json(dir.file("outFull"), 4));
        CHECK(cli::run_train(full) == 0);

        RunConfig part = parse_run_config(toy_config_json(dir.file("outPart"), 2));
        CHECK(cli::run_train(part) == 0);
        RunConfig rest = parse_run_config(toy_config_json(dir.file("outPart"), 4));
        CHECK(cli::run_train(rest, dir.file("outPart/ckpt_000002.ckpt")) == 0);

        CHECK(slurp(dir.file("outFull/ckpt_final.ckpt")) == slurp(dir.file("outPart/ckpt_final.ckpt")));
        CHECK(slurp(dir.file("outFull/train_log.jsonl")) == slurp(dir.file("outPart/train_log.jsonl")));
    }
}

TEST_CASE("sample command basics") {
    TempDir dir;
    RunConfig cfg = parse_run_config(toy_config_json(dir.file("out"), 1));
    REQUIRE(cli::run_train(cfg) == 0);
    const std::string ckpt = dir.file("out/ckpt_final.ckpt");

    SUBCASE("count zero writes nothing") {
        RunConfig c = cfg;
        c.out_dir = dir.file("s0");
        CHECK(cli::run_sample(c, ckpt, 0, "solver") == 0);
        CHECK_FALSE(fs::exists(dir.file("s0/samples_solver.csv")));
    }
    SUBCASE("solver with zero steps equals the initializer under one seed") {
        RunConfig c = cfg;
        c.train.langevin.steps = 0;
        c.out_dir = dir.file("s1");
        CHECK(cli::run_sample(c, ckpt, 5, "initializer") == 0);
        CHECK(cli::run_sample(c, ckpt, 5, "solver") == 0);
        CHECK(slurp(dir.file("s1/samples_initializer.csv")) == slurp(dir.file("s1/samples_solver.csv")));
    }
    SUBCASE("csv rows enumerate count x classes") {
        RunConfig c = cfg;
        c.out_dir = dir.file("s2");
        CHECK(cli::run_sample(c, ckpt, 4, "solver") == 0);
        const std::string csv = slurp(dir.file("s2/samples_solver.csv"));
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 4 * 3);
    }
}

TEST_CASE("fixed-point command writes the four-column trace") {
    TempDir dir;
    nlohmann::json j;
    j["task"] = "fixed_point";
    j["out_dir"] = dir.file("fp");
    j["fixed_point"] = {{"states", 8}, {"conditions", 2}, {"iterations", 50}, {"seed", 3}};
    RunConfig cfg = parse_run_config(j);
    CHECK(cli::run_fixed_point(cfg) == 0);
    const std::string csv = slurp(dir.file("fp/fixed_point_trace.csv"));
    CHECK(csv.rfind("iteration,kl_data_p,kl_mq_p,kl_mq_q,tv_q_stationary\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 51);
}

TEST_CASE("infer command emits a style grid with one column per class") {
    TempDir dir;
    RunConfig cfg = parse_run_config(toy_config_json(dir.file("out"), 1));
    REQUIRE(cli::run_train(cfg) == 0);
    const std::string ckpt = dir.file("out/ckpt_final.ckpt");

    std::ofstream t(dir.file("target.csv"));
    t << "0.1,-0.2\n";
    t.close();
    RunConfig c = cfg;
    c.out_dir = dir.file("inf");
    c.train.langevin.steps = 5;
    CHECK(cli::run_infer(c, ckpt, dir.file("target.csv"), 1, false, 0) == 0);
    CHECK(fs::exists(dir.file("inf/inferred_latent.csv")));
    const std::string grid = slurp(dir.file("inf/style_grid.csv"));
    CHECK(std::count(grid.begin(), grid.end(), '\n') == 3);  // K rows for a vector task

    CHECK(cli::run_infer(c, ckpt, dir.file("target.csv"), -1, true, 2) == 0);
    CHECK(fs::exists(dir.file("inf/inferred_class.csv")));
}
