// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/cli.hpp>
#include <rayvis/raydist.hpp>
#include <rayvis/scene_io.hpp>

#include <test_support.hpp>

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <sstream>

using namespace rayvis;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(const std::vector<std::string> &args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

/// Every regular file under `dir` except manifests, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path &dir) {
    std::map<std::string, std::string> files;
    for (const auto &e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file())
            continue;
        const std::string name = e.path().filename().string();
        if (name.find("manifest") != std::string::npos || name == "metrics.csv")
            continue;
        files[fs::relative(e.path(), dir).string()] = detail::read_file(e.path());
    }
    return files;
}

/// Scene, data and maps shared by the tests (built once).
struct Fixture {
    fs::path root, scene, data, maps;
};

const Fixture &fixture() {
    static const Fixture f = [] {
        Fixture x;
        x.root = testutil::scratch_dir("cli_fixture");
        x.scene = x.root / "scene.json";
        x.data = x.root / "data";
        x.maps = x.root / "maps";
        auto must = [](const std::vector<std::string> &args) {
            const Result r = cli(args);
            if (r.code != 0)
                throw std::runtime_error(args.front() + " failed: " + r.err);
        };
        must({"scene", "--out", x.scene.string(), "--views", "6", "--resolution", "16", "--test-views", "2"});
        must({"synth", "--scene", x.scene.string(), "--out", x.data.string()});
        must({"init", "--data", x.data.string(), "--out", x.maps.string(), "--noise", "0.02", "--seed", "4"});
        return x;
    }();
    return f;
}

} // namespace

TEST(Cli, HelpAndVersion) {
    const Result help = cli({"--help"});
    EXPECT_EQ(help.code, 0);
    EXPECT_NE(help.out.find("optimize"), std::string::npos);
    const Result version = cli({"--version"});
    EXPECT_EQ(version.code, 0);
    EXPECT_EQ(version.out, std::string(kVersion) + "\n");
    EXPECT_EQ(cli({"render", "--help"}).code, 0);
}

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
    const Result bad = cli({"scene", "--out", "x.json", "--bogus"});
    EXPECT_EQ(bad.code, kExitUsage);
    EXPECT_NE(bad.err.find("bogus"), std::string::npos) << bad.err;
    EXPECT_EQ(cli({"scene", "--out", "x.json", "--views", "many"}).code, kExitUsage);
    const auto &f = fixture();
    EXPECT_EQ(cli({"render", "--data", f.data.string(), "--maps", f.maps.string(), "--out", "r.ppm",
                   "--view", "0", "--test-view", "0"})
                  .code,
              kExitUsage);
}

TEST(Cli, InputErrorsExitTwo) {
    const auto dir = testutil::scratch_dir("cli_input");
    Result r = cli({"synth", "--scene", (dir / "missing.json").string(), "--out", (dir / "d").string()});
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("missing.json"), std::string::npos) << r.err;

    detail::write_file_atomic(dir / "bad.json", "{\"near\": 1.0, \"fra\": 2.0}");
    r = cli({"synth", "--scene", (dir / "bad.json").string(), "--out", (dir / "d").string()});
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("fra"), std::string::npos) << r.err;

    const auto &f = fixture();
    r = cli({"render", "--data", f.data.string(), "--maps", (dir / "nomaps").string(), "--test-view", "0",
             "--out", (dir / "r.ppm").string()});
    EXPECT_EQ(r.code, kExitInput);
    r = cli({"render", "--data", f.data.string(), "--maps", f.maps.string(), "--test-view", "9", "--out",
             (dir / "r.ppm").string()});
    EXPECT_EQ(r.code, kExitInput);
}

TEST(Cli, NumericalFailureExitsThree) {
    const auto &f = fixture();
    const auto dir = testutil::scratch_dir("cli_nan");
    fs::copy(f.maps, dir / "maps", fs::copy_options::recursive);
    for (const auto &e : fs::directory_iterator(dir / "maps")) {
        if (e.path().extension() != ".nray")
            continue;
        DistributionMap m = read_distribution_map(e.path());
        for (auto &v : m.data())
            v = std::nanf("");
        write_distribution_map(e.path(), m);
    }
    const Result r = cli({"optimize", "--data", f.data.string(), "--maps", (dir / "maps").string(), "--out",
                          (dir / "out").string(), "--steps", "2", "--batch", "8", "--k-coarse", "8", "--nw",
                          "3"});
    EXPECT_EQ(r.code, kExitNumerical) << r.err;
    EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST(Cli, SceneSynthInitOutputs) {
    const auto &f = fixture();
    for (int v = 0; v < 6; ++v) {
        EXPECT_TRUE(fs::exists(f.data / "images" / ("view_00" + std::to_string(v) + ".ppm")));
        EXPECT_TRUE(fs::exists(f.data / "depth" / ("view_00" + std::to_string(v) + ".nrdm")));
        EXPECT_TRUE(fs::exists(f.maps / ("view_00" + std::to_string(v) + ".nray")));
    }
    EXPECT_TRUE(fs::exists(f.data / "test" / "images" / "view_001.ppm"));
    const Image img = read_ppm(f.data / "images" / "view_000.ppm");
    EXPECT_EQ(img.width, 16);
    const DistributionMap m = read_distribution_map(f.maps / "view_003.nray");
    EXPECT_EQ(m.view(), 3);
    EXPECT_EQ(m.n_components(), 2);

    const auto manifest = nlohmann::json::parse(detail::read_file(f.maps / "manifest_init.json"));
    for (const char *key : {"command", "tool_version", "argv", "config", "inputs", "outputs", "seed",
                            "duration_seconds"})
        EXPECT_TRUE(manifest.contains(key)) << key;
    EXPECT_EQ(manifest["command"], "init");
    EXPECT_EQ(manifest["seed"], 4);
    EXPECT_EQ(manifest["tool_version"], kVersion);
}

TEST(Cli, SeedFixedCommandsAreByteReproducible) {
    const auto &f = fixture();
    const auto dir = testutil::scratch_dir("cli_repro");
    for (const char *run : {"a", "b"}) {
        const fs::path d = dir / run;
        ASSERT_EQ(cli({"synth", "--scene", f.scene.string(), "--out", (d / "data").string()}).code, 0);
        ASSERT_EQ(cli({"init", "--data", (d / "data").string(), "--out", (d / "maps").string(), "--noise",
                       "0.02", "--seed", "11"})
                      .code,
                  0);
        ASSERT_EQ(cli({"render", "--data", (d / "data").string(), "--maps", (d / "maps").string(),
                       "--test-view", "1", "--k-coarse", "16", "--nw", "3", "--out", (d / "r.ppm").string()})
                      .code,
                  0);
    }
    const auto a = tree(dir / "a"), b = tree(dir / "b");
    EXPECT_GT(a.size(), 20u);
    EXPECT_EQ(a, b);
    // a different seed changes the noisy maps
    ASSERT_EQ(cli({"init", "--data", f.data.string(), "--out", (dir / "c").string(), "--noise", "0.02", "--seed",
                   "12"})
                  .code,
              0);
    EXPECT_NE(detail::read_file(dir / "c" / "view_000.nray"), a.at("maps/view_000.nray"));
}

TEST(Cli, RenderPrintsPsnrAndEvalAgrees) {
    const auto &f = fixture();
    const auto dir = testutil::scratch_dir("cli_render");
    fs::create_directories(dir / "rendered");
    fs::create_directories(dir / "gt");
    double printed = 0.0;
    for (int t = 0; t < 2; ++t) {
        const std::string name = "view_00" + std::to_string(t) + ".ppm";
        const fs::path gt = f.data / "test" / "images" / name;
        const Result r = cli({"render", "--data", f.data.string(), "--maps", f.maps.string(), "--test-view",
                              std::to_string(t), "--k-coarse", "32", "--nw", "3", "--out",
                              (dir / "rendered" / name).string(), "--gt", gt.string()});
        ASSERT_EQ(r.code, 0) << r.err;
        const auto pos = r.out.find("psnr_db ");
        ASSERT_NE(pos, std::string::npos) << r.out;
        const double value = std::stod(r.out.substr(pos + 8));
        // printed before 8-bit quantization
        EXPECT_NEAR(value, psnr(read_ppm(dir / "rendered" / name), read_ppm(gt)), 1e-2);
        printed += value / 2.0;
        fs::copy_file(gt, dir / "gt" / name);
    }
    const Result e = cli({"eval", "--rendered", (dir / "rendered").string(), "--gt", (dir / "gt").string(), "--csv"});
    ASSERT_EQ(e.code, 0) << e.err;
    EXPECT_EQ(e.out.rfind("file,psnr_db\n", 0), 0u);
    const auto pos = e.out.find("mean,");
    ASSERT_NE(pos, std::string::npos);
    EXPECT_NEAR(std::stod(e.out.substr(pos + 5)), printed, 1e-2);
    EXPECT_EQ(cli({"eval", "--rendered", (dir / "rendered").string(), "--gt", (dir / "gt").string()}).code, 0);

    // identical directories give the PSNR cap
    const Result same = cli({"eval", "--rendered", (dir / "gt").string(), "--gt", (dir / "gt").string(), "--csv"});
    EXPECT_NE(same.out.find("mean," + std::to_string(int(kPsnrCap))), std::string::npos) << same.out;

    fs::remove(dir / "gt" / "view_001.ppm");
    const Result missing = cli({"eval", "--rendered", (dir / "rendered").string(), "--gt", (dir / "gt").string()});
    EXPECT_EQ(missing.code, kExitInput);
    EXPECT_NE(missing.err.find("view_001.ppm"), std::string::npos) << missing.err;
}

TEST(Cli, OptimizeResumeMatchesUninterrupted) {
    const auto &f = fixture();
    const auto dir = testutil::scratch_dir("cli_optimize");
    const std::vector<std::string> common{"--data", f.data.string(), "--maps", f.maps.string(), "--batch", "16",
                                          "--k-coarse", "12", "--nw", "3", "--eval-interval", "4",
                                          "--checkpoint-interval", "4", "--seed", "3"};
    auto with = [&](std::vector<std::string> extra) {
        std::vector<std::string> args{"optimize"};
        args.insert(args.end(), common.begin(), common.end());
        args.insert(args.end(), extra.begin(), extra.end());
        return cli(args);
    };
    Result r = with({"--out", (dir / "full").string(), "--steps", "10"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = with({"--out", (dir / "part").string(), "--steps", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = with({"--out", (dir / "resumed").string(), "--steps", "10", "--resume", (dir / "part" / "checkpoint").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(tree(dir / "full" / "maps"), tree(dir / "resumed" / "maps"));
    EXPECT_EQ(tree(dir / "full" / "checkpoint"), tree(dir / "resumed" / "checkpoint"));
    const std::string metrics = detail::read_file(dir / "full" / "metrics.csv");
    EXPECT_EQ(metrics.rfind("step,", 0), 0u);
    EXPECT_NE(metrics.find("\n10,"), std::string::npos) << metrics;

    // zero steps: maps unchanged
    r = with({"--out", (dir / "zero").string(), "--steps", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const auto &[name, bytes] : tree(dir / "zero" / "maps"))
        EXPECT_EQ(bytes, detail::read_file(f.maps / name)) << name;

    // truncated optimizer state
    fs::copy(dir / "part" / "checkpoint", dir / "broken", fs::copy_options::recursive);
    const std::string state = detail::read_file(dir / "broken" / "optim_state.bin");
    detail::write_file_atomic(dir / "broken" / "optim_state.bin", state.substr(0, state.size() / 2));
    r = with({"--out", (dir / "x").string(), "--steps", "10", "--resume", (dir / "broken").string()});
    EXPECT_EQ(r.code, kExitInput);
}

TEST(Cli, BenchCountersAndReplay) {
    const auto &f = fixture();
    const auto dir = testutil::scratch_dir("cli_bench");
    const fs::path report = dir / "bench.json";
    const Result r = cli({"bench", "--data", f.data.string(), "--maps", f.maps.string(), "--k-uniform", "32",
                          "--k-coarse", "16", "--k-fine", "4", "--nw", "3", "--out", report.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(detail::read_file(report));
    const auto rays = j["uniform"]["rays"].get<std::uint64_t>();
    EXPECT_EQ(rays, 2u * 16u * 16u);
    EXPECT_EQ(j["uniform"]["color_evaluations"].get<std::uint64_t>(), rays * 32u);
    EXPECT_LE(j["c2f"]["color_evaluations"].get<std::uint64_t>(), rays * 4u);
    EXPECT_EQ(j["density_oracle"]["density_evaluations"], 32);
    EXPECT_EQ(j["density_oracle"]["cdf_evaluations"], 1);

    const fs::path manifest = dir / "bench.json.manifest.json";
    ASSERT_TRUE(fs::exists(manifest));
    const std::string first = detail::read_file(report);
    fs::remove(report);
    const Result replayed = cli({"replay", manifest.string()});
    ASSERT_EQ(replayed.code, 0) << replayed.err;
    auto a = nlohmann::json::parse(first), b = nlohmann::json::parse(detail::read_file(report));
    for (auto *x : {&a, &b}) {
        (*x).erase("wall_clock_ratio");
        for (const char *mode : {"uniform", "c2f"})
            (*x)[mode].erase("seconds");
    }
    EXPECT_EQ(a, b);
}

TEST(Cli, ProcessExitCodes) {
    const std::string exe = RAYVIS_CLI_PATH;
    auto run = [&](const std::string &args) {
        const int status = std::system((exe + " " + args + " > /dev/null 2>&1").c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    };
    EXPECT_EQ(run("--version"), 0);
    EXPECT_EQ(run("--nonsense"), 1);
    EXPECT_EQ(run("synth --scene /nonexistent/scene.json --out /tmp/rayvis_nowhere"), 2);
}
