// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/cli.hpp>

#include <rayvis/optim.hpp>
#include <rayvis/parallel.hpp>
#include <rayvis/pipeline.hpp>
#include <rayvis/scene_io.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace rayvis {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// Missing files, unreadable inputs and inconsistent data sets.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Context {
    std::ostream &out;
    std::ostream &err;
    std::vector<std::string> args;
};

std::string fmt(const char *pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

void write_manifest(const fs::path &path, const Context &ctx, const std::string &command,
                    json config, const std::vector<std::string> &inputs,
                    const std::vector<std::string> &outputs, std::uint64_t seed,
                    double seconds) {
    json m;
    m["command"] = command;
    m["tool_version"] = kVersion;
    m["argv"] = ctx.args;
    m["config"] = std::move(config);
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["seed"] = seed;
    m["duration_seconds"] = seconds;
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    detail::write_file_atomic(path, m.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void require_file(const fs::path &p) {
    if (!fs::is_regular_file(p))
        throw InputError("missing file: " + p.string());
}

/// Scene description plus the reference images of a data directory.
struct DataSet {
    SyntheticScene scene;
    std::vector<Image> images;
};

SyntheticScene load_data_scene(const fs::path &data) {
    const fs::path p = data / "scene.json";
    require_file(p);
    return load_scene(p);
}

DataSet load_data(const fs::path &data) {
    DataSet d{load_data_scene(data), {}};
    for (int v = 0; v < int(d.scene.cameras().size()); ++v) {
        const fs::path p = data / "images" / view_filename(v, "ppm");
        require_file(p);
        Image img = read_ppm(p);
        const auto &cam = d.scene.cameras()[std::size_t(v)];
        if (img.width != cam.width || img.height != cam.height)
            throw InputError(p.string() + ": image is " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + ", camera expects " +
                             std::to_string(cam.width) + "x" + std::to_string(cam.height));
        d.images.push_back(std::move(img));
    }
    return d;
}

std::vector<DistributionMap> load_maps(const fs::path &dir, const SyntheticScene &scene) {
    std::vector<DistributionMap> maps;
    for (int v = 0; v < int(scene.cameras().size()); ++v) {
        const fs::path p = dir / view_filename(v, "nray");
        require_file(p);
        DistributionMap m = read_distribution_map(p);
        const auto &cam = scene.cameras()[std::size_t(v)];
        if (m.view() != v || m.width() != cam.width || m.height() != cam.height)
            throw InputError(p.string() + ": map header (view " + std::to_string(m.view()) + ", " +
                             std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                             ") does not match view " + std::to_string(v));
        maps.push_back(std::move(m));
    }
    return maps;
}

std::vector<DepthMap> load_depths(const fs::path &dir, const SyntheticScene &scene) {
    std::vector<DepthMap> depths;
    for (int v = 0; v < int(scene.cameras().size()); ++v) {
        const fs::path p = dir / view_filename(v, "nrdm");
        require_file(p);
        DepthMap d = read_depth(p);
        const auto &cam = scene.cameras()[std::size_t(v)];
        if (d.width != cam.width || d.height != cam.height)
            throw InputError(p.string() + ": depth map size does not match view " +
                             std::to_string(v));
        depths.push_back(std::move(d));
    }
    return depths;
}

std::vector<HeldOutView> load_held_out(const fs::path &data, const SyntheticScene &scene) {
    std::vector<HeldOutView> out;
    for (int v = 0; v < int(scene.test_cameras().size()); ++v) {
        const fs::path p = data / "test" / "images" / view_filename(v, "ppm");
        require_file(p);
        out.push_back({scene.test_cameras()[std::size_t(v)], read_ppm(p)});
    }
    return out;
}

SceneInputs make_inputs(DataSet &data, std::vector<DistributionMap> maps) {
    SceneInputs in;
    in.cameras = data.scene.cameras();
    in.images = data.images;
    in.maps = std::move(maps);
    in.range = DepthRange{data.scene.near(), data.scene.far()};
    in.validate();
    return in;
}

/// Flags shared by commands that render.
struct RenderFlags {
    std::string mode = "uniform";
    int k_coarse = 128;
    int k_fine = 8;
    int working_views = 4;
    int sh_degree = 3;
    std::string lookup = "nearest";

    void add(CLI::App *cmd) {
        cmd->add_option("--mode", mode, "Sampling mode")
            ->check(CLI::IsMember({"uniform", "c2f"}))
            ->capture_default_str();
        cmd->add_option("--k-coarse", k_coarse, "Coarse (or uniform) samples per ray")
            ->capture_default_str();
        cmd->add_option("--k-fine", k_fine, "Fine samples per ray (c2f)")->capture_default_str();
        cmd->add_option("--nw", working_views, "Working views")->capture_default_str();
        cmd->add_option("--sh-degree", sh_degree, "Spherical-harmonics degree (0-3)")
            ->capture_default_str();
        cmd->add_option("--lookup", lookup, "Distribution-map lookup")
            ->check(CLI::IsMember({"nearest", "bilinear"}))
            ->capture_default_str();
    }

    RenderConfig config(const SyntheticScene &scene) const {
        RenderConfig c;
        c.mode = mode == "c2f" ? SamplingMode::coarse_to_fine : SamplingMode::uniform;
        c.k_coarse = k_coarse;
        c.k_fine = k_fine;
        c.working_views = working_views;
        c.sh_degree = sh_degree;
        c.lookup = lookup == "bilinear" ? MapLookup::bilinear : MapLookup::nearest;
        c.background = scene.background();
        c.validate();
        return c;
    }

    json to_json() const {
        return {{"mode", mode},       {"k_coarse", k_coarse},   {"k_fine", k_fine},
                {"nw", working_views}, {"sh_degree", sh_degree}, {"lookup", lookup}};
    }
};

// ---------------------------------------------------------------- scene

struct SceneCmd {
    std::string out;
    int views = 16;
    int resolution = 64;
    int test_views = 4;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("scene", "Write the built-in two-sphere scene description");
        cmd->add_option("--out", out, "Output scene file")->required();
        cmd->add_option("--views", views, "Reference views")->capture_default_str();
        cmd->add_option("--resolution", resolution, "Image width and height")->capture_default_str();
        cmd->add_option("--test-views", test_views, "Held-out views")->capture_default_str();
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        if (views < 2 || resolution < 1 || test_views < 0)
            throw ConfigError("scene: need --views >= 2, --resolution >= 1, --test-views >= 0");
        const fs::path path(out);
        if (path.has_parent_path())
            fs::create_directories(path.parent_path());
        detail::write_file_atomic(path, dump_scene(make_two_sphere_scene(views, resolution, test_views)));
        write_manifest(fs::path(out + ".manifest.json"), ctx, "scene",
                       {{"views", views}, {"resolution", resolution}, {"test_views", test_views}},
                       {}, {out}, 0, seconds_since(t0));
        ctx.out << "wrote " << out << "\n";
    }
};

// ---------------------------------------------------------------- synth

struct SynthCmd {
    std::string scene_file;
    std::string out;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("synth", "Render reference and held-out views of a scene");
        cmd->add_option("--scene", scene_file, "Scene description (JSON)")->required();
        cmd->add_option("--out", out, "Output data directory")->required();
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        require_file(scene_file);
        const SyntheticScene scene = load_scene(scene_file);
        const fs::path dir(out);
        for (const char *sub : {"images", "depth", "cameras", "test/images", "test/cameras"})
            fs::create_directories(dir / sub);
        detail::write_file_atomic(dir / "scene.json", dump_scene(scene));
        std::vector<std::string> outputs{(dir / "scene.json").string()};
        for (int v = 0; v < int(scene.cameras().size()); ++v) {
            const auto &cam = scene.cameras()[std::size_t(v)];
            const GroundTruth gt = render_ground_truth(scene, cam);
            write_ppm(dir / "images" / view_filename(v, "ppm"), gt.image);
            write_depth(dir / "depth" / view_filename(v, "nrdm"), gt.depth);
            detail::write_file_atomic(dir / "cameras" / view_filename(v, "json"), dump_camera(cam));
            outputs.push_back((dir / "images" / view_filename(v, "ppm")).string());
        }
        for (int v = 0; v < int(scene.test_cameras().size()); ++v) {
            const auto &cam = scene.test_cameras()[std::size_t(v)];
            write_ppm(dir / "test" / "images" / view_filename(v, "ppm"),
                      render_ground_truth(scene, cam).image);
            detail::write_file_atomic(dir / "test" / "cameras" / view_filename(v, "json"),
                                      dump_camera(cam));
        }
        write_manifest(dir / "manifest_synth.json", ctx, "synth", {{"scene", scene_file}},
                       {scene_file}, outputs, 0, seconds_since(t0));
        ctx.out << "synthesized " << scene.cameras().size() << " reference views and "
                << scene.test_cameras().size() << " held-out views in " << out << "\n";
    }
};

// ---------------------------------------------------------------- init

struct InitCmd {
    std::string data;
    std::string depth_dir;
    std::string out;
    double sigma = 0.005;
    int n_components = 2;
    double noise = 0.0;
    std::uint64_t seed = 0;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("init", "Initialize distribution maps from depth maps");
        cmd->add_option("--data", data, "Data directory written by synth")->required();
        cmd->add_option("--depth-dir", depth_dir, "Depth maps (default <data>/depth)");
        cmd->add_option("--out", out, "Output maps directory")->required();
        cmd->add_option("--sigma", sigma, "Component scale as a fraction of far - near")
            ->capture_default_str();
        cmd->add_option("--n-components", n_components, "Logistic components per ray")
            ->capture_default_str();
        cmd->add_option("--noise", noise, "Depth noise sigma as a fraction of the scene scale")
            ->capture_default_str();
        cmd->add_option("--seed", seed, "Noise seed")->capture_default_str();
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        const SyntheticScene scene = load_data_scene(data);
        const fs::path src = depth_dir.empty() ? fs::path(data) / "depth" : fs::path(depth_dir);
        if (!(sigma > 0.0) || noise < 0.0)
            throw ConfigError("init: --sigma must be > 0 and --noise >= 0");
        if (n_components < 1 || n_components > kMaxComponents)
            throw ConfigError("init: --n-components must be in [1, " +
                              std::to_string(kMaxComponents) + "]");
        const DepthRange range{scene.near(), scene.far()};
        const std::vector<DepthMap> depths = load_depths(src, scene);
        const fs::path dir(out);
        fs::create_directories(dir / "depth");
        std::vector<std::string> outputs;
        for (int v = 0; v < int(depths.size()); ++v) {
            const DepthMap d = noise > 0.0 ? perturb_depth(depths[std::size_t(v)], noise,
                                                           scene.scale(), scene.near(),
                                                           scene.far(), view_noise_seed(seed, v))
                                           : depths[std::size_t(v)];
            const DistributionMap map = init_from_depth(d, sigma, n_components, range, v);
            const fs::path p = dir / view_filename(v, "nray");
            write_distribution_map(p, map);
            if (!(read_distribution_map(p) == map))
                throw InputError(p.string() + ": read-back does not match");
            write_depth(dir / "depth" / view_filename(v, "nrdm"), d);
            outputs.push_back(p.string());
        }
        write_manifest(dir / "manifest_init.json", ctx, "init",
                       {{"sigma", sigma}, {"n_components", n_components}, {"noise", noise},
                        {"depth_dir", src.string()}},
                       {src.string()}, outputs, seed, seconds_since(t0));
        ctx.out << "initialized " << depths.size() << " maps in " << out << "\n";
    }
};

// ---------------------------------------------------------------- render

struct RenderCmd {
    std::string data;
    std::string maps;
    std::string camera_file;
    int test_view = -1;
    int view = -1;
    std::string out;
    std::string gt;
    RenderFlags flags;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("render", "Render a query view");
        cmd->add_option("--data", data, "Data directory")->required();
        cmd->add_option("--maps", maps, "Distribution maps directory")->required();
        auto *cam = cmd->add_option("--camera", camera_file, "Query camera (JSON)");
        auto *tv = cmd->add_option("--test-view", test_view, "Held-out camera index");
        auto *rv = cmd->add_option("--view", view, "Reference camera index (left out)");
        cam->excludes(tv)->excludes(rv);
        tv->excludes(rv);
        cmd->add_option("--out", out, "Output PPM")->required();
        cmd->add_option("--gt", gt, "Ground-truth PPM; prints PSNR");
        flags.add(cmd);
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        DataSet d = load_data(data);
        PinholeCamera query;
        std::optional<int> exclude;
        if (!camera_file.empty()) {
            require_file(camera_file);
            query = parse_camera(detail::read_file(camera_file));
        } else if (test_view >= 0) {
            if (test_view >= int(d.scene.test_cameras().size()))
                throw ConfigError("render: --test-view " + std::to_string(test_view) +
                                  " out of range");
            query = d.scene.test_cameras()[std::size_t(test_view)];
        } else if (view >= 0) {
            if (view >= int(d.scene.cameras().size()))
                throw ConfigError("render: --view " + std::to_string(view) + " out of range");
            query = d.scene.cameras()[std::size_t(view)];
            exclude = view;
        } else {
            throw ConfigError("render: one of --camera, --test-view, --view is required");
        }
        const RenderConfig cfg = flags.config(d.scene);
        const SceneInputs inputs = make_inputs(d, load_maps(maps, d.scene));
        RenderStats stats;
        const Image img = render_image(inputs, query, cfg, &stats);
        const fs::path path(out);
        if (path.has_parent_path())
            fs::create_directories(path.parent_path());
        write_ppm(path, img);
        json config = flags.to_json();
        std::vector<std::string> inputs_used{data, maps};
        if (!gt.empty()) {
            require_file(gt);
            const double p = psnr(img, read_ppm(gt));
            ctx.out << "psnr_db " << fmt("%.4f", p) << "\n";
            inputs_used.push_back(gt);
        }
        write_manifest(fs::path(out + ".manifest.json"), ctx, "render", config, inputs_used, {out},
                       0, seconds_since(t0));
        ctx.out << "rendered " << out << " (" << stats.rays << " rays, " << stats.sh_fits
                << " SH fits)\n";
    }
};

// ---------------------------------------------------------------- optimize

struct OptimizeCmd {
    std::string data;
    std::string maps;
    std::string depth_dir;
    std::string out;
    std::string resume;
    std::int64_t steps = 2000;
    int batch = 256;
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::int64_t halving = 100000;
    double lambda_render = 1.0;
    double lambda_consist = 0.25;
    double lambda_depth = 0.1;
    std::uint64_t seed = 0;
    std::int64_t eval_interval = 500;
    std::int64_t checkpoint_interval = 500;
    std::string consistency = "binary";
    RenderFlags flags;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("optimize", "Refine distribution maps");
        cmd->add_option("--data", data, "Data directory")->required();
        cmd->add_option("--maps", maps, "Initial distribution maps directory")->required();
        cmd->add_option("--depth-dir", depth_dir,
                        "Depth maps for the depth loss (default <maps>/depth, else <data>/depth)");
        cmd->add_option("--out", out, "Output directory")->required();
        cmd->add_option("--resume", resume, "Checkpoint directory to resume from");
        cmd->add_option("--steps", steps, "Total steps")->capture_default_str();
        cmd->add_option("--batch", batch, "Rays per step")->capture_default_str();
        cmd->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
        cmd->add_option("--beta1", beta1, "Adam first-moment decay")->capture_default_str();
        cmd->add_option("--beta2", beta2, "Adam second-moment decay")->capture_default_str();
        cmd->add_option("--halving", halving, "Steps per learning-rate halving")
            ->capture_default_str();
        cmd->add_option("--lambda-render", lambda_render, "Render loss weight")
            ->capture_default_str();
        cmd->add_option("--lambda-consist", lambda_consist, "Consistency loss weight")
            ->capture_default_str();
        cmd->add_option("--lambda-depth", lambda_depth, "Depth loss weight")->capture_default_str();
        cmd->add_option("--seed", seed, "Batch sampling seed")->capture_default_str();
        cmd->add_option("--eval-interval", eval_interval, "Steps between held-out evaluations")
            ->capture_default_str();
        cmd->add_option("--checkpoint-interval", checkpoint_interval, "Steps between checkpoints")
            ->capture_default_str();
        cmd->add_option("--consistency", consistency, "Consistency cross entropy")
            ->check(CLI::IsMember({"binary", "categorical"}))
            ->capture_default_str();
        flags.k_coarse = 64;
        flags.add(cmd);
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        DataSet d = load_data(data);
        TrainConfig tc;
        tc.weights = {lambda_render, lambda_consist, lambda_depth};
        tc.batch_rays = batch;
        tc.steps = steps;
        tc.seed = seed;
        tc.consistency_form =
            consistency == "categorical" ? ConsistencyForm::categorical : ConsistencyForm::binary;
        tc.render = flags.config(d.scene);
        tc.adam.learning_rate = lr;
        tc.adam.beta1 = beta1;
        tc.adam.beta2 = beta2;
        tc.adam.halving_period = halving;
        tc.validate();
        if (eval_interval < 1 || checkpoint_interval < 1)
            throw ConfigError("optimize: intervals must be >= 1");

        const fs::path out_dir(out);
        OptimState state;
        std::vector<DistributionMap> initial;
        if (!resume.empty()) {
            const fs::path ck(resume);
            require_file(ck / "optim_state.bin");
            initial = load_maps(ck / "maps", d.scene);
            try {
                state = read_optim_state(ck / "optim_state.bin");
            } catch (const FormatError &e) {
                throw InputError(std::string("corrupt checkpoint: ") + e.what());
            }
            const OptimState fresh = OptimState::for_maps(initial);
            bool ok = state.moments.size() == fresh.moments.size();
            for (std::size_t i = 0; ok && i < state.moments.size(); ++i)
                ok = state.moments[i].size() == fresh.moments[i].size();
            if (!ok)
                throw InputError("corrupt checkpoint: optimizer state does not match the maps in " +
                                 ck.string());
        } else {
            initial = load_maps(maps, d.scene);
        }
        fs::path depth_src(depth_dir);
        if (depth_dir.empty())
            depth_src = fs::is_directory(fs::path(maps) / "depth") ? fs::path(maps) / "depth"
                                                                    : fs::path(data) / "depth";
        const std::vector<DepthMap> depths = load_depths(depth_src, d.scene);
        const std::vector<HeldOutView> held_out = load_held_out(data, d.scene);
        SceneInputs inputs = make_inputs(d, std::move(initial));

        OptimizeOptions opts;
        opts.eval_interval = eval_interval;
        opts.eval_render = tc.render;
        opts.eval_render.k_coarse = 128;
        opts.eval_render.mode = SamplingMode::uniform;
        opts.checkpoint_dir = out_dir / "checkpoint";
        opts.checkpoint_interval = checkpoint_interval;
        const OptimizeResult result = optimize_scene(inputs, depths, held_out, tc, opts, state);

        fs::create_directories(out_dir / "maps");
        std::vector<std::string> outputs;
        for (const auto &m : inputs.maps) {
            const fs::path p = out_dir / "maps" / view_filename(m.view(), "nray");
            write_distribution_map(p, m);
            outputs.push_back(p.string());
        }
        // metrics from earlier runs are kept when resuming
        const fs::path metrics = out_dir / "metrics.csv";
        std::string csv;
        if (!resume.empty() && fs::is_regular_file(metrics))
            csv = detail::read_file(metrics);
        if (csv.empty())
            csv = format_metrics_header();
        for (const auto &e : result.evals)
            if (resume.empty() || e.step > state.step)
                csv += format_metrics_line(e);
        detail::write_file_atomic(metrics, csv);
        outputs.push_back(metrics.string());

        json config = flags.to_json();
        config["steps"] = steps;
        config["batch"] = batch;
        config["lr"] = lr;
        config["beta1"] = beta1;
        config["beta2"] = beta2;
        config["halving"] = halving;
        config["lambda_render"] = lambda_render;
        config["lambda_consist"] = lambda_consist;
        config["lambda_depth"] = lambda_depth;
        config["consistency"] = consistency;
        config["eval_interval"] = eval_interval;
        config["checkpoint_interval"] = checkpoint_interval;
        config["depth_dir"] = depth_src.string();
        config["resume"] = resume;
        write_manifest(out_dir / "manifest_optimize.json", ctx, "optimize", config,
                       {data, resume.empty() ? maps : resume}, outputs, seed, seconds_since(t0));
        if (!result.evals.empty())
            ctx.out << "held-out psnr_db " << fmt("%.4f", result.evals.front().psnr) << " -> "
                    << fmt("%.4f", result.evals.back().psnr) << "\n";
        ctx.out << "optimized to step " << result.state.step << "; maps in "
                << (out_dir / "maps").string() << "\n";
    }
};

// ---------------------------------------------------------------- eval

struct EvalCmd {
    std::string rendered;
    std::string truth;
    bool csv = false;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("eval", "PSNR of rendered images against ground truth");
        cmd->add_option("--rendered", rendered, "Directory of rendered PPM files")->required();
        cmd->add_option("--gt", truth, "Directory of ground-truth PPM files")->required();
        cmd->add_flag("--csv", csv, "Machine-readable output");
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    static std::vector<std::string> ppm_names(const fs::path &dir) {
        if (!fs::is_directory(dir))
            throw InputError("not a directory: " + dir.string());
        std::vector<std::string> names;
        for (const auto &e : fs::directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".ppm")
                names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        return names;
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto names = ppm_names(rendered);
        const auto gt_names = ppm_names(truth);
        std::vector<std::string> missing;
        for (const auto &n : names)
            if (!std::binary_search(gt_names.begin(), gt_names.end(), n))
                missing.push_back(truth + "/" + n);
        for (const auto &n : gt_names)
            if (!std::binary_search(names.begin(), names.end(), n))
                missing.push_back(rendered + "/" + n);
        if (!missing.empty()) {
            std::string msg = "missing counterpart files:";
            for (const auto &m : missing)
                msg += "\n  " + m;
            throw InputError(msg);
        }
        if (names.empty())
            throw InputError("no PPM files in " + rendered);
        std::vector<double> values;
        for (const auto &n : names) {
            const Image a = read_ppm(fs::path(rendered) / n);
            const Image b = read_ppm(fs::path(truth) / n);
            if (a.width != b.width || a.height != b.height)
                throw InputError(n + ": " + std::to_string(a.width) + "x" +
                                 std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                 std::to_string(b.height));
            values.push_back(psnr(a, b));
        }
        double mean = 0.0;
        for (double v : values)
            mean += v;
        mean /= double(values.size());
        std::ostringstream table;
        if (csv) {
            table << "file,psnr_db\n";
            for (std::size_t i = 0; i < names.size(); ++i)
                table << names[i] << "," << fmt("%.4f", values[i]) << "\n";
            table << "mean," << fmt("%.4f", mean) << "\n";
        } else {
            std::size_t width = 4;
            for (const auto &n : names)
                width = std::max(width, n.size());
            for (std::size_t i = 0; i < names.size(); ++i)
                table << std::left << std::setw(int(width)) << names[i] << "  "
                      << fmt("%8.4f", values[i]) << "\n";
            table << std::left << std::setw(int(width)) << "mean"
                  << "  " << fmt("%8.4f", mean) << "\n";
        }
        ctx.out << table.str();
        write_manifest(fs::path(rendered) / "manifest_eval.json", ctx, "eval", {{"csv", csv}},
                       {rendered, truth}, {}, 0, seconds_since(t0));
    }
};

// ---------------------------------------------------------------- bench

struct BenchCmd {
    std::string data;
    std::string maps;
    int k_uniform = 128;
    int k_coarse = 32;
    int k_fine = 8;
    int working_views = 4;
    int segments = 32;
    std::string out;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("bench", "Compare uniform and coarse-to-fine rendering");
        cmd->add_option("--data", data, "Data directory")->required();
        cmd->add_option("--maps", maps, "Distribution maps directory")->required();
        cmd->add_option("--k-uniform", k_uniform, "Uniform samples per ray")->capture_default_str();
        cmd->add_option("--k-coarse", k_coarse, "Coarse samples per ray")->capture_default_str();
        cmd->add_option("--k-fine", k_fine, "Fine samples per ray")->capture_default_str();
        cmd->add_option("--nw", working_views, "Working views")->capture_default_str();
        cmd->add_option("--segments", segments, "Density-oracle segments")->capture_default_str();
        cmd->add_option("--out", out, "Write the report as JSON");
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    void execute(Context &ctx) {
        const auto t0 = std::chrono::steady_clock::now();
        DataSet d = load_data(data);
        const std::vector<HeldOutView> held_out = load_held_out(data, d.scene);
        if (held_out.empty())
            throw InputError("bench: the scene has no test cameras");
        const SceneInputs inputs = make_inputs(d, load_maps(maps, d.scene));
        json report;
        struct Mode {
            const char *name;
            RenderConfig cfg;
        };
        std::vector<Mode> modes(2);
        modes[0].name = "uniform";
        modes[0].cfg.k_coarse = k_uniform;
        modes[1].name = "c2f";
        modes[1].cfg.mode = SamplingMode::coarse_to_fine;
        modes[1].cfg.k_coarse = k_coarse;
        modes[1].cfg.k_fine = k_fine;
        std::vector<RenderStats> stats(2);
        std::vector<double> secs(2), psnrs(2);
        for (std::size_t m = 0; m < modes.size(); ++m) {
            modes[m].cfg.working_views = working_views;
            modes[m].cfg.background = d.scene.background();
            modes[m].cfg.validate();
            const auto s0 = std::chrono::steady_clock::now();
            double sum = 0.0;
            for (const auto &h : held_out)
                sum += psnr(render_image(inputs, h.camera, modes[m].cfg, &stats[m]), h.truth);
            secs[m] = seconds_since(s0);
            psnrs[m] = sum / double(held_out.size());
            const auto &st = stats[m];
            report[modes[m].name] = {{"rays", st.rays},
                                     {"cdf_evaluations", st.cdf_evaluations},
                                     {"coarse_samples", st.coarse_samples},
                                     {"color_evaluations", st.color_evaluations},
                                     {"sh_fits", st.sh_fits},
                                     {"psnr_db", psnrs[m]},
                                     {"seconds", secs[m]}};
            ctx.out << std::left << std::setw(8) << modes[m].name << " rays " << st.rays
                    << "  cdf_evals/pixel " << fmt("%.1f", double(st.cdf_evaluations) / double(st.rays))
                    << "  color_evals " << st.color_evaluations << "  sh_fits " << st.sh_fits
                    << "  psnr_db " << fmt("%.4f", psnrs[m]) << "  seconds "
                    << fmt("%.3f", secs[m]) << "\n";
        }
        const auto ratio = [](std::uint64_t a, std::uint64_t b) {
            return b == 0 ? 0.0 : double(a) / double(b);
        };
        report["sh_fit_ratio"] = ratio(stats[0].sh_fits, stats[1].sh_fits);
        report["color_evaluation_ratio"] = ratio(stats[0].color_evaluations, stats[1].color_evaluations);
        report["wall_clock_ratio"] = secs[1] > 0.0 ? secs[0] / secs[1] : 0.0;
        report["psnr_gap_db"] = psnrs[0] - psnrs[1];
        ctx.out << "sh_fit ratio " << fmt("%.2f", report["sh_fit_ratio"].get<double>())
                << "  color_evaluation ratio "
                << fmt("%.2f", report["color_evaluation_ratio"].get<double>())
                << "  wall-clock ratio " << fmt("%.2f", report["wall_clock_ratio"].get<double>())
                << "  psnr gap " << fmt("%.3f", report["psnr_gap_db"].get<double>()) << " dB\n";

        // one visibility query each: density oracle vs mixture CDF
        if (segments < 1)
            throw ConfigError("bench: --segments must be >= 1");
        DensityProfile profile;
        const double near = d.scene.near(), far = d.scene.far();
        for (int k = 0; k <= segments; ++k)
            profile.knots.push_back(near + (far - near) * k / segments);
        for (int k = 0; k < segments; ++k)
            profile.densities.push_back(k == segments / 2 ? 50.0 : 0.0);
        const DepthRange range{near, far};
        const auto mixture = decode(inputs.maps[0].raw(std::size_t(0)), range);
        auto &counters = eval_counters();
        const EvalCounters before = counters;
        (void)density_visibility_oracle(profile, far);
        const std::uint64_t density_evals = counters.density - before.density;
        const std::uint64_t c0 = counters.cdf;
        (void)visibility(mixture, 0.5 * (near + far));
        const std::uint64_t cdf_evals = counters.cdf - c0;
        report["density_oracle"] = {{"segments", segments},
                                    {"density_evaluations", density_evals},
                                    {"cdf_evaluations", cdf_evals}};
        ctx.out << "visibility query: density oracle " << density_evals
                << " density evaluations, mixture " << cdf_evals << " CDF evaluation\n";
        const json config = {{"k_uniform", k_uniform}, {"k_coarse", k_coarse}, {"k_fine", k_fine},
                             {"nw", working_views},    {"segments", segments}};
        if (!out.empty()) {
            const fs::path p(out);
            if (p.has_parent_path())
                fs::create_directories(p.parent_path());
            detail::write_file_atomic(p, report.dump(2) + "\n");
            write_manifest(fs::path(out + ".manifest.json"), ctx, "bench", config, {data, maps},
                           {out}, 0, seconds_since(t0));
        } else {
            write_manifest(fs::path(maps) / "manifest_bench.json", ctx, "bench", config,
                           {data, maps}, {}, 0, seconds_since(t0));
        }
    }
};

// ---------------------------------------------------------------- replay

struct ReplayCmd {
    std::string manifest;

    void add(CLI::App &app, std::function<void()> &run, Context &ctx) {
        auto *cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
        cmd->add_option("manifest", manifest, "Manifest JSON")->required();
        cmd->callback([this, &run, &ctx] { run = [this, &ctx] { execute(ctx); }; });
    }

    int code = 0;

    void execute(Context &ctx) {
        require_file(manifest);
        json m;
        try {
            m = json::parse(detail::read_file(manifest));
        } catch (const json::exception &e) {
            throw InputError(manifest + ": " + e.what());
        }
        if (!m.contains("argv") || !m["argv"].is_array())
            throw InputError(manifest + ": no argv record");
        const auto args = m["argv"].get<std::vector<std::string>>();
        if (!args.empty() && args.front() == "replay")
            throw InputError(manifest + ": refusing to replay a replay");
        code = run_cli(args, ctx.out, ctx.err);
    }
};

} // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    Context ctx{out, err, args};
    CLI::App app{"Occlusion-aware image-based rendering from per-view ray distributions", "rayvis"};
    app.require_subcommand(1);
    app.fallthrough();
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();
    app.set_version_flag("--version", std::string(kVersion));

    std::function<void()> run;
    SceneCmd scene;
    SynthCmd synth;
    InitCmd init;
    RenderCmd render;
    OptimizeCmd optimize;
    EvalCmd eval;
    BenchCmd bench;
    ReplayCmd replay;
    scene.add(app, run, ctx);
    synth.add(app, run, ctx);
    init.add(app, run, ctx);
    render.add(app, run, ctx);
    optimize.add(app, run, ctx);
    eval.add(app, run, ctx);
    bench.add(app, run, ctx);
    replay.add(app, run, ctx);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion &) {
        out << kVersion << "\n";
        return kExitOk;
    } catch (const CLI::ParseError &e) {
        err << "error: " << e.what() << "\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return kExitUsage;
    }
    if (threads < 0) {
        err << "error: --threads must be >= 0\n";
        return kExitUsage;
    }
    const int previous = thread_limit().exchange(threads);
    int code = kExitOk;
    try {
        run();
        code = replay.code;
    } catch (const NumericalError &e) {
        err << "numerical failure: " << e.what() << "\n";
        code = kExitNumerical;
    } catch (const DegenerateFitError &e) {
        err << "numerical failure: " << e.what() << "\n";
        code = kExitNumerical;
    } catch (const std::exception &e) {
        err << "error: " << e.what() << "\n";
        code = kExitInput;
    }
    thread_limit().store(previous);
    return code;
}

} // namespace rayvis
