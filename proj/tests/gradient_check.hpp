// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Central finite-difference checks of the rendering and training gradients.
// Distribution maps store 32-bit floats, so every difference quotient divides
// by the step that was actually realized after rounding.

#include <rayvis/optim.hpp>
#include <rayvis/render.hpp>

#include <test_support.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace rayvis::testutil {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradFloor = 1e-6;
inline constexpr double kGradTolerance = 1e-4;

struct GradStats {
    long checked = 0;
    long failures = 0;
    double worst = 0.0;
    std::string first_failure;

    void add(double analytic, double numeric, const std::string &where) {
        if (std::abs(analytic) <= kGradFloor && std::abs(numeric) <= kGradFloor)
            return;
        ++checked;
        const double e = rel_error(analytic, numeric);
        worst = std::max(worst, e);
        if (!(e < kGradTolerance)) {
            ++failures;
            if (first_failure.empty()) {
                std::ostringstream os;
                os << where << ": analytic " << analytic << " numeric " << numeric;
                first_failure = os.str();
            }
        }
    }
    void merge(const GradStats &o) {
        checked += o.checked;
        failures += o.failures;
        worst = std::max(worst, o.worst);
        if (first_failure.empty())
            first_failure = o.first_failure;
    }
};

/// Small random scene: ring cameras around the origin, random images and
/// distribution maps whose components sit inside [near, far].
struct GradScene {
    SceneInputs inputs;
    PinholeCamera query;
};

inline GradScene make_grad_scene(std::mt19937_64 &rng, int views, int resolution, int components) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GradScene g;
    g.inputs.range = DepthRange{3.0, 5.0};
    const double focal = 1.2 * resolution;
    auto ring = [&](double angle, double height) {
        return PinholeCamera::look_at(Vec3(4.0 * std::cos(angle), height, 4.0 * std::sin(angle)),
                                      Vec3::Zero(), Vec3::UnitY(), resolution, resolution, focal);
    };
    const double spacing = 0.35;
    for (int v = 0; v < views; ++v) {
        g.inputs.cameras.push_back(ring(spacing * (v - 0.5 * (views - 1)), 0.3 * u(rng)));
        Image img(resolution, resolution);
        for (Eigen::Index i = 0; i < img.rgb.size(); ++i)
            img.rgb.data()[i] = u(rng);
        g.inputs.images.push_back(img);
        DistributionMap map(v, resolution, resolution, components);
        const DepthRange &r = g.inputs.range;
        for (std::size_t p = 0; p < map.pixel_count(); ++p) {
            RawRayParams<double> raw(3 * components);
            for (int k = 0; k < components; ++k) {
                const double depth = 3.3 + 1.4 * u(rng);
                const double sigma = 0.1 + 0.3 * u(rng);
                raw[k] = logit((depth - r.near) / r.span());
                raw[components + k] = softplus_inverse(sigma - r.min_scale());
                raw[2 * components + k] = 2.0 * u(rng) - 1.0;
            }
            map.set_raw(p, raw);
        }
        g.inputs.maps.push_back(std::move(map));
    }
    g.query = ring(spacing * (u(rng) - 0.5) * 0.5, 0.15);
    g.inputs.validate();
    return g;
}

/// Realized +-step on a float parameter; returns (lo, hi) actually stored.
template <class Eval>
double float_central_difference(float &param, Eval &&eval) {
    const float orig = param;
    const float hi = float(double(orig) + kFdStep);
    const float lo = float(double(orig) - kFdStep);
    param = hi;
    const double f_hi = eval();
    param = lo;
    const double f_lo = eval();
    param = orig;
    return (f_hi - f_lo) / (double(hi) - double(lo));
}

/// Compares dense analytic gradients against finite differences of `loss`
/// over every parameter with a non-zero analytic entry plus `extra_probes`
/// random untouched parameters (whose numeric gradient must vanish).
inline GradStats compare_map_gradients(SceneInputs &inputs, const MapGradients &grads,
                                       const std::function<double()> &loss, std::mt19937_64 &rng,
                                       int extra_probes, const std::string &label) {
    GradStats stats;
    for (std::size_t v = 0; v < inputs.maps.size(); ++v) {
        auto &data = inputs.maps[v].data();
        const std::size_t stride = std::size_t(inputs.maps[v].stride());
        for (std::size_t p = 0; p < data.size() / stride; ++p) {
            bool touched = false;
            for (std::size_t j = 0; j < stride; ++j)
                touched = touched || grads[v][p * stride + j] != 0.0;
            if (!touched)
                continue;
            for (std::size_t j = 0; j < stride; ++j) {
                const std::size_t idx = p * stride + j;
                const double fd = float_central_difference(data[idx], loss);
                stats.add(grads[v][idx], fd,
                          label + " view " + std::to_string(v) + " pixel " + std::to_string(p) +
                              " param " + std::to_string(j));
            }
        }
    }
    for (int i = 0; i < extra_probes; ++i) {
        const std::size_t v = std::uniform_int_distribution<std::size_t>(0, inputs.maps.size() - 1)(rng);
        auto &data = inputs.maps[v].data();
        const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng);
        if (grads[v][idx] != 0.0)
            continue;
        const double fd = float_central_difference(data[idx], loss);
        stats.add(0.0, fd, label + " untouched view " + std::to_string(v) + " index " + std::to_string(idx));
    }
    return stats;
}

enum class RenderTarget { first_alpha, hits, color };

/// One random ray through the rendering pipeline: checks dL/draw for
/// L = g_c . c_o + sum_i g_h,i h^_i against finite differences.
inline GradStats check_render_ray(std::mt19937_64 &rng, RenderTarget target, int k_samples,
                                  MapLookup lookup, int working_views = 3) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GradScene g = make_grad_scene(rng, 3, 8, 1 + int(u(rng) * 2.0));
    RenderConfig cfg;
    cfg.k_coarse = k_samples;
    cfg.working_views = working_views;
    cfg.sh_degree = int(u(rng) * 3.0);
    cfg.lookup = lookup;
    cfg.background = Eigen::Vector3d(u(rng), u(rng), u(rng));
    const WorkingSet ws = select_working_views(g.inputs, g.query, cfg.working_views);
    const Vec2 px(2.0 + 4.0 * u(rng), 2.0 + 4.0 * u(rng));
    const Ray ray = generate_ray(g.query, px);

    Eigen::Vector3d gc = Eigen::Vector3d::Zero();
    std::vector<double> gh(std::size_t(k_samples), 0.0);
    switch (target) {
    case RenderTarget::first_alpha:
        gh[0] = 1.0;
        break;
    case RenderTarget::hits:
        for (auto &x : gh)
            x = 2.0 * u(rng) - 1.0;
        break;
    case RenderTarget::color:
        gc = Eigen::Vector3d(u(rng), u(rng), u(rng)) * 2.0 - Eigen::Vector3d::Ones();
        break;
    }
    auto loss = [&]() {
        const PixelResult r = render_pixel(ws, ray, cfg);
        double l = gc.dot(r.color);
        for (std::size_t i = 0; i < r.samples.size(); ++i)
            l += gh[i] * r.samples.hits[i];
        return l;
    };
    RayTape tape;
    const PixelResult res = render_pixel(ws, ray, cfg, nullptr, &tape);
    std::vector<ParamGrad> sparse;
    backpropagate(tape, res, gc, gh, sparse);
    MapGradients dense = zero_gradients(g.inputs.maps);
    accumulate(dense, sparse);
    const char *names[] = {"alpha^", "h^", "c_o"};
    return compare_map_gradients(g.inputs, dense, loss, rng, 4, names[int(target)]);
}

/// evaluate_batch total loss vs finite differences (symmetric consistency so
/// that the analytic gradient is the full derivative).
inline GradStats check_batch(std::mt19937_64 &rng, ConsistencyForm form, bool with_depth) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GradScene g = make_grad_scene(rng, 3, 6, 1 + int(u(rng) * 2.0));
    TrainConfig cfg;
    cfg.batch_rays = 3;
    cfg.seed = rng();
    cfg.render.k_coarse = 8;
    cfg.render.working_views = 2;
    cfg.render.sh_degree = 1;
    cfg.consistency_form = form;
    cfg.symmetric_consistency = true;
    cfg.weights = {0.7 + u(rng), 0.2 + u(rng), with_depth ? 0.1 + u(rng) : 0.0};
    std::vector<DepthMap> depths;
    for (const auto &cam : g.inputs.cameras) {
        DepthMap d(cam.width, cam.height);
        for (Eigen::Index i = 0; i < d.depth.size(); ++i)
            d.depth(i) = 3.3 + 1.4 * u(rng);
        depths.push_back(d);
    }
    const RayBatch batch = sample_batch(g.inputs, cfg, std::int64_t(u(rng) * 1000));
    const BatchEvaluation eval = evaluate_batch(g.inputs, depths, batch, cfg);
    auto loss = [&]() { return evaluate_batch(g.inputs, depths, batch, cfg).report.total; };
    return compare_map_gradients(g.inputs, eval.grads, loss, rng, 4, "batch");
}

} // namespace rayvis::testutil
