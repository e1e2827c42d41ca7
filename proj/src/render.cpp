// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/render.hpp>

#include <rayvis/parallel.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace rayvis {

void RenderConfig::validate() const {
    if (k_coarse < 2)
        throw ConfigError("render: k_coarse must be >= 2");
    if (k_fine < 0)
        throw ConfigError("render: k_fine must be >= 0");
    if (mode == SamplingMode::coarse_to_fine && k_fine < 1)
        throw ConfigError("render: coarse-to-fine sampling needs k_fine >= 1");
    if (working_views < 1)
        throw ConfigError("render: working_views must be >= 1");
    if (sh_degree < 0 || sh_degree > kMaxShDegree)
        throw ConfigError("render: sh_degree must be in [0, 3]");
    for (double l : regularizer.per_degree)
        if (!(l >= 0.0))
            throw ConfigError("render: regularizer entries must be >= 0");
}

void SceneInputs::validate() const {
    if (cameras.empty())
        throw ConfigError("inputs: no reference views");
    if (images.size() != cameras.size() || maps.size() != cameras.size())
        throw ConfigError("inputs: " + std::to_string(cameras.size()) + " cameras, " +
                          std::to_string(images.size()) + " images, " +
                          std::to_string(maps.size()) + " maps");
    if (!(range.near > 0.0 && range.near < range.far))
        throw ConfigError("inputs: require 0 < near < far");
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        const auto &c = cameras[i];
        if (images[i].width != c.width || images[i].height != c.height)
            throw ConfigError("inputs: image " + std::to_string(i) + " is " +
                              std::to_string(images[i].width) + "x" +
                              std::to_string(images[i].height) + ", camera is " +
                              std::to_string(c.width) + "x" + std::to_string(c.height));
        if (maps[i].width() != c.width || maps[i].height() != c.height)
            throw ConfigError("inputs: distribution map " + std::to_string(i) +
                              " does not match its camera");
        if (maps[i].view() != int(i))
            throw ConfigError("inputs: distribution map at slot " + std::to_string(i) +
                              " belongs to view " + std::to_string(maps[i].view()));
    }
}

WorkingSet select_working_views(const SceneInputs &inputs, const PinholeCamera &query, int n_w,
                                std::optional<int> exclude) {
    const Vec3 center = query.center();
    std::vector<std::pair<double, int>> ranked;
    for (int i = 0; i < inputs.view_count(); ++i) {
        const auto &cam = inputs.cameras[std::size_t(i)];
        if (exclude && *exclude == i)
            continue;
        const double d = (cam.center() - center).norm();
        const bool same = d < 1e-9 && (cam.rotation - query.rotation).norm() < 1e-9;
        if (same)
            continue;
        ranked.emplace_back(d, i);
    }
    if (n_w < 1 || n_w > int(ranked.size()))
        throw ConfigError("select_working_views: requested " + std::to_string(n_w) +
                          " working views, " + std::to_string(ranked.size()) + " available");
    std::sort(ranked.begin(), ranked.end());
    WorkingSet ws{&inputs, query, {}};
    for (int i = 0; i < n_w; ++i)
        ws.views.push_back(ranked[std::size_t(i)].second);
    return ws;
}

namespace {

struct Projected {
    Vec2 pixel;
    double distance; // from the view's camera center
    Vec3 direction;  // unit, camera center -> point
};

std::optional<Projected> project_into(const PinholeCamera &cam, const Vec3 &point) {
    const Vec3 local = cam.rotation * point + cam.translation;
    if (!(local.z() > 0.0))
        return std::nullopt;
    const Vec2 px(cam.fx * local.x() / local.z() + cam.cx, cam.fy * local.y() / local.z() + cam.cy);
    if (!(px.x() >= 0.0 && px.x() < cam.width && px.y() >= 0.0 && px.y() < cam.height))
        return std::nullopt;
    const double dist = local.norm();
    return Projected{px, dist, (point - cam.center()) / dist};
}

/// Fills the pixel taps of `ev` and returns the (interpolated) raw parameters.
RawRayParams<double> lookup_raw(const DistributionMap &map, const Vec2 &px, MapLookup lookup,
                                RayTape::ViewEval &ev) {
    if (lookup == MapLookup::nearest) {
        const int x = std::min(int(px.x()), map.width() - 1);
        const int y = std::min(int(px.y()), map.height() - 1);
        ev.tap_count = 1;
        ev.pixels[0] = std::uint32_t(map.index(x, y));
        ev.pixel_weights[0] = 1.0;
        return map.raw(ev.pixels[0]);
    }
    const double u = std::clamp(px.x() - 0.5, 0.0, double(map.width() - 1));
    const double v = std::clamp(px.y() - 0.5, 0.0, double(map.height() - 1));
    const int x0 = std::min(int(u), map.width() - 1);
    const int y0 = std::min(int(v), map.height() - 1);
    const int x1 = std::min(x0 + 1, map.width() - 1);
    const int y1 = std::min(y0 + 1, map.height() - 1);
    const double fx = u - x0, fy = v - y0;
    const std::array<int, 4> xs{x0, x1, x0, x1}, ys{y0, y0, y1, y1};
    const std::array<double, 4> ws{(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    RawRayParams<double> raw = RawRayParams<double>::Zero(map.stride());
    ev.tap_count = 4;
    for (int k = 0; k < 4; ++k) {
        ev.pixels[std::size_t(k)] = std::uint32_t(map.index(xs[std::size_t(k)], ys[std::size_t(k)]));
        ev.pixel_weights[std::size_t(k)] = ws[std::size_t(k)];
        raw += ws[std::size_t(k)] * map.raw(ev.pixels[std::size_t(k)]);
    }
    return raw;
}

RawRayParams<double> tape_raw(const SceneInputs &inputs, const RayTape::ViewEval &ev) {
    const auto &map = inputs.maps[std::size_t(ev.view)];
    RawRayParams<double> raw = RawRayParams<double>::Zero(map.stride());
    for (int k = 0; k < ev.tap_count; ++k)
        raw += ev.pixel_weights[std::size_t(k)] * map.raw(ev.pixels[std::size_t(k)]);
    return raw;
}

struct SampleEval {
    double alpha = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

/// Shared per-sample pipeline. With `want_color` false only distribution
/// evaluations are performed (coarse stage).
SampleEval evaluate_sample(const WorkingSet &ws, const Vec3 &point, const Vec3 &query_dir,
                           double width, const RenderConfig &config, bool want_color,
                           RenderStats *stats, RayTape::Sample *tape) {
    const SceneInputs &inputs = *ws.inputs;
    RayTape::Sample local;
    RayTape::Sample &rec = tape ? *tape : local;
    rec.views.assign(ws.views.size(), {});

    std::array<WeightedColorSample<double>, 64> fit_buf;
    std::vector<WeightedColorSample<double>> fit_heap;
    const bool small = ws.views.size() <= fit_buf.size();
    if (!small)
        fit_heap.resize(ws.views.size());
    std::span<WeightedColorSample<double>> fit_samples =
        small ? std::span<WeightedColorSample<double>>(fit_buf.data(), ws.views.size())
              : std::span<WeightedColorSample<double>>(fit_heap);

    double numerator = 0.0, denominator = 0.0, max_weight = 0.0;
    for (std::size_t j = 0; j < ws.views.size(); ++j) {
        auto &ev = rec.views[j];
        ev.view = ws.views[j];
        fit_samples[j].weight = 0.0;
        const auto proj = project_into(inputs.cameras[std::size_t(ev.view)], point);
        if (!proj)
            continue;
        ev.in_frustum = true;
        const auto raw = lookup_raw(inputs.maps[std::size_t(ev.view)], proj->pixel, config.lookup, ev);
        const auto dist = decode(raw, inputs.range);
        ev.z0 = proj->distance;
        ev.z1 = proj->distance + width;
        ev.t0 = occlusion_cdf(dist, ev.z0);
        ev.t1 = occlusion_cdf(dist, ev.z1);
        const double v = 1.0 - ev.t0;
        double alpha;
        if (ev.t0 >= 1.0 - kSaturation) {
            ev.saturated = true;
            alpha = 1.0;
        } else {
            alpha = std::clamp((ev.t1 - ev.t0) / v, 0.0, 1.0);
        }
        numerator += alpha * v;
        denominator += v;
        if (want_color) {
            const double w = std::max(0.0, ev.t1 - ev.t0);
            max_weight = std::max(max_weight, w);
            fit_samples[j] = {proj->direction,
                              inputs.images[std::size_t(ev.view)].sample_bilinear(
                                  proj->pixel.x(), proj->pixel.y()),
                              w};
        }
    }
    rec.numerator = numerator;
    rec.denominator = denominator;
    rec.empty = denominator < kEmptyVisibility;

    SampleEval out;
    out.alpha = rec.empty ? 0.0 : numerator / denominator;
    if (!want_color)
        return out;

    if (stats)
        ++stats->color_evaluations;
    rec.fitted = max_weight >= kEmptyVisibility;
    if (!rec.fitted) {
        out.color = config.background;
        return out;
    }
    if (stats)
        ++stats->sh_fits;
    const SHBasis basis(config.sh_degree);
    const ShNormalEquations<double> system(
        std::span<const WeightedColorSample<double>>(fit_samples.data(), fit_samples.size()), basis,
        config.regularizer);
    const SHCoefficients<double> theta = system.coefficients();
    const ShVector<double> y = sh_eval(basis, query_dir);
    out.color = theta.transpose() * y;
    if (tape) {
        const ShVector<double> adjoint = system.solve(y);
        for (std::size_t j = 0; j < ws.views.size(); ++j) {
            auto &ev = rec.views[j];
            if (!ev.in_frustum)
                continue;
            const ShVector<double> b = sh_eval(basis, fit_samples[j].direction);
            ev.adjoint_dot = b.dot(adjoint);
            ev.residual = fit_samples[j].color - theta.transpose() * b;
        }
    }
    return out;
}

} // namespace

std::vector<double> query_visibility(const WorkingSet &working, const Vec3 &point, MapLookup lookup) {
    std::vector<double> out;
    out.reserve(working.views.size());
    for (int view : working.views) {
        const auto proj = project_into(working.inputs->cameras[std::size_t(view)], point);
        if (!proj) {
            out.push_back(0.0);
            continue;
        }
        RayTape::ViewEval ev;
        const auto raw = lookup_raw(working.inputs->maps[std::size_t(view)], proj->pixel, lookup, ev);
        out.push_back(visibility(decode(raw, working.inputs->range), proj->distance));
    }
    return out;
}

double sample_alpha(const WorkingSet &working, const Vec3 &point, double width, MapLookup lookup) {
    if (!(width > 0.0))
        throw std::invalid_argument("sample_alpha: bin width must be positive");
    RenderConfig cfg;
    cfg.lookup = lookup;
    return evaluate_sample(working, point, Vec3::UnitZ(), width, cfg, false, nullptr, nullptr).alpha;
}

std::vector<double> hitting_probs(std::span<const double> alphas) {
    std::vector<double> out(alphas.size());
    double transmittance = 1.0;
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        out[i] = transmittance * alphas[i];
        transmittance *= 1.0 - alphas[i];
    }
    return out;
}

Eigen::Vector3d sample_color(const WorkingSet &working, const Vec3 &point, const Vec3 &direction,
                             double width, const RenderConfig &config) {
    return evaluate_sample(working, point, direction, width, config, true, nullptr, nullptr).color;
}

std::vector<double> uniform_depths(DepthRange range, int k) {
    std::vector<double> z(std::size_t(std::max(k, 0)));
    const double step = range.span() / k;
    for (int i = 0; i < k; ++i)
        z[std::size_t(i)] = range.near + i * step;
    return z;
}

std::vector<double> inverse_cdf_depths(std::span<const double> depths, std::span<const double> widths,
                                       std::span<const double> hits, int k) {
    const double total = std::accumulate(hits.begin(), hits.end(), 0.0);
    if (!(total > 0.0) || k <= 0)
        return {};
    std::vector<double> out;
    out.reserve(std::size_t(k));
    double cdf = 0.0;
    std::size_t bin = 0;
    for (int m = 0; m < k; ++m) {
        const double u = (m + 0.5) / k * total;
        while (bin + 1 < hits.size() && cdf + hits[bin] < u) {
            cdf += hits[bin];
            ++bin;
        }
        const double frac = hits[bin] > 0.0 ? std::clamp((u - cdf) / hits[bin], 0.0, 1.0) : 0.5;
        double z = depths[bin] + frac * widths[bin];
        if (!out.empty() && z <= out.back())
            z = std::nextafter(out.back(), std::numeric_limits<double>::infinity());
        out.push_back(z);
    }
    return out;
}

PixelResult render_pixel(const WorkingSet &working, const Ray &ray, const RenderConfig &config,
                         RenderStats *stats, RayTape *tape) {
    const SceneInputs &inputs = *working.inputs;
    const DepthRange range = inputs.range;
    PixelResult result;
    SampleSet &s = result.samples;
    const std::uint64_t cdf_before = eval_counters().cdf;
    if (stats)
        ++stats->rays;

    if (config.mode == SamplingMode::uniform) {
        s.depths = uniform_depths(range, config.k_coarse);
    } else {
        const auto coarse = uniform_depths(range, config.k_coarse);
        std::vector<double> widths(coarse.size()), alphas(coarse.size());
        for (std::size_t i = 0; i < coarse.size(); ++i) {
            widths[i] = (i + 1 < coarse.size() ? coarse[i + 1] : range.far) - coarse[i];
            alphas[i] = evaluate_sample(working, ray.point_at(coarse[i]), ray.direction, widths[i],
                                        config, false, nullptr, nullptr)
                            .alpha;
        }
        if (stats)
            stats->coarse_samples += coarse.size();
        const auto coarse_hits = hitting_probs(alphas);
        s.depths = inverse_cdf_depths(coarse, widths, coarse_hits, config.k_fine);
    }

    const std::size_t k = s.depths.size();
    s.widths.resize(k);
    s.alphas.resize(k);
    s.colors.resize(k);
    const double max_width = config.mode == SamplingMode::coarse_to_fine
                                 ? range.span() / config.k_coarse
                                 : range.span();
    for (std::size_t i = 0; i < k; ++i)
        s.widths[i] =
            std::min((i + 1 < k ? s.depths[i + 1] : range.far) - s.depths[i], max_width);

    if (tape) {
        tape->samples.assign(k, {});
        tape->range = range;
        tape->inputs = &inputs;
        tape->lookup = config.lookup;
        tape->background = config.background;
    }
    for (std::size_t i = 0; i < k; ++i) {
        const auto eval = evaluate_sample(working, ray.point_at(s.depths[i]), ray.direction,
                                          s.widths[i], config, true, stats,
                                          tape ? &tape->samples[i] : nullptr);
        s.alphas[i] = eval.alpha;
        s.colors[i] = eval.color;
    }
    s.hits = hitting_probs(s.alphas);

    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        color += s.hits[i] * s.colors[i];
        total += s.hits[i];
    }
    result.color = color + (1.0 - total) * config.background;
    if (stats)
        stats->cdf_evaluations += eval_counters().cdf - cdf_before;
    return result;
}

Image render_image(const SceneInputs &inputs, const PinholeCamera &query, const RenderConfig &config,
                   RenderStats *stats) {
    config.validate();
    inputs.validate();
    const WorkingSet ws = select_working_views(inputs, query, config.working_views);
    Image img(query.width, query.height);
    std::vector<RenderStats> row_stats(std::size_t(query.height));
    parallel_for(0, query.height, [&](int y) {
        for (int x = 0; x < query.width; ++x) {
            const auto px = render_pixel(ws, generate_ray(query, x, y), config,
                                         &row_stats[std::size_t(y)]);
            img.at(x, y) = px.color.cwiseMax(0.0).cwiseMin(1.0).array();
        }
    });
    if (stats)
        for (const auto &rs : row_stats)
            *stats += rs;
    return img;
}

void backpropagate(const RayTape &tape, const PixelResult &result, const Eigen::Vector3d &grad_color,
                   std::span<const double> grad_hits, std::vector<ParamGrad> &out) {
    const SampleSet &s = result.samples;
    const std::size_t k = s.size();
    if (tape.samples.size() != k)
        throw std::invalid_argument("backpropagate: tape does not match the rendered samples");
    if (!grad_hits.empty() && grad_hits.size() != k)
        throw std::invalid_argument("backpropagate: grad_hits has the wrong length");

    // dL/dh_i
    std::vector<double> gh(k);
    for (std::size_t i = 0; i < k; ++i)
        gh[i] = grad_color.dot(s.colors[i] - tape.background) + (grad_hits.empty() ? 0.0 : grad_hits[i]);

    // dL/dalpha_k = T_k (gh_k - S_k), S_k = sum_{m>k} gh_m alpha_m prod_{k<n<m} (1 - alpha_n)
    std::vector<double> ga(k), transmittance(k);
    double tr = 1.0;
    for (std::size_t i = 0; i < k; ++i) {
        transmittance[i] = tr;
        tr *= 1.0 - s.alphas[i];
    }
    double suffix = 0.0;
    for (std::size_t i = k; i-- > 0;) {
        ga[i] = transmittance[i] * (gh[i] - suffix);
        suffix = gh[i] * s.alphas[i] + (1.0 - s.alphas[i]) * suffix;
    }

    for (std::size_t i = 0; i < k; ++i) {
        const auto &rec = tape.samples[i];
        const double ga_num = rec.empty ? 0.0 : ga[i] / rec.denominator;
        const double ga_den = rec.empty ? 0.0 : -ga[i] * rec.numerator / (rec.denominator * rec.denominator);
        const Eigen::Vector3d gc = s.hits[i] * grad_color;
        for (const auto &ev : rec.views) {
            if (!ev.in_frustum)
                continue;
            double g0 = 0.0, g1 = 0.0;
            // numerator term alpha~ v: (t1 - t0), or (1 - t0) when saturated
            if (ev.saturated) {
                g0 -= ga_num;
            } else if (ev.t1 - ev.t0 >= 0.0) {
                g0 -= ga_num;
                g1 += ga_num;
            }
            g0 -= ga_den; // denominator term 1 - t0
            if (rec.fitted && ev.t1 - ev.t0 > 0.0) {
                const double gw = ev.adjoint_dot * gc.dot(ev.residual);
                g0 -= gw;
                g1 += gw;
            }
            if (g0 == 0.0 && g1 == 0.0)
                continue;
            const RawRayParams<double> raw = tape_raw(*tape.inputs, ev);
            RawRayParams<double> g = RawRayParams<double>::Zero(raw.size());
            if (g0 != 0.0)
                g += g0 * grad_cdf(raw, ev.z0, tape.range).grad;
            if (g1 != 0.0)
                g += g1 * grad_cdf(raw, ev.z1, tape.range).grad;
            for (int t = 0; t < ev.tap_count; ++t)
                out.push_back({ev.view, ev.pixels[std::size_t(t)], ev.pixel_weights[std::size_t(t)] * g});
        }
    }
}

} // namespace rayvis
