// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/optim.hpp>

#include <rayvis/parallel.hpp>

#include "binary_io.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <cstring>
#include <random>

namespace rayvis {

void TrainConfig::validate() const {
    if (weights.render < 0.0 || weights.consistency < 0.0 || weights.depth < 0.0)
        throw ConfigError("train: loss weights must be >= 0");
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5))
        throw ConfigError("train: prob_clamp must be in (0, 0.5)");
    if (batch_rays < 1)
        throw ConfigError("train: batch_rays must be >= 1");
    if (steps < 0)
        throw ConfigError("train: steps must be >= 0");
    if (!(adam.learning_rate > 0.0) || adam.halving_period < 1)
        throw ConfigError("train: invalid learning-rate schedule");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw ConfigError("train: Adam betas must be in [0, 1)");
    render.validate();
}

ColorLoss render_loss(std::span<const Eigen::Vector3d> rendered,
                      std::span<const Eigen::Vector3d> truth) {
    if (rendered.size() != truth.size())
        throw std::invalid_argument("render_loss: " + std::to_string(rendered.size()) +
                                    " rendered colors vs " + std::to_string(truth.size()) +
                                    " ground-truth colors");
    ColorLoss out{0.0, std::vector<Eigen::Vector3d>(rendered.size())};
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        const Eigen::Vector3d d = rendered[i] - truth[i];
        out.value += d.squaredNorm();
        out.grad[i] = 2.0 * d;
    }
    return out;
}

PairLoss binary_cross_entropy(std::span<const double> target, std::span<const double> prediction,
                              double eps) {
    if (target.size() != prediction.size())
        throw std::invalid_argument("cross entropy: length mismatch");
    const std::size_t k = target.size();
    PairLoss out{0.0, std::vector<double>(k), std::vector<double>(k)};
    if (k == 0)
        return out;
    const double inv = 1.0 / double(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double a = target[i];
        const double b = std::clamp(prediction[i], eps, 1.0 - eps);
        out.value += -a * std::log(b) - (1.0 - a) * std::log1p(-b);
        out.grad_first[i] = inv * (std::log1p(-b) - std::log(b));
        const bool inside = prediction[i] > eps && prediction[i] < 1.0 - eps;
        out.grad_second[i] = inside ? inv * (-a / b + (1.0 - a) / (1.0 - b)) : 0.0;
    }
    out.value *= inv;
    return out;
}

PairLoss categorical_cross_entropy(std::span<const double> target,
                                   std::span<const double> prediction, double eps) {
    if (target.size() != prediction.size())
        throw std::invalid_argument("cross entropy: length mismatch");
    const std::size_t k = target.size();
    PairLoss out{0.0, std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        sa += target[i];
        sb += prediction[i];
    }
    if (!(sa > 0.0) || !(sb > 0.0))
        return out;
    std::vector<double> nll(k), gq(k);
    double mean_nll = 0.0, mean_gq = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double p = target[i] / sa;
        const double q = prediction[i] / sb;
        nll[i] = -std::log(std::max(q, eps));
        gq[i] = q > eps ? -p / q : 0.0;
        out.value += p * nll[i];
        mean_nll += p * nll[i];
        mean_gq += gq[i] * q;
    }
    for (std::size_t i = 0; i < k; ++i) {
        out.grad_first[i] = (nll[i] - mean_nll) / sa;
        out.grad_second[i] = (gq[i] - mean_gq) / sb;
    }
    return out;
}

PairLoss consistency_loss(std::span<const double> own_hits, std::span<const double> rendered_hits,
                          double eps, ConsistencyForm form) {
    return form == ConsistencyForm::binary
               ? binary_cross_entropy(own_hits, rendered_hits, eps)
               : categorical_cross_entropy(own_hits, rendered_hits, eps);
}

DepthLoss depth_loss(const DistributionMap &map, const DepthMap &depth,
                     std::span<const std::uint32_t> pixels, DepthRange range) {
    if (map.width() != depth.width || map.height() != depth.height)
        throw std::invalid_argument("depth_loss: depth map is " + std::to_string(depth.width) +
                                    "x" + std::to_string(depth.height) + ", distribution map is " +
                                    std::to_string(map.width()) + "x" +
                                    std::to_string(map.height()));
    DepthLoss out{0.0, {}};
    out.grads.reserve(pixels.size());
    for (std::uint32_t p : pixels) {
        const auto raw = map.raw(p);
        const double s = logistic(raw[0]);
        const double mu = range.near + range.span() * s;
        const double r = mu - depth.depth(Eigen::Index(p));
        out.value += r * r;
        RawRayParams<double> g = RawRayParams<double>::Zero(raw.size());
        g[0] = 2.0 * r * range.span() * s * (1.0 - s);
        out.grads.push_back({map.view(), p, g});
    }
    return out;
}

DistributionMap init_from_depth(const DepthMap &depth, double sigma_fraction, int n_components,
                                DepthRange range, int view) {
    if (!(sigma_fraction > 0.0))
        throw std::invalid_argument("init_from_depth: sigma must be positive");
    DistributionMap map(view, depth.width, depth.height, n_components);
    const double sigma = sigma_fraction * range.span();
    for (std::size_t p = 0; p < map.pixel_count(); ++p)
        map.set_raw(p, raw_from_depth(depth.depth(Eigen::Index(p)), sigma, n_components, range));
    return map;
}

OptimState OptimState::for_maps(std::span<const DistributionMap> maps) {
    OptimState s;
    for (const auto &m : maps)
        s.moments.emplace_back(m.data().size());
    return s;
}

MapGradients zero_gradients(std::span<const DistributionMap> maps) {
    MapGradients g;
    g.reserve(maps.size());
    for (const auto &m : maps)
        g.emplace_back(m.data().size(), 0.0);
    return g;
}

void accumulate(MapGradients &dense, std::span<const ParamGrad> sparse) {
    for (const auto &pg : sparse) {
        auto &buf = dense.at(std::size_t(pg.view));
        const std::size_t stride = std::size_t(pg.grad.size());
        double *dst = buf.data() + std::size_t(pg.pixel) * stride;
        for (std::size_t i = 0; i < stride; ++i)
            dst[i] += pg.grad[Eigen::Index(i)];
    }
}

void adam_step(OptimState &state, std::span<DistributionMap> maps, const MapGradients &grads,
               const AdamConfig &config) {
    if (state.moments.size() != maps.size() || grads.size() != maps.size())
        throw std::invalid_argument("adam_step: " + std::to_string(maps.size()) + " maps, " +
                                    std::to_string(state.moments.size()) + " moment blocks, " +
                                    std::to_string(grads.size()) + " gradient blocks");
    for (std::size_t i = 0; i < maps.size(); ++i)
        adam_update<float>(config, state.step, state.moments[i], std::span<float>(maps[i].data()),
                           grads[i]);
    ++state.step;
}

RayBatch sample_batch(const SceneInputs &inputs, const TrainConfig &config, std::int64_t step) {
    std::seed_seq seq{std::uint64_t(config.seed), std::uint64_t(step), std::uint64_t(0x6e726179)};
    std::mt19937_64 rng(seq);
    RayBatch batch;
    batch.view = int(std::uniform_int_distribution<int>(0, inputs.view_count() - 1)(rng));
    const auto &cam = inputs.cameras[std::size_t(batch.view)];
    std::uniform_int_distribution<std::uint32_t> pick(0, std::uint32_t(cam.width * cam.height - 1));
    batch.pixels.resize(std::size_t(config.batch_rays));
    for (auto &p : batch.pixels)
        p = pick(rng);
    return batch;
}

OwnHits own_hit_probs(const RawRayParams<double> &raw, std::span<const double> depths,
                      std::span<const double> widths, DepthRange range) {
    OwnHits out;
    out.hits.resize(depths.size());
    out.grads.resize(depths.size());
    for (std::size_t i = 0; i < depths.size(); ++i) {
        const auto lo = grad_cdf(raw, depths[i], range);
        const auto hi = grad_cdf(raw, depths[i] + widths[i], range);
        out.hits[i] = hi.value - lo.value;
        out.grads[i] = hi.grad - lo.grad;
    }
    return out;
}

namespace {

/// Gradients of the configured consistency loss with respect to the view's
/// own hits and the rendered hits.
PairLoss consistency_terms(std::span<const double> own, std::span<const double> rendered,
                           const TrainConfig &cfg) {
    if (cfg.consistency_target == ConsistencyTarget::own)
        return consistency_loss(own, rendered, cfg.prob_clamp, cfg.consistency_form);
    // rendered hits as the target: swap the roles and the gradients back
    PairLoss swapped = cfg.consistency_form == ConsistencyForm::binary
                           ? binary_cross_entropy(rendered, own, cfg.prob_clamp)
                           : categorical_cross_entropy(rendered, own, cfg.prob_clamp);
    std::swap(swapped.grad_first, swapped.grad_second);
    return swapped;
}

struct RaySlot {
    double render = 0.0;
    double consistency = 0.0;
    std::vector<ParamGrad> grads;
};

} // namespace

BatchEvaluation evaluate_batch(const SceneInputs &inputs, std::span<const DepthMap> depths,
                               const RayBatch &batch, const TrainConfig &config) {
    config.validate();
    if (inputs.view_count() < 2)
        throw ConfigError("train: at least two reference views are required");
    const int q = batch.view;
    const PinholeCamera &cam = inputs.cameras[std::size_t(q)];
    const DistributionMap &own_map = inputs.maps[std::size_t(q)];
    const WorkingSet ws = select_working_views(inputs, cam, config.render.working_views, q);
    const LossWeights &w = config.weights;

    std::vector<RaySlot> slots(batch.pixels.size());
    parallel_for(0, int(batch.pixels.size()), [&](int b) {
        RaySlot &slot = slots[std::size_t(b)];
        const std::uint32_t p = batch.pixels[std::size_t(b)];
        const int x = int(p % std::uint32_t(cam.width));
        const int y = int(p / std::uint32_t(cam.width));
        RayTape tape;
        const PixelResult res = render_pixel(ws, generate_ray(cam, x, y), config.render, nullptr, &tape);

        const Eigen::Vector3d truth = inputs.images[std::size_t(q)].at(x, y).matrix();
        const Eigen::Vector3d diff = res.color - truth;
        slot.render = diff.squaredNorm();
        const Eigen::Vector3d grad_color = w.render * 2.0 * diff;

        std::vector<double> grad_hits;
        const SampleSet &s = res.samples;
        if (s.size() > 0) {
            const auto raw = own_map.raw(p);
            const OwnHits own = own_hit_probs(raw, s.depths, s.widths, inputs.range);
            const PairLoss cl = consistency_terms(own.hits, s.hits, config);
            slot.consistency = cl.value;
            if (w.consistency > 0.0) {
                RawRayParams<double> g = RawRayParams<double>::Zero(raw.size());
                for (std::size_t i = 0; i < s.size(); ++i)
                    g += (w.consistency * cl.grad_first[i]) * own.grads[i];
                slot.grads.push_back({q, p, g});
                if (config.symmetric_consistency) {
                    grad_hits.resize(s.size());
                    for (std::size_t i = 0; i < s.size(); ++i)
                        grad_hits[i] = w.consistency * cl.grad_second[i];
                }
            }
        }
        backpropagate(tape, res, grad_color, grad_hits, slot.grads);
    });

    BatchEvaluation out;
    out.query_view = q;
    out.grads = zero_gradients(inputs.maps);
    for (const auto &slot : slots) {
        out.report.render_loss += slot.render;
        out.report.consistency_loss += slot.consistency;
        accumulate(out.grads, slot.grads);
    }
    if (q < int(depths.size())) {
        DepthLoss dl = depth_loss(own_map, depths[std::size_t(q)], batch.pixels, inputs.range);
        out.report.depth_loss = dl.value;
        if (w.depth > 0.0) {
            for (auto &pg : dl.grads)
                pg.grad *= w.depth;
            accumulate(out.grads, dl.grads);
        }
    }
    out.report.total = w.render * out.report.render_loss +
                       w.consistency * out.report.consistency_loss + w.depth * out.report.depth_loss;
    if (!std::isfinite(out.report.total))
        throw NumericalError("train: non-finite loss for view " + std::to_string(q));
    for (const auto &g : out.grads)
        for (double v : g)
            if (!std::isfinite(v))
                throw NumericalError("train: non-finite gradient for view " + std::to_string(q));
    return out;
}

LossReport train_step(SceneInputs &inputs, std::span<const DepthMap> depths,
                      const TrainConfig &config, OptimState &state) {
    const RayBatch batch = sample_batch(inputs, config, state.step);
    BatchEvaluation eval = evaluate_batch(inputs, depths, batch, config);
    eval.report.step = state.step;
    adam_step(state, inputs.maps, eval.grads, config.adam);
    return eval.report;
}

std::vector<double> memorize_hits(RawRayParams<double> &raw, std::span<const double> depths,
                                  std::span<const double> widths, std::span<const double> target,
                                  DepthRange range, const TrainConfig &config, int steps) {
    if (target.size() != depths.size() || widths.size() != depths.size())
        throw std::invalid_argument("memorize_hits: length mismatch");
    AdamMoments moments(std::size_t(raw.size()));
    std::vector<double> trace;
    std::vector<double> grad(std::size_t(raw.size()));
    for (int it = 0; it < steps; ++it) {
        const OwnHits own = own_hit_probs(raw, depths, widths, range);
        const PairLoss cl = consistency_terms(own.hits, target, config);
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < own.hits.size(); ++i)
            for (Eigen::Index j = 0; j < raw.size(); ++j)
                grad[std::size_t(j)] += cl.grad_first[i] * own.grads[i][j];
        adam_update<double>(config.adam, it, moments, std::span<double>(raw.data(), raw.size()), grad);
        const OwnHits after = own_hit_probs(raw, depths, widths, range);
        double err = 0.0;
        for (std::size_t i = 0; i < after.hits.size(); ++i)
            err += std::abs(after.hits[i] - target[i]);
        trace.push_back(0.5 * err);
    }
    return trace;
}

double held_out_psnr(const SceneInputs &inputs, std::span<const HeldOutView> held_out,
                     const RenderConfig &config) {
    if (held_out.empty())
        return 0.0;
    double sum = 0.0;
    for (const auto &h : held_out)
        sum += psnr(render_image(inputs, h.camera, config), h.truth);
    return sum / double(held_out.size());
}

std::string view_filename(int view, const std::string &extension) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03d.", view);
    return buf + extension;
}

void write_checkpoint(const std::filesystem::path &dir, std::span<const DistributionMap> maps,
                      const OptimState &state) {
    std::filesystem::create_directories(dir / "maps");
    for (const auto &m : maps)
        write_distribution_map(dir / "maps" / view_filename(m.view(), "nray"), m);
    std::string out = "NROS";
    detail::put_u32(out, 1);
    const std::int64_t step = state.step;
    char buf[8];
    std::memcpy(buf, &step, 8);
    out.append(buf, 8);
    detail::put_u32(out, std::uint32_t(state.moments.size()));
    for (const auto &m : state.moments) {
        const std::uint64_t n = m.size();
        std::memcpy(buf, &n, 8);
        out.append(buf, 8);
        for (double v : m.first)
            detail::put_f64(out, v);
        for (double v : m.second)
            detail::put_f64(out, v);
    }
    detail::write_file_atomic(dir / "optim_state.bin", out);
}

OptimState read_optim_state(const std::filesystem::path &path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader in(bytes, path.string());
    in.expect_magic("NROS");
    if (in.u32() != 1)
        throw FormatError(path.string() + ": unsupported optimizer state version");
    OptimState s;
    const std::uint64_t lo = in.u32();
    const std::uint64_t hi = in.u32();
    s.step = std::int64_t(lo | (hi << 32));
    const auto blocks = in.u32();
    for (std::uint32_t b = 0; b < blocks; ++b) {
        const std::uint64_t nlo = in.u32();
        const std::uint64_t nhi = in.u32();
        const std::uint64_t n = nlo | (nhi << 32);
        if (n * 16 > in.remaining())
            throw FormatError(path.string() + ": truncated optimizer state");
        AdamMoments m(n);
        for (auto &v : m.first)
            v = in.f64();
        for (auto &v : m.second)
            v = in.f64();
        s.moments.push_back(std::move(m));
    }
    in.expect_end();
    return s;
}

std::string format_metrics_header() { return "step,render_loss,consist_loss,depth_loss,psnr\n"; }

std::string format_metrics_line(const EvalRecord &r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.6f\n", static_cast<long long>(r.step),
                  r.losses.render_loss, r.losses.consistency_loss, r.losses.depth_loss, r.psnr);
    return buf;
}

OptimizeResult optimize_scene(SceneInputs &inputs, std::span<const DepthMap> depths,
                              std::span<const HeldOutView> held_out, const TrainConfig &config,
                              const OptimizeOptions &options, OptimState state) {
    config.validate();
    inputs.validate();
    if (inputs.view_count() < 2)
        throw ConfigError("optimize: at least two reference views are required");
    if (state.moments.empty())
        state = OptimState::for_maps(inputs.maps);
    if (state.moments.size() != inputs.maps.size())
        throw ConfigError("optimize: optimizer state does not match the maps");

    OptimizeResult result;
    LossReport window{};
    std::int64_t window_steps = 0;
    auto record = [&] {
        EvalRecord rec{state.step, window, held_out_psnr(inputs, held_out, options.eval_render)};
        if (window_steps > 0) {
            rec.losses.render_loss /= double(window_steps);
            rec.losses.consistency_loss /= double(window_steps);
            rec.losses.depth_loss /= double(window_steps);
            rec.losses.total /= double(window_steps);
        }
        rec.losses.step = state.step;
        result.evals.push_back(rec);
        window = {};
        window_steps = 0;
    };
    auto checkpoint = [&] {
        if (options.checkpoint_dir)
            write_checkpoint(*options.checkpoint_dir, inputs.maps, state);
    };

    if (!held_out.empty())
        record();
    while (state.step < config.steps) {
        const LossReport rep = train_step(inputs, depths, config, state);
        result.history.push_back(rep);
        window.render_loss += rep.render_loss;
        window.consistency_loss += rep.consistency_loss;
        window.depth_loss += rep.depth_loss;
        window.total += rep.total;
        ++window_steps;
        const bool last = state.step == config.steps;
        if (!held_out.empty() && (last || state.step % options.eval_interval == 0))
            record();
        if (last || state.step % options.checkpoint_interval == 0)
            checkpoint();
        if (options.on_step && !options.on_step(rep)) {
            checkpoint();
            break;
        }
    }
    if (config.steps == 0 || state.step == 0)
        checkpoint();
    result.state = std::move(state);
    return result;
}

} // namespace rayvis
