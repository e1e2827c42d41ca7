// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/raydist.hpp>

#include <rayvis/adam.hpp>

#include "binary_io.hpp"

#include <limits>
#include <random>

namespace rayvis {

namespace {
constexpr std::uint32_t kNrayVersion = 1;
}

RawRayParams<double> raw_from_depth(double depth, double sigma, int n_components, DepthRange range) {
    if (n_components < 1 || n_components > kMaxComponents)
        throw std::invalid_argument("raw_from_depth: n_components out of range");
    if (!(sigma > range.min_scale()))
        throw std::invalid_argument("raw_from_depth: sigma must exceed the scale floor");
    const double frac = std::clamp((depth - range.near) / range.span(), 1e-7, 1.0 - 1e-7);
    RawRayParams<double> raw = RawRayParams<double>::Zero(3 * n_components);
    raw.head(n_components).setConstant(logit(frac));
    raw.segment(n_components, n_components).setConstant(softplus_inverse(sigma - range.min_scale()));
    return raw;
}

DistributionMap::DistributionMap(int view, int width, int height, int n_components)
    : view_(view), width_(width), height_(height), n_components_(n_components) {
    if (width < 1 || height < 1)
        throw std::invalid_argument("DistributionMap: empty grid");
    if (n_components < 1 || n_components > kMaxComponents)
        throw std::invalid_argument("DistributionMap: n_components must be in [1, " +
                                    std::to_string(kMaxComponents) + "]");
    params_.assign(pixel_count() * std::size_t(stride()), 0.0f);
}

RawRayParams<double> DistributionMap::raw(std::size_t pixel) const {
    const std::size_t s = std::size_t(stride());
    RawRayParams<double> out(stride());
    const float *src = params_.data() + pixel * s;
    for (std::size_t i = 0; i < s; ++i)
        out[Eigen::Index(i)] = src[i];
    return out;
}

void DistributionMap::set_raw(std::size_t pixel, const RawRayParams<double> &values) {
    if (values.size() != stride())
        throw std::invalid_argument("DistributionMap::set_raw: wrong parameter count");
    const std::size_t s = std::size_t(stride());
    float *dst = params_.data() + pixel * s;
    for (std::size_t i = 0; i < s; ++i)
        dst[i] = float(values[Eigen::Index(i)]);
}

std::string encode_distribution_map(const DistributionMap &map) {
    std::string out = "NRAY";
    out.reserve(4 + 5 * 4 + map.data().size() * 4);
    detail::put_u32(out, kNrayVersion);
    detail::put_u32(out, std::uint32_t(map.view()));
    detail::put_u32(out, std::uint32_t(map.height()));
    detail::put_u32(out, std::uint32_t(map.width()));
    detail::put_u32(out, std::uint32_t(map.n_components()));
    for (float v : map.data())
        detail::put_f32(out, v);
    return out;
}

DistributionMap decode_distribution_map(const std::string &bytes, const std::string &what) {
    detail::ByteReader in(bytes, what);
    in.expect_magic("NRAY");
    const auto version = in.u32();
    if (version != kNrayVersion)
        throw FormatError(what + ": unsupported NRAY version " + std::to_string(version));
    const auto view = in.u32();
    const auto height = in.u32();
    const auto width = in.u32();
    const auto n = in.u32();
    if (width == 0 || height == 0 || width > (1u << 16) || height > (1u << 16) || n == 0 ||
        n > std::uint32_t(kMaxComponents))
        throw FormatError(what + ": bad NRAY header");
    const std::size_t count = std::size_t(width) * height * 3 * n;
    if (in.remaining() != count * 4)
        throw FormatError(what + ": payload size " + std::to_string(in.remaining()) +
                          " does not match header (" + std::to_string(count * 4) + ")");
    DistributionMap map{int(view), int(width), int(height), int(n)};
    for (float &v : map.data())
        v = in.f32();
    return map;
}

void write_distribution_map(const std::filesystem::path &path, const DistributionMap &map) {
    detail::write_file_atomic(path, encode_distribution_map(map));
}

DistributionMap read_distribution_map(const std::filesystem::path &path) {
    return decode_distribution_map(detail::read_file(path), path.string());
}

void DensityProfile::validate() const {
    if (knots.size() < 2 || densities.size() + 1 != knots.size())
        throw std::invalid_argument("DensityProfile: need n+1 knots for n densities");
    for (std::size_t i = 1; i < knots.size(); ++i)
        if (!(knots[i] > knots[i - 1]))
            throw std::invalid_argument("DensityProfile: knots must be strictly increasing");
}

double density_visibility_oracle(const DensityProfile &profile, double z) {
    double optical_depth = 0.0;
    for (int k = 0; k < profile.segments(); ++k) {
        ++eval_counters().density;
        const double d = std::max(0.0, profile.densities[std::size_t(k)]);
        const double lo = profile.knots[std::size_t(k)];
        const double hi = profile.knots[std::size_t(k) + 1];
        const double overlap = std::clamp(z, lo, hi) - lo;
        optical_depth += d * overlap;
    }
    // prod (1 - alpha_k) = prod exp(-d_k l_k)
    return std::exp(-optical_depth);
}

LogisticFit fit_logistics_to_density(const DensityProfile &profile, int n_components,
                                     const std::vector<double> &grid, const FitOptions &options) {
    profile.validate();
    if (grid.empty())
        throw std::invalid_argument("fit_logistics_to_density: empty grid");
    const double lo = profile.knots.front();
    const double hi = profile.knots.back();
    const DepthRange range{lo - (hi - lo), hi + (hi - lo)};

    std::vector<double> target(grid.size());
    for (std::size_t g = 0; g < grid.size(); ++g)
        target[g] = 1.0 - density_visibility_oracle(profile, grid[g]);

    const int n = n_components;
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    LogisticFit best{{}, {}, range, std::numeric_limits<double>::infinity()};
    double best_loss = std::numeric_limits<double>::infinity();
    for (int restart = 0; restart < options.restarts; ++restart) {
        RawRayParams<double> raw(3 * n);
        for (int k = 0; k < n; ++k) {
            const double mean = lo + (hi - lo) * unit(rng);
            raw[k] = logit((mean - range.near) / range.span());
            raw[n + k] = softplus_inverse(0.05 * (hi - lo));
            raw[2 * n + k] = 0.0;
        }
        AdamConfig adam;
        adam.learning_rate = options.learning_rate;
        AdamMoments moments(std::size_t(3 * n));
        std::vector<double> grad(std::size_t(3 * n));
        for (int it = 0; it < options.iterations; ++it) {
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t g = 0; g < grid.size(); ++g) {
                const auto cg = grad_cdf(raw, grid[g], range);
                const double r = cg.value - target[g];
                for (int i = 0; i < 3 * n; ++i)
                    grad[std::size_t(i)] += 2.0 * r * cg.grad[i];
            }
            adam_update<double>(adam, it, moments, std::span<double>(raw.data(), raw.size()), grad);
        }
        const auto mix = decode(raw, range);
        double loss = 0.0, worst = 0.0;
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const double r = occlusion_cdf(mix, grid[g]) - target[g];
            loss += r * r;
            worst = std::max(worst, std::abs(r));
        }
        if (loss < best_loss) {
            best_loss = loss;
            best = {mix, raw, range, worst};
        }
    }
    return best;
}

} // namespace rayvis
