// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Per-ray occlusion distributions.
//
// The occlusion probability along a reference ray is a mixture of logistic
// CDFs, t(z) = sum_k w_k S((z - mu_k) / sigma_k), and the visibility of a
// point at distance z is v(z) = 1 - t(z). One evaluation of t answers a
// visibility query; the density-based alternative needs one density sample
// per segment in front of the point (see density_visibility_oracle).
//
// Trainable parameters are unconstrained ("raw"). A ray with N components
// stores 3N raw values laid out as [means(N) | scales(N) | weight logits(N)]
// and decodes as
//   mu_k    = near + (far - near) * S(raw_mean_k)
//   sigma_k = sigma_min + softplus(raw_scale_k),  sigma_min = 1e-4 (far - near)
//   w       = softmax(raw_weights)

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace rayvis {

inline constexpr int kMaxComponents = 8;
inline constexpr double kMinScaleFraction = 1e-4;
/// input_ray_alpha saturates once t(z0) reaches 1 - kSaturation.
inline constexpr double kSaturation = 1e-12;

template <class Scalar>
using ComponentArray = Eigen::Array<Scalar, Eigen::Dynamic, 1, 0, kMaxComponents, 1>;
template <class Scalar>
using RawRayParams = Eigen::Array<Scalar, Eigen::Dynamic, 1, 0, 3 * kMaxComponents, 1>;

struct DepthRange {
    double near;
    double far;

    double span() const { return far - near; }
    double min_scale() const { return kMinScaleFraction * span(); }
};

template <class Scalar> struct MixtureOfLogistics {
    ComponentArray<Scalar> means;
    ComponentArray<Scalar> scales;
    ComponentArray<Scalar> weights;

    int size() const { return int(means.size()); }
};

/// Evaluation counters (per thread). Used to check that a visibility query
/// costs one distribution evaluation and a density query one sample per segment.
struct EvalCounters {
    std::uint64_t cdf = 0;
    std::uint64_t density = 0;
};

inline EvalCounters &eval_counters() {
    thread_local EvalCounters counters;
    return counters;
}

template <class Scalar> Scalar logistic(Scalar x) {
    using std::exp;
    if (x >= Scalar(0))
        return Scalar(1) / (Scalar(1) + exp(-x));
    const Scalar e = exp(x);
    return e / (Scalar(1) + e);
}

template <class Scalar> Scalar softplus(Scalar x) {
    using std::exp;
    using std::log1p;
    return x > Scalar(30) ? x : (x < Scalar(-30) ? exp(x) : log1p(exp(x)));
}

/// Inverse of softplus for y > 0.
template <class Scalar> Scalar softplus_inverse(Scalar y) {
    using std::exp;
    using std::expm1;
    using std::log;
    return y > Scalar(30) ? y : log(expm1(y));
}

template <class Scalar> Scalar logit(Scalar p) {
    using std::log;
    using std::log1p;
    return log(p) - log1p(-p);
}

template <class Scalar> MixtureOfLogistics<Scalar> decode(const RawRayParams<Scalar> &raw, DepthRange range) {
    if (!(range.near < range.far))
        throw std::invalid_argument("decode: near must be < far");
    const Eigen::Index n = raw.size() / 3;
    MixtureOfLogistics<Scalar> d;
    d.means.resize(n);
    d.scales.resize(n);
    d.weights.resize(n);
    const Scalar span(range.span());
    const Scalar floor(range.min_scale());
    for (Eigen::Index k = 0; k < n; ++k) {
        d.means[k] = Scalar(range.near) + span * logistic(raw[k]);
        d.scales[k] = floor + softplus(raw[n + k]);
    }
    const auto logits = raw.segment(2 * n, n);
    const Scalar top = logits.maxCoeff();
    d.weights = (logits - top).exp();
    d.weights /= d.weights.sum();
    return d;
}

/// t(z): probability that the ray is occluded before distance z.
template <class Scalar> Scalar occlusion_cdf(const MixtureOfLogistics<Scalar> &d, Scalar z) {
    ++eval_counters().cdf;
    Scalar t(0);
    for (int k = 0; k < d.size(); ++k)
        t += d.weights[k] * logistic((z - d.means[k]) / d.scales[k]);
    return t;
}

/// v(z) = 1 - t(z).
template <class Scalar> Scalar visibility(const MixtureOfLogistics<Scalar> &d, Scalar z) {
    return Scalar(1) - occlusion_cdf(d, z);
}

/// t(z1) - t(z0): probability of first hitting a surface inside [z0, z1].
template <class Scalar>
Scalar hit_prob_interval(const MixtureOfLogistics<Scalar> &d, Scalar z0, Scalar z1) {
    if (z0 > z1)
        throw std::invalid_argument("hit_prob_interval: z0 > z1");
    if (z0 == z1)
        return Scalar(0);
    return std::max(Scalar(0), occlusion_cdf(d, z1) - occlusion_cdf(d, z0));
}

template <class Scalar> struct AlphaResult {
    Scalar alpha;
    bool saturated;
};

/// Opacity of [z0, z1] given the ray reached z0: (t(z1) - t(z0)) / (1 - t(z0)).
/// Once t(z0) is within kSaturation of 1 the result is clamped to 1.
template <class Scalar>
AlphaResult<Scalar> input_ray_alpha(const MixtureOfLogistics<Scalar> &d, Scalar z0, Scalar z1) {
    if (z0 > z1)
        throw std::invalid_argument("input_ray_alpha: z0 > z1");
    const Scalar t0 = occlusion_cdf(d, z0);
    const Scalar t1 = occlusion_cdf(d, z1);
    if (t0 >= Scalar(1 - kSaturation))
        return {Scalar(1), true};
    return {std::clamp((t1 - t0) / (Scalar(1) - t0), Scalar(0), Scalar(1)), false};
}

template <class Scalar> struct CdfWithGradient {
    Scalar value;
    RawRayParams<Scalar> grad; // d t(z) / d raw, same layout as the raw parameters
};

/// t(z) together with its gradient with respect to the raw parameters.
template <class Scalar>
CdfWithGradient<Scalar> grad_cdf(const RawRayParams<Scalar> &raw, Scalar z, DepthRange range) {
    ++eval_counters().cdf;
    const Eigen::Index n = raw.size() / 3;
    const auto d = decode(raw, range);
    CdfWithGradient<Scalar> out{Scalar(0), RawRayParams<Scalar>::Zero(raw.size())};
    ComponentArray<Scalar> s(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        s[k] = logistic((z - d.means[k]) / d.scales[k]);
        out.value += d.weights[k] * s[k];
    }
    const Scalar span(range.span());
    for (Eigen::Index k = 0; k < n; ++k) {
        const Scalar u = (z - d.means[k]) / d.scales[k];
        const Scalar ds = s[k] * (Scalar(1) - s[k]); // S'(u)
        const Scalar sm = logistic(raw[k]);
        out.grad[k] = -d.weights[k] * ds / d.scales[k] * span * sm * (Scalar(1) - sm);
        out.grad[n + k] = -d.weights[k] * ds * u / d.scales[k] * logistic(raw[n + k]);
        out.grad[2 * n + k] = d.weights[k] * (s[k] - out.value);
    }
    return out;
}

/// Raw parameters whose decoded components all sit at `depth` with scale
/// `sigma` and uniform weights. `depth` is clamped into the open range.
RawRayParams<double> raw_from_depth(double depth, double sigma, int n_components, DepthRange range);

/// Per-pixel raw distribution parameters for one reference view, stored as
/// 32-bit floats in row-major pixel order.
class DistributionMap {
public:
    DistributionMap() = default;
    DistributionMap(int view, int width, int height, int n_components);

    int view() const { return view_; }
    int width() const { return width_; }
    int height() const { return height_; }
    int n_components() const { return n_components_; }
    int stride() const { return 3 * n_components_; }
    std::size_t pixel_count() const { return std::size_t(width_) * std::size_t(height_); }

    RawRayParams<double> raw(std::size_t pixel) const;
    RawRayParams<double> raw(int x, int y) const { return raw(index(x, y)); }
    void set_raw(std::size_t pixel, const RawRayParams<double> &values);
    std::size_t index(int x, int y) const { return std::size_t(y) * std::size_t(width_) + std::size_t(x); }

    std::vector<float> &data() { return params_; }
    const std::vector<float> &data() const { return params_; }

    bool operator==(const DistributionMap &o) const = default;

private:
    int view_ = 0;
    int width_ = 0;
    int height_ = 0;
    int n_components_ = 0;
    std::vector<float> params_;
};

/// NRAY format: "NRAY", u32 version (1), u32 view, u32 height, u32 width,
/// u32 n_components, then height*width*3*n_components little-endian f32.
std::string encode_distribution_map(const DistributionMap &map);
DistributionMap decode_distribution_map(const std::string &bytes, const std::string &what = "NRAY");
void write_distribution_map(const std::filesystem::path &path, const DistributionMap &map);
DistributionMap read_distribution_map(const std::filesystem::path &path);

/// Piecewise-constant density: densities[k] applies on [knots[k], knots[k+1]).
struct DensityProfile {
    std::vector<double> knots;
    std::vector<double> densities;

    int segments() const { return int(densities.size()); }
    void validate() const;
};

/// v(z) = prod_k (1 - alpha_k), alpha_k = 1 - exp(-ReLU(d_k) * overlap_k),
/// where overlap_k is the part of segment k in front of z. Samples the density
/// of every segment, so each query costs segments() evaluations.
double density_visibility_oracle(const DensityProfile &profile, double z);

struct FitOptions {
    int restarts = 6;
    int iterations = 1500;
    double learning_rate = 0.05;
    std::uint64_t seed = 1;
};

struct LogisticFit {
    MixtureOfLogistics<double> mixture;
    RawRayParams<double> raw;
    DepthRange range;   // decode range used by the fit
    double max_residual; // max |t - target| on the grid
};

/// Least-squares fit of t(z) to 1 - density_visibility_oracle(z) on `grid`
/// using grad_cdf and Adam; keeps the best of several seeded restarts. The
/// decode range extends one knot span beyond the profile on both sides.
LogisticFit fit_logistics_to_density(const DensityProfile &profile, int n_components,
                                     const std::vector<double> &grid, const FitOptions &options = {});

} // namespace rayvis
