// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Occlusion-aware volume rendering from per-view distribution maps.
//
// For a sample p_i at distance z_i on a query ray with bin width l_i, every
// working view j projects p_i to a pixel, reads that pixel's distribution and
// the distance z_ij of p_i from view j, and contributes
//   v_ij      = 1 - t_j(z_ij)                                  (visibility)
//   alpha~_ij = (t_j(z_ij + l_i) - t_j(z_ij)) / (1 - t_j(z_ij)) (input-ray alpha)
//   h~_ij     = t_j(z_ij + l_i) - t_j(z_ij)                    (hit probability)
// The sample opacity is alpha^_i = sum_j alpha~_ij v_ij / sum_j v_ij, the
// hitting probabilities are h^_i = prod_{k<i} (1 - alpha^_k) alpha^_i, and the
// sample color is a spherical-harmonics fit to the views' colors weighted by
// h~_ij, evaluated along the query direction. The pixel color is
//   c = sum_i c_i h^_i + background (1 - sum_i h^_i).

#include <rayvis/camera.hpp>
#include <rayvis/image.hpp>
#include <rayvis/raydist.hpp>
#include <rayvis/shcolor.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace rayvis {

/// Inconsistent inputs or invalid render/train settings.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Views whose total visibility falls below this contribute no opacity, and
/// samples whose largest color weight falls below it take the background.
inline constexpr double kEmptyVisibility = 1e-6;

enum class SamplingMode { uniform, coarse_to_fine };
enum class MapLookup { nearest, bilinear };

struct RenderConfig {
    int k_coarse = 64;
    int k_fine = 64;
    SamplingMode mode = SamplingMode::uniform;
    int working_views = 8;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    int sh_degree = 3;
    SHRegularizer regularizer{};
    MapLookup lookup = MapLookup::nearest;

    void validate() const;
};

/// Reference views with their images and distribution maps.
struct SceneInputs {
    std::vector<PinholeCamera> cameras;
    std::vector<Image> images;
    std::vector<DistributionMap> maps;
    DepthRange range{1.0, 2.0};

    int view_count() const { return int(cameras.size()); }
    /// Throws ConfigError when counts or dimensions disagree.
    void validate() const;
};

struct WorkingSet {
    const SceneInputs *inputs = nullptr;
    PinholeCamera query;
    std::vector<int> views; // nearest first
};

/// The n_w reference views closest to the query camera center (ties broken
/// by lower index). A reference view identical to the query is skipped, as is
/// `exclude` when given.
WorkingSet select_working_views(const SceneInputs &inputs, const PinholeCamera &query, int n_w,
                                std::optional<int> exclude = std::nullopt);

/// v_ij for each working view; 0 outside the image or behind the camera.
std::vector<double> query_visibility(const WorkingSet &working, const Vec3 &point,
                                     MapLookup lookup = MapLookup::nearest);

/// alpha^_i for a sample point with bin width `width`.
double sample_alpha(const WorkingSet &working, const Vec3 &point, double width,
                    MapLookup lookup = MapLookup::nearest);

/// h_i = prod_{k<i} (1 - alpha_k) alpha_i.
std::vector<double> hitting_probs(std::span<const double> alphas);

/// SH color of a sample point seen along `direction`; background when every
/// working view's weight is below kEmptyVisibility.
Eigen::Vector3d sample_color(const WorkingSet &working, const Vec3 &point, const Vec3 &direction,
                             double width, const RenderConfig &config);

struct SampleSet {
    std::vector<double> depths;
    std::vector<double> widths;
    std::vector<double> alphas;
    std::vector<double> hits;
    std::vector<Eigen::Vector3d> colors;

    std::size_t size() const { return depths.size(); }
};

struct RenderStats {
    std::uint64_t rays = 0;
    std::uint64_t coarse_samples = 0;
    std::uint64_t color_evaluations = 0; // samples that went through sample_color
    std::uint64_t sh_fits = 0;           // normal-equation solves actually performed
    std::uint64_t cdf_evaluations = 0;   // t(z) evaluations, all stages

    RenderStats &operator+=(const RenderStats &o) {
        rays += o.rays;
        cdf_evaluations += o.cdf_evaluations;
        coarse_samples += o.coarse_samples;
        color_evaluations += o.color_evaluations;
        sh_fits += o.sh_fits;
        return *this;
    }
};

struct PixelResult {
    Eigen::Vector3d color; // composited, not clamped
    SampleSet samples;
};

/// Sample depths for uniform sampling: near + i (far - near) / k.
std::vector<double> uniform_depths(DepthRange range, int k);

/// Deterministic stratified inverse-CDF placement of `k` depths within the
/// piecewise-constant distribution given by `hits` over bins
/// [depths[i], depths[i] + widths[i]]. Returns empty when the mass is zero.
std::vector<double> inverse_cdf_depths(std::span<const double> depths,
                                       std::span<const double> widths,
                                       std::span<const double> hits, int k);

class RayTape;

/// Renders one ray. Bin widths are z_{i+1} - z_i (far - z_K for the last
/// sample); in coarse-to-fine mode they are capped at the coarse spacing.
/// When `tape` is given, records what backpropagate needs.
PixelResult render_pixel(const WorkingSet &working, const Ray &ray, const RenderConfig &config,
                         RenderStats *stats = nullptr, RayTape *tape = nullptr);

/// Renders every pixel of `query`, clamped to [0,1]. Row-parallel; output is
/// independent of the worker count.
Image render_image(const SceneInputs &inputs, const PinholeCamera &query,
                   const RenderConfig &config, RenderStats *stats = nullptr);

/// Sparse gradient with respect to distribution-map raw parameters.
struct ParamGrad {
    int view;
    std::uint32_t pixel;
    RawRayParams<double> grad;
};

/// Forward intermediates of one rendered ray.
class RayTape {
public:
    struct ViewEval {
        int view = -1;
        std::array<std::uint32_t, 4> pixels{};
        std::array<double, 4> pixel_weights{};
        int tap_count = 0;
        double z0 = 0.0, z1 = 0.0;
        double t0 = 0.0, t1 = 0.0;
        bool saturated = false;
        bool in_frustum = false;
        // color path
        double adjoint_dot = 0.0;                            // b_j^T (A^-1 y(r))
        Eigen::Vector3d residual = Eigen::Vector3d::Zero(); // c_j - R(r_j; theta)
    };
    struct Sample {
        double numerator = 0.0, denominator = 0.0;
        bool empty = true;       // denominator below kEmptyVisibility
        bool fitted = false;     // color came from an SH fit
        std::vector<ViewEval> views;
    };

    void clear() { samples.clear(); }

    std::vector<Sample> samples;
    DepthRange range{1.0, 2.0};
    const SceneInputs *inputs = nullptr;
    MapLookup lookup = MapLookup::nearest;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

/// Gradients of a scalar loss L with respect to the raw parameters used by a
/// taped ray, given dL/dc (pixel color) and optionally dL/dh^_i. Results are
/// appended to `out` in a fixed order.
void backpropagate(const RayTape &tape, const PixelResult &result,
                   const Eigen::Vector3d &grad_color, std::span<const double> grad_hits,
                   std::vector<ParamGrad> &out);

} // namespace rayvis
