// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <rayvis/adam.hpp>
#include <rayvis/image.hpp>
#include <rayvis/raydist.hpp>
#include <rayvis/render.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rayvis {

/// Non-finite loss or gradient during optimization.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double render = 1.0;
    double consistency = 0.25;
    double depth = 0.1;
};

/// Per-sample binary cross entropy, or cross entropy between the per-ray
/// normalized hit distributions.
enum class ConsistencyForm { binary, categorical };

/// Which side of the consistency loss acts as the target. With `rendered`
/// the hit probabilities from rendering are the (stop-gradient) target and the
/// view's own hit probabilities are the prediction, so minimizing the loss
/// copies the rendered occlusion into the view's distribution.
enum class ConsistencyTarget { rendered, own };

struct TrainConfig {
    LossWeights weights{};
    int batch_rays = 512;
    std::int64_t steps = 2000;
    std::uint64_t seed = 0;
    double prob_clamp = 1e-5;
    ConsistencyForm consistency_form = ConsistencyForm::binary;
    ConsistencyTarget consistency_target = ConsistencyTarget::rendered;
    /// Also backpropagate the consistency loss into the rendered hits.
    bool symmetric_consistency = false;
    RenderConfig render{};
    AdamConfig adam{};

    void validate() const;
};

struct LossReport {
    double render_loss = 0.0;
    double consistency_loss = 0.0;
    double depth_loss = 0.0;
    double total = 0.0;
    std::int64_t step = 0;

    bool operator==(const LossReport &) const = default;
};

struct ColorLoss {
    double value;
    std::vector<Eigen::Vector3d> grad; // d loss / d rendered
};

/// sum_b |rendered_b - truth_b|^2.
ColorLoss render_loss(std::span<const Eigen::Vector3d> rendered,
                      std::span<const Eigen::Vector3d> truth);

struct PairLoss {
    double value;
    std::vector<double> grad_first;
    std::vector<double> grad_second;
};

/// mean_i [-a_i log b_i - (1 - a_i) log(1 - b_i)] with b clamped to
/// [eps, 1 - eps] (the clamped range passes no gradient to b).
PairLoss binary_cross_entropy(std::span<const double> target, std::span<const double> prediction,
                              double eps);

/// -sum_i p_i log q_i with p = a / sum a, q = clamp(b / sum b, eps, 1).
PairLoss categorical_cross_entropy(std::span<const double> target,
                                   std::span<const double> prediction, double eps);

/// Consistency loss CE(h~, h) averaged over the samples of one ray, with the
/// view's own hit probabilities h~ as the cross-entropy target and the
/// rendered ones h as the prediction. Gradients are returned for both.
PairLoss consistency_loss(std::span<const double> own_hits, std::span<const double> rendered_hits,
                          double eps, ConsistencyForm form = ConsistencyForm::binary);

struct DepthLoss {
    double value;
    std::vector<ParamGrad> grads;
};

/// sum over `pixels` of (mu_1 - depth)^2, mu_1 being the first component mean.
DepthLoss depth_loss(const DistributionMap &map, const DepthMap &depth,
                     std::span<const std::uint32_t> pixels, DepthRange range);

/// Distribution map whose components all sit at the given depths with scale
/// sigma_fraction * (far - near) and uniform weights.
DistributionMap init_from_depth(const DepthMap &depth, double sigma_fraction, int n_components,
                                DepthRange range, int view);

/// Adam moments for every distribution map plus the completed-step count.
struct OptimState {
    std::vector<AdamMoments> moments;
    std::int64_t step = 0;

    static OptimState for_maps(std::span<const DistributionMap> maps);
    bool operator==(const OptimState &) const = default;
};

/// Dense per-map gradient buffers in the maps' parameter layout.
using MapGradients = std::vector<std::vector<double>>;

MapGradients zero_gradients(std::span<const DistributionMap> maps);
void accumulate(MapGradients &dense, std::span<const ParamGrad> sparse);

/// One Adam update of every map; increments state.step.
void adam_step(OptimState &state, std::span<DistributionMap> maps, const MapGradients &grads,
               const AdamConfig &config);

/// Loss and parameter gradients for one pseudo-query ray batch.
struct BatchEvaluation {
    LossReport report;
    MapGradients grads;
    int query_view = -1;
};

/// Deterministic ray batch for a given step: pseudo-query view and pixel indices.
struct RayBatch {
    int view;
    std::vector<std::uint32_t> pixels;
};
RayBatch sample_batch(const SceneInputs &inputs, const TrainConfig &config, std::int64_t step);

/// Renders the batch from the other views and evaluates the weighted
/// render + consistency + depth objective with its gradient.
BatchEvaluation evaluate_batch(const SceneInputs &inputs, std::span<const DepthMap> depths,
                               const RayBatch &batch, const TrainConfig &config);

/// Samples a pseudo-query batch (seeded by config.seed and state.step),
/// evaluates it and applies one Adam step to inputs.maps.
LossReport train_step(SceneInputs &inputs, std::span<const DepthMap> depths,
                      const TrainConfig &config, OptimState &state);

/// Hit probabilities of one ray's own distribution over the bins
/// [depths[i], depths[i] + widths[i]], with gradients of each bin.
struct OwnHits {
    std::vector<double> hits;
    std::vector<RawRayParams<double>> grads;
};
OwnHits own_hit_probs(const RawRayParams<double> &raw, std::span<const double> depths,
                      std::span<const double> widths, DepthRange range);

/// Optimizes a single ray's raw parameters against fixed rendered hits with
/// the consistency loss alone. Returns the total variation
/// 0.5 sum_i |h~_i - h_i| after every step.
std::vector<double> memorize_hits(RawRayParams<double> &raw, std::span<const double> depths,
                                  std::span<const double> widths, std::span<const double> target,
                                  DepthRange range, const TrainConfig &config, int steps);

struct HeldOutView {
    PinholeCamera camera;
    Image truth;
};

struct EvalRecord {
    std::int64_t step;
    LossReport losses; // mean over the steps since the previous record
    double psnr;       // mean over held-out views
};

struct OptimizeOptions {
    std::int64_t eval_interval = 500;
    RenderConfig eval_render{};
    std::optional<std::filesystem::path> checkpoint_dir;
    std::int64_t checkpoint_interval = 500;
    /// Called after every step; return false to stop early (used for tests of resume).
    std::function<bool(const LossReport &)> on_step;
};

struct OptimizeResult {
    std::vector<LossReport> history;
    std::vector<EvalRecord> evals;
    OptimState state;
};

/// Runs train_step until state.step reaches config.steps, evaluating the
/// held-out PSNR every eval_interval steps (and at the first and last step)
/// and writing checkpoints when a directory is given.
OptimizeResult optimize_scene(SceneInputs &inputs, std::span<const DepthMap> depths,
                              std::span<const HeldOutView> held_out, const TrainConfig &config,
                              const OptimizeOptions &options, OptimState state);

/// Mean PSNR of renders of the held-out views.
double held_out_psnr(const SceneInputs &inputs, std::span<const HeldOutView> held_out,
                     const RenderConfig &config);

/// Checkpoint layout: <dir>/maps/view_NNN.nray plus <dir>/optim_state.bin
/// ("NROS", u32 version, i64 step, u32 blocks, per block u64 size then
/// size f64 first moments and size f64 second moments).
void write_checkpoint(const std::filesystem::path &dir, std::span<const DistributionMap> maps,
                      const OptimState &state);
OptimState read_optim_state(const std::filesystem::path &path);

/// "view_NNN.<extension>", the per-view file name used by every directory.
std::string view_filename(int view, const std::string &extension);

std::string format_metrics_header();
std::string format_metrics_line(const EvalRecord &record);

} // namespace rayvis
