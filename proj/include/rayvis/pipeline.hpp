// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <rayvis/optim.hpp>
#include <rayvis/render.hpp>
#include <rayvis/scene.hpp>

#include <cstdint>
#include <vector>

namespace rayvis {

struct InitOptions {
    double sigma_fraction = 0.005; // component scale as a fraction of far - near
    int n_components = 2;
    double noise_fraction = 0.0;   // depth noise sigma as a fraction of the scene scale
    std::uint64_t seed = 0;
};

/// Reference inputs rendered from a synthetic scene with depth-initialized maps.
struct PreparedScene {
    SceneInputs inputs;
    std::vector<DepthMap> depths;        // depths the maps were initialized from
    std::vector<HeldOutView> held_out;   // test cameras with ground-truth images
    Eigen::Vector3d background;
};

PreparedScene prepare_scene(const SyntheticScene &scene, const InitOptions &options);

/// Depth noise of view `view` is seeded by seed + view.
std::uint64_t view_noise_seed(std::uint64_t seed, int view);

} // namespace rayvis
