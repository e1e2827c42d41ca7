// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/pipeline.hpp>

namespace rayvis {

std::uint64_t view_noise_seed(std::uint64_t seed, int view) { return seed + std::uint64_t(view); }

PreparedScene prepare_scene(const SyntheticScene &scene, const InitOptions &options) {
    PreparedScene out;
    out.inputs.range = DepthRange{scene.near(), scene.far()};
    out.background = scene.background().matrix();
    const auto &cams = scene.cameras();
    for (int v = 0; v < int(cams.size()); ++v) {
        GroundTruth gt = render_ground_truth(scene, cams[std::size_t(v)]);
        DepthMap depth = options.noise_fraction > 0.0
                             ? perturb_depth(gt.depth, options.noise_fraction, scene.scale(),
                                             scene.near(), scene.far(),
                                             view_noise_seed(options.seed, v))
                             : gt.depth;
        out.inputs.maps.push_back(init_from_depth(depth, options.sigma_fraction,
                                                  options.n_components, out.inputs.range, v));
        out.inputs.cameras.push_back(cams[std::size_t(v)]);
        out.inputs.images.push_back(std::move(gt.image));
        out.depths.push_back(std::move(depth));
    }
    for (const auto &cam : scene.test_cameras())
        out.held_out.push_back({cam, render_ground_truth(scene, cam).image});
    return out;
}

} // namespace rayvis
