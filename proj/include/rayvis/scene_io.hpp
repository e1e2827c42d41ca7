// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <rayvis/scene.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace rayvis {

/// Malformed scene or camera description. The message names the offending
/// key path, or the line and column for syntax errors.
struct SceneParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Scene files are JSON documents:
//
//   {
//     "near": 2.0, "far": 6.0,
//     "background": [r, g, b],
//     "cameras": [ <camera>, ... ],          // reference views, at least two
//     "test_cameras": [ <camera>, ... ],     // optional held-out views
//     "primitives": [ <primitive>, ... ],
//     "supersample": n                       // optional, 1..16, default 1
//   }
//
//   <camera>    = { "width", "height", "fx", "fy", "cx", "cy",
//                   "rotation": [9 entries, row-major world-to-camera],
//                   "translation": [3 entries] }
//   <primitive> = { "type": "sphere", "center": [3], "radius": r, "material": <material> }
//               | { "type": "box", "min": [3], "max": [3], "material": <material> }
//               | { "type": "plane", "point": [3], "normal": [3], "half_extent": e,
//                   "material": <material> }
//   <material>  = { "albedo": [r, g, b] | "checker": { "color_a", "color_b", "cell_size" },
//                   "specular": { "strength", "shininess", "light_direction" } (optional) }
//
// Unknown keys anywhere are rejected.

SyntheticScene parse_scene(const std::string &text);
SyntheticScene load_scene(const std::filesystem::path &path);
std::string dump_scene(const SyntheticScene &scene);

PinholeCamera parse_camera(const std::string &text);
std::string dump_camera(const PinholeCamera &camera);

} // namespace rayvis
