// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <stdexcept>

namespace rayvis {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Thrown when a pixel coordinate falls outside the image.
struct BoundsError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

/// Thrown when a point does not lie in front of the camera.
struct BehindCameraError : std::domain_error {
    using std::domain_error::domain_error;
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();

    Vec3 point_at(double depth) const { return origin + depth * direction; }
};

/// Pinhole camera with a rigid world-to-camera pose x_cam = R x_world + t.
///
/// Pixel centers sit at (i + 0.5, j + 0.5); the camera looks down +z with +x
/// to the right and +y down the image.
struct PinholeCamera {
    int width = 1;
    int height = 1;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.5;
    double cy = 0.5;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    /// Camera center in world coordinates.
    Vec3 center() const { return -rotation.transpose() * translation; }

    /// Throws std::invalid_argument if intrinsics or the rotation are invalid.
    void validate() const;

    /// Camera looking from `eye` toward `target`; `up` fixes the roll.
    static PinholeCamera look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up,
                                 int width, int height, double focal);
};

struct Projection {
    Vec2 pixel;
    double depth; // camera-frame z
};

/// Ray through the continuous pixel location `px` (pass i + 0.5 for centers).
Ray generate_ray(const PinholeCamera &camera, const Vec2 &px);

/// Ray through the center of integer pixel (x, y).
inline Ray generate_ray(const PinholeCamera &camera, int x, int y) {
    return generate_ray(camera, Vec2(x + 0.5, y + 0.5));
}

Projection project(const PinholeCamera &camera, const Vec3 &point);

/// Euclidean distance from the camera center, i.e. the ray parameter of
/// `point` along the unit ray that reaches it. Distribution maps and depth
/// maps are stored in this convention.
inline double ray_depth(const PinholeCamera &camera, const Vec3 &point) {
    return (point - camera.center()).norm();
}

} // namespace rayvis
