// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/camera.hpp>

#include <Eigen/Geometry>

#include <cmath>
#include <string>

namespace rayvis {

void PinholeCamera::validate() const {
    if (width < 1 || height < 1)
        throw std::invalid_argument("camera: width and height must be >= 1");
    if (!(fx > 0.0) || !(fy > 0.0))
        throw std::invalid_argument("camera: focal lengths must be positive");
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
    if (!(ortho < 1e-9))
        throw std::invalid_argument("camera: rotation is not orthonormal (error " +
                                    std::to_string(ortho) + ")");
    if (rotation.determinant() < 0.0)
        throw std::invalid_argument("camera: rotation has negative determinant");
}

PinholeCamera PinholeCamera::look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up,
                                     int width, int height, double focal) {
    const Vec3 forward = (target - eye).normalized();
    const Vec3 right = forward.cross(up).normalized();
    const Vec3 down = forward.cross(right);

    PinholeCamera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = focal;
    cam.fy = focal;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    return cam;
}

Ray generate_ray(const PinholeCamera &camera, const Vec2 &px) {
    if (!(px.x() >= 0.0 && px.x() < camera.width && px.y() >= 0.0 && px.y() < camera.height))
        throw BoundsError("generate_ray: pixel (" + std::to_string(px.x()) + ", " +
                          std::to_string(px.y()) + ") outside " + std::to_string(camera.width) +
                          "x" + std::to_string(camera.height) + " image");
    const Vec3 local((px.x() - camera.cx) / camera.fx, (px.y() - camera.cy) / camera.fy, 1.0);
    Ray ray;
    ray.origin = camera.center();
    ray.direction = (camera.rotation.transpose() * local).normalized();
    return ray;
}

Projection project(const PinholeCamera &camera, const Vec3 &point) {
    const Vec3 local = camera.rotation * point + camera.translation;
    if (!(local.z() > 0.0))
        throw BehindCameraError("project: point has non-positive depth " +
                                std::to_string(local.z()));
    return {Vec2(camera.fx * local.x() / local.z() + camera.cx,
                 camera.fy * local.y() / local.z() + camera.cy),
            local.z()};
}

} // namespace rayvis
