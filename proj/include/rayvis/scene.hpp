// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <rayvis/camera.hpp>
#include <rayvis/image.hpp>

#include <cstdint>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

namespace rayvis {

using Color = Eigen::Vector3d;

struct Sphere {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
};

struct Box {
    Vec3 min = -Vec3::Ones();
    Vec3 max = Vec3::Ones();
};

/// Square patch of side 2 * half_extent centered at `point`.
struct Plane {
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitY();
    double half_extent = 1.0;
};

using Shape = std::variant<Sphere, Box, Plane>;

/// Solid 3D checker: parity of floor(p / cell_size) summed over axes.
struct Checker {
    Color color_a = Color::Ones();
    Color color_b = Color::Zero();
    double cell_size = 0.25;
};

/// Phong lobe around the mirror direction of a fixed directional light.
struct Specular {
    double strength = 0.0;
    double shininess = 16.0;
    Vec3 light_direction = Vec3(0.0, -1.0, 0.0); // points toward the light
};

struct Material {
    std::variant<Color, Checker> albedo = Color(0.5, 0.5, 0.5);
    std::optional<Specular> specular;

    Color albedo_at(const Vec3 &p) const;
};

struct Primitive {
    Shape shape;
    Material material;

    /// Throws std::invalid_argument on degenerate geometry or colors.
    void validate() const;
    /// Axis-aligned bounds of the surface.
    std::pair<Vec3, Vec3> bounds() const;
};

struct Hit {
    double depth;
    Vec3 normal;
    Color color;
};

/// Nearest hit of `ray` against a single primitive (depth > 1e-6).
std::optional<Hit> intersect(const Primitive &prim, const Ray &ray);

class SyntheticScene {
public:
    /// Validates primitives, cameras and the [near, far] containment of every
    /// primitive as seen from every camera. Requires at least two cameras.
    SyntheticScene(std::vector<Primitive> primitives, Color background,
                   std::vector<PinholeCamera> cameras, double near, double far,
                   std::vector<PinholeCamera> test_cameras = {});

    const std::vector<Primitive> &primitives() const { return primitives_; }
    const Color &background() const { return background_; }
    const std::vector<PinholeCamera> &cameras() const { return cameras_; }
    /// Held-out views; not used as references.
    const std::vector<PinholeCamera> &test_cameras() const { return test_cameras_; }
    double near() const { return near_; }
    double far() const { return far_; }

    /// Diagonal of the primitives' bounding box (far - near for empty scenes).
    double scale() const { return scale_; }
    /// Tolerance for the point-visibility oracle.
    double occlusion_epsilon() const { return 1e-4 * scale_; }

    /// Ground-truth colors average n x n stratified rays per pixel (1..16).
    int supersample() const { return supersample_; }
    void set_supersample(int n);

private:
    std::vector<Primitive> primitives_;
    Color background_;
    std::vector<PinholeCamera> cameras_;
    std::vector<PinholeCamera> test_cameras_;
    double near_;
    double far_;
    double scale_;
    int supersample_ = 1;
};

/// Nearest hit over all primitives.
std::optional<Hit> intersect(const SyntheticScene &scene, const Ray &ray);

struct GroundTruth {
    Image image;    // mean of the scene's supersample^2 subpixel rays
    DepthMap depth; // distance along the pixel-center ray; far where nothing is hit
};

GroundTruth render_ground_truth(const SyntheticScene &scene, const PinholeCamera &camera);

/// 1 if the segment from reference view `view` to `point` is unobstructed
/// (first hit no closer than distance - occlusion_epsilon), else 0.
int oracle_visibility(const SyntheticScene &scene, int view, const Vec3 &point);

/// Adds N(0, (noise_sigma * scale)^2) noise to every pixel that holds a
/// surface (depth < far) and clamps to [near, far]. Sentinel pixels are kept.
DepthMap perturb_depth(const DepthMap &depth, double noise_sigma, double scale, double near,
                       double far, std::uint64_t seed);

/// Two checkered spheres inside a ring of `views` cameras; `test_views`
/// held-out cameras sit halfway between consecutive ring cameras. Ground
/// truth is rendered with 4 x 4 supersampling.
SyntheticScene make_two_sphere_scene(int views = 16, int resolution = 64, int test_views = 4);

} // namespace rayvis
