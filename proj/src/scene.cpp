// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/scene.hpp>

#include <rayvis/parallel.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <type_traits>

namespace rayvis {
namespace {

constexpr double kMinHitDepth = 1e-6;

bool valid_color(const Color &c) { return (c.array() >= 0.0).all() && (c.array() <= 1.0).all(); }

/// Unit vectors spanning the plane orthogonal to `n`.
std::pair<Vec3, Vec3> tangent_frame(const Vec3 &n) {
    const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 u = n.cross(helper).normalized();
    return {u, n.cross(u)};
}

std::optional<std::pair<double, Vec3>> hit_shape(const Sphere &s, const Ray &ray) {
    const Vec3 oc = ray.origin - s.center;
    const double b = oc.dot(ray.direction);
    const double c = oc.squaredNorm() - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0.0)
        return std::nullopt;
    const double root = std::sqrt(disc);
    double t = -b - root;
    if (t <= kMinHitDepth)
        t = -b + root;
    if (t <= kMinHitDepth)
        return std::nullopt;
    return std::pair{t, Vec3((ray.point_at(t) - s.center) / s.radius)};
}

std::optional<std::pair<double, Vec3>> hit_shape(const Box &b, const Ray &ray) {
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    int enter_axis = 0, exit_axis = 0;
    for (int a = 0; a < 3; ++a) {
        const double d = ray.direction[a];
        if (std::abs(d) < 1e-300) {
            if (ray.origin[a] < b.min[a] || ray.origin[a] > b.max[a])
                return std::nullopt;
            continue;
        }
        double t0 = (b.min[a] - ray.origin[a]) / d;
        double t1 = (b.max[a] - ray.origin[a]) / d;
        if (t0 > t1)
            std::swap(t0, t1);
        if (t0 > t_enter) {
            t_enter = t0;
            enter_axis = a;
        }
        if (t1 < t_exit) {
            t_exit = t1;
            exit_axis = a;
        }
    }
    if (t_enter > t_exit)
        return std::nullopt;
    double t = t_enter;
    int axis = enter_axis;
    if (t <= kMinHitDepth) {
        t = t_exit;
        axis = exit_axis;
    }
    if (t <= kMinHitDepth)
        return std::nullopt;
    Vec3 n = Vec3::Zero();
    n[axis] = ray.direction[axis] > 0.0 ? -1.0 : 1.0;
    return std::pair{t, n};
}

std::optional<std::pair<double, Vec3>> hit_shape(const Plane &p, const Ray &ray) {
    const Vec3 n = p.normal.normalized();
    const double denom = n.dot(ray.direction);
    if (std::abs(denom) < 1e-12)
        return std::nullopt;
    const double t = n.dot(p.point - ray.origin) / denom;
    if (t <= kMinHitDepth)
        return std::nullopt;
    const auto [u, v] = tangent_frame(n);
    const Vec3 local = ray.point_at(t) - p.point;
    if (std::abs(local.dot(u)) > p.half_extent || std::abs(local.dot(v)) > p.half_extent)
        return std::nullopt;
    return std::pair{t, denom < 0.0 ? n : Vec3(-n)};
}

Color shade(const Material &m, const Vec3 &p, const Vec3 &normal, const Vec3 &view_dir) {
    Color c = m.albedo_at(p);
    if (m.specular && m.specular->strength > 0.0) {
        const Vec3 l = m.specular->light_direction.normalized();
        const double ndotl = normal.dot(l);
        if (ndotl > 0.0) {
            const Vec3 mirror = 2.0 * ndotl * normal - l;
            const double rv = std::max(0.0, mirror.dot(-view_dir));
            c.array() += m.specular->strength * std::pow(rv, m.specular->shininess);
        }
    }
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

} // namespace

Color Material::albedo_at(const Vec3 &p) const {
    if (const auto *flat = std::get_if<Color>(&albedo))
        return *flat;
    const auto &checker = std::get<Checker>(albedo);
    const Eigen::Array3d cell = (p.array() / checker.cell_size).floor();
    const long parity = static_cast<long>(cell.sum());
    return (parity % 2 == 0) ? checker.color_a : checker.color_b;
}

void Primitive::validate() const {
    std::visit(
        [](const auto &s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sphere>) {
                if (!(s.radius > 0.0))
                    throw std::invalid_argument("sphere: radius must be positive");
            } else if constexpr (std::is_same_v<T, Box>) {
                if (!(s.min.array() < s.max.array()).all())
                    throw std::invalid_argument("box: min must be < max componentwise");
            } else {
                if (!(s.normal.norm() > 0.0))
                    throw std::invalid_argument("plane: normal must be non-zero");
                if (!(s.half_extent > 0.0))
                    throw std::invalid_argument("plane: half_extent must be positive");
            }
        },
        shape);
    if (const auto *flat = std::get_if<Color>(&material.albedo)) {
        if (!valid_color(*flat))
            throw std::invalid_argument("material: albedo outside [0,1]");
    } else {
        const auto &ch = std::get<Checker>(material.albedo);
        if (!valid_color(ch.color_a) || !valid_color(ch.color_b))
            throw std::invalid_argument("material: checker colors outside [0,1]");
        if (!(ch.cell_size > 0.0))
            throw std::invalid_argument("material: checker cell_size must be positive");
    }
    if (material.specular) {
        const auto &sp = *material.specular;
        if (!(sp.strength >= 0.0 && sp.strength <= 1.0))
            throw std::invalid_argument("material: specular strength outside [0,1]");
        if (!(sp.shininess > 0.0))
            throw std::invalid_argument("material: shininess must be positive");
        if (!(sp.light_direction.norm() > 0.0))
            throw std::invalid_argument("material: light_direction must be non-zero");
    }
}

std::pair<Vec3, Vec3> Primitive::bounds() const {
    return std::visit(
        [](const auto &s) -> std::pair<Vec3, Vec3> {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sphere>) {
                return {s.center.array() - s.radius, s.center.array() + s.radius};
            } else if constexpr (std::is_same_v<T, Box>) {
                return {s.min, s.max};
            } else {
                const auto [u, v] = tangent_frame(s.normal.normalized());
                const Vec3 ext = s.half_extent * (u.cwiseAbs() + v.cwiseAbs());
                return {s.point - ext, s.point + ext};
            }
        },
        shape);
}

std::optional<Hit> intersect(const Primitive &prim, const Ray &ray) {
    const auto hit = std::visit([&](const auto &s) { return hit_shape(s, ray); }, prim.shape);
    if (!hit)
        return std::nullopt;
    const Vec3 p = ray.point_at(hit->first);
    return Hit{hit->first, hit->second, shade(prim.material, p, hit->second, ray.direction)};
}

std::optional<Hit> intersect(const SyntheticScene &scene, const Ray &ray) {
    std::optional<Hit> best;
    for (const auto &prim : scene.primitives()) {
        auto hit = intersect(prim, ray);
        if (hit && (!best || hit->depth < best->depth))
            best = std::move(hit);
    }
    return best;
}

SyntheticScene::SyntheticScene(std::vector<Primitive> primitives, Color background,
                               std::vector<PinholeCamera> cameras, double near, double far,
                               std::vector<PinholeCamera> test_cameras)
    : primitives_(std::move(primitives)), background_(std::move(background)),
      cameras_(std::move(cameras)), test_cameras_(std::move(test_cameras)), near_(near),
      far_(far) {
    if (!(near_ > 0.0 && near_ < far_))
        throw std::invalid_argument("scene: require 0 < near < far");
    if (cameras_.size() < 2)
        throw std::invalid_argument("scene: at least two cameras are required");
    if (!valid_color(background_))
        throw std::invalid_argument("scene: background outside [0,1]");
    for (const auto &cam : cameras_)
        cam.validate();
    for (const auto &cam : test_cameras_)
        cam.validate();

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = 0; i < primitives_.size(); ++i) {
        primitives_[i].validate();
        const auto [bmin, bmax] = primitives_[i].bounds();
        lo = lo.cwiseMin(bmin);
        hi = hi.cwiseMax(bmax);
        for (std::size_t c = 0; c < cameras_.size(); ++c) {
            const Vec3 o = cameras_[c].center();
            double dmin, dmax;
            if (const auto *s = std::get_if<Sphere>(&primitives_[i].shape)) {
                const double d = (s->center - o).norm();
                dmin = d - s->radius;
                dmax = d + s->radius;
            } else {
                dmin = (o.cwiseMax(bmin).cwiseMin(bmax) - o).norm();
                dmax = 0.0;
                for (int corner = 0; corner < 8; ++corner) {
                    const Vec3 p((corner & 1) ? bmax.x() : bmin.x(),
                                 (corner & 2) ? bmax.y() : bmin.y(),
                                 (corner & 4) ? bmax.z() : bmin.z());
                    dmax = std::max(dmax, (p - o).norm());
                }
            }
            if (dmin < near_ || dmax > far_)
                throw std::invalid_argument(
                    "scene: primitive " + std::to_string(i) + " spans distances [" +
                    std::to_string(dmin) + ", " + std::to_string(dmax) + "] from camera " +
                    std::to_string(c) + ", outside [near, far]");
        }
    }
    scale_ = primitives_.empty() ? far_ - near_ : (hi - lo).norm();
}

void SyntheticScene::set_supersample(int n) {
    if (n < 1 || n > 16)
        throw std::invalid_argument("scene: supersample must be in [1, 16]");
    supersample_ = n;
}

GroundTruth render_ground_truth(const SyntheticScene &scene, const PinholeCamera &camera) {
    GroundTruth gt{Image(camera.width, camera.height, scene.background()),
                   DepthMap(camera.width, camera.height, scene.far())};
    const int n = scene.supersample();
    parallel_for(0, camera.height, [&](int y) {
        for (int x = 0; x < camera.width; ++x) {
            if (const auto hit = intersect(scene, generate_ray(camera, x, y))) {
                gt.image.at(x, y) = hit->color.array();
                gt.depth.at(x, y) = hit->depth;
            }
            if (n == 1)
                continue;
            Eigen::Array3d sum = Eigen::Array3d::Zero();
            for (int sy = 0; sy < n; ++sy)
                for (int sx = 0; sx < n; ++sx) {
                    const Vec2 px(x + (sx + 0.5) / n, y + (sy + 0.5) / n);
                    const auto hit = intersect(scene, generate_ray(camera, px));
                    sum += (hit ? hit->color : scene.background()).array();
                }
            gt.image.at(x, y) = sum / double(n * n);
        }
    });
    return gt;
}

int oracle_visibility(const SyntheticScene &scene, int view, const Vec3 &point) {
    const PinholeCamera &cam = scene.cameras().at(std::size_t(view));
    project(cam, point); // throws when behind the camera
    Ray ray;
    ray.origin = cam.center();
    const Vec3 offset = point - ray.origin;
    const double distance = offset.norm();
    ray.direction = offset / distance;
    const auto hit = intersect(scene, ray);
    return (!hit || hit->depth >= distance - scene.occlusion_epsilon()) ? 1 : 0;
}

DepthMap perturb_depth(const DepthMap &depth, double noise_sigma, double scale, double near,
                       double far, std::uint64_t seed) {
    if (!(noise_sigma >= 0.0))
        throw std::invalid_argument("perturb_depth: noise_sigma must be >= 0");
    DepthMap out = depth;
    if (noise_sigma == 0.0)
        return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma * scale);
    for (Eigen::Index i = 0; i < out.depth.size(); ++i) {
        const double n = noise(rng); // drawn for every pixel so maps stay aligned across seeds
        if (depth.depth(i) < far)
            out.depth(i) = std::clamp(depth.depth(i) + n, near, far);
    }
    return out;
}

SyntheticScene make_two_sphere_scene(int views, int resolution, int test_views) {
    std::vector<Primitive> prims(2);
    prims[0].shape = Sphere{Vec3(-0.55, 0.0, 0.2), 0.75};
    prims[0].material.albedo = Checker{Color(0.85, 0.2, 0.15), Color(0.95, 0.9, 0.8), 0.3};
    prims[1].shape = Sphere{Vec3(0.6, 0.15, -0.35), 0.6};
    prims[1].material.albedo = Checker{Color(0.15, 0.3, 0.8), Color(0.9, 0.8, 0.2), 0.25};
    prims[1].material.specular = Specular{0.25, 12.0, Vec3(0.3, 1.0, 0.4).normalized()};

    const double radius = 4.0;
    const double height = 1.2;
    const double focal = 80.0 * resolution / 64.0;
    const Vec3 up = Vec3::UnitY();
    auto ring_camera = [&](double angle) {
        const Vec3 eye(radius * std::cos(angle), height, radius * std::sin(angle));
        return PinholeCamera::look_at(eye, Vec3::Zero(), up, resolution, resolution, focal);
    };
    std::vector<PinholeCamera> cams, tests;
    const double step = 2.0 * std::numbers::pi / views;
    for (int i = 0; i < views; ++i)
        cams.push_back(ring_camera(i * step));
    for (int i = 0; i < test_views; ++i) {
        const int slot = (i * views) / std::max(test_views, 1);
        tests.push_back(ring_camera((slot + 0.5) * step));
    }
    SyntheticScene scene(std::move(prims), Color(0.1, 0.1, 0.12), std::move(cams), 2.0, 6.0,
                         std::move(tests));
    scene.set_supersample(4);
    return scene;
}

} // namespace rayvis
