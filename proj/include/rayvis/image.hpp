// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace rayvis {

/// File could not be opened, read or written.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File contents do not match the expected format.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Row-major RGB image; one column of `rgb` per pixel, index y * width + x.
struct Image {
    int width = 0;
    int height = 0;
    Eigen::Array3Xd rgb;

    Image() = default;
    Image(int w, int h, const Eigen::Vector3d &fill = Eigen::Vector3d::Zero())
        : width(w), height(h), rgb(3, Eigen::Index(w) * h) {
        rgb.colwise() = fill.array();
    }

    Eigen::Index index(int x, int y) const { return Eigen::Index(y) * width + x; }
    auto at(int x, int y) { return rgb.col(index(x, y)); }
    auto at(int x, int y) const { return rgb.col(index(x, y)); }

    /// Bilinear lookup at a continuous position (pixel centers at i + 0.5),
    /// clamped to the border.
    Eigen::Vector3d sample_bilinear(double x, double y) const;

    bool operator==(const Image &o) const {
        return width == o.width && height == o.height && (rgb == o.rgb).all();
    }
};

/// Per-pixel distance along the pixel ray (row-major).
struct DepthMap {
    int width = 0;
    int height = 0;
    Eigen::ArrayXd depth;

    DepthMap() = default;
    DepthMap(int w, int h, double fill = 0.0)
        : width(w), height(h), depth(Eigen::ArrayXd::Constant(Eigen::Index(w) * h, fill)) {}

    Eigen::Index index(int x, int y) const { return Eigen::Index(y) * width + x; }
    double &at(int x, int y) { return depth(index(x, y)); }
    double at(int x, int y) const { return depth(index(x, y)); }

    bool operator==(const DepthMap &o) const {
        return width == o.width && height == o.height && (depth == o.depth).all();
    }
};

/// Peak signal-to-noise ratio for images with values in [0,1]. Identical
/// images report kPsnrCap.
inline constexpr double kPsnrCap = 99.0;
double psnr(const Image &a, const Image &b);

/// Binary PPM ("P6", maxval 255). Values are clamped to [0,1] and rounded.
void write_ppm(const std::filesystem::path &path, const Image &image);
Image read_ppm(const std::filesystem::path &path);
std::string encode_ppm(const Image &image);

/// Float image: "NRIF", u32 width, u32 height, width*height*3 little-endian f32.
void write_float_image(const std::filesystem::path &path, const Image &image);
Image read_float_image(const std::filesystem::path &path);

/// Depth map: "NRDM", u32 width, u32 height, width*height little-endian f32.
void write_depth(const std::filesystem::path &path, const DepthMap &depth);
DepthMap read_depth(const std::filesystem::path &path);

namespace detail {
std::string read_file(const std::filesystem::path &path);
/// Writes to a temporary sibling then renames over `path`.
void write_file_atomic(const std::filesystem::path &path, const std::string &bytes);
} // namespace detail

} // namespace rayvis
