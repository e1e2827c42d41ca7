// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/image.hpp>

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace rayvis {

Eigen::Vector3d Image::sample_bilinear(double x, double y) const {
    const double u = std::clamp(x - 0.5, 0.0, double(width - 1));
    const double v = std::clamp(y - 0.5, 0.0, double(height - 1));
    const int x0 = std::min(int(u), width - 1);
    const int y0 = std::min(int(v), height - 1);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double fx = u - x0;
    const double fy = v - y0;
    const Eigen::Array3d top = (1.0 - fx) * at(x0, y0) + fx * at(x1, y0);
    const Eigen::Array3d bottom = (1.0 - fx) * at(x0, y1) + fx * at(x1, y1);
    return ((1.0 - fy) * top + fy * bottom).matrix();
}

double psnr(const Image &a, const Image &b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("psnr: image dimensions differ (" + std::to_string(a.width) +
                                    "x" + std::to_string(a.height) + " vs " +
                                    std::to_string(b.width) + "x" + std::to_string(b.height) +
                                    ")");
    if (a.rgb.size() == 0)
        throw std::invalid_argument("psnr: empty images");
    const double mse = (a.rgb - b.rgb).square().mean();
    if (mse <= 0.0)
        return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad())
        throw IoError("read failed: " + path.string());
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path &path, const std::string &bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out)
            throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " +
                      ec.message());
}

} // namespace detail

std::string encode_ppm(const Image &image) {
    std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                      "\n255\n";
    out.reserve(out.size() + std::size_t(image.rgb.size()));
    for (Eigen::Index i = 0; i < image.rgb.cols(); ++i)
        for (int c = 0; c < 3; ++c) {
            const double v = std::clamp(image.rgb(c, i), 0.0, 1.0);
            out.push_back(char(std::lround(v * 255.0)));
        }
    return out;
}

void write_ppm(const std::filesystem::path &path, const Image &image) {
    detail::write_file_atomic(path, encode_ppm(image));
}

Image read_ppm(const std::filesystem::path &path) {
    const std::string bytes = detail::read_file(path);
    std::size_t pos = 0;
    // Header tokens separated by whitespace; '#' comments allowed.
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
            ++pos;
        return bytes.substr(start, pos - start);
    };
    if (next_token() != "P6")
        throw FormatError(path.string() + ": not a binary PPM (P6)");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(next_token());
        h = std::stoi(next_token());
        maxval = std::stoi(next_token());
    } catch (const std::exception &) {
        throw FormatError(path.string() + ": malformed PPM header");
    }
    if (w < 1 || h < 1 || maxval != 255)
        throw FormatError(path.string() + ": unsupported PPM dimensions or maxval");
    ++pos; // single whitespace after maxval
    const std::size_t need = std::size_t(w) * std::size_t(h) * 3;
    if (bytes.size() < pos + need)
        throw FormatError(path.string() + ": truncated PPM data");
    Image img(w, h);
    for (std::size_t i = 0; i < need; ++i)
        img.rgb(Eigen::Index(i % 3), Eigen::Index(i / 3)) =
            static_cast<unsigned char>(bytes[pos + i]) / 255.0;
    return img;
}

void write_float_image(const std::filesystem::path &path, const Image &image) {
    std::string out = "NRIF";
    detail::put_u32(out, std::uint32_t(image.width));
    detail::put_u32(out, std::uint32_t(image.height));
    for (Eigen::Index i = 0; i < image.rgb.cols(); ++i)
        for (int c = 0; c < 3; ++c)
            detail::put_f32(out, float(image.rgb(c, i)));
    detail::write_file_atomic(path, out);
}

Image read_float_image(const std::filesystem::path &path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader in(bytes, path.string());
    in.expect_magic("NRIF");
    const auto w = in.u32();
    const auto h = in.u32();
    if (w == 0 || h == 0 || w > (1u << 16) || h > (1u << 16))
        throw FormatError(path.string() + ": bad float image dimensions");
    Image img{int(w), int(h)};
    for (Eigen::Index i = 0; i < img.rgb.cols(); ++i)
        for (int c = 0; c < 3; ++c)
            img.rgb(c, i) = in.f32();
    in.expect_end();
    return img;
}

void write_depth(const std::filesystem::path &path, const DepthMap &depth) {
    std::string out = "NRDM";
    detail::put_u32(out, std::uint32_t(depth.width));
    detail::put_u32(out, std::uint32_t(depth.height));
    for (Eigen::Index i = 0; i < depth.depth.size(); ++i)
        detail::put_f32(out, float(depth.depth(i)));
    detail::write_file_atomic(path, out);
}

DepthMap read_depth(const std::filesystem::path &path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader in(bytes, path.string());
    in.expect_magic("NRDM");
    const auto w = in.u32();
    const auto h = in.u32();
    if (w == 0 || h == 0 || w > (1u << 16) || h > (1u << 16))
        throw FormatError(path.string() + ": bad depth map dimensions");
    DepthMap d{int(w), int(h)};
    for (Eigen::Index i = 0; i < d.depth.size(); ++i)
        d.depth(i) = in.f32();
    in.expect_end();
    return d;
}

} // namespace rayvis
