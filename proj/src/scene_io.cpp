// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/scene_io.hpp>

#include <json.hpp>

#include <algorithm>
#include <initializer_list>
#include <string_view>

namespace rayvis {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string &where, const std::string &what) {
    throw SceneParseError(where + ": " + what);
}

void check_keys(const json &obj, const std::string &where,
                std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object())
        fail(where, "expected an object");
    for (const auto &[key, value] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            fail(where + "." + key, "unknown key");
}

const json &require(const json &obj, const std::string &where, const char *key) {
    auto it = obj.find(key);
    if (it == obj.end())
        fail(where + "." + key, "missing required key");
    return *it;
}

double number(const json &v, const std::string &where) {
    if (!v.is_number())
        fail(where, "expected a number");
    return v.get<double>();
}

int integer(const json &v, const std::string &where) {
    if (!v.is_number_integer())
        fail(where, "expected an integer");
    return v.get<int>();
}

Eigen::VectorXd numbers(const json &v, const std::string &where, int count) {
    if (!v.is_array() || int(v.size()) != count)
        fail(where, "expected an array of " + std::to_string(count) + " numbers");
    Eigen::VectorXd out(count);
    for (int i = 0; i < count; ++i)
        out[i] = number(v[std::size_t(i)], where + "[" + std::to_string(i) + "]");
    return out;
}

Vec3 vec3(const json &obj, const std::string &where, const char *key) {
    return numbers(require(obj, where, key), where + "." + key, 3);
}

PinholeCamera camera_from_json(const json &j, const std::string &where) {
    check_keys(j, where, {"width", "height", "fx", "fy", "cx", "cy", "rotation", "translation"});
    PinholeCamera cam;
    cam.width = integer(require(j, where, "width"), where + ".width");
    cam.height = integer(require(j, where, "height"), where + ".height");
    cam.fx = number(require(j, where, "fx"), where + ".fx");
    cam.fy = number(require(j, where, "fy"), where + ".fy");
    cam.cx = number(require(j, where, "cx"), where + ".cx");
    cam.cy = number(require(j, where, "cy"), where + ".cy");
    const Eigen::VectorXd r = numbers(require(j, where, "rotation"), where + ".rotation", 9);
    for (int i = 0; i < 9; ++i)
        cam.rotation(i / 3, i % 3) = r[i];
    cam.translation = vec3(j, where, "translation");
    try {
        cam.validate();
    } catch (const std::invalid_argument &e) {
        fail(where, e.what());
    }
    return cam;
}

Material material_from_json(const json &j, const std::string &where) {
    check_keys(j, where, {"albedo", "checker", "specular"});
    Material m;
    const bool has_albedo = j.contains("albedo");
    const bool has_checker = j.contains("checker");
    if (has_albedo == has_checker)
        fail(where, "exactly one of \"albedo\" or \"checker\" is required");
    if (has_albedo) {
        m.albedo = Color(vec3(j, where, "albedo"));
    } else {
        const json &c = j["checker"];
        const std::string cw = where + ".checker";
        check_keys(c, cw, {"color_a", "color_b", "cell_size"});
        m.albedo = Checker{vec3(c, cw, "color_a"), vec3(c, cw, "color_b"),
                           number(require(c, cw, "cell_size"), cw + ".cell_size")};
    }
    if (j.contains("specular")) {
        const json &s = j["specular"];
        const std::string sw = where + ".specular";
        check_keys(s, sw, {"strength", "shininess", "light_direction"});
        Specular sp;
        sp.strength = number(require(s, sw, "strength"), sw + ".strength");
        sp.shininess = number(require(s, sw, "shininess"), sw + ".shininess");
        if (s.contains("light_direction"))
            sp.light_direction = vec3(s, sw, "light_direction");
        m.specular = sp;
    }
    return m;
}

Primitive primitive_from_json(const json &j, const std::string &where) {
    if (!j.is_object())
        fail(where, "expected an object");
    const json &type = require(j, where, "type");
    if (!type.is_string())
        fail(where + ".type", "expected a string");
    const std::string kind = type.get<std::string>();
    Primitive p;
    if (kind == "sphere") {
        check_keys(j, where, {"type", "center", "radius", "material"});
        p.shape = Sphere{vec3(j, where, "center"),
                         number(require(j, where, "radius"), where + ".radius")};
    } else if (kind == "box") {
        check_keys(j, where, {"type", "min", "max", "material"});
        p.shape = Box{vec3(j, where, "min"), vec3(j, where, "max")};
    } else if (kind == "plane") {
        check_keys(j, where, {"type", "point", "normal", "half_extent", "material"});
        p.shape = Plane{vec3(j, where, "point"), vec3(j, where, "normal"),
                        number(require(j, where, "half_extent"), where + ".half_extent")};
    } else {
        fail(where + ".type", "unknown primitive type \"" + kind + "\"");
    }
    p.material = material_from_json(require(j, where, "material"), where + ".material");
    try {
        p.validate();
    } catch (const std::invalid_argument &e) {
        fail(where, e.what());
    }
    return p;
}

json parse_json(const std::string &text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error &e) {
        const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i < end; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw SceneParseError("syntax error at line " + std::to_string(line) + ", column " +
                              std::to_string(col) + ": " + e.what());
    }
}

std::vector<PinholeCamera> cameras_from_json(const json &arr, const std::string &where) {
    if (!arr.is_array())
        fail(where, "expected an array");
    std::vector<PinholeCamera> out;
    for (std::size_t i = 0; i < arr.size(); ++i)
        out.push_back(camera_from_json(arr[i], where + "[" + std::to_string(i) + "]"));
    return out;
}

json to_json(const Vec3 &v) { return json::array({v.x(), v.y(), v.z()}); }

json to_json(const PinholeCamera &c) {
    json rot = json::array();
    for (int i = 0; i < 9; ++i)
        rot.push_back(c.rotation(i / 3, i % 3));
    return json{{"width", c.width}, {"height", c.height}, {"fx", c.fx},
                {"fy", c.fy},       {"cx", c.cx},         {"cy", c.cy},
                {"rotation", rot},  {"translation", to_json(c.translation)}};
}

json to_json(const Material &m) {
    json j;
    if (const auto *flat = std::get_if<Color>(&m.albedo)) {
        j["albedo"] = to_json(*flat);
    } else {
        const auto &c = std::get<Checker>(m.albedo);
        j["checker"] = {{"color_a", to_json(c.color_a)},
                        {"color_b", to_json(c.color_b)},
                        {"cell_size", c.cell_size}};
    }
    if (m.specular)
        j["specular"] = {{"strength", m.specular->strength},
                         {"shininess", m.specular->shininess},
                         {"light_direction", to_json(m.specular->light_direction)}};
    return j;
}

json to_json(const Primitive &p) {
    json j = std::visit(
        [](const auto &s) -> json {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sphere>)
                return {{"type", "sphere"}, {"center", to_json(s.center)}, {"radius", s.radius}};
            else if constexpr (std::is_same_v<T, Box>)
                return {{"type", "box"}, {"min", to_json(s.min)}, {"max", to_json(s.max)}};
            else
                return {{"type", "plane"},
                        {"point", to_json(s.point)},
                        {"normal", to_json(s.normal)},
                        {"half_extent", s.half_extent}};
        },
        p.shape);
    j["material"] = to_json(p.material);
    return j;
}

} // namespace

SyntheticScene parse_scene(const std::string &text) {
    const json j = parse_json(text);
    const std::string where = "scene";
    check_keys(j, where,
               {"near", "far", "background", "cameras", "test_cameras", "primitives", "supersample"});
    const double near = number(require(j, where, "near"), "scene.near");
    const double far = number(require(j, where, "far"), "scene.far");
    const Color background = vec3(j, where, "background");
    auto cameras = cameras_from_json(require(j, where, "cameras"), "scene.cameras");
    std::vector<PinholeCamera> tests;
    if (j.contains("test_cameras"))
        tests = cameras_from_json(j["test_cameras"], "scene.test_cameras");
    std::vector<Primitive> prims;
    const json &parr = require(j, where, "primitives");
    if (!parr.is_array())
        fail("scene.primitives", "expected an array");
    for (std::size_t i = 0; i < parr.size(); ++i)
        prims.push_back(primitive_from_json(parr[i], "scene.primitives[" + std::to_string(i) + "]"));
    int supersample = 1;
    if (j.contains("supersample")) {
        if (!j["supersample"].is_number_integer())
            fail("scene.supersample", "expected an integer");
        supersample = j["supersample"].get<int>();
    }
    try {
        SyntheticScene scene(std::move(prims), background, std::move(cameras), near, far,
                             std::move(tests));
        scene.set_supersample(supersample);
        return scene;
    } catch (const std::invalid_argument &e) {
        fail(where, e.what());
    }
}

SyntheticScene load_scene(const std::filesystem::path &path) {
    return parse_scene(detail::read_file(path));
}

std::string dump_scene(const SyntheticScene &scene) {
    json j;
    j["near"] = scene.near();
    j["far"] = scene.far();
    j["background"] = to_json(scene.background());
    j["cameras"] = json::array();
    for (const auto &c : scene.cameras())
        j["cameras"].push_back(to_json(c));
    if (!scene.test_cameras().empty()) {
        j["test_cameras"] = json::array();
        for (const auto &c : scene.test_cameras())
            j["test_cameras"].push_back(to_json(c));
    }
    if (scene.supersample() != 1)
        j["supersample"] = scene.supersample();
    j["primitives"] = json::array();
    for (const auto &p : scene.primitives())
        j["primitives"].push_back(to_json(p));
    return j.dump(2) + "\n";
}

PinholeCamera parse_camera(const std::string &text) {
    return camera_from_json(parse_json(text), "camera");
}

std::string dump_camera(const PinholeCamera &camera) { return to_json(camera).dump(2) + "\n"; }

} // namespace rayvis
