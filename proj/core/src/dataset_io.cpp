#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "flowibr/image_io.hpp"
#include "flowibr/synthdata.hpp"

namespace flowibr {

using nlohmann::json;

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j) { return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

const char* texture_kind(TextureSpec::Kind k) {
  switch (k) {
    case TextureSpec::Kind::kChecker: return "checker";
    case TextureSpec::Kind::kFlat: return "flat";
    default: return "sinusoid";
  }
}

TextureSpec::Kind texture_kind(const std::string& s) {
  if (s == "checker") return TextureSpec::Kind::kChecker;
  if (s == "flat") return TextureSpec::Kind::kFlat;
  if (s == "sinusoid") return TextureSpec::Kind::kSinusoid;
  throw std::runtime_error("manifest: unknown texture kind " + s);
}

const char* motion_kind(MotionProgram::Kind k) {
  switch (k) {
    case MotionProgram::Kind::kConstantVelocity: return "constant_velocity";
    case MotionProgram::Kind::kOrbit: return "orbit";
    case MotionProgram::Kind::kWaypoints: return "waypoints";
    default: return "static";
  }
}

MotionProgram::Kind motion_kind(const std::string& s) {
  if (s == "static") return MotionProgram::Kind::kStatic;
  if (s == "constant_velocity") return MotionProgram::Kind::kConstantVelocity;
  if (s == "orbit") return MotionProgram::Kind::kOrbit;
  if (s == "waypoints") return MotionProgram::Kind::kWaypoints;
  throw std::runtime_error("manifest: unknown motion kind " + s);
}

json camera_json(const CameraMatrix& c) {
  return json{{"K", c.intrinsics_rows()}, {"Rt", c.extrinsics_rows()}};
}

CameraMatrix json_camera(const json& j, int w, int h) {
  return CameraMatrix::from_rows(j.at("K").get<std::vector<double>>(),
                                 j.at("Rt").get<std::vector<double>>(), w, h);
}

std::string numbered(const char* stem, int t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", stem, t, ext);
  return buf;
}

}  // namespace

std::string scene_to_json(const SceneSpec& spec, int flow_window) {
  json j;
  j["format"] = "flowibr-dataset";
  j["version"] = 1;
  j["name"] = spec.name;
  j["width"] = spec.width;
  j["height"] = spec.height;
  j["frames"] = spec.num_frames;
  j["dt"] = spec.dt;
  j["near"] = spec.near;
  j["far"] = spec.far;
  j["seed"] = spec.seed;
  j["mask_dilation"] = spec.mask_dilation;
  j["flow_window"] = flow_window;
  j["background"] = vec_json(spec.background);
  j["cameras"] = json::array();
  for (const auto& c : spec.cameras) j["cameras"].push_back(camera_json(c));
  j["heldout_cameras"] = json::array();
  for (const auto& c : spec.heldout_cameras) j["heldout_cameras"].push_back(camera_json(c));
  j["primitives"] = json::array();
  for (const auto& p : spec.primitives) {
    json pj;
    pj["shape"] = p.shape == Primitive::Shape::kSphere ? "sphere" : "rectangle";
    pj["center"] = vec_json(p.center);
    pj["axis_u"] = vec_json(p.axis_u);
    pj["axis_v"] = vec_json(p.axis_v);
    pj["half_u"] = p.half_u;
    pj["half_v"] = p.half_v;
    pj["radius"] = p.radius;
    pj["texture"] = {{"kind", texture_kind(p.texture.kind)},
                     {"color_a", vec_json(p.texture.color_a)},
                     {"color_b", vec_json(p.texture.color_b)},
                     {"period", p.texture.period},
                     {"period2", p.texture.period2},
                     {"phase", p.texture.phase}};
    json wp = json::array();
    for (const auto& [f, off] : p.motion.waypoints) wp.push_back(json::array({f, vec_json(off)}));
    pj["motion"] = {{"kind", motion_kind(p.motion.kind)},
                    {"velocity", vec_json(p.motion.velocity)},
                    {"radius", p.motion.radius},
                    {"angular_speed", p.motion.angular_speed},
                    {"phase", p.motion.phase},
                    {"waypoints", wp}};
    j["primitives"].push_back(pj);
  }
  return j.dump(2);
}

SceneSpec scene_from_json(const std::string& text, int* flow_window) {
  const json j = json::parse(text);
  if (j.value("format", "") != "flowibr-dataset") throw std::runtime_error("manifest: bad format tag");
  SceneSpec s;
  s.name = j.at("name").get<std::string>();
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.num_frames = j.at("frames").get<int>();
  s.dt = j.at("dt").get<double>();
  s.near = j.at("near").get<double>();
  s.far = j.at("far").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.mask_dilation = j.at("mask_dilation").get<int>();
  s.background = json_vec(j.at("background"));
  if (flow_window) *flow_window = j.at("flow_window").get<int>();
  for (const auto& c : j.at("cameras")) s.cameras.push_back(json_camera(c, s.width, s.height));
  for (const auto& c : j.at("heldout_cameras"))
    s.heldout_cameras.push_back(json_camera(c, s.width, s.height));
  for (const auto& pj : j.at("primitives")) {
    Primitive p;
    p.shape = pj.at("shape").get<std::string>() == "sphere" ? Primitive::Shape::kSphere
                                                            : Primitive::Shape::kRectangle;
    p.center = json_vec(pj.at("center"));
    p.axis_u = json_vec(pj.at("axis_u"));
    p.axis_v = json_vec(pj.at("axis_v"));
    p.half_u = pj.at("half_u").get<double>();
    p.half_v = pj.at("half_v").get<double>();
    p.radius = pj.at("radius").get<double>();
    const auto& tj = pj.at("texture");
    p.texture.kind = texture_kind(tj.at("kind").get<std::string>());
    p.texture.color_a = json_vec(tj.at("color_a"));
    p.texture.color_b = json_vec(tj.at("color_b"));
    p.texture.period = tj.at("period").get<double>();
    p.texture.period2 = tj.at("period2").get<double>();
    p.texture.phase = tj.at("phase").get<double>();
    const auto& mj = pj.at("motion");
    p.motion.kind = motion_kind(mj.at("kind").get<std::string>());
    p.motion.velocity = json_vec(mj.at("velocity"));
    p.motion.radius = mj.at("radius").get<double>();
    p.motion.angular_speed = mj.at("angular_speed").get<double>();
    p.motion.phase = mj.at("phase").get<double>();
    for (const auto& w : mj.at("waypoints")) {
      p.motion.waypoints.emplace_back(w.at(0).get<double>(), json_vec(w.at(1)));
    }
    s.primitives.push_back(p);
  }
  if (static_cast<int>(s.cameras.size()) != s.num_frames) {
    throw std::runtime_error("manifest: camera count does not match frame count");
  }
  return s;
}

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << scene_to_json(d.spec, d.flow_window) << "\n";
  }
  for (int t = 1; t <= d.num_frames(); ++t) {
    io::write_ppm(dir / numbered("frame", t, "ppm"), d.frame(t).image);
    io::write_f64(dir / numbered("depth", t, "f64"), d.depth.at(t - 1));
    io::write_f64(dir / numbered("flow", t, "f64"), d.flows.at(t - 1));
    io::write_pgm(dir / numbered("mask", t, "pgm"), d.masks.at(t - 1));
  }
  for (std::size_t i = 0; i < d.heldout.size(); ++i) {
    const int t = static_cast<int>(i) + 1;
    io::write_ppm(dir / numbered("heldout", t, "ppm"), d.heldout[i].image);
    io::write_pgm(dir / numbered("heldout_mask", t, "pgm"), d.heldout_masks.at(i));
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Dataset d;
  d.spec = scene_from_json(ss.str(), &d.flow_window);
  const std::size_t pixels = static_cast<std::size_t>(d.spec.width) * d.spec.height;
  for (int t = 1; t <= d.spec.num_frames; ++t) {
    Observation o;
    o.image = io::read_ppm(dir / numbered("frame", t, "ppm"));
    if (o.image.width != d.spec.width || o.image.height != d.spec.height) {
      throw std::runtime_error("frame size does not match manifest");
    }
    o.camera = d.spec.camera(t);
    o.t = t;
    d.frames.push_back(std::move(o));
    d.depth.push_back(io::read_f64(dir / numbered("depth", t, "f64")));
    d.flows.push_back(io::read_f64(dir / numbered("flow", t, "f64")));
    d.masks.push_back(io::read_pgm(dir / numbered("mask", t, "pgm")));
    if (d.depth.back().size() != pixels ||
        d.flows.back().size() != pixels * 4 * static_cast<std::size_t>(d.flow_window)) {
      throw std::runtime_error("raster size does not match manifest");
    }
  }
  if (!d.spec.heldout_cameras.empty()) {
    for (int t = 1; t <= d.spec.num_frames; ++t) {
      const auto img = dir / numbered("heldout", t, "ppm");
      if (!std::filesystem::exists(img)) break;
      Observation o;
      o.image = io::read_ppm(img);
      o.camera = d.spec.heldout_cameras.front();
      o.t = t;
      d.heldout.push_back(std::move(o));
      d.heldout_masks.push_back(io::read_pgm(dir / numbered("heldout_mask", t, "pgm")));
    }
  }
  return d;
}

}  // namespace flowibr
