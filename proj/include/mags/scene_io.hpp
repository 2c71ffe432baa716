#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geom.hpp"
#include "image.hpp"
#include "json.hpp"
#include "mesh.hpp"
#include "splatting.hpp"

namespace mags {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

enum class Split { Train, Test };

struct Frame {
  Image image;  // H x W x 3, linear
  Camera camera;
  double time = 0.0;
  Split split = Split::Train;
  std::string path;
};

struct Dataset {
  std::vector<Frame> frames;
  Vec3 background = Vec3::Zero();
  Json meta = Json::object();

  std::vector<int> indices(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].split == s) out.push_back(static_cast<int>(i));
    }
    return out;
  }
  int width() const { return frames.empty() ? 0 : frames[0].image.width; }
  int height() const { return frames.empty() ? 0 : frames[0].image.height; }

  void validate() const {
    if (frames.empty()) fail(ErrorCode::EmptyDataset, "dataset has no frames");
    for (const auto& f : frames) {
      if (f.image.width != width() || f.image.height != height() || f.image.channels != 3) {
        fail(ErrorCode::DimensionMismatch, "frame " + f.path + " differs in size from the first frame");
      }
      if (!(f.time >= 0.0 && f.time <= 1.0)) fail(ErrorCode::InvalidArgument, "frame time outside [0,1]");
    }
  }
};

// OpenGL-style camera-to-world (x right, y up, z backward) <-> this
// library's world-to-camera (x right, y down, z forward).
inline Camera camera_from_c2w(const Eigen::Matrix4d& c2w, double fov_x, int width, int height) {
  const Mat3 flip = Vec3(1, -1, -1).asDiagonal();
  const Mat3 r = c2w.topLeftCorner<3, 3>();
  const Vec3 t = c2w.topRightCorner<3, 1>();
  Camera cam;
  cam.rotation = flip * r.transpose();
  cam.translation = -cam.rotation * t;
  cam.fx = 0.5 * width / std::tan(0.5 * fov_x);
  cam.fy = cam.fx;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  return cam;
}

inline Eigen::Matrix4d c2w_from_camera(const Camera& cam) {
  const Mat3 flip = Vec3(1, -1, -1).asDiagonal();
  const Mat3 r = (flip * cam.rotation).transpose();
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = cam.position();
  return m;
}

namespace detail {

template <typename T>
T json_field(const Json& obj, const std::string& key, const std::string& context) {
  if (!obj.is_object() || !obj.contains(key)) fail(ErrorCode::ParseError, context + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::ParseError, context + ": field '" + key + "' has the wrong type");
  }
}

inline Json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorCode::ParseError, p.string() + ": cannot open");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::ParseError, p.string() + ": " + e.what());
  }
}

// Composites RGBA over the background and box-downsamples by an integer
// factor.
inline Image prepare_image(const Image& raw, const Vec3& background, int factor) {
  Image rgb(raw.width, raw.height, 3);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      const double a = (raw.channels == 4 || raw.channels == 2) ? raw.at(x, y, raw.channels - 1) : 1.0;
      for (int c = 0; c < 3; ++c) {
        const double v = raw.channels >= 3 ? raw.at(x, y, c) : raw.at(x, y, 0);
        rgb.at(x, y, c) = a * v + (1 - a) * background[c];
      }
    }
  }
  if (factor <= 1) return rgb;
  Image out(raw.width / factor, raw.height / factor, 3);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) s += rgb.at(x * factor + dx, y * factor + dy, c);
        }
        out.at(x, y, c) = s * inv;
      }
    }
  }
  return out;
}

}  // namespace detail

struct DnerfOptions {
  Vec3 background = Vec3::Ones();
  int downsample = 1;
};

/// Reads transforms_train.json (required) and transforms_test.json
/// (optional) from `root`.
inline Dataset load_dnerf_dataset(const std::string& root, const DnerfOptions& opt = {}) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.background = opt.background;
  const std::pair<const char*, Split> splits[] = {{"transforms_train.json", Split::Train},
                                                  {"transforms_test.json", Split::Test}};
  for (const auto& [name, split] : splits) {
    const fs::path file = fs::path(root) / name;
    if (!fs::exists(file)) {
      if (split == Split::Train) fail(ErrorCode::ParseError, file.string() + ": not found");
      continue;
    }
    const Json doc = detail::read_json(file);
    const std::string ctx = file.string();
    const double fov = detail::json_field<double>(doc, "camera_angle_x", ctx);
    const Json frames = detail::json_field<Json>(doc, "frames", ctx);
    if (!frames.is_array()) fail(ErrorCode::ParseError, ctx + ": field 'frames' is not an array");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const std::string fctx = ctx + " frames[" + std::to_string(i) + "]";
      const auto& fr = frames[i];
      std::string rel = detail::json_field<std::string>(fr, "file_path", fctx);
      const auto m = detail::json_field<std::vector<std::vector<double>>>(fr, "transform_matrix", fctx);
      if (m.size() != 4 || std::any_of(m.begin(), m.end(), [](const auto& row) { return row.size() != 4; })) {
        fail(ErrorCode::ParseError, fctx + ": field 'transform_matrix' is not 4x4");
      }
      const double t = detail::json_field<double>(fr, "time", fctx);
      fs::path img_path = fs::path(root) / rel;
      if (!img_path.has_extension() || !fs::exists(img_path)) {
        const fs::path png = fs::path(root) / (rel + ".png");
        if (fs::exists(png)) img_path = png;
      }
      if (!fs::exists(img_path)) fail(ErrorCode::MissingImage, fctx + ": image " + img_path.string() + " not found");
      const Image img = detail::prepare_image(load_png(img_path.string()), opt.background, opt.downsample);
      Eigen::Matrix4d c2w;
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) c2w(r, c) = m[r][c];
      }
      Frame f;
      f.camera = camera_from_c2w(c2w, fov, img.width, img.height);
      f.image = img;
      f.time = std::clamp(t, 0.0, 1.0);
      f.split = split;
      f.path = img_path.string();
      ds.frames.push_back(std::move(f));
    }
  }
  const fs::path meta = fs::path(root) / "meta.json";
  if (fs::exists(meta)) ds.meta = detail::read_json(meta);
  if (ds.frames.empty()) fail(ErrorCode::EmptyDataset, root + ": no frames");
  ds.validate();
  return ds;
}

/// Writes the dataset in the D-NeRF layout (PNG frames plus transforms
/// files); meta goes to meta.json.
inline void save_dnerf_dataset(const Dataset& ds, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "train");
  fs::create_directories(fs::path(root) / "test");
  for (const Split split : {Split::Train, Split::Test}) {
    const char* tag = split == Split::Train ? "train" : "test";
    Json doc;
    doc["frames"] = Json::array();
    int k = 0;
    for (const auto& f : ds.frames) {
      if (f.split != split) continue;
      doc["camera_angle_x"] = 2.0 * std::atan(0.5 * f.camera.width / f.camera.fx);
      char name[32];
      std::snprintf(name, sizeof(name), "r_%03d", k++);
      const std::string rel = std::string("./") + tag + "/" + name;
      save_png(f.image, (fs::path(root) / tag / (std::string(name) + ".png")).string());
      const Eigen::Matrix4d m = c2w_from_camera(f.camera);
      Json rows = Json::array();
      for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
      doc["frames"].push_back({{"file_path", rel}, {"time", f.time}, {"transform_matrix", rows}});
    }
    if (!doc.contains("camera_angle_x")) doc["camera_angle_x"] = 0.0;
    std::ofstream(fs::path(root) / (std::string("transforms_") + tag + ".json")) << doc.dump(2) << "\n";
  }
  std::ofstream(fs::path(root) / "meta.json") << ds.meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Gaussian PLY (3DGS layout)

namespace detail {

inline std::vector<std::string> gaussian_ply_properties(int sh_degree) {
  std::vector<std::string> p = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
  const int rest = 3 * (sh_coeff_count(sh_degree) - 1);
  for (int i = 0; i < rest; ++i) p.push_back("f_rest_" + std::to_string(i));
  for (const char* n : {"opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}) p.push_back(n);
  return p;
}

struct PlyProperty {
  std::string name;
  std::string type;
  bool is_list = false;
  std::string count_type;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

struct PlyHeader {
  std::vector<PlyElement> elements;
  std::size_t data_offset = 0;
};

inline std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  fail(ErrorCode::SchemaError, "unknown PLY type '" + t + "'");
}

inline double ply_read_scalar(const std::uint8_t* p, const std::string& t) {
  auto get = [&](auto v) {
    std::memcpy(&v, p, sizeof(v));
    return static_cast<double>(v);
  };
  if (t == "float" || t == "float32") return get(float{});
  if (t == "double" || t == "float64") return get(double{});
  if (t == "uchar" || t == "uint8") return get(std::uint8_t{});
  if (t == "char" || t == "int8") return get(std::int8_t{});
  if (t == "short" || t == "int16") return get(std::int16_t{});
  if (t == "ushort" || t == "uint16") return get(std::uint16_t{});
  if (t == "int" || t == "int32") return get(std::int32_t{});
  if (t == "uint" || t == "uint32") return get(std::uint32_t{});
  fail(ErrorCode::SchemaError, "unknown PLY type '" + t + "'");
}

inline PlyHeader parse_ply_header(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  const std::string marker = "end_header\n";
  const std::string head(bytes.begin(), bytes.begin() + std::min<std::size_t>(bytes.size(), 1 << 16));
  const auto end = head.find(marker);
  if (head.rfind("ply\n", 0) != 0 || end == std::string::npos) fail(ErrorCode::SchemaError, path + ": not a PLY file");
  PlyHeader h;
  h.data_offset = end + marker.size();
  std::istringstream in(head.substr(0, end));
  std::string line;
  bool binary_le = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (kw == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      h.elements.push_back(e);
    } else if (kw == "property") {
      if (h.elements.empty()) fail(ErrorCode::SchemaError, path + ": property before element");
      PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        ls >> p.count_type >> p.type >> p.name;
      } else {
        p.type = t;
        ls >> p.name;
      }
      h.elements.back().props.push_back(p);
    }
  }
  if (!binary_le) fail(ErrorCode::SchemaError, path + ": only binary_little_endian PLY is supported");
  return h;
}

inline void put_f32(std::vector<std::uint8_t>& out, double v) {
  const float f = static_cast<float>(v);
  const auto* p = reinterpret_cast<const std::uint8_t*>(&f);
  out.insert(out.end(), p, p + 4);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_gaussians_ply(const std::vector<Gaussian3D>& gaussians) {
  const int degree = gaussians.empty() ? 0 : gaussians[0].sh_degree();
  const int ncoef = sh_coeff_count(degree);
  const auto props = detail::gaussian_ply_properties(degree);
  std::string header = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(gaussians.size()) + "\n";
  for (const auto& p : props) header += "property float " + p + "\n";
  header += "end_header\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (const auto& g : gaussians) {
    if (static_cast<int>(g.sh.size()) != ncoef) fail(ErrorCode::ShapeMismatch, "mixed SH degrees in PLY export");
    for (int k = 0; k < 3; ++k) detail::put_f32(out, g.mu[k]);
    for (int k = 0; k < 3; ++k) detail::put_f32(out, 0.0);
    for (int k = 0; k < 3; ++k) detail::put_f32(out, g.sh[0][k]);
    // Channel-major rest coefficients.
    for (int c = 0; c < 3; ++c) {
      for (int i = 1; i < ncoef; ++i) detail::put_f32(out, g.sh[i][c]);
    }
    detail::put_f32(out, g.opacity_logit);
    for (int k = 0; k < 3; ++k) detail::put_f32(out, g.log_scale[k]);
    for (double q : {g.rot.w, g.rot.x, g.rot.y, g.rot.z}) detail::put_f32(out, q);
  }
  return out;
}

inline std::vector<Gaussian3D> decode_gaussians_ply(const std::vector<std::uint8_t>& bytes,
                                                    const std::string& path = "<memory>") {
  const auto h = detail::parse_ply_header(bytes, path);
  const auto it = std::find_if(h.elements.begin(), h.elements.end(), [](const auto& e) { return e.name == "vertex"; });
  if (it == h.elements.end()) fail(ErrorCode::SchemaError, path + ": missing element 'vertex'");
  if (it != h.elements.begin()) fail(ErrorCode::SchemaError, path + ": 'vertex' must be the first element");
  std::map<std::string, std::pair<std::size_t, std::string>> layout;
  std::size_t stride = 0;
  for (const auto& p : it->props) {
    if (p.is_list) fail(ErrorCode::SchemaError, path + ": list property '" + p.name + "' in vertex element");
    layout[p.name] = {stride, p.type};
    stride += detail::ply_type_size(p.type);
  }
  int rest = 0;
  while (layout.count("f_rest_" + std::to_string(rest))) ++rest;
  const int ncoef = 1 + rest / 3;
  int degree = -1;
  for (int d = 0; d <= kMaxShDegree; ++d) {
    if (sh_coeff_count(d) == ncoef && rest % 3 == 0) degree = d;
  }
  if (degree < 0) fail(ErrorCode::SchemaError, path + ": " + std::to_string(rest) + " f_rest properties is not a valid SH layout");
  std::vector<std::string> missing;
  for (const auto& name : detail::gaussian_ply_properties(degree)) {
    if (name[0] != 'n' && !layout.count(name)) missing.push_back(name);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    fail(ErrorCode::SchemaError, path + ": missing properties " + list);
  }
  if (bytes.size() < h.data_offset + stride * it->count) fail(ErrorCode::IoError, path + ": vertex data truncated");
  std::vector<Gaussian3D> out(it->count);
  for (std::size_t i = 0; i < it->count; ++i) {
    const std::uint8_t* row = bytes.data() + h.data_offset + stride * i;
    auto get = [&](const std::string& name) {
      const auto& [off, type] = layout.at(name);
      return detail::ply_read_scalar(row + off, type);
    };
    Gaussian3D& g = out[i];
    g.mu = Vec3(get("x"), get("y"), get("z"));
    g.sh.assign(ncoef, Vec3::Zero());
    g.sh[0] = Vec3(get("f_dc_0"), get("f_dc_1"), get("f_dc_2"));
    for (int c = 0; c < 3; ++c) {
      for (int k = 1; k < ncoef; ++k) g.sh[k][c] = get("f_rest_" + std::to_string(c * (ncoef - 1) + k - 1));
    }
    g.opacity_logit = get("opacity");
    g.log_scale = Vec3(get("scale_0"), get("scale_1"), get("scale_2"));
    g.rot = Quat{get("rot_0"), get("rot_1"), get("rot_2"), get("rot_3")};
  }
  return out;
}

inline void export_gaussians_ply(const std::vector<Gaussian3D>& gaussians, const std::string& path) {
  write_file_bytes(path, encode_gaussians_ply(gaussians));
}

inline std::vector<Gaussian3D> import_gaussians_ply(const std::string& path) {
  return decode_gaussians_ply(read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// Mesh export

inline void export_mesh_obj(const std::vector<Vec3>& vertices, const std::vector<Face>& faces, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out.precision(9);
  for (const auto& v : vertices) out << "v " << v.x() << " " << v.y() << " " << v.z() << "\n";
  for (const auto& f : faces) out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
  if (!out) fail(ErrorCode::IoError, "short write to " + path);
}

// Reads `v` and triangular `f` records; texture and normal indices after
// a slash are ignored, negative indices count from the end.
inline TriMesh import_mesh_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path);
  std::vector<Vec3> verts;
  std::vector<Face> faces;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    const std::string ctx = path + ":" + std::to_string(lineno);
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x() >> v.y() >> v.z())) fail(ErrorCode::ParseError, ctx + ": bad vertex");
      verts.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        int i = 0;
        try {
          i = std::stoi(tok.substr(0, tok.find('/')));
        } catch (const std::exception&) {
          fail(ErrorCode::ParseError, ctx + ": bad face index '" + tok + "'");
        }
        idx.push_back(i < 0 ? static_cast<int>(verts.size()) + i : i - 1);
      }
      if (idx.size() != 3) fail(ErrorCode::ParseError, ctx + ": only triangles are supported");
      faces.push_back({idx[0], idx[1], idx[2]});
    }
  }
  TriMesh mesh(std::move(verts), std::move(faces));
  mesh.validate();
  return mesh;
}

inline void export_mesh_ply(const std::vector<Vec3>& vertices, const std::vector<Face>& faces, const std::string& path) {
  std::string header = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(vertices.size()) +
                       "\nproperty float x\nproperty float y\nproperty float z\nelement face " +
                       std::to_string(faces.size()) + "\nproperty list uchar int vertex_indices\nend_header\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (const auto& v : vertices) {
    for (int k = 0; k < 3; ++k) detail::put_f32(out, v[k]);
  }
  for (const auto& f : faces) {
    out.push_back(3);
    for (int k = 0; k < 3; ++k) {
      const std::int32_t idx = f[k];
      const auto* p = reinterpret_cast<const std::uint8_t*>(&idx);
      out.insert(out.end(), p, p + 4);
    }
  }
  write_file_bytes(path, out);
}

// ---------------------------------------------------------------------------
// Checkpoint container: "MAGSCKPT", u32 version, u64 manifest length, JSON
// manifest, then little-endian f32 blobs in manifest order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string stage;
  Json meta = Json::object();
  std::vector<Blob> blobs;

  void add(std::string name, std::vector<std::int64_t> shape, const std::vector<double>& values) {
    Blob b{std::move(name), std::move(shape), {}};
    b.data.assign(values.begin(), values.end());
    std::int64_t n = 1;
    for (auto s : b.shape) n *= s;
    if (static_cast<std::size_t>(n) != b.data.size()) {
      fail(ErrorCode::ShapeMismatch, "blob " + b.name + " shape does not match its length");
    }
    blobs.push_back(std::move(b));
  }

  bool has(const std::string& name) const {
    return std::any_of(blobs.begin(), blobs.end(), [&](const Blob& b) { return b.name == name; });
  }

  const Blob& blob(const std::string& name) const {
    for (const auto& b : blobs) {
      if (b.name == name) return b;
    }
    fail(ErrorCode::CheckpointError, "checkpoint has no blob '" + name + "'");
  }

  std::vector<double> values(const std::string& name, std::size_t expected) const {
    const Blob& b = blob(name);
    if (b.data.size() != expected) {
      fail(ErrorCode::CorruptBlob, "blob " + name + " has " + std::to_string(b.data.size()) + " values, expected " +
                                       std::to_string(expected));
    }
    return {b.data.begin(), b.data.end()};
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Json manifest;
  manifest["stage"] = ck.stage;
  manifest["meta"] = ck.meta;
  manifest["blobs"] = Json::array();
  for (const auto& b : ck.blobs) manifest["blobs"].push_back({{"name", b.name}, {"shape", b.shape}, {"count", b.data.size()}});
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out = {'M', 'A', 'G', 'S', 'C', 'K', 'P', 'T'};
  detail::put_u32(out, kCheckpointVersion);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& b : ck.blobs) {
    for (float f : b.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(out, bits);
    }
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "MAGSCKPT", 8) != 0) {
    fail(ErrorCode::CorruptBlob, "not a checkpoint (bad magic or truncated header)");
  }
  const std::uint32_t version = detail::get_u32(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                         std::to_string(kCheckpointVersion));
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[12 + i]) << (8 * i);
  if (len > bytes.size() - 20) fail(ErrorCode::CorruptBlob, "checkpoint manifest truncated");
  Json manifest;
  try {
    manifest = Json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBlob, std::string("checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  std::size_t offset = 20 + len;
  try {
    ck.stage = manifest.at("stage").get<std::string>();
    ck.meta = manifest.at("meta");
    for (const auto& entry : manifest.at("blobs")) {
      Blob b;
      b.name = entry.at("name").get<std::string>();
      b.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto count = entry.at("count").get<std::size_t>();
      if (offset + 4 * count > bytes.size()) fail(ErrorCode::CorruptBlob, "blob " + b.name + " is truncated");
      b.data.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = detail::get_u32(bytes.data() + offset + 4 * i);
        std::memcpy(&b.data[i], &bits, 4);
      }
      offset += 4 * count;
      ck.blobs.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptBlob, std::string("checkpoint manifest: ") + e.what());
  }
  if (offset != bytes.size()) fail(ErrorCode::CorruptBlob, "checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) { write_file_bytes(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

// Blob helpers shared by the training and service layers.

inline void add_gaussians(Checkpoint& ck, const std::string& prefix, const std::vector<Gaussian3D>& gs) {
  const int ncoef = gs.empty() ? 1 : static_cast<int>(gs[0].sh.size());
  const auto n = static_cast<std::int64_t>(gs.size());
  std::vector<double> mu, rot, scale, opacity, sh;
  for (const auto& g : gs) {
    mu.insert(mu.end(), g.mu.data(), g.mu.data() + 3);
    rot.insert(rot.end(), {g.rot.w, g.rot.x, g.rot.y, g.rot.z});
    scale.insert(scale.end(), g.log_scale.data(), g.log_scale.data() + 3);
    opacity.push_back(g.opacity_logit);
    for (const auto& c : g.sh) sh.insert(sh.end(), c.data(), c.data() + 3);
  }
  ck.add(prefix + ".mu", {n, 3}, mu);
  ck.add(prefix + ".rot", {n, 4}, rot);
  ck.add(prefix + ".log_scale", {n, 3}, scale);
  ck.add(prefix + ".opacity", {n}, opacity);
  ck.add(prefix + ".sh", {n, ncoef, 3}, sh);
}

inline std::vector<Gaussian3D> read_gaussians(const Checkpoint& ck, const std::string& prefix) {
  const Blob& b = ck.blob(prefix + ".sh");
  if (b.shape.size() != 3 || b.shape[2] != 3) fail(ErrorCode::CorruptBlob, prefix + ".sh has a bad shape");
  const auto n = static_cast<std::size_t>(b.shape[0]);
  const auto ncoef = static_cast<std::size_t>(b.shape[1]);
  const auto mu = ck.values(prefix + ".mu", 3 * n), rot = ck.values(prefix + ".rot", 4 * n);
  const auto scale = ck.values(prefix + ".log_scale", 3 * n), op = ck.values(prefix + ".opacity", n);
  const auto sh = ck.values(prefix + ".sh", 3 * ncoef * n);
  std::vector<Gaussian3D> gs(n);
  for (std::size_t i = 0; i < n; ++i) {
    gs[i].mu = Vec3(mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]);
    gs[i].rot = Quat{rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]};
    gs[i].log_scale = Vec3(scale[3 * i], scale[3 * i + 1], scale[3 * i + 2]);
    gs[i].opacity_logit = op[i];
    gs[i].sh.resize(ncoef);
    for (std::size_t k = 0; k < ncoef; ++k) {
      const std::size_t o = 3 * (i * ncoef + k);
      gs[i].sh[k] = Vec3(sh[o], sh[o + 1], sh[o + 2]);
    }
  }
  return gs;
}

inline std::vector<double> flatten(const std::vector<Vec3>& v) {
  std::vector<double> out;
  out.reserve(3 * v.size());
  for (const auto& p : v) out.insert(out.end(), p.data(), p.data() + 3);
  return out;
}

inline std::vector<Vec3> unflatten(const std::vector<double>& v) {
  std::vector<Vec3> out(v.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class SynthKind { StaticSphere, OscillatingSphere, BendingBar };

inline std::string to_string(SynthKind k) {
  switch (k) {
    case SynthKind::StaticSphere: return "static-sphere";
    case SynthKind::OscillatingSphere: return "oscillating-sphere";
    case SynthKind::BendingBar: return "bending-bar";
  }
  return "unknown";
}

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "static-sphere") return SynthKind::StaticSphere;
  if (s == "oscillating-sphere") return SynthKind::OscillatingSphere;
  if (s == "bending-bar") return SynthKind::BendingBar;
  fail(ErrorCode::InvalidArgument, "unknown synthetic scene '" + s + "'");
}

struct SynthOptions {
  SynthKind kind = SynthKind::OscillatingSphere;
  int resolution = 64;
  int frames = 20;
  std::uint64_t seed = 0;
  double camera_distance = 3.0;
  double camera_height = 1.0;
  double fov_x = 0.7;
  int test_every = 5;  // every n-th frame (offset n-1) is held out
};

inline constexpr double kSphereRadius = 0.5;
inline constexpr double kOscillationAmplitude = 0.3;
inline constexpr double kBarLength = 1.2;
inline constexpr double kBarMaxAngle = 0.8;

inline Vec3 oscillating_center(double t) { return Vec3(kOscillationAmplitude * std::sin(2 * M_PI * t), 0, 0); }
inline double bar_bend_angle(double t) { return kBarMaxAngle * std::sin(M_PI * t); }

namespace detail {

// Quaternion whose rotation maps +z onto n.
inline Quat align_z(const Vec3& n) {
  const Vec3 z = Vec3::UnitZ();
  const double c = z.dot(n);
  if (c < -1 + 1e-12) return Quat{0, 1, 0, 0};
  const Vec3 axis = z.cross(n);
  return Quat{1 + c, axis.x(), axis.y(), axis.z()}.normalized();
}

inline std::vector<Gaussian3D> sphere_shell(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  const int n = 400;
  std::vector<Gaussian3D> out;
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(1 - y * y);
    const Vec3 d(r * std::cos(golden * i), y, r * std::sin(golden * i));
    Gaussian3D g;
    g.mu = kSphereRadius * d;
    g.rot = align_z(d);
    g.log_scale = Vec3(std::log(0.075), std::log(0.075), std::log(0.02));
    g.opacity_logit = logit(0.9);
    const Vec3 color(0.5 + 0.4 * d.x(), 0.5 + 0.4 * d.y(), 0.5 - 0.3 * d.z());
    g.sh = {(color + 0.03 * Vec3(u(rng), u(rng), u(rng)) - Vec3::Constant(0.5)) / sh::C0};
    out.push_back(g);
  }
  return out;
}

inline std::vector<Gaussian3D> bar_volume(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Gaussian3D> out;
  const int nx = 20, ny = 4, nz = 4;
  const double half_w = 0.1;
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) {
      for (int k = 0; k < nz; ++k) {
        Gaussian3D g;
        const double s = (i + 0.5) / nx;
        g.mu = Vec3(-0.5 * kBarLength + s * kBarLength, -half_w + 2 * half_w * (j + 0.5) / ny,
                    -half_w + 2 * half_w * (k + 0.5) / nz);
        g.log_scale = Vec3::Constant(std::log(0.04));
        g.opacity_logit = logit(0.9);
        const Vec3 color = (i / 4) % 2 == 0 ? Vec3(0.85, 0.35, 0.2) : Vec3(0.2, 0.55, 0.85);
        g.sh = {(color + 0.03 * Vec3(u(rng), u(rng), u(rng)) - Vec3::Constant(0.5)) / sh::C0};
        out.push_back(g);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Ground-truth Gaussians of a synthetic scene at time t.
inline std::vector<Gaussian3D> synth_gaussians(SynthKind kind, std::uint64_t seed, double t) {
  std::mt19937_64 rng(seed);
  if (kind == SynthKind::BendingBar) {
    auto bar = detail::bar_volume(rng);
    // Each point turns about the fixed left end by an angle proportional to
    // its distance along the bar.
    const Vec3 pivot(-0.5 * kBarLength, 0, 0);
    const double theta = bar_bend_angle(t);
    for (auto& g : bar) {
      const double s = (g.mu.x() - pivot.x()) / kBarLength;
      const Mat3 r = rotation_z(theta * s);
      g.mu = pivot + r * (g.mu - pivot);
      g.rot = matrix_to_quat(r) * g.rot;
    }
    return bar;
  }
  auto shell = detail::sphere_shell(rng);
  if (kind == SynthKind::OscillatingSphere) {
    const Vec3 c = oscillating_center(t);
    for (auto& g : shell) g.mu += c;
  }
  return shell;
}

inline Camera synth_camera(const SynthOptions& opt, int frame) {
  const double a = 2 * M_PI * frame / std::max(1, opt.frames);
  const Vec3 eye(opt.camera_distance * std::sin(a), opt.camera_height, -opt.camera_distance * std::cos(a));
  return Camera::look_at(eye, Vec3::Zero(), Vec3(0, 1, 0), opt.fov_x, opt.resolution, opt.resolution);
}

/// Renders `frames` views on a circle around the object, frame i at time
/// i / (frames - 1). Held-out frames carry Split::Test.
inline Dataset synth_scene(const SynthOptions& opt) {
  if (opt.frames < 2 || opt.resolution < 1) fail(ErrorCode::InvalidArgument, "synthetic scene needs >= 2 frames");
  Dataset ds;
  ds.background = Vec3::Zero();
  ds.meta = {{"kind", to_string(opt.kind)}, {"seed", opt.seed}, {"resolution", opt.resolution},
             {"frames", opt.frames}, {"background", {0.0, 0.0, 0.0}}};
  Json per_frame = Json::array();
  for (int i = 0; i < opt.frames; ++i) {
    Frame f;
    f.time = static_cast<double>(i) / (opt.frames - 1);
    f.camera = synth_camera(opt, i);
    f.image = rasterize(synth_gaussians(opt.kind, opt.seed, f.time), f.camera, ds.background).color;
    f.split = (opt.test_every > 0 && i % opt.test_every == opt.test_every - 1) ? Split::Test : Split::Train;
    f.path = "frame_" + std::to_string(i);
    Json rec = {{"frame", i}, {"time", f.time}};
    if (opt.kind == SynthKind::OscillatingSphere) {
      const Vec3 c = oscillating_center(f.time);
      rec["center"] = {c.x(), c.y(), c.z()};
    } else if (opt.kind == SynthKind::BendingBar) {
      rec["bend_angle"] = bar_bend_angle(f.time);
    } else {
      rec["center"] = {0.0, 0.0, 0.0};
    }
    per_frame.push_back(rec);
    ds.frames.push_back(std::move(f));
  }
  ds.meta["ground_truth"] = per_frame;
  return ds;
}

}  // namespace mags
