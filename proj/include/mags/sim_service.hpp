#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "training.hpp"
// after Eigen: resolv.h defines _res
#include "httplib.h"

namespace mags {

struct DragRequest {
  int vertex = 0;
  Vec3 target = Vec3::Zero();
};

struct DragSummary {
  double energy = 0.0;
  int iterations = 0;
  double max_displacement = 0.0;
};

// Immutable view of a session after its last completed mutation.
struct SessionState {
  double time = -1.0;          // timeline position, negative for the rest pose
  std::vector<Vec3> base;      // pose that drags start from
  std::vector<Vec3> deformed;  // current V'
  std::vector<Gaussian3D> baked;
  std::vector<DragRequest> drags;
  double intensity = 0.0;
};

// Gaussians for the model posed at `deformed`, hover included.
inline std::vector<Gaussian3D> bake_pose(const Stage2Model& m, const std::vector<Vec3>& deformed) {
  MaGSModel model = m.model;
  model.mesh.deformed = deformed;
  update_hover(model);
  return bake_model(model);
}

inline std::vector<Gaussian3D> bake_at_time(const Stage2Model& m, double t) {
  Stage2Model posed = m;
  pose_at_time(posed, t);
  return bake_model(posed.model);
}

// Camera orbiting `target`; angles in degrees, +y up, field of view taken
// from `base`.
inline Camera orbit_camera(const Camera& base, double azimuth_deg, double elevation_deg, double distance,
                           const Vec3& target, int width, int height) {
  if (!(distance > 0.0)) fail(ErrorCode::InvalidArgument, "camera distance must be positive");
  const double az = azimuth_deg * M_PI / 180.0, el = elevation_deg * M_PI / 180.0;
  const Vec3 eye = target + distance * Vec3(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
  const double fov_x = 2.0 * std::atan(0.5 * base.width / base.fx);
  return Camera::look_at(eye, target, Vec3(0, 1, 0), fov_x, width, height);
}

// "az,el,dist[,tx,ty,tz]"
inline Camera parse_camera_query(const std::string& q, const Camera& base, int width, int height) {
  std::vector<double> v;
  std::stringstream ss(q);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidArgument, "cam: '" + item + "' is not a number");
    }
  }
  if (v.size() != 3 && v.size() != 6) fail(ErrorCode::InvalidArgument, "cam expects az,el,dist[,tx,ty,tz]");
  const Vec3 target = v.size() == 6 ? Vec3(v[3], v[4], v[5]) : Vec3::Zero();
  return orbit_camera(base, v[0], v[1], v[2], target, width, height);
}

class SimSession {
 public:
  SimSession(Stage2Model model, Camera view) : model_(std::make_shared<const Stage2Model>(std::move(model))), view_(view) {
    auto s = std::make_shared<SessionState>();
    s->base = model_->model.mesh.rest;
    s->deformed = s->base;
    s->baked = bake_pose(*model_, s->deformed);
    state_ = std::move(s);
  }

  static std::shared_ptr<SimSession> load(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.stage != "stage2") fail(ErrorCode::CheckpointError, "stage2 required");
    return std::make_shared<SimSession>(read_stage2_model(ck), checkpoint_view(ck));
  }

  const Stage2Model& model() const { return *model_; }

  std::shared_ptr<const SessionState> snapshot() const {
    std::lock_guard<std::mutex> lk(state_mu_);
    return state_;
  }

  const Camera& default_view() const { return view_; }
  Camera view(int width, int height) const { return view_.resized(width, height); }

  /// Moves dragged vertices to base + T * (target - base); the remaining
  /// model handles stay at their base positions.
  DragSummary apply_drag(const std::vector<DragRequest>& drags, double intensity) {
    if (!(intensity >= 0.0 && intensity <= 2.0)) fail(ErrorCode::InvalidArgument, "intensity T must be in [0, 2]");
    const int n = static_cast<int>(model_->model.mesh.vertex_count());
    for (const auto& d : drags) {
      if (d.vertex < 0 || d.vertex >= n) {
        fail(ErrorCode::InvalidHandle, "vertex " + std::to_string(d.vertex) + " is out of range");
      }
      if (!d.target.allFinite()) fail(ErrorCode::InvalidArgument, "drag target must be finite");
    }
    std::lock_guard<std::mutex> write(write_mu_);
    const auto cur = snapshot();
    auto next = std::make_shared<SessionState>(*cur);
    next->drags = drags;
    next->intensity = intensity;
    DragSummary sum;
    if (intensity == 0.0 || drags.empty()) {
      next->deformed = cur->base;
    } else {
      std::map<int, Vec3> goal;
      for (int h : model_->handles) goal[h] = cur->base[h];
      for (const auto& d : drags) {
        const Vec3& b = cur->base[d.vertex];
        goal[d.vertex] = Vec3(std::lerp(b.x(), d.target.x(), intensity), std::lerp(b.y(), d.target.y(), intensity),
                              std::lerp(b.z(), d.target.z(), intensity));
      }
      std::vector<int> handles;
      std::vector<Vec3> targets;
      for (const auto& [v, p] : goal) {
        handles.push_back(v);
        targets.push_back(p);
      }
      ArapSolution sol;
      try {
        const ArapSolver& solver = solver_for(handles);
        sol = solver.solve(model_->model.mesh.rest, targets, &cur->deformed);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::SolverSingular) throw;
        fail(ErrorCode::SolverSingular,
             "the drag cannot be solved: part of the mesh has no handle. Add a handle on every connected piece");
      }
      sum.energy = sol.energy;
      sum.iterations = sol.iterations;
      next->deformed = std::move(sol.deformed);
    }
    for (int v = 0; v < n; ++v) {
      sum.max_displacement = std::max(sum.max_displacement, (next->deformed[v] - cur->base[v]).norm());
    }
    next->baked = next->deformed == cur->deformed ? cur->baked : bake_pose(*model_, next->deformed);
    publish(std::move(next));
    return sum;
  }

  // Poses the mesh at dataset time t through the deformation field and
  // clears any drags.
  void set_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::InvalidArgument, "t must be in [0, 1]");
    std::lock_guard<std::mutex> write(write_mu_);
    const auto targets = handles_from_field(model_->model.mesh, model_->handles, model_->df, t);
    ArapSolution sol = solver_for(model_->handles).solve(model_->model.mesh.rest, targets);
    auto next = std::make_shared<SessionState>();
    next->time = t;
    next->base = sol.deformed;
    next->deformed = std::move(sol.deformed);
    next->baked = bake_pose(*model_, next->deformed);
    publish(std::move(next));
  }

  Image render(const Camera& cam) const {
    const auto s = snapshot();
    return rasterize(s->baked, cam, model_->background).color;
  }

  Json mesh_json() const {
    const auto s = snapshot();
    Json verts = Json::array(), faces = Json::array();
    for (const auto& v : s->deformed) verts.push_back({v.x(), v.y(), v.z()});
    for (const auto& f : model_->model.mesh.faces) faces.push_back({f[0], f[1], f[2]});
    Json j = {{"vertices", verts}, {"faces", faces}, {"handles", model_->handles}, {"intensity", s->intensity}};
    j["time"] = s->time < 0 ? Json(nullptr) : Json(s->time);
    return j;
  }

 private:
  const ArapSolver& solver_for(const std::vector<int>& handles) {
    if (!solver_ || solver_->handle_vertices() != handles) {
      solver_ = std::make_unique<ArapSolver>(model_->model.mesh, handles, model_->arap);
    }
    return *solver_;
  }

  void publish(std::shared_ptr<const SessionState> s) {
    std::lock_guard<std::mutex> lk(state_mu_);
    state_ = std::move(s);
  }

  std::shared_ptr<const Stage2Model> model_;
  Camera view_;
  std::unique_ptr<ArapSolver> solver_;
  std::mutex write_mu_;
  mutable std::mutex state_mu_;
  std::shared_ptr<const SessionState> state_;
};

inline std::string random_session_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard<std::mutex> lk(mu);
  std::ostringstream os;
  for (int k = 0; k < 4; ++k) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(rd()));
    os << buf;
  }
  return os.str();
}

class SessionManager {
 public:
  explicit SessionManager(std::size_t capacity = 16) : capacity_(capacity) {}

  std::string create(const std::string& checkpoint_path) {
    check_capacity();
    return add(SimSession::load(checkpoint_path));
  }

  std::string add(std::shared_ptr<SimSession> s) {
    std::lock_guard<std::mutex> lk(mu_);
    if (sessions_.size() >= capacity_) over_capacity();
    std::string id;
    do {
      id = random_session_id();
    } while (sessions_.count(id));
    sessions_.emplace(id, std::move(s));
    return id;
  }

  std::shared_ptr<SimSession> get(const std::string& id) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) fail(ErrorCode::NotFound, "no session '" + id + "'");
    return it->second;
  }

  void remove(const std::string& id) {
    std::lock_guard<std::mutex> lk(mu_);
    if (!sessions_.erase(id)) fail(ErrorCode::NotFound, "no session '" + id + "'");
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return sessions_.size();
  }

 private:
  void check_capacity() const {
    std::lock_guard<std::mutex> lk(mu_);
    if (sessions_.size() >= capacity_) over_capacity();
  }
  [[noreturn]] void over_capacity() const {
    fail(ErrorCode::CapacityExceeded, "at most " + std::to_string(capacity_) + " sessions");
  }

  std::size_t capacity_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<SimSession>> sessions_;
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::CapacityExceeded: return 429;
    case ErrorCode::InvalidHandle:
    case ErrorCode::InvalidArgument:
    case ErrorCode::ParseError:
    case ErrorCode::SchemaError:
    case ErrorCode::DimensionMismatch: return 400;
    case ErrorCode::CheckpointError:
    case ErrorCode::VersionMismatch:
    case ErrorCode::CorruptBlob:
    case ErrorCode::IoError:
    case ErrorCode::SolverSingular: return 422;
    default: return 500;
  }
}

namespace detail {

inline void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  res.status = status;
  res.set_content(Json{{"code", code}, {"message", message}}.dump(), "application/json");
}

template <typename F>
auto guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, http_status(e.code()), to_string(e.code()), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "ParseError", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "Internal", e.what());
    }
  };
}

inline Json body_json(const httplib::Request& req) {
  Json j = Json::parse(req.body);
  if (!j.is_object()) fail(ErrorCode::ParseError, "request body must be a JSON object");
  return j;
}

inline int query_int(const httplib::Request& req, const std::string& key, int fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size() || out < 1 || out > 4096) throw std::out_of_range(v);
    return out;
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, key + " must be an integer in 1..4096");
  }
}

inline Vec3 vec3_json(const Json& j) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::ParseError, "target must be [x, y, z]");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace detail

/// Registers the session API; `ui_dir`, when non-empty, is served at "/".
inline void register_routes(httplib::Server& srv, SessionManager& mgr, const std::string& ui_dir = {}) {
  using detail::guarded;
  const std::string sid = R"(/sessions/([0-9a-f]+))";

  srv.Post("/sessions", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
    const Json body = detail::body_json(req);
    if (!body.contains("checkpoint")) fail(ErrorCode::ParseError, "missing field 'checkpoint'");
    const std::string id = mgr.create(body.at("checkpoint").get<std::string>());
    res.status = 201;
    res.set_content(Json{{"id", id}, {"state", "ready"}}.dump(), "application/json");
  }));

  srv.Get(sid + "/mesh", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
    res.set_content(mgr.get(req.matches[1])->mesh_json().dump(), "application/json");
  }));

  srv.Post(sid + "/drag", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
    const auto session = mgr.get(req.matches[1]);
    const Json body = detail::body_json(req);
    std::vector<DragRequest> drags;
    for (const auto& d : body.value("drags", Json::array())) {
      drags.push_back({d.at("vertex").get<int>(), detail::vec3_json(d.at("target"))});
    }
    const double t = body.value("T", 1.0);
    const DragSummary s = session->apply_drag(drags, t);
    res.set_content(
        Json{{"energy", s.energy}, {"iterations", s.iterations}, {"max_displacement", s.max_displacement}}.dump(),
        "application/json");
  }));

  srv.Get(sid + "/render", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
    const auto session = mgr.get(req.matches[1]);
    const Camera& def = session->default_view();
    const int w = detail::query_int(req, "w", def.width);
    const int h = detail::query_int(req, "h", def.height);
    const Camera cam = req.has_param("cam") ? parse_camera_query(req.get_param_value("cam"), def, w, h)
                                            : session->view(w, h);
    const auto png = encode_png(session->render(cam));
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  }));

  srv.Post(sid + "/time", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
    const auto session = mgr.get(req.matches[1]);
    const Json body = detail::body_json(req);
    if (!body.contains("t")) fail(ErrorCode::ParseError, "missing field 't'");
    session->set_time(body.at("t").get<double>());
    res.set_content(Json{{"t", body.at("t")}}.dump(), "application/json");
  }));

  srv.Delete(sid, guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
    mgr.remove(req.matches[1]);
    res.status = 204;
  }));

  if (!ui_dir.empty()) {
    if (!std::filesystem::is_directory(ui_dir)) fail(ErrorCode::IoError, "ui dir '" + ui_dir + "' does not exist");
    srv.set_mount_point("/", ui_dir);
  }
}

}  // namespace mags
