#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "sim_service.hpp"
#include "training.hpp"

namespace mags::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Vec3 parse_vec3(const std::string& s) {
  std::istringstream ss(s);
  Vec3 v;
  char c1 = 0, c2 = 0;
  if (!(ss >> v.x() >> c1 >> v.y() >> c2 >> v.z()) || c1 != ',' || c2 != ',' || !ss.eof()) {
    throw UsageError("expected r,g,b but got '" + s + "'");
  }
  return v;
}

// Background from --background, else meta.json, else white.
inline Dataset load_data(const std::string& root, const std::string& background) {
  DnerfOptions opt;
  const fs::path meta = fs::path(root) / "meta.json";
  if (!background.empty()) {
    opt.background = parse_vec3(background);
  } else if (fs::exists(meta)) {
    const Json m = detail::read_json(meta);
    if (m.contains("background")) opt.background = Vec3(m["background"][0], m["background"][1], m["background"][2]);
  }
  return load_dnerf_dataset(root, opt);
}

struct ConfigFlags {
  std::string preset;
  std::string file;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  bool no_rdf = false;

  bool any() const { return !preset.empty() || !file.empty() || iterations || seed || no_rdf; }
};

inline TrainConfig preset_config(const std::string& name) {
  if (name.empty() || name == "paper") return TrainConfig{};
  if (name == "desk") return TrainConfig::desk();
  throw UsageError("unknown preset '" + name + "' (paper, desk)");
}

// defaults < config file < flags
inline TrainConfig build_config(const TrainConfig& base, const ConfigFlags& f, bool stage2) {
  try {
    TrainConfig c = f.preset.empty() ? base : preset_config(f.preset);
    if (!f.file.empty()) c = overlay_config(c, detail::read_json(f.file));
    Json patch = Json::object();
    if (f.iterations) patch[stage2 ? "stage2_iterations" : "iterations"] = *f.iterations;
    if (f.seed) patch["seed"] = *f.seed;
    if (f.no_rdf) patch["use_rdf"] = false;
    c = overlay_config(c, patch);
    c.validate();
    return c;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

class JsonLines {
 public:
  JsonLines(std::ostream& out, const fs::path& file, bool append)
      : out_(out), file_(file, append ? std::ios::app : std::ios::trunc) {
    if (!file_) fail(ErrorCode::IoError, "cannot write " + file.string());
  }
  void operator()(const Json& j) {
    const std::string line = j.dump();
    out_ << line << "\n" << std::flush;
    file_ << line << "\n" << std::flush;
  }

 private:
  std::ostream& out_;
  std::ofstream file_;
};

inline std::string numbered(const fs::path& dir, const std::string& stem, int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%06d.ckpt", iteration);
  return (dir / (stem + buf)).string();
}

inline void print_config(std::ostream& out, const fs::path& dir, const TrainConfig& c) {
  const Json j = {{"config", c}};
  out << j.dump() << "\n";
  std::ofstream(dir / "config.json") << Json(c).dump(2) << "\n";
}

struct Options {
  int threads = 0;

  std::string synth_kind = "oscillating-sphere";
  int synth_resolution = 64, synth_frames = 20, synth_test_every = 5;
  std::uint64_t synth_seed = 0;

  std::string data, out, background, resume, stage1, mesh, ckpt, cam, script, ui_dir, bind = "127.0.0.1";
  ConfigFlags cfg;
  std::optional<double> t;
  std::optional<int> width, height, resolution;
  std::optional<double> quantile;
  int port = 8080;
};

inline int synth(const Options& o, std::ostream& out) {
  SynthOptions so;
  so.kind = parse_synth_kind(o.synth_kind);
  so.resolution = o.synth_resolution;
  so.frames = o.synth_frames;
  so.seed = o.synth_seed;
  so.test_every = o.synth_test_every;
  const Dataset ds = synth_scene(so);
  save_dnerf_dataset(ds, o.out);
  out << Json{{"dataset", o.out},
              {"kind", o.synth_kind},
              {"train", ds.indices(Split::Train).size()},
              {"test", ds.indices(Split::Test).size()}}
             .dump()
      << "\n";
  return kOk;
}

inline int train_stage1(const Options& o, std::ostream& out) {
  if (!o.resume.empty() && o.cfg.any()) throw UsageError("--resume takes its config from the checkpoint");
  const TrainConfig cfg = o.resume.empty() ? build_config(TrainConfig{}, o.cfg, false) : TrainConfig{};
  const Dataset ds = load_data(o.data, o.background);
  fs::create_directories(o.out);
  std::optional<Stage1Trainer> t;
  if (o.resume.empty()) {
    t.emplace(ds, cfg);
  } else {
    t.emplace(Stage1Trainer::from_checkpoint(load_checkpoint(o.resume), ds));
  }
  print_config(out, o.out, t->config());
  JsonLines metrics(out, fs::path(o.out) / "metrics.jsonl", !o.resume.empty());
  t->run({std::ref(metrics), [&](const Checkpoint& ck) {
            save_checkpoint(ck, numbered(o.out, "stage1", ck.meta.at("iteration")));
          }});
  save_checkpoint(t->to_checkpoint(), (fs::path(o.out) / "stage1.ckpt").string());
  return kOk;
}

inline int extract(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Stage1Model m = read_stage1_model(ck);
  const TrainConfig c = ck.meta.at("config").get<TrainConfig>();
  const TriMesh mesh = extract_mesh(m.gaussians, o.resolution.value_or(c.mesh_resolution),
                                    o.quantile.value_or(c.mesh_quantile));
  if (fs::path(o.out).extension() == ".ply") {
    export_mesh_ply(mesh.rest, mesh.faces, o.out);
  } else {
    export_mesh_obj(mesh.rest, mesh.faces, o.out);
  }
  out << Json{{"mesh", o.out}, {"vertices", mesh.vertex_count()}, {"faces", mesh.face_count()}}.dump() << "\n";
  return kOk;
}

inline int train_stage2(const Options& o, std::ostream& out) {
  if (o.resume.empty() == o.stage1.empty()) throw UsageError("give exactly one of --stage1 and --resume");
  if (!o.resume.empty() && (o.cfg.any() || !o.mesh.empty())) {
    throw UsageError("--resume takes its config and mesh from the checkpoint");
  }
  std::optional<Checkpoint> s1;
  TrainConfig cfg;
  if (!o.stage1.empty()) {
    s1 = load_checkpoint(o.stage1);
    if (s1->stage != "stage1") fail(ErrorCode::CheckpointError, "--stage1 needs a stage1 checkpoint");
    cfg = build_config(s1->meta.at("config").get<TrainConfig>(), o.cfg, true);
  }
  const Dataset ds = load_data(o.data, o.background);
  fs::create_directories(o.out);
  std::optional<Stage2Trainer> t;
  if (s1) {
    const Stage1Model m = read_stage1_model(*s1);
    if (o.mesh.empty()) {
      t.emplace(ds, cfg, m);
    } else {
      t.emplace(ds, cfg, import_mesh_obj(o.mesh), m.df);
    }
  } else {
    t.emplace(Stage2Trainer::from_checkpoint(load_checkpoint(o.resume), ds));
  }
  print_config(out, o.out, t->config());
  const auto& mm = t->model().model;
  out << Json{{"mesh", {{"vertices", mm.mesh.vertex_count()}, {"faces", mm.mesh.face_count()}}},
              {"gaussians", mm.gaussians.size()},
              {"handles", t->model().handles.size()}}
             .dump()
      << "\n";
  JsonLines metrics(out, fs::path(o.out) / "metrics.jsonl", !o.resume.empty());
  t->run({std::ref(metrics), [&](const Checkpoint& ck) {
            save_checkpoint(ck, numbered(o.out, "stage2", ck.meta.at("iteration")));
          }});
  save_checkpoint(t->to_checkpoint(), (fs::path(o.out) / "stage2.ckpt").string());
  return kOk;
}

inline Camera pick_camera(const Camera& view, const Options& o) {
  const int w = o.width.value_or(view.width), h = o.height.value_or(view.height);
  if (w < 1 || h < 1) throw UsageError("--width and --height must be positive");
  try {
    return o.cam.empty() ? view.resized(w, h) : parse_camera_query(o.cam, view, w, h);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

// Stage I checkpoints render the field at t (default 0); Stage II ones the
// rest pose unless t is given.
inline int render(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Camera cam = pick_camera(checkpoint_view(ck), o);
  if (o.t && !(*o.t >= 0.0 && *o.t <= 1.0)) throw UsageError("--t must be in [0, 1]");
  Image img;
  if (ck.stage == "stage1") {
    const Stage1Model m = read_stage1_model(ck);
    img = rasterize(deform_at(m.gaussians, m.df, o.t.value_or(0.0)), cam, m.background).color;
  } else if (ck.stage == "stage2") {
    const Stage2Model m = read_stage2_model(ck);
    img = rasterize(o.t ? bake_at_time(m, *o.t) : bake_pose(m, m.model.mesh.rest), cam, m.background).color;
  } else {
    fail(ErrorCode::CheckpointError, "unknown checkpoint stage '" + ck.stage + "'");
  }
  save_png(img, o.out);
  out << Json{{"image", o.out}, {"width", cam.width}, {"height", cam.height}}.dump() << "\n";
  return kOk;
}

// Script: {"camera", "width", "height", "steps": [{"t"}, {"drags", "T"}]}.
// T may be a list, giving one frame per value.
inline int simulate(const Options& o, std::ostream& out) {
  const Json script = detail::read_json(o.script);
  const auto session = SimSession::load(o.ckpt);
  Options view_opts = o;
  if (o.cam.empty() && script.contains("camera")) view_opts.cam = script["camera"].get<std::string>();
  if (!o.width && script.contains("width")) view_opts.width = script["width"].get<int>();
  if (!o.height && script.contains("height")) view_opts.height = script["height"].get<int>();
  const Camera cam = pick_camera(session->default_view(), view_opts);
  fs::create_directories(o.out);
  int frame = 0;
  auto emit = [&](Json rec) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.png", frame++);
    const std::string path = (fs::path(o.out) / name).string();
    save_png(session->render(cam), path);
    rec["frame"] = path;
    out << rec.dump() << "\n";
  };
  const Json steps = script.value("steps", Json::array());
  if (!steps.is_array()) fail(ErrorCode::SchemaError, o.script + ": 'steps' must be a list");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const Json& s = steps[i];
    for (const auto& [key, _] : s.items()) {
      if (key != "t" && key != "drags" && key != "T") {
        fail(ErrorCode::SchemaError, o.script + ": step " + std::to_string(i) + " has unknown key '" + key + "'");
      }
    }
    if (s.contains("t")) session->set_time(s["t"].get<double>());
    if (!s.contains("drags")) {
      emit({{"step", i}, {"time", session->snapshot()->time}});
      continue;
    }
    std::vector<DragRequest> drags;
    for (const auto& d : s["drags"]) {
      const auto p = d.at("target").get<std::vector<double>>();
      if (p.size() != 3) fail(ErrorCode::SchemaError, o.script + ": drag target needs 3 numbers");
      drags.push_back({d.at("vertex").get<int>(), Vec3(p[0], p[1], p[2])});
    }
    const Json T = s.value("T", Json(1.0));
    for (const double v : T.is_array() ? T.get<std::vector<double>>() : std::vector<double>{T.get<double>()}) {
      const DragSummary sum = session->apply_drag(drags, v);
      emit({{"step", i},
            {"T", v},
            {"energy", sum.energy},
            {"iterations", sum.iterations},
            {"max_displacement", sum.max_displacement}});
    }
  }
  return kOk;
}

inline int serve(const Options& o, std::ostream& out) {
  SessionManager mgr;
  httplib::Server srv;
  register_routes(srv, mgr, o.ui_dir);
  if (!o.ckpt.empty()) out << Json{{"session", mgr.create(o.ckpt)}}.dump() << "\n";
  if (!srv.bind_to_port(o.bind, o.port)) fail(ErrorCode::IoError, "cannot bind " + o.bind + ":" + std::to_string(o.port));
  out << Json{{"listening", "http://" + o.bind + ":" + std::to_string(o.port)}}.dump() << "\n" << std::flush;
  if (!srv.listen_after_bind()) fail(ErrorCode::IoError, "server stopped unexpectedly");
  return kOk;
}

inline int check(std::ostream& out) {
  const auto results = gradcheck::run_all();
  for (const auto& r : results) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-20s max_rel_err %.3e  %s", r.module.c_str(), r.error,
                  r.error <= gradcheck::kTolerance ? "ok" : "FAIL");
    out << line << "\n";
  }
  const bool ok = gradcheck::all_pass(results);
  out << (ok ? "all modules within 1e-3\n" : "gradient check failed\n");
  return ok ? kOk : kRuntime;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Mesh-adsorbed Gaussian splatting: reconstruction and simulation", "mags"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--threads", o.threads, "worker threads, 0 = all cores, 1 = bitwise deterministic")
      ->check(CLI::NonNegativeNumber);

  auto config_flags = [&o](CLI::App* s) {
    s->add_option("--preset", o.cfg.preset, "paper or desk");
    s->add_option("--config", o.cfg.file, "JSON overlay on the config")->check(CLI::ExistingFile);
    s->add_option("--iterations", o.cfg.iterations, "training iterations")->check(CLI::NonNegativeNumber);
    s->add_option("--seed", o.cfg.seed, "RNG seed");
    s->add_option("--background", o.background, "r,g,b composited behind RGBA frames");
    s->add_option("--resume", o.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  };
  auto view_flags = [&o](CLI::App* s) {
    s->add_option("--cam", o.cam, "orbit camera az,el,dist[,tx,ty,tz] in degrees");
    s->add_option("--width", o.width, "image width");
    s->add_option("--height", o.height, "image height");
  };

  auto* sy = app.add_subcommand("synth", "write a synthetic dataset");
  sy->add_option("--kind", o.synth_kind, "static-sphere, oscillating-sphere or bending-bar")
      ->check(CLI::IsMember({"static-sphere", "oscillating-sphere", "bending-bar"}));
  sy->add_option("--resolution", o.synth_resolution, "image size")->check(CLI::PositiveNumber);
  sy->add_option("--frames", o.synth_frames, "frame count")->check(CLI::Range(2, 100000));
  sy->add_option("--seed", o.synth_seed, "RNG seed");
  sy->add_option("--test-every", o.synth_test_every, "hold out every n-th frame")->check(CLI::NonNegativeNumber);
  sy->add_option("--out", o.out, "output directory")->required();

  auto* s1 = app.add_subcommand("train-stage1", "fit Gaussians and the deformation field");
  s1->add_option("--data", o.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  s1->add_option("--out", o.out, "output directory")->required();
  config_flags(s1);

  auto* em = app.add_subcommand("extract-mesh", "mesh from a stage1 checkpoint");
  em->add_option("--ckpt", o.ckpt, "stage1 checkpoint")->required()->check(CLI::ExistingFile);
  em->add_option("--out", o.out, "mesh path (.obj or .ply)")->required();
  em->add_option("--resolution", o.resolution, "density grid resolution")->check(CLI::Range(2, 1024));
  em->add_option("--quantile", o.quantile, "iso level quantile")->check(CLI::Range(0.0, 1.0));

  auto* s2 = app.add_subcommand("train-stage2", "fit the mesh-adsorbed model");
  s2->add_option("--data", o.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  s2->add_option("--out", o.out, "output directory")->required();
  s2->add_option("--stage1", o.stage1, "stage1 checkpoint")->check(CLI::ExistingFile);
  s2->add_option("--mesh", o.mesh, "OBJ mesh instead of extracting one")->check(CLI::ExistingFile);
  s2->add_flag("--no-rdf", o.cfg.no_rdf, "disable the relative deformation field");
  config_flags(s2);

  auto* rd = app.add_subcommand("render", "render a checkpoint to PNG");
  rd->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  rd->add_option("--t", o.t, "time in [0, 1]");
  rd->add_option("--out", o.out, "PNG path")->required();
  view_flags(rd);

  auto* sm = app.add_subcommand("simulate", "apply a drag script, one PNG per step");
  sm->add_option("--ckpt", o.ckpt, "stage2 checkpoint")->required()->check(CLI::ExistingFile);
  sm->add_option("--script", o.script, "JSON drag script")->required()->check(CLI::ExistingFile);
  sm->add_option("--out", o.out, "output directory")->required();
  view_flags(sm);

  auto* sv = app.add_subcommand("serve", "start the simulation service");
  sv->add_option("--ui-dir", o.ui_dir, "static files served at /")->check(CLI::ExistingDirectory);
  sv->add_option("--bind", o.bind, "address");
  sv->add_option("--port", o.port, "port")->check(CLI::Range(0, 65535));
  sv->add_option("--ckpt", o.ckpt, "open a session at start")->check(CLI::ExistingFile);

  auto* ck = app.add_subcommand("check", "finite-difference gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  try {
    set_thread_count(o.threads);
    if (sy->parsed()) return synth(o, out);
    if (s1->parsed()) return train_stage1(o, out);
    if (em->parsed()) return extract(o, out);
    if (s2->parsed()) return train_stage2(o, out);
    if (rd->parsed()) return render(o, out);
    if (sm->parsed()) return simulate(o, out);
    if (sv->parsed()) return serve(o, out);
    if (ck->parsed()) return check(out);
  } catch (const UsageError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace mags::cli
