#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mags/scene_io.hpp"
#include "test_util.hpp"

namespace mags {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mags_scene_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

void write_one_frame_fixture(const fs::path& root, const std::string& matrix, double angle = 0.6911112) {
  fs::create_directories(root / "train");
  save_png(Image(8, 8, 4, 0.5), (root / "train" / "r_000.png").string());
  write_text(root / "transforms_train.json", "{\"camera_angle_x\": " + std::to_string(angle) +
                                                 ", \"frames\": [{\"file_path\": \"./train/r_000\", \"time\": 0.25,"
                                                 " \"transform_matrix\": " + matrix + "}]}");
}

const char* kIdentity = "[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]";

TEST(DnerfLoader, IdentityTransformFixture) {
  const auto root = scratch("identity");
  write_one_frame_fixture(root, kIdentity);
  const Dataset ds = load_dnerf_dataset(root.string());
  ASSERT_EQ(ds.frames.size(), 1u);
  const Camera& cam = ds.frames[0].camera;
  // Identity in the file's camera axes; ours flip y and z.
  const Mat3 flip = Vec3(1, -1, -1).asDiagonal();
  EXPECT_EQ(flip * cam.rotation, Mat3::Identity());
  EXPECT_EQ(cam.translation, Vec3::Zero());
  EXPECT_EQ(c2w_from_camera(cam), Eigen::Matrix4d::Identity());
  EXPECT_DOUBLE_EQ(ds.frames[0].time, 0.25);
  EXPECT_EQ(ds.frames[0].split, Split::Train);
}

TEST(DnerfLoader, FocalFromCameraAngle) {
  const Camera cam = camera_from_c2w(Eigen::Matrix4d::Identity(), 0.6911112, 800, 800);
  EXPECT_NEAR(cam.fx, 1111.11, 0.01);
  EXPECT_DOUBLE_EQ(cam.fx, 400.0 / std::tan(0.3455556));
}

TEST(DnerfLoader, Errors) {
  const auto root = scratch("errors");
  write_text(root / "transforms_train.json", "{\"camera_angle_x\": 0.5, \"frames\": [");
  try {
    load_dnerf_dataset(root.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
  }
  write_text(root / "transforms_train.json", "{\"frames\": []}");
  try {
    load_dnerf_dataset(root.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("camera_angle_x"), std::string::npos);
  }
  write_text(root / "transforms_train.json",
             std::string("{\"camera_angle_x\": 0.5, \"frames\": [{\"file_path\": \"./nope\", \"time\": 0,"
                         " \"transform_matrix\": ") + kIdentity + "}]}");
  try {
    load_dnerf_dataset(root.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingImage);
  }
  write_text(root / "transforms_train.json",
             std::string("{\"camera_angle_x\": 0.5, \"frames\": [{\"file_path\": \"./nope\","
                         " \"transform_matrix\": ") + kIdentity + "}]}");
  try {
    load_dnerf_dataset(root.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("time"), std::string::npos);
  }
}

TEST(DnerfLoader, RoundTripsSynthDataset) {
  SynthOptions opt;
  opt.resolution = 16;
  opt.frames = 5;
  const Dataset ds = synth_scene(opt);
  const auto root = scratch("roundtrip");
  save_dnerf_dataset(ds, root.string());
  DnerfOptions lo;
  lo.background = Vec3::Zero();
  const Dataset back = load_dnerf_dataset(root.string(), lo);
  ASSERT_EQ(back.frames.size(), ds.frames.size());
  EXPECT_EQ(back.indices(Split::Test).size(), ds.indices(Split::Test).size());
  EXPECT_EQ(back.meta, ds.meta);
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    // Frames come back grouped by split.
    const Frame& b = back.frames[i];
    const auto it = std::find_if(ds.frames.begin(), ds.frames.end(), [&](const Frame& f) { return f.time == b.time; });
    ASSERT_NE(it, ds.frames.end());
    EXPECT_LE((it->camera.rotation - b.camera.rotation).norm(), 1e-12);
    EXPECT_LE((it->camera.translation - b.camera.translation).norm(), 1e-12);
    EXPECT_NEAR(it->camera.fx, b.camera.fx, 1e-9);
    for (std::size_t k = 0; k < b.image.size(); ++k) EXPECT_NEAR(b.image.data[k], it->image.data[k], 0.01);
  }
}

TEST(GaussianPly, RoundTripWithinFloatPrecision) {
  std::mt19937_64 rng(1);
  for (int degree : {0, 1, 3}) {
    const auto gs = testing::random_scene(rng, 100, degree);
    const auto back = decode_gaussians_ply(encode_gaussians_ply(gs));
    ASSERT_EQ(back.size(), gs.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
      EXPECT_EQ(back[i].mu, gs[i].mu.cast<float>().cast<double>());
      EXPECT_EQ(back[i].log_scale, gs[i].log_scale.cast<float>().cast<double>());
      EXPECT_EQ(back[i].rot.w, static_cast<float>(gs[i].rot.w));
      EXPECT_EQ(back[i].rot.z, static_cast<float>(gs[i].rot.z));
      EXPECT_EQ(back[i].opacity_logit, static_cast<float>(gs[i].opacity_logit));
      ASSERT_EQ(back[i].sh.size(), gs[i].sh.size());
      for (std::size_t k = 0; k < gs[i].sh.size(); ++k) EXPECT_EQ(back[i].sh[k], gs[i].sh[k].cast<float>().cast<double>());
    }
    // Idempotent after the first pass.
    EXPECT_EQ(encode_gaussians_ply(back), encode_gaussians_ply(decode_gaussians_ply(encode_gaussians_ply(back))));
  }
}

TEST(GaussianPly, MissingPropertyIsNamed) {
  std::mt19937_64 rng(2);
  auto bytes = encode_gaussians_ply(testing::random_scene(rng, 3, 0));
  std::string text(bytes.begin(), bytes.end());
  const auto pos = text.find("property float rot_3\n");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, std::string("property float rot_3\n").size(), "property float zzzz_\n");
  try {
    decode_gaussians_ply({text.begin(), text.end()});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaError);
    EXPECT_NE(std::string(e.what()).find("rot_3"), std::string::npos);
  }
}

TEST(GaussianPly, EmptyList) {
  const auto bytes = encode_gaussians_ply({});
  const std::string text(bytes.begin(), bytes.end());
  EXPECT_NE(text.find("element vertex 0"), std::string::npos);
  EXPECT_TRUE(decode_gaussians_ply(bytes).empty());
}

TEST(MeshExport, ObjAndPly) {
  const auto root = scratch("mesh");
  const TriMesh m = make_icosphere(1);
  export_mesh_obj(m.rest, m.faces, (root / "m.obj").string());
  export_mesh_ply(m.rest, m.faces, (root / "m.ply").string());
  std::ifstream obj(root / "m.obj");
  int v = 0, f = 0;
  std::string line;
  while (std::getline(obj, line)) {
    v += line.rfind("v ", 0) == 0;
    f += line.rfind("f ", 0) == 0;
  }
  EXPECT_EQ(v, static_cast<int>(m.vertex_count()));
  EXPECT_EQ(f, static_cast<int>(m.face_count()));
  const auto bytes = read_file_bytes((root / "m.ply").string());
  const std::string head(bytes.begin(), bytes.begin() + 200);
  EXPECT_NE(head.find("element face " + std::to_string(m.face_count())), std::string::npos);

  const TriMesh back = import_mesh_obj((root / "m.obj").string());
  EXPECT_EQ(back.faces, m.faces);
  ASSERT_EQ(back.vertex_count(), m.vertex_count());
  for (std::size_t i = 0; i < m.vertex_count(); ++i) EXPECT_LE((back.rest[i] - m.rest[i]).norm(), 1e-8);
}

TEST(MeshImport, SlashIndicesNegativeIndicesAndErrors) {
  const auto root = scratch("objin");
  std::ofstream(root / "a.obj") << "# tri\nv 0 0 0\nv 1 0 0\nvt 0 0\nv 0 1 0\nf 1/1/1 2//1 -1\n";
  const TriMesh m = import_mesh_obj((root / "a.obj").string());
  EXPECT_EQ(m.faces, (std::vector<Face>{{0, 1, 2}}));
  std::ofstream(root / "quad.obj") << "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
  EXPECT_THROW(import_mesh_obj((root / "quad.obj").string()), Error);
  std::ofstream(root / "oob.obj") << "v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 9\n";
  EXPECT_THROW(import_mesh_obj((root / "oob.obj").string()), Error);
  EXPECT_THROW(import_mesh_obj((root / "missing.obj").string()), Error);
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.stage = "stage1";
  ck.meta = {{"iteration", 7}, {"rng", "1 2 3"}};
  ck.add("a", {2, 3}, {1, 2, 3, 4, 5, 6.5});
  ck.add("b", {0}, {});
  return ck;
}

TEST(Checkpoint, SaveLoadSaveIsByteStable) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.stage, "stage1");
  EXPECT_EQ(back.meta["iteration"], 7);
  EXPECT_EQ(back.values("a", 6), (std::vector<double>{1, 2, 3, 4, 5, 6.5}));
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "MAGSCKPT");
}

TEST(Checkpoint, Errors) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  auto truncated = bytes;
  truncated.pop_back();
  try {
    decode_checkpoint(truncated);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptBlob);
  }
  auto versioned = bytes;
  versioned[8] = 9;
  try {
    decode_checkpoint(versioned);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
  try {
    decode_checkpoint(bytes).values("a", 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptBlob);
  }
}

TEST(Checkpoint, GaussianBlobsRoundTrip) {
  std::mt19937_64 rng(5);
  const auto gs = testing::random_scene(rng, 7, 1);
  Checkpoint ck;
  add_gaussians(ck, "g", gs);
  const auto back = read_gaussians(decode_checkpoint(encode_checkpoint(ck)), "g");
  ASSERT_EQ(back.size(), gs.size());
  EXPECT_EQ(back[3].mu, gs[3].mu.cast<float>().cast<double>());
  EXPECT_EQ(back[6].sh[3], gs[6].sh[3].cast<float>().cast<double>());
}

TEST(SynthScene, StaticSphereIsStatic) {
  SynthOptions opt;
  opt.kind = SynthKind::StaticSphere;
  opt.resolution = 24;
  EXPECT_EQ(rasterize(synth_gaussians(opt.kind, 0, 0.0), synth_camera(opt, 3), Vec3::Zero()).color.data,
            rasterize(synth_gaussians(opt.kind, 0, 1.0), synth_camera(opt, 3), Vec3::Zero()).color.data);
}

TEST(SynthScene, OscillatingCenterFollowsDefinition) {
  SynthOptions opt;
  opt.resolution = 16;
  const Dataset ds = synth_scene(opt);
  const Vec3 rest_mean = [] {
    Vec3 m = Vec3::Zero();
    const auto g = synth_gaussians(SynthKind::OscillatingSphere, 0, 0.0);
    for (const auto& x : g) m += x.mu;
    return Vec3(m / g.size());
  }();
  for (const auto& rec : ds.meta["ground_truth"]) {
    const double t = rec["time"];
    const Vec3 c(rec["center"][0], rec["center"][1], rec["center"][2]);
    EXPECT_NEAR(c.x(), 0.3 * std::sin(2 * M_PI * t), 1e-15);
    EXPECT_EQ(c.y(), 0.0);
    Vec3 m = Vec3::Zero();
    const auto g = synth_gaussians(SynthKind::OscillatingSphere, 0, t);
    for (const auto& x : g) m += x.mu;
    EXPECT_LE((m / g.size() - rest_mean - c).norm(), 1e-12);
  }
  EXPECT_EQ(ds.frames.size(), 20u);
  EXPECT_EQ(ds.indices(Split::Test).size(), 4u);
}

TEST(SynthScene, DeterministicInSeed) {
  for (auto kind : {SynthKind::OscillatingSphere, SynthKind::BendingBar}) {
    SynthOptions opt;
    opt.kind = kind;
    opt.resolution = 16;
    opt.frames = 4;
    const Dataset a = synth_scene(opt), b = synth_scene(opt);
    opt.seed = 1;
    const Dataset c = synth_scene(opt);
    for (std::size_t i = 0; i < a.frames.size(); ++i) EXPECT_EQ(a.frames[i].image.data, b.frames[i].image.data);
    EXPECT_NE(a.frames[0].image.data, c.frames[0].image.data);
  }
}

TEST(SynthScene, BarBendsAboutFixedEnd) {
  const auto rest = synth_gaussians(SynthKind::BendingBar, 0, 0.0);
  const auto bent = synth_gaussians(SynthKind::BendingBar, 0, 0.5);
  double moved_near = 0, moved_far = 0;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const double d = (bent[i].mu - rest[i].mu).norm();
    if (rest[i].mu.x() < -0.5) moved_near = std::max(moved_near, d);
    if (rest[i].mu.x() > 0.5) moved_far = std::max(moved_far, d);
  }
  EXPECT_LT(moved_near, 0.02);
  EXPECT_GT(moved_far, 0.5);
}

}  // namespace
}  // namespace mags
