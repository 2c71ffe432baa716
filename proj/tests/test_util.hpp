#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "mags/gradcheck.hpp"

namespace mags::testing {

using mags::central_differences;
using mags::max_relative_error;
using gradcheck::random_scene;

inline Camera test_camera(int w, int h, double distance = 3.0) {
  return Camera::look_at(Vec3(0.3, -0.4, -distance), Vec3::Zero(), Vec3(0, -1, 0), 0.8, w, h);
}

inline Vec3 sh_dc_for_color(const Vec3& color) { return (color - Vec3::Constant(0.5)) / sh::C0; }

}  // namespace mags::testing
