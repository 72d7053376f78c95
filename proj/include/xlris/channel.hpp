// SPDX-License-Identifier: Apache-2.0
//
// xlris - hybrid-field XL-RIS channel simulation and estimation
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#pragma once

#include <Eigen/Dense>
#include <array>
#include <complex>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "xlris/config.hpp"
#include "xlris/rng.hpp"

namespace xlris {

using cdouble = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

struct Cuboid {
  double x_lo = 0, x_hi = 0;
  double y_lo = 0, y_hi = 0;
  double z_lo = 0, z_hi = 0;

  bool empty() const { return !(x_lo <= x_hi && y_lo <= y_hi && z_lo <= z_hi); }
  // Largest distance from the origin to any point of the box.
  double farthest_distance() const;
};

// Geometry and path statistics. Lengths in meters, angles in radians.
struct ScenarioConfig {
  int n_bs = 8;
  int m1 = 16;
  int m2 = 4;
  double wavelength_m = 0.03;
  double spacing_m = 0.015;
  int l1 = 2;
  int l_far = 2;
  int l_near = 2;
  Cuboid nearfield_region{1.0, 2.0, -1.0, 1.0, -1.0, 0.5};
  double angle_lo = -std::numbers::pi / 3;
  double angle_hi = std::numbers::pi / 3;
  std::uint64_t seed = 1;

  int m() const { return m1 * m2; }
  int l2() const { return l_far + l_near; }
  // UPA diagonal.
  double aperture_m() const;
  double rayleigh_m() const;

  // Throws ConfigError on any inconsistency, including a scatterer region
  // that reaches beyond the Rayleigh distance.
  void validate() const;

  // Consumes keys it knows; returns false for unknown keys.
  bool set(const std::string& key, const std::string& value);
  // Applies every known key and throws on unknown ones unless allow_unknown.
  void apply(const KeyValues& kv, bool allow_unknown = false);
  std::string to_text() const;

  static ScenarioConfig desk();
  static ScenarioConfig full();
};

ScenarioConfig load_scenario(const std::string& path);

struct BsPath {
  cdouble gain;
  double aoa;       // psi at the BS
  double aod_elev;  // phi at the RIS
  double aod_azim;  // varphi at the RIS
};

enum class PathKind : std::uint8_t { far = 0, near = 1 };

struct UserPath {
  cdouble gain;
  PathKind kind;
  double elev = 0, azim = 0;        // far paths
  std::array<double, 3> xyz{};      // near paths: scatterer position
};

struct PathSet {
  std::vector<BsPath> bs_paths;
  std::vector<UserPath> user_paths;
};

struct CascadedChannel {
  CMat h_matrix;  // N x M
  CMat g_matrix;  // N x M
  CVec h_user;    // M
};

double rayleigh_distance(double aperture_m, double wavelength_m);

// Element k = exp(j*2*pi*(d/lambda)*sin(psi)*k)/sqrt(n).
CVec ula_steering(double psi, int n, double spacing_over_wavelength = 0.5);
CVec upa_vertical(double phi, int m1, double spacing_over_wavelength = 0.5);
CVec upa_horizontal(double phi, double varphi, int m2, double spacing_over_wavelength = 0.5);
// kron(vertical, horizontal): element index m1*M2 + m2.
CVec upa_far_steering(double phi, double varphi, int m1, int m2, double spacing_over_wavelength = 0.5);

// RIS element (m1, m2) sits at (0, (m2 - (M2-1)/2) d, (m1 - (M1-1)/2) d).
Eigen::Vector3d ris_element_position(int m1, int m2, const ScenarioConfig& config);
CVec near_steering(const std::array<double, 3>& xyz, const ScenarioConfig& config);
// Elevation/azimuth of a point seen from the RIS center, consistent with
// the far steering: z = r cos(phi), y = r sin(phi) cos(varphi), x = r sin(phi) sin(varphi).
std::pair<double, double> direction_angles(const std::array<double, 3>& xyz);

// RIS response of one user path, applying the Rayleigh-distance dispatch.
CVec user_path_response(const UserPath& path, const ScenarioConfig& config);

PathSet sample_paths(const ScenarioConfig& config, Rng& rng);
CascadedChannel assemble_channels(const PathSet& paths, const ScenarioConfig& config);
// A (diag(alpha) kron beta^T) (B_far^H khatri-rao B^T), evaluated literally.
CMat cascaded_factored(const PathSet& paths, const ScenarioConfig& config);

// Column-wise Khatri-Rao product: column m is kron(a.col(m), b.col(m)).
CMat khatri_rao(const CMat& a, const CMat& b);
CMat kron(const CMat& a, const CMat& b);

}  // namespace xlris
