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

#include "xlris/channel.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>
#include <sstream>

#include "xlris/errors.hpp"

namespace xlris {

namespace {

constexpr double kPi = std::numbers::pi;

CVec phase_ramp(double rate, int n) {
  CVec v(n);
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  for (int k = 0; k < n; ++k) v[k] = std::polar(norm, rate * k);
  return v;
}

}  // namespace

double Cuboid::farthest_distance() const {
  const double x = std::max(std::abs(x_lo), std::abs(x_hi));
  const double y = std::max(std::abs(y_lo), std::abs(y_hi));
  const double z = std::max(std::abs(z_lo), std::abs(z_hi));
  return std::sqrt(x * x + y * y + z * z);
}

double ScenarioConfig::aperture_m() const {
  const double ly = m1 * spacing_m;
  const double lz = m2 * spacing_m;
  return std::sqrt(ly * ly + lz * lz);
}

double ScenarioConfig::rayleigh_m() const { return rayleigh_distance(aperture_m(), wavelength_m); }

void ScenarioConfig::validate() const {
  if (n_bs < 1 || m1 < 1 || m2 < 1) throw ConfigError("antenna counts n_bs, m1, m2 must be >= 1");
  if (!(wavelength_m > 0) || !(spacing_m > 0)) throw ConfigError("wavelength_m and spacing_m must be positive");
  if (l1 < 0 || l_far < 0 || l_near < 0) throw ConfigError("path counts must be >= 0");
  if (!(angle_lo <= angle_hi)) throw ConfigError("angle_lo must not exceed angle_hi");
  if (l_near > 0) {
    if (nearfield_region.empty()) throw ConfigError("near-field paths requested but nearfield_region is empty");
    const double far = nearfield_region.farthest_distance();
    if (far > rayleigh_m())
      throw ConfigError("nearfield_region reaches " + std::to_string(far) + " m, beyond the Rayleigh distance " +
                        std::to_string(rayleigh_m()) + " m");
  }
}

bool ScenarioConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&] { return static_cast<int>(parse_int(key, value)); };
  auto as_dbl = [&] { return parse_double(key, value); };
  if (key == "n_bs") n_bs = as_int();
  else if (key == "m1") m1 = as_int();
  else if (key == "m2") m2 = as_int();
  else if (key == "wavelength_m") wavelength_m = as_dbl();
  else if (key == "spacing_m") spacing_m = as_dbl();
  else if (key == "l1") l1 = as_int();
  else if (key == "l_far") l_far = as_int();
  else if (key == "l_near") l_near = as_int();
  else if (key == "nf_x_lo") nearfield_region.x_lo = as_dbl();
  else if (key == "nf_x_hi") nearfield_region.x_hi = as_dbl();
  else if (key == "nf_y_lo") nearfield_region.y_lo = as_dbl();
  else if (key == "nf_y_hi") nearfield_region.y_hi = as_dbl();
  else if (key == "nf_z_lo") nearfield_region.z_lo = as_dbl();
  else if (key == "nf_z_hi") nearfield_region.z_hi = as_dbl();
  else if (key == "angle_lo") angle_lo = as_dbl();
  else if (key == "angle_hi") angle_hi = as_dbl();
  else if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "scale") {
    if (value == "desk") *this = desk();
    else if (value == "full") *this = full();
    else throw ConfigError("key `scale`: expected desk or full, got `" + value + "`");
  } else
    return false;
  return true;
}

void ScenarioConfig::apply(const KeyValues& kv, bool allow_unknown) {
  // `scale` resets everything, so it goes first.
  if (auto it = kv.find("scale"); it != kv.end()) set(it->first, it->second);
  for (const auto& [k, v] : kv) {
    if (k == "scale") continue;
    if (!set(k, v) && !allow_unknown) throw ConfigError("unknown scenario key `" + k + "`");
  }
}

std::string ScenarioConfig::to_text() const {
  std::ostringstream o;
  o.precision(17);
  o << "n_bs = " << n_bs << "\nm1 = " << m1 << "\nm2 = " << m2 << "\nwavelength_m = " << wavelength_m
    << "\nspacing_m = " << spacing_m << "\nl1 = " << l1 << "\nl_far = " << l_far << "\nl_near = " << l_near
    << "\nnf_x_lo = " << nearfield_region.x_lo << "\nnf_x_hi = " << nearfield_region.x_hi
    << "\nnf_y_lo = " << nearfield_region.y_lo << "\nnf_y_hi = " << nearfield_region.y_hi
    << "\nnf_z_lo = " << nearfield_region.z_lo << "\nnf_z_hi = " << nearfield_region.z_hi
    << "\nangle_lo = " << angle_lo << "\nangle_hi = " << angle_hi << "\nseed = " << seed << "\n";
  return o.str();
}

ScenarioConfig ScenarioConfig::desk() { return ScenarioConfig{}; }

ScenarioConfig ScenarioConfig::full() {
  ScenarioConfig c;
  c.n_bs = 32;
  c.m1 = 64;
  c.m2 = 8;
  c.l1 = 3;
  c.l_far = 3;
  c.l_near = 3;
  c.nearfield_region = {3.0, 5.0, -15.0, 10.0, -10.5, 0.0};
  return c;
}

ScenarioConfig load_scenario(const std::string& path) {
  ScenarioConfig c;
  c.apply(read_key_values(path), true);
  c.validate();
  return c;
}

double rayleigh_distance(double aperture_m, double wavelength_m) {
  if (aperture_m < 0) throw ArgumentError("rayleigh_distance: aperture must be >= 0");
  if (!(wavelength_m > 0)) throw ArgumentError("rayleigh_distance: wavelength must be > 0");
  return 2.0 * aperture_m * aperture_m / wavelength_m;
}

CVec ula_steering(double psi, int n, double d_over_lambda) {
  if (n < 1) throw ArgumentError("ula_steering: n must be >= 1");
  return phase_ramp(2.0 * kPi * d_over_lambda * std::sin(psi), n);
}

CVec upa_vertical(double phi, int m1, double d_over_lambda) {
  if (m1 < 1) throw ArgumentError("upa_vertical: m1 must be >= 1");
  return phase_ramp(2.0 * kPi * d_over_lambda * std::cos(phi), m1);
}

CVec upa_horizontal(double phi, double varphi, int m2, double d_over_lambda) {
  if (m2 < 1) throw ArgumentError("upa_horizontal: m2 must be >= 1");
  return phase_ramp(2.0 * kPi * d_over_lambda * std::sin(phi) * std::cos(varphi), m2);
}

CVec upa_far_steering(double phi, double varphi, int m1, int m2, double d_over_lambda) {
  const CVec v = upa_vertical(phi, m1, d_over_lambda);
  const CVec h = upa_horizontal(phi, varphi, m2, d_over_lambda);
  CVec out(m1 * m2);
  for (int a = 0; a < m1; ++a) out.segment(a * m2, m2) = v[a] * h;
  return out;
}

Eigen::Vector3d ris_element_position(int m1, int m2, const ScenarioConfig& c) {
  return {0.0, (m2 - (c.m2 - 1) / 2.0) * c.spacing_m, (m1 - (c.m1 - 1) / 2.0) * c.spacing_m};
}

CVec near_steering(const std::array<double, 3>& xyz, const ScenarioConfig& c) {
  const Eigen::Vector3d s(xyz[0], xyz[1], xyz[2]);
  const int M = c.m();
  const double norm = 1.0 / std::sqrt(static_cast<double>(M));
  const double k = 2.0 * kPi / c.wavelength_m;
  CVec out(M);
  for (int a = 0; a < c.m1; ++a)
    for (int b = 0; b < c.m2; ++b) {
      const double r = (s - ris_element_position(a, b, c)).norm();
      out[a * c.m2 + b] = std::polar(norm, -k * r);
    }
  return out;
}

std::pair<double, double> direction_angles(const std::array<double, 3>& xyz) {
  const double r = std::sqrt(xyz[0] * xyz[0] + xyz[1] * xyz[1] + xyz[2] * xyz[2]);
  if (r == 0.0) return {0.0, 0.0};
  return {std::acos(std::clamp(xyz[2] / r, -1.0, 1.0)), std::atan2(xyz[0], xyz[1])};
}

CVec user_path_response(const UserPath& p, const ScenarioConfig& c) {
  const double dl = c.spacing_m / c.wavelength_m;
  if (p.kind == PathKind::far) return upa_far_steering(p.elev, p.azim, c.m1, c.m2, dl);
  const double r = std::sqrt(p.xyz[0] * p.xyz[0] + p.xyz[1] * p.xyz[1] + p.xyz[2] * p.xyz[2]);
  if (r > c.rayleigh_m()) {
    const auto [phi, varphi] = direction_angles(p.xyz);
    return upa_far_steering(phi, varphi, c.m1, c.m2, dl);
  }
  return near_steering(p.xyz, c);
}

PathSet sample_paths(const ScenarioConfig& c, Rng& rng) {
  c.validate();
  PathSet ps;
  ps.bs_paths.reserve(c.l1);
  for (int i = 0; i < c.l1; ++i) {
    BsPath p;
    p.gain = rng.complex_normal();
    p.aoa = rng.uniform(c.angle_lo, c.angle_hi);
    p.aod_elev = rng.uniform(c.angle_lo, c.angle_hi);
    p.aod_azim = rng.uniform(c.angle_lo, c.angle_hi);
    ps.bs_paths.push_back(p);
  }
  for (int j = 0; j < c.l_far; ++j) {
    UserPath p;
    p.gain = rng.complex_normal();
    p.kind = PathKind::far;
    p.elev = rng.uniform(c.angle_lo, c.angle_hi);
    p.azim = rng.uniform(c.angle_lo, c.angle_hi);
    ps.user_paths.push_back(p);
  }
  const Cuboid& box = c.nearfield_region;
  for (int j = 0; j < c.l_near; ++j) {
    UserPath p;
    p.gain = rng.complex_normal();
    p.kind = PathKind::near;
    p.xyz = {rng.uniform(box.x_lo, box.x_hi), rng.uniform(box.y_lo, box.y_hi), rng.uniform(box.z_lo, box.z_hi)};
    std::tie(p.elev, p.azim) = direction_angles(p.xyz);
    ps.user_paths.push_back(p);
  }
  return ps;
}

CascadedChannel assemble_channels(const PathSet& paths, const ScenarioConfig& c) {
  const double dl = c.spacing_m / c.wavelength_m;
  CascadedChannel ch;
  ch.g_matrix = CMat::Zero(c.n_bs, c.m());
  for (const auto& p : paths.bs_paths) {
    const CVec a = ula_steering(p.aoa, c.n_bs, dl);
    const CVec b = upa_far_steering(p.aod_elev, p.aod_azim, c.m1, c.m2, dl);
    ch.g_matrix.noalias() += p.gain * a * b.adjoint();
  }
  ch.h_user = CVec::Zero(c.m());
  for (const auto& p : paths.user_paths) ch.h_user += p.gain * user_path_response(p, c);
  ch.h_matrix = ch.g_matrix * ch.h_user.asDiagonal();
  return ch;
}

CMat kron(const CMat& a, const CMat& b) {
  CMat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

CMat khatri_rao(const CMat& a, const CMat& b) {
  if (a.cols() != b.cols()) throw DimensionError("khatri_rao: column counts differ");
  CMat out(a.rows() * b.rows(), a.cols());
  for (Eigen::Index m = 0; m < a.cols(); ++m)
    for (Eigen::Index i = 0; i < a.rows(); ++i) out.col(m).segment(i * b.rows(), b.rows()) = a(i, m) * b.col(m);
  return out;
}

CMat cascaded_factored(const PathSet& paths, const ScenarioConfig& c) {
  const double dl = c.spacing_m / c.wavelength_m;
  const auto l1 = static_cast<Eigen::Index>(paths.bs_paths.size());
  const auto l2 = static_cast<Eigen::Index>(paths.user_paths.size());
  CMat A(c.n_bs, l1), Bfar(c.m(), l1), B(c.m(), l2);
  CMat lambda_alpha = CMat::Zero(l1, l1);
  CMat beta_t(1, l2);
  for (Eigen::Index i = 0; i < l1; ++i) {
    const auto& p = paths.bs_paths[i];
    A.col(i) = ula_steering(p.aoa, c.n_bs, dl);
    Bfar.col(i) = upa_far_steering(p.aod_elev, p.aod_azim, c.m1, c.m2, dl);
    lambda_alpha(i, i) = p.gain;
  }
  for (Eigen::Index j = 0; j < l2; ++j) {
    B.col(j) = user_path_response(paths.user_paths[j], c);
    beta_t(0, j) = paths.user_paths[j].gain;
  }
  return A * kron(lambda_alpha, beta_t) * khatri_rao(Bfar.adjoint(), B.transpose());
}

}  // namespace xlris
