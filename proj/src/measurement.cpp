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

#include "xlris/measurement.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "xlris/binary_io.hpp"
#include "xlris/errors.hpp"

namespace xlris {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

void put_complex(std::ostream& out, const cdouble* data, Eigen::Index n) {
  binio::put_f64s(out, {reinterpret_cast<const double*>(data), static_cast<std::size_t>(2 * n)});
}

}  // namespace

PhaseMatrix gen_phase_matrix(int m, int p, Rng& rng) {
  if (m < 1 || p < 1) throw ArgumentError("gen_phase_matrix: m and p must be >= 1");
  const double a = 1.0 / std::sqrt(static_cast<double>(m));
  PhaseMatrix theta(m, p);
  for (int j = 0; j < p; ++j)
    for (int i = 0; i < m; ++i) theta(i, j) = a * rng.sign();
  return theta;
}

CVec apply_phi(const CVec& h_vec, const PhaseMatrix& theta, int n) {
  if (n < 1 || h_vec.size() != n * theta.rows())
    throw DimensionError("apply_phi: vector length " + std::to_string(h_vec.size()) + " != N*M = " +
                         std::to_string(n) + "*" + std::to_string(theta.rows()));
  Eigen::Map<const CMat> H(h_vec.data(), n, theta.rows());
  const CMat Y = H * theta.cast<cdouble>();
  return vec(Y);
}

CVec apply_phi_adjoint(const CVec& r_vec, const PhaseMatrix& theta, int n) {
  if (n < 1 || r_vec.size() != n * theta.cols())
    throw DimensionError("apply_phi_adjoint: vector length " + std::to_string(r_vec.size()) + " != N*P = " +
                         std::to_string(n) + "*" + std::to_string(theta.cols()));
  Eigen::Map<const CMat> R(r_vec.data(), n, theta.cols());
  const CMat X = R * theta.transpose().cast<cdouble>();
  return vec(X);
}

Observation observe(const CascadedChannel& channel, const PhaseMatrix& theta, double snr_db, Rng& rng) {
  const CMat clean = channel.h_matrix * theta.cast<cdouble>();
  Observation obs;
  obs.snr_db = snr_db;
  obs.y = vec(clean);
  if (std::isinf(snr_db) && snr_db > 0) return obs;
  const double entries = static_cast<double>(clean.size());
  double power = clean.squaredNorm() / entries;
  if (power == 0.0) power = 1.0;
  obs.sigma2 = power / std::pow(10.0, snr_db / 10.0);
  const double s = std::sqrt(obs.sigma2);
  for (Eigen::Index i = 0; i < obs.y.size(); ++i) obs.y[i] += s * rng.complex_normal();
  return obs;
}

CascadedSample make_sample(const ScenarioConfig& config, const PhaseMatrix& theta, double snr_lo, double snr_hi,
                           std::uint64_t seed, std::uint64_t index) {
  Rng rng = Rng::stream(seed, "sample", index);
  CascadedSample s;
  s.paths = sample_paths(config, rng);
  s.channel = assemble_channels(s.paths, config);
  s.theta = theta;
  const double snr = snr_lo == snr_hi ? snr_lo : rng.uniform(snr_lo, snr_hi);
  s.obs = observe(s.channel, theta, snr, rng);
  return s;
}

Dataset make_dataset(const ScenarioConfig& config, std::size_t count, double snr_lo, double snr_hi, int pilots,
                     std::uint64_t seed) {
  if (count < 1) throw ArgumentError("make_dataset: count must be >= 1");
  if (!(snr_lo <= snr_hi)) throw ArgumentError("make_dataset: snr_lo must not exceed snr_hi");
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.pilots = pilots;
  ds.seed = seed;
  ds.snr_lo = snr_lo;
  ds.snr_hi = snr_hi;
  Rng theta_rng = Rng::stream(seed, "theta");
  const PhaseMatrix theta = gen_phase_matrix(config.m(), pilots, theta_rng);
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(make_sample(config, theta, snr_lo, snr_hi, seed, i));
  return ds;
}

void write_dataset(std::ostream& out, const Dataset& ds) {
  using namespace binio;
  const auto& c = ds.config;
  put_magic(out, "XRCD");
  put<std::uint32_t>(out, kDatasetVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.n_bs));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.m1));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.m2));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.pilots));
  put<std::uint64_t>(out, ds.samples.size());
  put<std::uint64_t>(out, ds.seed);
  put<double>(out, ds.snr_lo);
  put<double>(out, ds.snr_hi);
  put<double>(out, c.spacing_m);
  put<double>(out, c.wavelength_m);
  for (const auto& s : ds.samples) {
    put_complex(out, s.channel.h_matrix.data(), s.channel.h_matrix.size());
    put_f64s(out, {s.theta.data(), static_cast<std::size_t>(s.theta.size())});
    put_complex(out, s.obs.y.data(), s.obs.y.size());
    put<double>(out, s.obs.sigma2);
    put<double>(out, s.obs.snr_db);
    put_complex(out, s.channel.g_matrix.data(), s.channel.g_matrix.size());
    put_complex(out, s.channel.h_user.data(), s.channel.h_user.size());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.paths.bs_paths.size()));
    for (const auto& p : s.paths.bs_paths) {
      const double v[5] = {p.gain.real(), p.gain.imag(), p.aoa, p.aod_elev, p.aod_azim};
      put_f64s(out, v);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.paths.user_paths.size()));
    for (const auto& p : s.paths.user_paths) {
      put<std::uint8_t>(out, static_cast<std::uint8_t>(p.kind));
      const double v[7] = {p.gain.real(), p.gain.imag(), p.elev, p.azim, p.xyz[0], p.xyz[1], p.xyz[2]};
      put_f64s(out, v);
    }
  }
}

Dataset read_dataset(std::istream& in) {
  using namespace binio;
  expect_magic(in, "XRCD");
  const auto version = get<std::uint32_t>(in);
  if (version != kDatasetVersion) throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  auto& c = ds.config;
  c.n_bs = static_cast<int>(get<std::uint32_t>(in));
  c.m1 = static_cast<int>(get<std::uint32_t>(in));
  c.m2 = static_cast<int>(get<std::uint32_t>(in));
  ds.pilots = static_cast<int>(get<std::uint32_t>(in));
  const auto count = get<std::uint64_t>(in);
  ds.seed = get<std::uint64_t>(in);
  ds.snr_lo = get<double>(in);
  ds.snr_hi = get<double>(in);
  c.spacing_m = get<double>(in);
  c.wavelength_m = get<double>(in);
  c.seed = ds.seed;
  const Eigen::Index N = c.n_bs, M = c.m(), P = ds.pilots;
  if (N < 1 || M < 1 || P < 1 || count > (1ull << 32)) throw std::runtime_error("corrupt dataset header");
  ds.samples.resize(count);
  for (auto& s : ds.samples) {
    s.channel.h_matrix.resize(N, M);
    get_f64s(in, {reinterpret_cast<double*>(s.channel.h_matrix.data()), static_cast<std::size_t>(2 * N * M)});
    s.theta.resize(M, P);
    get_f64s(in, {s.theta.data(), static_cast<std::size_t>(M * P)});
    s.obs.y.resize(N * P);
    get_f64s(in, {reinterpret_cast<double*>(s.obs.y.data()), static_cast<std::size_t>(2 * N * P)});
    s.obs.sigma2 = get<double>(in);
    s.obs.snr_db = get<double>(in);
    s.channel.g_matrix.resize(N, M);
    get_f64s(in, {reinterpret_cast<double*>(s.channel.g_matrix.data()), static_cast<std::size_t>(2 * N * M)});
    s.channel.h_user.resize(M);
    get_f64s(in, {reinterpret_cast<double*>(s.channel.h_user.data()), static_cast<std::size_t>(2 * M)});
    const auto l1 = get<std::uint32_t>(in);
    if (l1 > 4096) throw std::runtime_error("corrupt path block");
    s.paths.bs_paths.resize(l1);
    for (auto& p : s.paths.bs_paths) {
      double v[5];
      get_f64s(in, v);
      p = {{v[0], v[1]}, v[2], v[3], v[4]};
    }
    const auto l2 = get<std::uint32_t>(in);
    if (l2 > 4096) throw std::runtime_error("corrupt path block");
    s.paths.user_paths.resize(l2);
    int far = 0, near = 0;
    for (auto& p : s.paths.user_paths) {
      const auto kind = get<std::uint8_t>(in);
      if (kind > 1) throw std::runtime_error("corrupt path kind");
      double v[7];
      get_f64s(in, v);
      p.kind = static_cast<PathKind>(kind);
      p.gain = {v[0], v[1]};
      p.elev = v[2];
      p.azim = v[3];
      p.xyz = {v[4], v[5], v[6]};
      (p.kind == PathKind::far ? far : near)++;
    }
    c.l1 = static_cast<int>(l1);
    c.l_far = far;
    c.l_near = near;
  }
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open dataset for writing");
  write_dataset(out, ds);
  out.flush();
  if (!out) throw IoError(path, "write failed");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open dataset");
  try {
    return read_dataset(in);
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(path, e.what());
  }
}

}  // namespace xlris
