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
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "xlris/channel.hpp"

namespace xlris {

// Real M x P pilot phase matrix with entries +-1/sqrt(M).
using PhaseMatrix = Eigen::MatrixXd;

struct Observation {
  CVec y;  // vec(Y), length N*P
  double sigma2 = 0.0;
  double snr_db = 0.0;
};

struct CascadedSample {
  CascadedChannel channel;
  Observation obs;
  PhaseMatrix theta;
  PathSet paths;
};

inline constexpr double kNoiseless = std::numeric_limits<double>::infinity();

PhaseMatrix gen_phase_matrix(int m, int p, Rng& rng);

// vec(H Theta) for h_vec = vec(H), H of size n x M. Columns are stacked.
CVec apply_phi(const CVec& h_vec, const PhaseMatrix& theta, int n);
// vec(R Theta^H) for r_vec = vec(R), R of size n x P.
CVec apply_phi_adjoint(const CVec& r_vec, const PhaseMatrix& theta, int n);

inline CVec vec(const CMat& m) { return Eigen::Map<const CVec>(m.data(), m.size()); }
inline CMat unvec(const CVec& v, Eigen::Index rows) {
  return Eigen::Map<const CMat>(v.data(), rows, v.size() / rows);
}

// sigma^2 = ||H Theta||_F^2 / (N P 10^(snr/10)); snr_db = kNoiseless gives y = vec(H Theta).
// A zero channel falls back to unit reference power per entry.
Observation observe(const CascadedChannel& channel, const PhaseMatrix& theta, double snr_db, Rng& rng);

struct Dataset {
  ScenarioConfig config;  // geometry fields are authoritative, path counts informative
  int pilots = 0;
  std::uint64_t seed = 0;
  double snr_lo = 0.0;
  double snr_hi = 0.0;
  std::vector<CascadedSample> samples;
};

// Theta is drawn once from (seed, "theta"); sample i from (seed, "sample", i).
// Each sample's SNR is uniform in [snr_lo, snr_hi].
Dataset make_dataset(const ScenarioConfig& config, std::size_t count, double snr_lo, double snr_hi, int pilots,
                     std::uint64_t seed);
CascadedSample make_sample(const ScenarioConfig& config, const PhaseMatrix& theta, double snr_lo, double snr_hi,
                           std::uint64_t seed, std::uint64_t index);

void write_dataset(std::ostream& out, const Dataset& ds);
Dataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace xlris
