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

#include <cstddef>
#include <vector>

#include "xlris/channel.hpp"
#include "xlris/measurement.hpp"

namespace xlris {

// Spatial-frequency description of one side of a Kronecker atom. For BS
// atoms only `u_v` is used (sin of the angle). For RIS atoms `u_v`, `u_h`
// are the vertical/horizontal phase rates in units of pi at half-wavelength
// spacing and `inv_distance` is 1/r of the curvature ring (0 = planar).
struct AtomMeta {
  double u_v = 0.0;
  double u_h = 0.0;
  double inv_distance = 0.0;
};

// Atoms are kron(ris_atoms.col(j), bs_atoms.col(i)) with index k = j*S_bs + i,
// i.e. vec(a_i c_j^T) under the column-major convention.
struct GridDictionary {
  CMat bs_atoms;   // N x S_bs
  CMat ris_atoms;  // M x S_ris
  std::vector<AtomMeta> bs_meta;
  std::vector<AtomMeta> ris_meta;

  Eigen::Index n() const { return bs_atoms.rows(); }
  Eigen::Index m() const { return ris_atoms.rows(); }
  std::size_t size() const { return static_cast<std::size_t>(bs_atoms.cols() * ris_atoms.cols()); }
  CVec atom(std::size_t k) const;
  CMat dense() const;
  // vec(A G C^T) with G the S_bs x S_ris coefficient grid.
  CVec synthesize(const CMat& coeff_grid) const;
};

struct GridSpec {
  int bs_grid = 0;
  int ris_grid_v = 0;
  int ris_grid_h = 0;
  int distance_rings = 0;
  // Innermost ring as a fraction of the Rayleigh distance; rings are uniform in 1/r.
  double min_ring_fraction = 0.2;

  static GridSpec defaults_for(const ScenarioConfig& config);
};

GridDictionary build_grid_dictionary(const ScenarioConfig& config, const GridSpec& spec);
// A = I_N, C = I_M: coefficients are the channel entries themselves.
GridDictionary identity_dictionary(int n, int m);

struct SparseEstimate {
  std::vector<std::size_t> support;
  std::vector<cdouble> coeffs;
  CVec h_hat;
  bool dropped_atoms = false;
  // OMP: residual norm after each selection. ISTA: objective, starting at the initial point.
  std::vector<double> history;
};

SparseEstimate omp(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict, std::size_t max_atoms,
                   double residual_tol = 1e-3);

// Largest eigenvalue of (Phi D)^H (Phi D).
double ista_lipschitz(const PhaseMatrix& theta, const GridDictionary& dict);
double ista_objective(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict,
                      const CMat& coeff_grid, double rho);
// g <- soft(g + step D^H Phi^H (y - Phi D g), rho*step), starting from zero
// (or `init` when non-empty). Complex soft-thresholding on magnitudes.
SparseEstimate ista_solve(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict, double rho,
                          double step, int iters, const CMat& init = CMat());

struct OracleEstimate {
  CVec h_hat;
  double condition_number = 0.0;
};
OracleEstimate oracle_ls(const Observation& obs, const PhaseMatrix& theta, const PathSet& paths,
                         const ScenarioConfig& config);

double nmse_ratio(const CVec& h_hat, const CVec& h);
double to_db(double ratio);  // clamped at -300 dB
double nmse_db(const CVec& h_hat, const CVec& h);
double mean_nmse_db(const std::vector<double>& ratios);

}  // namespace xlris
