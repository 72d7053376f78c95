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

#include "xlris/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "xlris/errors.hpp"

namespace xlris {

namespace {

constexpr double kPi = std::numbers::pi;

double grid_point(int i, int count) { return -1.0 + 2.0 * i / count; }

}  // namespace

CVec GridDictionary::atom(std::size_t k) const {
  const auto sb = static_cast<std::size_t>(bs_atoms.cols());
  const auto i = static_cast<Eigen::Index>(k % sb);
  const auto j = static_cast<Eigen::Index>(k / sb);
  CVec out(n() * m());
  for (Eigen::Index c = 0; c < m(); ++c) out.segment(c * n(), n()) = ris_atoms(c, j) * bs_atoms.col(i);
  return out;
}

CMat GridDictionary::dense() const { return kron(ris_atoms, bs_atoms); }

CVec GridDictionary::synthesize(const CMat& g) const {
  const CMat H = bs_atoms * g * ris_atoms.transpose();
  return vec(H);
}

GridSpec GridSpec::defaults_for(const ScenarioConfig& c) {
  return GridSpec{2 * c.n_bs, 2 * c.m1, 2 * c.m2, 4, 0.2};
}

GridDictionary build_grid_dictionary(const ScenarioConfig& c, const GridSpec& spec) {
  if (spec.bs_grid < 1 || spec.ris_grid_v < 1 || spec.ris_grid_h < 1 || spec.distance_rings < 0)
    throw ConfigError("build_grid_dictionary: grid sizes must be >= 1 (rings >= 0)");
  if (spec.distance_rings > 0 && !(spec.min_ring_fraction > 0 && spec.min_ring_fraction <= 1))
    throw ConfigError("build_grid_dictionary: min_ring_fraction must be in (0, 1]");
  GridDictionary d;
  const int N = c.n_bs, M = c.m();

  d.bs_atoms.resize(N, spec.bs_grid);
  for (int i = 0; i < spec.bs_grid; ++i) {
    const double u = grid_point(i, spec.bs_grid);
    for (int n = 0; n < N; ++n) d.bs_atoms(n, i) = std::polar(1.0 / std::sqrt(double(N)), kPi * u * n);
    d.bs_meta.push_back({u, 0.0, 0.0});
  }

  std::vector<double> inv_r{0.0};
  const double R = c.rayleigh_m();
  for (int k = 0; k < spec.distance_rings; ++k) {
    const double lo = 1.0 / R, hi = 1.0 / (spec.min_ring_fraction * R);
    inv_r.push_back(spec.distance_rings == 1 ? lo : lo + (hi - lo) * k / (spec.distance_rings - 1));
  }
  const double wavenumber = 2.0 * kPi / c.wavelength_m;
  const Eigen::Index S = static_cast<Eigen::Index>(inv_r.size()) * spec.ris_grid_v * spec.ris_grid_h;
  d.ris_atoms.resize(M, S);
  const double amp = 1.0 / std::sqrt(double(M));
  Eigen::Index col = 0;
  // Planar atoms first, then one tilted Fresnel curvature profile per ring.
  for (double ir : inv_r)
    for (int a = 0; a < spec.ris_grid_v; ++a)
      for (int b = 0; b < spec.ris_grid_h; ++b, ++col) {
        const double uv = grid_point(a, spec.ris_grid_v), uh = grid_point(b, spec.ris_grid_h);
        for (int m1 = 0; m1 < c.m1; ++m1)
          for (int m2 = 0; m2 < c.m2; ++m2) {
            const Eigen::Vector3d p = ris_element_position(m1, m2, c);
            const double phase = kPi * (uv * m1 + uh * m2) - wavenumber * p.squaredNorm() * ir / 2.0;
            d.ris_atoms(m1 * c.m2 + m2, col) = std::polar(amp, phase);
          }
        d.ris_meta.push_back({uv, uh, ir});
      }
  return d;
}

GridDictionary identity_dictionary(int n, int m) {
  GridDictionary d;
  d.bs_atoms = CMat::Identity(n, n);
  d.ris_atoms = CMat::Identity(m, m);
  d.bs_meta.assign(n, {});
  d.ris_meta.assign(m, {});
  return d;
}

SparseEstimate omp(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict, std::size_t max_atoms,
                   double residual_tol) {
  const Eigen::Index N = dict.n(), P = theta.cols();
  if (theta.rows() != dict.m()) throw DimensionError("omp: theta rows differ from dictionary RIS dimension");
  if (obs.y.size() != N * P) throw DimensionError("omp: observation length differs from N*P");
  if (max_atoms > dict.size()) throw ArgumentError("omp: max_atoms exceeds dictionary size");

  const CMat W = theta.transpose().cast<cdouble>() * dict.ris_atoms;  // P x S_ris
  const Eigen::VectorXd wnorm = W.colwise().norm().transpose();
  const CMat Wc = W.conjugate();
  const auto sb = dict.bs_atoms.cols();

  SparseEstimate est;
  std::vector<char> excluded(dict.size(), 0);
  CMat psi(N * P, 0);
  CVec coeffs;
  CVec residual = obs.y;
  const double stop = residual_tol * obs.y.norm();
  while (est.support.size() < max_atoms && residual.norm() > stop) {
    const CMat corr = dict.bs_atoms.adjoint() * unvec(residual, N) * Wc;  // S_bs x S_ris
    double best = 0.0;
    std::size_t pick = dict.size();
    for (Eigen::Index j = 0; j < corr.cols(); ++j) {
      if (wnorm[j] == 0.0) continue;
      for (Eigen::Index i = 0; i < sb; ++i) {
        const std::size_t k = static_cast<std::size_t>(j * sb + i);
        if (excluded[k]) continue;
        const double score = std::abs(corr(i, j)) / wnorm[j];
        if (score > best) {
          best = score;
          pick = k;
        }
      }
    }
    if (pick == dict.size()) break;
    excluded[pick] = 1;
    const Eigen::Index i = static_cast<Eigen::Index>(pick % sb), j = static_cast<Eigen::Index>(pick / sb);
    CMat candidate(N * P, psi.cols() + 1);
    candidate.leftCols(psi.cols()) = psi;
    for (Eigen::Index p = 0; p < P; ++p) candidate.col(psi.cols()).segment(p * N, N) = W(p, j) * dict.bs_atoms.col(i);
    Eigen::ColPivHouseholderQR<CMat> qr(candidate);
    if (qr.rank() < candidate.cols()) {
      est.dropped_atoms = true;
      continue;
    }
    psi = std::move(candidate);
    coeffs = qr.solve(obs.y);
    residual = obs.y - psi * coeffs;
    est.support.push_back(pick);
    est.history.push_back(residual.norm());
  }
  est.h_hat = CVec::Zero(N * dict.m());
  for (std::size_t s = 0; s < est.support.size(); ++s) {
    est.coeffs.push_back(coeffs[static_cast<Eigen::Index>(s)]);
    est.h_hat += coeffs[static_cast<Eigen::Index>(s)] * dict.atom(est.support[s]);
  }
  return est;
}

double ista_lipschitz(const PhaseMatrix& theta, const GridDictionary& dict) {
  // Phi D = (Theta^T C) kron A, so the spectral norm factors.
  const CMat W = theta.transpose().cast<cdouble>() * dict.ris_atoms;
  Eigen::SelfAdjointEigenSolver<CMat> ew(W * W.adjoint(), Eigen::EigenvaluesOnly);
  Eigen::SelfAdjointEigenSolver<CMat> ea(dict.bs_atoms.adjoint() * dict.bs_atoms, Eigen::EigenvaluesOnly);
  return ew.eigenvalues().maxCoeff() * ea.eigenvalues().maxCoeff();
}

namespace {

CMat ista_residual(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict, const CMat& g) {
  const CMat H = dict.bs_atoms * g * dict.ris_atoms.transpose();
  return unvec(obs.y, dict.n()) - H * theta.cast<cdouble>();
}

}  // namespace

double ista_objective(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict, const CMat& g,
                      double rho) {
  return 0.5 * ista_residual(obs, theta, dict, g).squaredNorm() + rho * g.cwiseAbs().sum();
}

SparseEstimate ista_solve(const Observation& obs, const PhaseMatrix& theta, const GridDictionary& dict, double rho,
                          double step, int iters, const CMat& init) {
  if (!(step > 0)) throw ArgumentError("ista_solve: step must be > 0");
  if (rho < 0) throw ArgumentError("ista_solve: rho must be >= 0");
  if (theta.rows() != dict.m() || obs.y.size() != dict.n() * theta.cols())
    throw DimensionError("ista_solve: observation, theta and dictionary sizes disagree");
  const Eigen::Index sb = dict.bs_atoms.cols(), sr = dict.ris_atoms.cols();
  CMat g = init.size() ? init : CMat::Zero(sb, sr);
  if (g.rows() != sb || g.cols() != sr) throw DimensionError("ista_solve: init grid has wrong shape");
  const CMat back = theta.transpose().cast<cdouble>() * dict.ris_atoms.conjugate();  // P x S_ris
  const CMat a_h = dict.bs_atoms.adjoint();
  const double tau = rho * step;

  SparseEstimate est;
  est.history.push_back(ista_objective(obs, theta, dict, g, rho));
  for (int it = 1; it <= iters; ++it) {
    const CMat r = ista_residual(obs, theta, dict, g);
    g += step * (a_h * r * back);
    if (!g.allFinite()) throw DivergenceError("ista_solve: non-finite iterate at iteration " + std::to_string(it));
    for (Eigen::Index k = 0; k < g.size(); ++k) {
      const double mag = std::abs(g.data()[k]);
      g.data()[k] = mag > tau ? g.data()[k] * ((mag - tau) / mag) : cdouble(0.0);
    }
    est.history.push_back(ista_objective(obs, theta, dict, g, rho));
  }
  for (Eigen::Index j = 0; j < sr; ++j)
    for (Eigen::Index i = 0; i < sb; ++i)
      if (g(i, j) != cdouble(0.0)) {
        est.support.push_back(static_cast<std::size_t>(j * sb + i));
        est.coeffs.push_back(g(i, j));
      }
  est.h_hat = dict.synthesize(g);
  return est;
}

OracleEstimate oracle_ls(const Observation& obs, const PhaseMatrix& theta, const PathSet& paths,
                         const ScenarioConfig& c) {
  const Eigen::Index N = c.n_bs, M = c.m(), P = theta.cols();
  if (theta.rows() != M || obs.y.size() != N * P) throw DimensionError("oracle_ls: sizes disagree with config");
  const double dl = c.spacing_m / c.wavelength_m;
  const auto l1 = paths.bs_paths.size(), l2 = paths.user_paths.size();
  OracleEstimate out;
  out.h_hat = CVec::Zero(N * M);
  if (l1 == 0 || l2 == 0) return out;

  std::vector<CVec> bs_side, ris_side;
  std::vector<CVec> user;
  for (const auto& u : paths.user_paths) user.push_back(user_path_response(u, c));
  for (const auto& b : paths.bs_paths) {
    const CVec a = ula_steering(b.aoa, c.n_bs, dl);
    const CVec far = upa_far_steering(b.aod_elev, b.aod_azim, c.m1, c.m2, dl).conjugate();
    for (const auto& u : user) {
      bs_side.push_back(a);
      ris_side.push_back(far.cwiseProduct(u));
    }
  }
  const auto cols = static_cast<Eigen::Index>(bs_side.size());
  CMat psi(N * P, cols);
  const CMat theta_t = theta.transpose().cast<cdouble>();
  for (Eigen::Index k = 0; k < cols; ++k) {
    const CVec w = theta_t * ris_side[k];
    for (Eigen::Index p = 0; p < P; ++p) psi.col(k).segment(p * N, N) = w[p] * bs_side[k];
  }
  Eigen::JacobiSVD<CMat> svd(psi);
  const auto& sv = svd.singularValues();
  out.condition_number = sv[sv.size() - 1] > 0 ? sv[0] / sv[sv.size() - 1] : std::numeric_limits<double>::infinity();
  const CVec g = Eigen::CompleteOrthogonalDecomposition<CMat>(psi).solve(obs.y);
  for (Eigen::Index k = 0; k < cols; ++k)
    for (Eigen::Index m = 0; m < M; ++m) out.h_hat.segment(m * N, N) += g[k] * ris_side[k][m] * bs_side[k];
  return out;
}

double nmse_ratio(const CVec& h_hat, const CVec& h) {
  if (h_hat.size() != h.size()) throw DimensionError("nmse: length mismatch");
  const double denom = h.squaredNorm();
  if (!(denom > 0)) throw ArgumentError("nmse: true channel is zero");
  return (h_hat - h).squaredNorm() / denom;
}

double to_db(double ratio) { return std::max(-300.0, 10.0 * std::log10(ratio)); }

double nmse_db(const CVec& h_hat, const CVec& h) { return to_db(nmse_ratio(h_hat, h)); }

double mean_nmse_db(const std::vector<double>& ratios) {
  if (ratios.empty()) throw ArgumentError("mean_nmse_db: no samples");
  double acc = 0.0;
  for (double r : ratios) acc += r;
  return to_db(acc / static_cast<double>(ratios.size()));
}

}  // namespace xlris
