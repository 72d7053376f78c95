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

#include "xlris/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/SVD>

#include "xlris/errors.hpp"

namespace xlris::eval {

namespace {

constexpr Method kAllMethods[] = {Method::omp, Method::ista, Method::ols, Method::cista, Method::cista_plus,
                                  Method::cnncdl};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::string format_value(double v) {
  std::ostringstream o;
  o.precision(12);
  o << v;
  return o.str();
}

std::string substitute(std::string path, double value) {
  const std::string key = "{value}";
  for (auto pos = path.find(key); pos != std::string::npos; pos = path.find(key))
    path.replace(pos, key.size(), format_value(value));
  return path;
}

std::string sweep_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::nmse_vs_snr: return "snr_db";
    case ExperimentKind::nmse_vs_pilots: return "pilots";
    case ExperimentKind::multipath_sweep: return "far_paths";
    case ExperimentKind::layer_sweep: return "layer";
    case ExperimentKind::spectral_efficiency: return "power_db";
  }
  return "";
}

struct Stats {
  std::vector<double> values;  // NMSE ratios or SE samples
};

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

ResultRow nmse_row(const std::string& method, ExperimentKind kind, double value, const std::vector<double>& ratios) {
  std::vector<double> dbs;
  for (double r : ratios) dbs.push_back(to_db(r));
  return {method, sweep_name(kind), value, "nmse_db", mean_nmse_db(ratios), std_of(dbs), int(ratios.size())};
}

// One evaluation point: the scenario, pilot count and SNR the trials use.
struct Point {
  double value = 0.0;
  ScenarioConfig scenario;
  int pilots = 0;
  double snr_db = 0.0;
  int layer = 0;  // layer sweep only
};

Point make_point(const ExperimentSpec& spec, double value) {
  Point p;
  p.value = value;
  p.scenario = spec.scenario;
  p.pilots = spec.pilots;
  p.snr_db = spec.snr_db;
  switch (spec.kind) {
    case ExperimentKind::nmse_vs_snr: p.snr_db = value; break;
    case ExperimentKind::nmse_vs_pilots: p.pilots = static_cast<int>(value); break;
    case ExperimentKind::multipath_sweep:
      p.scenario.l_far = static_cast<int>(value);
      p.scenario.l_near = spec.multipath_total - p.scenario.l_far;
      break;
    case ExperimentKind::layer_sweep: p.layer = static_cast<int>(value); break;
    case ExperimentKind::spectral_efficiency: break;
  }
  if (spec.noiseless) p.snr_db = kNoiseless;
  p.scenario.validate();
  return p;
}

class NetworkCache {
 public:
  const nets::Network& get(const std::string& path) {
    auto it = nets_.find(path);
    if (it == nets_.end()) it = nets_.emplace(path, std::make_unique<nets::Network>(nets::load_network(path))).first;
    return *it->second;
  }

 private:
  std::map<std::string, std::unique_ptr<nets::Network>> nets_;
};

}  // namespace

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::nmse_vs_snr: return "nmse_vs_snr";
    case ExperimentKind::nmse_vs_pilots: return "nmse_vs_pilots";
    case ExperimentKind::multipath_sweep: return "multipath_sweep";
    case ExperimentKind::layer_sweep: return "layer_sweep";
    case ExperimentKind::spectral_efficiency: return "spectral_efficiency";
  }
  return "?";
}

std::string to_string(Method m) {
  switch (m) {
    case Method::omp: return "omp";
    case Method::ista: return "ista";
    case Method::ols: return "ols";
    case Method::cista: return "cista";
    case Method::cista_plus: return "cista_plus";
    case Method::cnncdl: return "cnncdl";
  }
  return "?";
}

ExperimentKind parse_experiment(const std::string& name) {
  for (auto k : {ExperimentKind::nmse_vs_snr, ExperimentKind::nmse_vs_pilots, ExperimentKind::multipath_sweep,
                 ExperimentKind::layer_sweep, ExperimentKind::spectral_efficiency})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown experiment `" + name + "`");
}

Method parse_method(const std::string& name) {
  for (auto m : kAllMethods)
    if (to_string(m) == name) return m;
  throw ConfigError("unknown method `" + name + "` (expected omp, ista, ols, cista, cista_plus or cnncdl)");
}

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(parse_method(trim(item)));
  return out;
}

bool is_learned(Method m) { return m == Method::cista || m == Method::cista_plus || m == Method::cnncdl; }

static nets::ModelKind model_kind(Method m) {
  switch (m) {
    case Method::cista: return nets::ModelKind::cista;
    case Method::cista_plus: return nets::ModelKind::cista_plus;
    default: return nets::ModelKind::cnncdl;
  }
}

void ExperimentSpec::validate() const {
  if (methods.empty()) throw ConfigError("experiment: method list is empty");
  if (sweep.empty()) throw ConfigError("experiment: sweep values are empty");
  if (trials < 1) throw ConfigError("experiment: trials must be >= 1");
  if (omp_atoms < 1 || ista_iters < 1 || se_iters < 1) throw ConfigError("experiment: solver budgets must be >= 1");
  if (!(se_sigma2 > 0)) throw ConfigError("experiment: se_sigma2 must be > 0");
  std::vector<std::string> missing;
  for (Method m : methods)
    if (is_learned(m) && (!checkpoints.count(m) || checkpoints.at(m).empty())) missing.push_back(to_string(m));
  if (!missing.empty()) {
    std::string list;
    for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
    throw ArgumentError("experiment: no checkpoint given for " + list);
  }
  for (double v : sweep) {
    switch (kind) {
      case ExperimentKind::nmse_vs_pilots:
        if (v < 1 || v != std::floor(v)) throw ConfigError("experiment: pilot counts must be positive integers");
        break;
      case ExperimentKind::multipath_sweep:
        if (v < 0 || v > multipath_total || v != std::floor(v))
          throw ConfigError("experiment: far-path counts must be integers in [0, multipath_total]");
        break;
      case ExperimentKind::layer_sweep:
        if (v < 1 || v != std::floor(v)) throw ConfigError("experiment: layer indices must be positive integers");
        break;
      default: break;
    }
  }
}

bool ExperimentSpec::set(const std::string& key, const std::string& value) {
  auto as_int = [&] { return static_cast<int>(parse_int(key, value)); };
  if (key == "experiment") kind = parse_experiment(value);
  else if (key == "methods") methods = parse_methods(value);
  else if (key == "sweep") sweep = parse_double_list(key, value);
  else if (key == "trials") trials = as_int();
  else if (key == "eval_seed") eval_seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "pilots") pilots = as_int();
  else if (key == "snr_db") snr_db = parse_double(key, value);
  else if (key == "noiseless") noiseless = parse_bool(key, value);
  else if (key == "output") output = value;
  else if (key == "ckpt_cista") checkpoints[Method::cista] = value;
  else if (key == "ckpt_cista_plus") checkpoints[Method::cista_plus] = value;
  else if (key == "ckpt_cnncdl") checkpoints[Method::cnncdl] = value;
  else if (key == "omp_atoms") omp_atoms = as_int();
  else if (key == "ista_rho") ista_rho = parse_double(key, value);
  else if (key == "ista_iters") ista_iters = as_int();
  else if (key == "multipath_total") multipath_total = as_int();
  else if (key == "se_sigma2") se_sigma2 = parse_double(key, value);
  else if (key == "se_iters") se_iters = as_int();
  else return false;
  return true;
}

void ExperimentSpec::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv)
    if (!set(k, v) && !scenario.set(k, v)) throw ConfigError("unknown experiment key `" + k + "`");
}

const ResultRow* ExperimentResult::find(const std::string& method, double sweep_value) const {
  for (const auto& r : rows)
    if (r.method == method && r.sweep_value == sweep_value) return &r;
  return nullptr;
}

// ---------------------------------------------------------------- estimators

Estimators::Estimators(const ExperimentSpec& spec, const ScenarioConfig& scenario, const PhaseMatrix& theta)
    : spec_(spec), theta_(theta), n_(scenario.n_bs),
      dict_(build_grid_dictionary(scenario, GridSpec::defaults_for(scenario))) {
  ista_step_ = 1.0 / ista_lipschitz(theta_, dict_);
}

void Estimators::attach(Method method, const nets::Network* net) { nets_[method] = net; }

const nets::Network* Estimators::network(Method method) const {
  auto it = nets_.find(method);
  return it == nets_.end() ? nullptr : it->second;
}

CVec Estimators::ista(const Observation& obs, int iters) const {
  // Threshold scaled to the largest correlation of the back-projected observation.
  const CMat back = theta_.transpose().cast<cdouble>() * dict_.ris_atoms.conjugate();
  const CMat corr = dict_.bs_atoms.adjoint() * unvec(obs.y, n_) * back;
  const double rho = spec_.ista_rho * corr.cwiseAbs().maxCoeff();
  return ista_solve(obs, theta_, dict_, rho, ista_step_, iters).h_hat;
}

CVec Estimators::estimate(Method method, const CascadedSample& s, const ScenarioConfig& scenario) const {
  switch (method) {
    case Method::omp: {
      // Stop once the residual reaches the noise floor, or at the atom budget.
      const double noise = std::sqrt(s.obs.sigma2 * static_cast<double>(s.obs.y.size()));
      const double tol = s.obs.sigma2 > 0 ? noise / s.obs.y.norm() : 1e-9;
      return omp(s.obs, theta_, dict_, static_cast<std::size_t>(spec_.omp_atoms), tol).h_hat;
    }
    case Method::ista: return ista(s.obs, spec_.ista_iters);
    case Method::ols: return oracle_ls(s.obs, theta_, s.paths, scenario).h_hat;
    default: {
      const nets::Network* net = network(method);
      if (!net) throw ArgumentError("estimate: no network attached for " + to_string(method));
      Tape tape(false);
      const auto out = net->forward(tape, nets::observation_to_image(s.obs.y, n_));
      return vec(nets::image_to_channel(out.h_hat));
    }
  }
}

// ---------------------------------------------------------------- spectral efficiency

BeamDesign matched_design(const CMat& h, int iters) {
  const Eigen::Index N = h.rows(), M = h.cols();
  BeamDesign d;
  d.theta = CVec::Ones(M);
  d.f = CVec::Zero(N);
  if (h.norm() == 0.0) {
    d.f[0] = 1.0;
    return d;
  }
  Eigen::JacobiSVD<CMat> svd(h, Eigen::ComputeThinU);
  d.f = svd.matrixU().col(0);
  for (int it = 0; it < iters; ++it) {
    const CVec row = h.adjoint() * d.f;  // conj of (f^H H)
    for (Eigen::Index m = 0; m < M; ++m) d.theta[m] = std::polar(1.0, std::arg(row[m]));
    const CVec eff = h * d.theta;
    if (eff.norm() == 0.0) break;
    d.f = eff / eff.norm();
  }
  return d;
}

double spectral_efficiency(const CMat& truth, const BeamDesign& d, double power_w, double sigma2) {
  if (!(sigma2 > 0)) throw ArgumentError("spectral_efficiency: noise power must be > 0");
  if (!(power_w >= 0)) throw ArgumentError("spectral_efficiency: transmit power must be >= 0");
  const cdouble g = d.f.dot(truth * d.theta);  // f^H H theta
  return std::log2(1.0 + power_w / sigma2 * std::norm(g));
}

double spectral_efficiency(const CMat& truth, const CMat& design, double power_w, double sigma2, int iters) {
  return spectral_efficiency(truth, matched_design(design, iters), power_w, sigma2);
}

// ---------------------------------------------------------------- experiments

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  NetworkCache cache;
  for (Method m : spec.methods)
    if (is_learned(m))
      for (double v : spec.sweep) {
        const std::string path = substitute(spec.checkpoints.at(m), v);
        if (!std::filesystem::exists(path))
          throw ArgumentError("experiment: checkpoint for " + to_string(m) + " not found: " + path);
      }

  const std::uint64_t sample_seed = Rng::derive(spec.eval_seed, "evaluation");
  ExperimentResult result;

  auto prepare = [&](const Point& p) {
    // Learned methods fix the pilot matrix; otherwise draw one from the evaluation seed.
    std::optional<PhaseMatrix> theta;
    std::vector<std::pair<Method, const nets::Network*>> attached;
    for (Method m : spec.methods) {
      if (!is_learned(m)) continue;
      const std::string path = substitute(spec.checkpoints.at(m), p.value);
      const nets::Network& net = cache.get(path);
      const auto& c = net.config();
      if (net.kind() != model_kind(m))
        throw ArgumentError("experiment: " + path + " holds a " + nets::to_string(net.kind()) + " model, not " +
                            to_string(m));
      if (c.n != p.scenario.n_bs || c.m != p.scenario.m() || c.pilots != p.pilots)
        throw ArgumentError("experiment: " + path + " was built for N=" + std::to_string(c.n) +
                            ", M=" + std::to_string(c.m) + ", P=" + std::to_string(c.pilots) +
                            ", which differs from the evaluation geometry");
      const PhaseMatrix t = net.theta_matrix();
      if (theta && (*theta - t).cwiseAbs().maxCoeff() != 0.0)
        throw ArgumentError("experiment: learned methods were trained with different pilot matrices");
      theta = t;
      attached.emplace_back(m, &net);
    }
    if (!theta) {
      Rng rng = Rng::stream(spec.eval_seed, "theta", static_cast<std::uint64_t>(p.pilots));
      theta = gen_phase_matrix(p.scenario.m(), p.pilots, rng);
    }
    auto est = std::make_unique<Estimators>(spec, p.scenario, *theta);
    for (auto [m, net] : attached) est->attach(m, net);
    return std::make_pair(std::move(est), *theta);
  };

  if (spec.kind == ExperimentKind::spectral_efficiency) {
    const Point p = make_point(spec, spec.sweep.front());
    auto [est, theta] = prepare(p);
    std::map<std::string, std::vector<std::vector<double>>> se;  // label -> per power -> trials
    std::vector<std::string> labels{"perfect"};
    for (Method m : spec.methods) labels.push_back(to_string(m));
    for (const auto& l : labels) se[l].assign(spec.sweep.size(), {});
    for (int t = 0; t < spec.trials; ++t) {
      const auto s = make_sample(p.scenario, theta, p.snr_db, p.snr_db, sample_seed, static_cast<std::uint64_t>(t));
      std::vector<std::pair<std::string, BeamDesign>> designs;
      designs.emplace_back("perfect", matched_design(s.channel.h_matrix, spec.se_iters));
      for (Method m : spec.methods)
        designs.emplace_back(to_string(m),
                             matched_design(unvec(est->estimate(m, s, p.scenario), p.scenario.n_bs), spec.se_iters));
      for (std::size_t i = 0; i < spec.sweep.size(); ++i) {
        const double power = std::pow(10.0, spec.sweep[i] / 10.0);
        for (const auto& [label, d] : designs)
          se[label][i].push_back(spectral_efficiency(s.channel.h_matrix, d, power, spec.se_sigma2));
      }
    }
    for (const auto& l : labels)
      for (std::size_t i = 0; i < spec.sweep.size(); ++i) {
        const auto& v = se[l][i];
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        result.rows.push_back({l, sweep_name(spec.kind), spec.sweep[i], "se_bits", mean, std_of(v), int(v.size())});
      }
  } else {
    std::map<Method, std::vector<ResultRow>> rows;
    for (double value : spec.sweep) {
      const Point p = make_point(spec, value);
      auto [est, theta] = prepare(p);
      std::map<Method, std::vector<double>> ratios;
      for (int t = 0; t < spec.trials; ++t) {
        const auto s = make_sample(p.scenario, theta, p.snr_db, p.snr_db, sample_seed, static_cast<std::uint64_t>(t));
        const CVec truth = vec(s.channel.h_matrix);
        for (Method m : spec.methods) {
          CVec h_hat;
          if (spec.kind == ExperimentKind::layer_sweep && is_learned(m)) {
            const nets::Network* net = est->network(m);
            Tape tape(false);
            const auto layers = net->layer_estimates(tape, nets::observation_to_image(s.obs.y, p.scenario.n_bs));
            if (p.layer > static_cast<int>(layers.size()))
              throw ArgumentError("experiment: " + to_string(m) + " has " + std::to_string(layers.size()) +
                                  " layers, sweep asks for layer " + std::to_string(p.layer));
            h_hat = vec(nets::image_to_channel(layers[static_cast<std::size_t>(p.layer - 1)]));
          } else if (spec.kind == ExperimentKind::layer_sweep && m == Method::ista) {
            h_hat = est->ista(s.obs, p.layer);
          } else {
            h_hat = est->estimate(m, s, p.scenario);
          }
          ratios[m].push_back(nmse_ratio(h_hat, truth));
        }
      }
      for (Method m : spec.methods) rows[m].push_back(nmse_row(to_string(m), spec.kind, value, ratios[m]));
    }
    for (Method m : spec.methods)
      for (auto& r : rows[m]) result.rows.push_back(r);
  }
  if (!spec.output.empty()) save_csv(spec.output, result);
  return result;
}

void write_csv(std::ostream& out, const ExperimentResult& result) {
  out << "method,sweep_name,sweep_value,metric,mean,std,trials\n";
  out.precision(10);
  for (const auto& r : result.rows)
    out << r.method << "," << r.sweep_name << "," << r.sweep_value << "," << r.metric << "," << r.mean << ","
        << r.std << "," << r.trials << "\n";
}

void save_csv(const std::string& path, const ExperimentResult& result) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open results file");
  write_csv(out, result);
  if (!out) throw IoError(path, "write failed");
}

std::vector<ParamRow> report_params(const nets::Network& net, const std::string& label) {
  const auto rep = nets::param_count(net);
  std::vector<ParamRow> rows;
  for (const auto& [g, n] : rep.groups) rows.push_back({label, g, n});
  rows.push_back({label, "total", rep.total});
  rows.push_back({label, "forward_macs", rep.forward_macs});
  return rows;
}

std::vector<ParamRow> report_params(const std::vector<std::string>& checkpoints) {
  std::vector<ParamRow> rows;
  for (const auto& path : checkpoints) {
    const auto net = nets::load_network(path);
    for (auto& r : report_params(net, nets::to_string(net.kind()))) rows.push_back(std::move(r));
  }
  return rows;
}

void write_param_table(std::ostream& out, const std::vector<ParamRow>& rows) {
  out << "model,group,count\n";
  for (const auto& r : rows) out << r.model << "," << r.group << "," << r.count << "\n";
}

}  // namespace xlris::eval
