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

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xlris/channel.hpp"
#include "xlris/config.hpp"
#include "xlris/nets.hpp"
#include "xlris/sparse.hpp"

namespace xlris::eval {

enum class ExperimentKind { nmse_vs_snr, nmse_vs_pilots, multipath_sweep, layer_sweep, spectral_efficiency };
enum class Method { omp, ista, ols, cista, cista_plus, cnncdl };

std::string to_string(ExperimentKind kind);
std::string to_string(Method method);
ExperimentKind parse_experiment(const std::string& name);
Method parse_method(const std::string& name);
std::vector<Method> parse_methods(const std::string& list);
bool is_learned(Method method);

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::nmse_vs_snr;
  std::vector<Method> methods{Method::omp, Method::ista, Method::ols};
  // SNR in dB, pilot counts, far-path counts, layer indices or transmit power in dB.
  std::vector<double> sweep{0.0};
  int trials = 200;
  std::uint64_t eval_seed = 1000;
  ScenarioConfig scenario = ScenarioConfig::desk();
  int pilots = 32;
  double snr_db = 0.0;    // fixed SNR for the sweeps that do not vary it
  bool noiseless = false;  // overrides every SNR with a noise-free observation
  // Learned-method checkpoints; "{value}" in a path is replaced by the sweep value.
  std::map<Method, std::string> checkpoints;
  std::string output;  // CSV path; empty skips writing

  int omp_atoms = 16;
  double ista_rho = 0.05;  // fraction of the largest initial correlation
  int ista_iters = 300;
  int multipath_total = 6;  // L_far + L_near in the multipath sweep
  double se_sigma2 = 1.0;
  int se_iters = 10;

  void validate() const;
  bool set(const std::string& key, const std::string& value);
  // Applies experiment keys and scenario keys; throws on keys known to neither.
  void apply(const KeyValues& kv);
};

struct ResultRow {
  std::string method;
  std::string sweep_name;
  double sweep_value = 0.0;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  int trials = 0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  const ResultRow* find(const std::string& method, double sweep_value) const;
};

// Evaluates every method on fresh channels drawn from the evaluation seed
// namespace, which never overlaps the training-dataset streams. NMSE means are
// dB of the mean per-trial ratio; std is over per-trial dB values.
ExperimentResult run_experiment(const ExperimentSpec& spec);

void write_csv(std::ostream& out, const ExperimentResult& result);
void save_csv(const std::string& path, const ExperimentResult& result);

// Alternating matched design of (f, theta) from `design`, evaluated on `truth`:
// log2(1 + power/sigma2 * |f^H H theta|^2).
struct BeamDesign {
  CVec f;
  CVec theta;
};
BeamDesign matched_design(const CMat& design, int iters = 10);
double spectral_efficiency(const CMat& truth, const BeamDesign& design, double power_w, double sigma2);
double spectral_efficiency(const CMat& truth, const CMat& design, double power_w, double sigma2, int iters = 10);

struct ParamRow {
  std::string model;
  std::string group;
  std::uint64_t count = 0;
};
std::vector<ParamRow> report_params(const std::vector<std::string>& checkpoints);
std::vector<ParamRow> report_params(const nets::Network& net, const std::string& label);
void write_param_table(std::ostream& out, const std::vector<ParamRow>& rows);

// Per-method estimators over one observation; shared by the experiments.
class Estimators {
 public:
  Estimators(const ExperimentSpec& spec, const ScenarioConfig& scenario, const PhaseMatrix& theta);
  CVec estimate(Method method, const CascadedSample& sample, const ScenarioConfig& scenario) const;
  CVec ista(const Observation& obs, int iters) const;
  void attach(Method method, const nets::Network* net);
  const nets::Network* network(Method method) const;

 private:
  const ExperimentSpec& spec_;
  PhaseMatrix theta_;
  int n_;
  GridDictionary dict_;
  double ista_step_ = 0.0;
  std::map<Method, const nets::Network*> nets_;
};

}  // namespace xlris::eval
