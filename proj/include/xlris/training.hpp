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
#include <span>
#include <string>
#include <vector>

#include "xlris/config.hpp"
#include "xlris/measurement.hpp"
#include "xlris/nets.hpp"

namespace xlris::train {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t steps = 0;
};

// One bias-corrected Adam update of every tensor in `params` from `grads`.
// State is lazily sized to the parameters on the first call.
void adam_step(std::span<Tensor> params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const AdamOptions& opt);

struct TrainConfig {
  nets::ModelKind kind = nets::ModelKind::cista;
  AdamOptions adam;
  int batch = 32;
  int epochs = 30;
  // Learning rate halves every `decay_every` epochs; 0 means a third of the budget.
  int decay_every = 0;
  double val_fraction = 0.1;
  std::uint64_t seed = 1;
  std::string dataset_path;
  std::string checkpoint_path;  // best-validation checkpoint; "<path>.last" holds resume state
  std::string log_path;         // CSV, appended
  bool resume = false;
  bool verbose = false;

  void validate() const;
  bool set(const std::string& key, const std::string& value);
  // Keys not recognized here are left for the network config.
  void apply(const KeyValues& kv);
  double lr_at(int epoch) const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_nmse_db = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double initial_train_loss = 0.0;  // mean loss of the untrained network over the training split
  double best_val_nmse_db = 0.0;
  int best_epoch = -1;
};

struct Split {
  std::vector<std::size_t> train, val;
};
// First (1 - val_fraction) of the samples train, the rest validate; at least
// one sample lands in each part when the dataset has two or more samples.
Split split_by_index(std::size_t count, double val_fraction);

// Network shaped for the dataset geometry and pilot matrix.
nets::Network make_network(const nets::NetConfig& net_config, const Dataset& ds);

double sample_loss(const nets::Network& net, const CascadedSample& s);
// Mean over samples of the per-sample NMSE, in dB.
double evaluate_nmse_db(const nets::Network& net, const Dataset& ds, std::span<const std::size_t> indices);

// Trains `net` in place. Throws DivergenceError naming epoch and batch when a
// batch loss is not finite.
TrainResult train(nets::Network& net, const Dataset& ds, const TrainConfig& cfg);

}  // namespace xlris::train
