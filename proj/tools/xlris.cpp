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

// Command-line driver: generate datasets, train, evaluate, report.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xlris/errors.hpp"
#include "xlris/eval.hpp"
#include "xlris/measurement.hpp"
#include "xlris/runtime.hpp"
#include "xlris/training.hpp"

using namespace xlris;

namespace {

const std::vector<std::string> kScenarioKeys{"scale",    "n_bs",     "m1",       "m2",       "wavelength_m",
                                             "spacing_m", "l1",       "l_far",    "l_near",   "nf_x_lo",
                                             "nf_x_hi",  "nf_y_lo",  "nf_y_hi",  "nf_z_lo",  "nf_z_hi",
                                             "angle_lo", "angle_hi", "seed"};
const std::vector<std::string> kGenerateKeys{"count", "snr_lo", "snr_hi", "pilots", "out"};
const std::vector<std::string> kNetKeys{"model",     "layers",         "atoms",       "kernel",
                                        "base_width", "init_step",      "init_threshold", "prelu_slope",
                                        "net_seed"};
const std::vector<std::string> kTrainKeys{"lr",         "beta1",      "beta2",   "adam_eps", "batch",
                                          "epochs",     "decay_every", "val_fraction", "train_seed",
                                          "dataset",    "checkpoint", "log",     "resume"};
const std::vector<std::string> kEvalKeys{"experiment", "methods",   "sweep",        "trials",     "eval_seed",
                                         "pilots",     "snr_db",    "noiseless",    "output",     "ckpt_cista",
                                         "ckpt_cista_plus", "ckpt_cnncdl", "omp_atoms", "ista_rho", "ista_iters",
                                         "multipath_total", "se_sigma2", "se_iters"};

// Config file plus one flag per key; flags win over the file.
struct KeyOptions {
  std::string config_path;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app, const std::vector<std::vector<std::string>>& groups) {
    app->add_option("-c,--config", config_path, "key = value config file");
    for (const auto& keys : groups)
      for (const auto& k : keys)
        if (!flags.count(k)) app->add_option("--" + k, flags[k], "overrides `" + k + "`");
  }

  KeyValues merged() const {
    KeyValues kv;
    if (!config_path.empty()) kv = read_key_values(config_path);
    for (const auto& [k, v] : flags)
      if (!v.empty()) kv[k] = v;
    return kv;
  }
};

bool in(const std::vector<std::string>& keys, const std::string& k) {
  return std::find(keys.begin(), keys.end(), k) != keys.end();
}

void reject_unknown(const KeyValues& kv, const std::vector<std::vector<std::string>>& groups) {
  for (const auto& [k, v] : kv) {
    bool known = false;
    for (const auto& g : groups) known = known || in(g, k);
    if (!known) throw ConfigError("unknown key `" + k + "` for this command");
  }
}

ScenarioConfig scenario_from(const KeyValues& kv) {
  ScenarioConfig sc;
  if (auto it = kv.find("scale"); it != kv.end()) sc.set("scale", it->second);
  for (const auto& [k, v] : kv)
    if (k != "scale" && in(kScenarioKeys, k)) sc.set(k, v);
  sc.validate();
  return sc;
}

std::string get_or(const KeyValues& kv, const std::string& key, const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

int run_generate(const KeyOptions& opts) {
  const KeyValues kv = opts.merged();
  reject_unknown(kv, {kScenarioKeys, kGenerateKeys});
  const ScenarioConfig sc = scenario_from(kv);
  const auto count = parse_int("count", get_or(kv, "count", "2000"));
  const double lo = parse_double("snr_lo", get_or(kv, "snr_lo", "0"));
  const double hi = parse_double("snr_hi", get_or(kv, "snr_hi", "0"));
  const auto pilots = static_cast<int>(parse_int("pilots", get_or(kv, "pilots", "32")));
  const std::string out = get_or(kv, "out", "");
  if (out.empty()) throw ConfigError("generate: `out` (dataset path) is required");
  const Dataset ds = make_dataset(sc, static_cast<std::size_t>(count), lo, hi, pilots, sc.seed);
  save_dataset(out, ds);
  std::printf("wrote %zu samples (N=%d, M=%d, P=%d, SNR %g..%g dB, seed %llu) to %s\n", ds.samples.size(), sc.n_bs,
              sc.m(), pilots, lo, hi, static_cast<unsigned long long>(sc.seed), out.c_str());
  return 0;
}

int run_train(const KeyOptions& opts, bool verbose) {
  const KeyValues kv = opts.merged();
  reject_unknown(kv, {kNetKeys, kTrainKeys});
  train::TrainConfig tc;
  tc.apply(kv);
  tc.verbose = verbose;
  nets::NetConfig nc;
  for (const auto& [k, v] : kv)
    if (in(kNetKeys, k)) nc.set(k, v);
  if (tc.dataset_path.empty()) throw ConfigError("train: `dataset` is required");
  if (tc.checkpoint_path.empty()) throw ConfigError("train: `checkpoint` is required");
  const Dataset ds = load_dataset(tc.dataset_path);
  auto net = train::make_network(nc, ds);
  const auto r = train::train(net, ds, tc);
  std::printf("initial train loss %.6g\n", r.initial_train_loss);
  if (!r.log.empty())
    std::printf("final train loss %.6g, best validation NMSE %.3f dB at epoch %d\n", r.log.back().train_loss,
                r.best_val_nmse_db, r.best_epoch);
  std::printf("checkpoint: %s\n", tc.checkpoint_path.c_str());
  return 0;
}

int run_eval(const KeyOptions& opts) {
  const KeyValues kv = opts.merged();
  reject_unknown(kv, {kScenarioKeys, kEvalKeys});
  eval::ExperimentSpec spec;
  spec.scenario = scenario_from(kv);
  for (const auto& [k, v] : kv)
    if (in(kEvalKeys, k)) spec.set(k, v);
  const auto r = eval::run_experiment(spec);
  if (spec.output.empty()) eval::write_csv(std::cout, r);
  else std::printf("wrote %zu rows to %s\n", r.rows.size(), spec.output.c_str());
  return 0;
}

int run_report(const std::vector<std::string>& checkpoints, const std::string& out) {
  const auto rows = eval::report_params(checkpoints);
  if (out.empty()) {
    eval::write_param_table(std::cout, rows);
  } else {
    std::ofstream f(out);
    if (!f) throw IoError(out, "cannot open report file");
    eval::write_param_table(f, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"xlris: hybrid-field XL-RIS channel simulation and estimation"};
  app.require_subcommand(1);

  KeyOptions gen_opts, train_opts, eval_opts;
  auto* gen = app.add_subcommand("generate", "simulate a dataset of cascaded channels and pilot observations");
  gen_opts.attach(gen, {kScenarioKeys, kGenerateKeys});

  bool verbose = false;
  auto* tr = app.add_subcommand("train", "train an unrolled network on a dataset");
  train_opts.attach(tr, {kNetKeys, kTrainKeys});
  tr->add_flag("-v,--verbose", verbose, "print one line per epoch");

  auto* ev = app.add_subcommand("eval", "run an evaluation experiment and write the result CSV");
  eval_opts.attach(ev, {kScenarioKeys, kEvalKeys});

  std::vector<std::string> report_ckpts;
  std::string report_out;
  auto* rep = app.add_subcommand("report", "print per-group parameter counts and forward multiply-adds");
  rep->add_option("checkpoints", report_ckpts, "checkpoint files")->required();
  rep->add_option("-o,--out", report_out, "write the table here instead of stdout");

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return run_generate(gen_opts);
    if (tr->parsed()) return run_train(train_opts, verbose);
    if (ev->parsed()) return run_eval(eval_opts);
    if (rep->parsed()) return run_report(report_ckpts, report_out);
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
