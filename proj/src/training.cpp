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

#include "xlris/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "xlris/errors.hpp"
#include "xlris/ops.hpp"
#include "xlris/sparse.hpp"

namespace xlris::train {

void adam_step(std::span<Tensor> params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const AdamOptions& opt) {
  if (grads.size() != params.size())
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].size() != params[i].numel() || state.m[i].size() != params[i].numel())
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " has " +
                           std::to_string(params[i].numel()) + " elements, gradient " +
                           std::to_string(grads[i].size()));
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(opt.beta1, t), c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
      v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
      data[j] -= opt.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw ConfigError("lr must be finite and >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  if (decay_every < 0) throw ConfigError("decay_every must be >= 0");
}

bool TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "model") kind = nets::parse_model_kind(value);
  else if (key == "lr") adam.lr = parse_double(key, value);
  else if (key == "beta1") adam.beta1 = parse_double(key, value);
  else if (key == "beta2") adam.beta2 = parse_double(key, value);
  else if (key == "adam_eps") adam.eps = parse_double(key, value);
  else if (key == "batch") batch = static_cast<int>(parse_int(key, value));
  else if (key == "epochs") epochs = static_cast<int>(parse_int(key, value));
  else if (key == "decay_every") decay_every = static_cast<int>(parse_int(key, value));
  else if (key == "val_fraction") val_fraction = parse_double(key, value);
  else if (key == "train_seed") seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "dataset") dataset_path = value;
  else if (key == "checkpoint") checkpoint_path = value;
  else if (key == "log") log_path = value;
  else if (key == "resume") resume = parse_bool(key, value);
  else return false;
  return true;
}

void TrainConfig::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv) set(k, v);
}

double TrainConfig::lr_at(int epoch) const {
  const int every = decay_every > 0 ? decay_every : std::max(1, epochs / 3);
  return adam.lr * std::pow(0.5, epoch / every);
}

Split split_by_index(std::size_t count, double val_fraction) {
  std::size_t n_val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * val_fraction));
  if (val_fraction > 0.0 && count >= 2) n_val = std::clamp<std::size_t>(n_val, 1, count - 1);
  Split s;
  for (std::size_t i = 0; i < count; ++i) (i < count - n_val ? s.train : s.val).push_back(i);
  return s;
}

nets::Network make_network(const nets::NetConfig& net_config, const Dataset& ds) {
  nets::NetConfig c = net_config;
  c.n = ds.config.n_bs;
  c.m = ds.config.m();
  c.pilots = ds.pilots;
  if (ds.samples.empty()) throw ArgumentError("make_network: dataset is empty");
  return nets::Network(c, ds.samples.front().theta);
}

namespace {

struct SampleImages {
  Tensor y, h;
};

SampleImages images_of(const CascadedSample& s, int n) {
  return {nets::observation_to_image(s.obs.y, n), nets::channel_to_image(s.channel.h_matrix)};
}

std::vector<Tensor> learnable(nets::Network& net) {
  std::vector<Tensor> out;
  for (auto& p : net.params().items())
    if (p.value.requires_grad()) out.push_back(p.value);
  return out;
}

std::string resume_path(const std::string& checkpoint) { return checkpoint + ".last"; }

std::string state_text(int epoch, const AdamState& st, double best, int best_epoch) {
  std::ostringstream o;
  o.precision(17);
  o << "epoch = " << epoch << "\nadam_steps = " << st.steps << "\nbest_val_nmse_db = " << best
    << "\nbest_epoch = " << best_epoch << "\n";
  return o.str();
}

void append_log(const std::string& path, const EpochRecord& r) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError(path, "cannot open training log");
  if (fresh) out << "epoch,train_loss,val_nmse_db,seconds\n";
  out.precision(10);
  out << r.epoch << "," << r.train_loss << "," << r.val_nmse_db << "," << r.seconds << "\n";
}

}  // namespace

double sample_loss(const nets::Network& net, const CascadedSample& s) {
  const auto im = images_of(s, net.config().n);
  Tape tape(false);
  const auto out = net.forward(tape, im.y);
  return nets::compute_loss(tape, net, out, {&im.y, &im.h}).item();
}

double evaluate_nmse_db(const nets::Network& net, const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<double> ratios;
  ratios.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto& s = ds.samples.at(i);
    Tape tape(false);
    const auto out = net.forward(tape, nets::observation_to_image(s.obs.y, net.config().n));
    ratios.push_back(nmse_ratio(vec(nets::image_to_channel(out.h_hat)), vec(s.channel.h_matrix)));
  }
  return mean_nmse_db(ratios);
}

TrainResult train(nets::Network& net, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (net.kind() != cfg.kind)
    throw ConfigError("train: network is " + nets::to_string(net.kind()) + ", config asks for " +
                      nets::to_string(cfg.kind));
  const Split split = split_by_index(ds.samples.size(), cfg.val_fraction);
  if (split.train.empty()) throw ArgumentError("train: no training samples");
  const std::vector<std::size_t>& val = split.val.empty() ? split.train : split.val;

  std::vector<Tensor> params = learnable(net);
  std::vector<std::string> names;
  for (const auto& p : net.params().items())
    if (p.value.requires_grad()) names.push_back(p.name);

  TrainResult result;
  AdamState state;
  int start_epoch = 0;
  result.best_val_nmse_db = std::numeric_limits<double>::infinity();

  if (cfg.resume && !cfg.checkpoint_path.empty() && std::filesystem::exists(resume_path(cfg.checkpoint_path))) {
    const auto ck = nets::read_checkpoint(resume_path(cfg.checkpoint_path));
    net.load_values(ck.arrays);
    auto find = [&](const std::string& name) -> const Tensor& {
      for (const auto& [n, t] : ck.arrays)
        if (n == name) return t;
      throw IoError(resume_path(cfg.checkpoint_path), "missing optimizer array `" + name + "`");
    };
    for (const auto& n : names) {
      const Tensor& m = find("adam.m." + n);
      const Tensor& v = find("adam.v." + n);
      state.m.emplace_back(m.data().begin(), m.data().end());
      state.v.emplace_back(v.data().begin(), v.data().end());
    }
    std::istringstream in(ck.text);
    const KeyValues kv = parse_key_values(in, resume_path(cfg.checkpoint_path));
    start_epoch = static_cast<int>(parse_int("epoch", kv.at("epoch"))) + 1;
    state.steps = static_cast<std::uint64_t>(parse_int("adam_steps", kv.at("adam_steps")));
    result.best_val_nmse_db = parse_double("best_val_nmse_db", kv.at("best_val_nmse_db"));
    result.best_epoch = static_cast<int>(parse_int("best_epoch", kv.at("best_epoch")));
  }

  {
    double acc = 0.0;
    for (std::size_t i : split.train) acc += sample_loss(net, ds.samples[i]);
    result.initial_train_loss = acc / static_cast<double>(split.train.size());
  }

  std::vector<SampleImages> images;
  images.reserve(ds.samples.size());
  for (const auto& s : ds.samples) images.push_back(images_of(s, net.config().n));

  std::vector<std::vector<double>> grads(params.size());
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    AdamOptions opt = cfg.adam;
    opt.lr = cfg.lr_at(epoch);
    std::vector<std::size_t> order = split.train;
    std::mt19937_64 gen(Rng::derive(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), gen);

    double epoch_loss = 0.0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch), ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      const double weight = 1.0 / static_cast<double>(stop - start);
      net.params().zero_grad();
      double batch_loss = 0.0;
      for (std::size_t b = start; b < stop; ++b) {
        const auto& im = images[order[b]];
        Tape tape;
        const auto out = net.forward(tape, im.y);
        const Tensor loss = nets::compute_loss(tape, net, out, {&im.y, &im.h});
        batch_loss += loss.item();
        tape.backward(ops::scale(tape, loss, weight));
      }
      if (!std::isfinite(batch_loss))
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index));
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].has_grad()) grads[i].assign(params[i].grad().begin(), params[i].grad().end());
        else grads[i].assign(params[i].numel(), 0.0);
      }
      adam_step(params, grads, state, opt);
      epoch_loss += batch_loss;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(order.size());
    rec.val_nmse_db = evaluate_nmse_db(net, ds, val);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d  loss %.6g  val %.3f dB  %.1fs\n", epoch, rec.train_loss, rec.val_nmse_db,
                   rec.seconds);

    if (rec.val_nmse_db < result.best_val_nmse_db) {
      result.best_val_nmse_db = rec.val_nmse_db;
      result.best_epoch = epoch;
      if (!cfg.checkpoint_path.empty())
        nets::save_checkpoint(cfg.checkpoint_path, net, {}, state_text(epoch, state, rec.val_nmse_db, epoch));
    }
    if (!cfg.checkpoint_path.empty()) {
      std::vector<std::pair<std::string, Tensor>> extra;
      for (std::size_t i = 0; i < names.size(); ++i) {
        extra.emplace_back("adam.m." + names[i], Tensor(params[i].shape(), state.m[i]));
        extra.emplace_back("adam.v." + names[i], Tensor(params[i].shape(), state.v[i]));
      }
      nets::save_checkpoint(resume_path(cfg.checkpoint_path), net, extra,
                            state_text(epoch, state, result.best_val_nmse_db, result.best_epoch));
    }
    if (!cfg.log_path.empty()) append_log(cfg.log_path, rec);
  }
  return result;
}

}  // namespace xlris::train
