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
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xlris/config.hpp"
#include "xlris/measurement.hpp"
#include "xlris/rng.hpp"
#include "xlris/tensor.hpp"

namespace xlris::nets {

// Channel image layout: [2, N, M], plane 0 = real, plane 1 = imaginary,
// row = BS antenna, column = RIS element.
Tensor channel_to_image(const CMat& h);
CMat image_to_channel(const Tensor& img);
// vec(Y) of an N x P observation -> [2, N, P].
Tensor observation_to_image(const CVec& y, int n);
// M x P phase matrix -> row-major tensor [M, P].
Tensor theta_to_tensor(const PhaseMatrix& theta);

enum class ModelKind { cista, cista_plus, cnncdl };
std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct NetConfig {
  ModelKind kind = ModelKind::cista;
  int n = 8;
  int m = 64;
  int pilots = 32;
  int layers = 0;  // 0 selects 17 / 13 / 5 by kind
  int atoms = 32;
  int kernel = 3;
  int base_width = 8;  // CNN-CDL PMM width at the finest scale
  double init_step = 0.5;
  double init_threshold = 0.01;
  double prelu_slope = 0.1;
  std::uint64_t seed = 1;

  int resolved_layers() const;
  bool set(const std::string& key, const std::string& value);
  void apply(const KeyValues& kv, bool allow_unknown = false);
  std::string to_text() const;
};

struct Param {
  std::string name;
  std::string group;
  Tensor value;
};

class ParamList {
 public:
  // Registers t under a unique name; learnable tensors get requires_grad.
  Tensor add(const std::string& name, const std::string& group, Tensor t, bool learnable = true);
  const std::vector<Param>& items() const { return items_; }
  std::vector<Param>& items() { return items_; }
  const Param* find(const std::string& name) const;
  // Learnable element count, by group and overall.
  std::map<std::string, std::size_t> counts_by_group() const;
  std::size_t learnable_count() const;
  void zero_grad();

 private:
  std::vector<Param> items_;
};

// Kernel ~ U(+-1/sqrt(fan_in)), bias zero.
struct Conv {
  Tensor kernel;
  Tensor bias;
  int stride = 1;
  int padding = 0;
  Tensor operator()(Tape& tape, const Tensor& x) const;
};
Conv make_conv(ParamList& ps, const std::string& name, const std::string& group, int cout, int cin, int k, Rng& rng,
               int stride = 1, int padding = -1, bool bias = true);
// Kernel of zeros, bias filled with `bias_value`: the map starts as a constant.
Conv make_constant_conv(ParamList& ps, const std::string& name, const std::string& group, int cout, int cin,
                        double bias_value);

struct DepthwiseConv {
  Tensor kernel;
  Tensor bias;
  Tensor operator()(Tape& tape, const Tensor& x) const;
};
DepthwiseConv make_depthwise(ParamList& ps, const std::string& name, const std::string& group, int channels,
                             Rng& rng);

// One 2 <-> S convolutional dictionary stored as a conv2d kernel [S, 2, k, k]
// with bias [S]. analyze: 2 -> S, conv2d plus bias. synthesize: S -> 2, the
// transposed convolution with the same kernel, optionally adding the bias to
// the coefficient maps first.
struct ConvDictionary {
  Tensor kernel;
  Tensor bias;
  Tensor analyze(Tape& tape, const Tensor& x) const;
  Tensor synthesize(Tape& tape, const Tensor& g, bool with_bias) const;
};
ConvDictionary make_dictionary(ParamList& ps, const std::string& name, const std::string& group, int atoms, int k,
                               Rng& rng);

// Residual CNN block: x + conv2(prelu(conv1(x))), 2 -> 32 -> 2 channels.
struct FBlock {
  Conv c1;
  Tensor slope;
  Conv c2;
};
FBlock make_fblock(ParamList& ps, const std::string& name, int hidden, int k, double slope, Rng& rng);
Tensor fblock_forward(Tape& tape, const FBlock& f, const Tensor& x);

struct GdmWeights {
  FBlock fa;
  FBlock fd;
  Tensor step;     // [1]
  Tensor theta_b;  // [M, P]
  Tensor theta_c;  // [M, P]
};
// z = g + step * F_A(B(y - C(F_D(g)))), C(x) = x Theta_C, B(r) = r Theta_B^T.
Tensor gdm_forward(Tape& tape, const GdmWeights& w, const Tensor& g_prev, const Tensor& y_img);

struct CsaWeights {
  Conv t_pw;
  DepthwiseConv t_dw;
  Conv s_pw1;
  DepthwiseConv s_dw;
  Conv s_pw2;
  Conv c_pw;
};
CsaWeights make_csa(ParamList& ps, const std::string& name, int channels, Rng& rng);
// depthwise(pointwise(x)) * spatial_map(x) * channel_map(x); maps are linear.
Tensor csa_forward(Tape& tape, const CsaWeights& w, const Tensor& x);

struct CbWeights {
  Tensor ln1_scale, ln1_shift;
  Conv st_pw;
  DepthwiseConv st_dw;
  CsaWeights csa;
  Tensor ln2_scale, ln2_shift;
  Conv ff1;
  Tensor ff_slope;
  Conv ff2;
};
CbWeights make_cb(ParamList& ps, const std::string& name, int channels, double slope, Rng& rng);
Tensor cb_forward(Tape& tape, const CbWeights& w, const Tensor& x);

struct ClfiWeights {
  Conv fuse;
  Conv s_pw1;
  DepthwiseConv s_dw;
  Conv s_pw2;
  Conv c_pw;
};
ClfiWeights make_clfi(ParamList& ps, const std::string& name, int channels, Rng& rng);
// enc * spatial_map(f) * channel_map(f), f = pointwise(concat(prev_enc, prev_dec)).
Tensor clfi_forward(Tape& tape, const ClfiWeights& w, const Tensor& enc, const Tensor& prev_enc,
                    const Tensor& prev_dec);

struct PmmFeatures {
  Tensor enc1, enc2, dec1, dec2;
  bool present() const { return enc1.defined(); }
};

struct PmmWeights {
  Conv in;
  CbWeights enc1;
  ClfiWeights clfi1;
  Conv down1;
  CbWeights enc2;
  ClfiWeights clfi2;
  Conv down2;
  CbWeights mid;
  Conv up2;
  Conv merge2;
  CbWeights dec2;
  Conv up1;
  Conv merge1;
  CbWeights dec1;
  Conv out;
};
PmmWeights make_pmm(ParamList& ps, const std::string& name, int width, double slope, Rng& rng);
// Three-level encoder/decoder; returns z + body(z) and this layer's features.
// Without previous features the CLFI stages are skipped.
std::pair<Tensor, PmmFeatures> pmm_forward(Tape& tape, const PmmWeights& w, const Tensor& z,
                                           const PmmFeatures* prev);

struct ForwardResult {
  std::vector<Tensor> z;       // per-layer gradient-step outputs (kept when tracing)
  std::vector<Tensor> layers;  // CNN-CDL per-layer estimates; CISTA variants: per-layer coefficient maps when tracing
  Tensor coeffs;               // CISTA variants: final coefficient maps
  Tensor h_hat;                // [2, N, M]
};

class Network {
 public:
  Network(const NetConfig& config, const PhaseMatrix& theta);
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const NetConfig& config() const { return config_; }
  ModelKind kind() const { return config_.kind; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  // The pilot matrix the network was built for, as [M, P].
  const Tensor& theta() const { return theta_; }
  PhaseMatrix theta_matrix() const;

  // y_img is [2, N, P].
  ForwardResult forward(Tape& tape, const Tensor& y_img, bool trace = false) const;

  // Channel estimate after each layer: the per-layer outputs for CNN-CDL, the
  // synthesized coefficient maps of every layer for the CISTA variants.
  std::vector<Tensor> layer_estimates(Tape& tape, const Tensor& y_img) const;

  // Copies values by name from another list; throws on missing names or shape mismatches.
  void load_values(const std::vector<std::pair<std::string, Tensor>>& values);

  // CISTA-Net shared dictionary; exposed for tests.
  const ConvDictionary& cista_dictionary() const { return cista_dict_; }
  const GdmWeights& gdm(int layer) const { return gdm_.at(layer); }
  const PmmWeights& pmm(int layer) const { return pmm_.at(layer); }

 private:
  void build_cista(Rng& rng);
  void build_cista_plus(Rng& rng);
  void build_cnncdl(Rng& rng);

  ForwardResult forward_cista(Tape& tape, const Tensor& y_img, bool trace) const;
  ForwardResult forward_cista_plus(Tape& tape, const Tensor& y_img, bool trace) const;
  ForwardResult forward_cnncdl(Tape& tape, const Tensor& y_img, bool trace) const;

  NetConfig config_;
  ParamList params_;
  Tensor theta_;

  ConvDictionary cista_dict_;
  Tensor cista_step_, cista_threshold_;

  struct CistaPlusLayer {
    ConvDictionary a, d;
    Tensor step, threshold, theta_b, theta_c;
  };
  std::vector<CistaPlusLayer> plus_;
  Conv plus_final_;

  std::vector<GdmWeights> gdm_;
  std::vector<PmmWeights> pmm_;
};

// Spectral norm of the layer data-term operator estimated by power iteration.
double estimate_operator_norm(const std::function<Tensor(const Tensor&)>& op, const Shape& shape, Rng& rng,
                              int iters = 30);

struct LossInputs {
  const Tensor* y_img = nullptr;   // cista
  const Tensor* h_true = nullptr;  // cista_plus, cnncdl
};
// cista: ||y - Phi D g_K||^2; cista_plus: ||h - h_hat||^2; cnncdl: sum_k ||h - g_k||^2.
Tensor compute_loss(Tape& tape, const Network& net, const ForwardResult& out, const LossInputs& in);

struct ParamReport {
  std::map<std::string, std::size_t> groups;
  std::size_t total = 0;
  std::uint64_t forward_macs = 0;
};
ParamReport param_count(const Network& net);

// CKPT file: model kind tag, named arrays, config text.
void save_checkpoint(const std::string& path, const Network& net,
                     const std::vector<std::pair<std::string, Tensor>>& extra = {}, const std::string& extra_text = "");
struct Checkpoint {
  NetConfig config;
  std::vector<std::pair<std::string, Tensor>> arrays;
  std::string text;
};
Checkpoint read_checkpoint(const std::string& path);
Network load_network(const std::string& path);

}  // namespace xlris::nets
