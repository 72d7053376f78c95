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

#include "xlris/nets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "xlris/binary_io.hpp"
#include "xlris/errors.hpp"
#include "xlris/ops.hpp"

namespace xlris::nets {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::string layer_name(int k, const std::string& rest) { return "layer" + std::to_string(k) + "." + rest; }

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

Tensor channel_to_image(const CMat& h) {
  const auto N = static_cast<std::size_t>(h.rows()), M = static_cast<std::size_t>(h.cols());
  std::vector<double> v(2 * N * M);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m) {
      const cdouble z = h(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
      v[n * M + m] = z.real();
      v[N * M + n * M + m] = z.imag();
    }
  return Tensor({2, N, M}, std::move(v));
}

CMat image_to_channel(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 2) throw DimensionError("image_to_channel: expected [2,N,M], got " + shape_str(img.shape()));
  const std::size_t N = img.dim(1), M = img.dim(2);
  CMat h(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m)
      h(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)) = {img[n * M + m], img[N * M + n * M + m]};
  return h;
}

Tensor observation_to_image(const CVec& y, int n) {
  if (n < 1 || y.size() % n != 0) throw DimensionError("observation_to_image: length not divisible by N");
  return channel_to_image(unvec(y, n));
}

Tensor theta_to_tensor(const PhaseMatrix& theta) {
  const auto M = static_cast<std::size_t>(theta.rows()), P = static_cast<std::size_t>(theta.cols());
  std::vector<double> v(M * P);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t p = 0; p < P; ++p) v[m * P + p] = theta(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p));
  return Tensor({M, P}, std::move(v));
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::cista: return "cista";
    case ModelKind::cista_plus: return "cista_plus";
    case ModelKind::cnncdl: return "cnncdl";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "cista") return ModelKind::cista;
  if (name == "cista_plus") return ModelKind::cista_plus;
  if (name == "cnncdl") return ModelKind::cnncdl;
  throw ConfigError("unknown model kind `" + name + "` (expected cista, cista_plus or cnncdl)");
}

int NetConfig::resolved_layers() const {
  if (layers > 0) return layers;
  switch (kind) {
    case ModelKind::cista: return 17;
    case ModelKind::cista_plus: return 13;
    case ModelKind::cnncdl: return 5;
  }
  return 1;
}

bool NetConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&] { return static_cast<int>(parse_int(key, value)); };
  if (key == "model") kind = parse_model_kind(value);
  else if (key == "net_n") n = as_int();
  else if (key == "net_m") m = as_int();
  else if (key == "pilots") pilots = as_int();
  else if (key == "layers") layers = as_int();
  else if (key == "atoms") atoms = as_int();
  else if (key == "kernel") kernel = as_int();
  else if (key == "base_width") base_width = as_int();
  else if (key == "init_step") init_step = parse_double(key, value);
  else if (key == "init_threshold") init_threshold = parse_double(key, value);
  else if (key == "prelu_slope") prelu_slope = parse_double(key, value);
  else if (key == "net_seed") seed = static_cast<std::uint64_t>(parse_int(key, value));
  else return false;
  return true;
}

void NetConfig::apply(const KeyValues& kv, bool allow_unknown) {
  for (const auto& [k, v] : kv)
    if (!set(k, v) && !allow_unknown) throw ConfigError("unknown network key `" + k + "`");
}

std::string NetConfig::to_text() const {
  std::ostringstream o;
  o.precision(17);
  o << "model = " << to_string(kind) << "\nnet_n = " << n << "\nnet_m = " << m << "\npilots = " << pilots
    << "\nlayers = " << layers << "\natoms = " << atoms << "\nkernel = " << kernel << "\nbase_width = " << base_width
    << "\ninit_step = " << init_step << "\ninit_threshold = " << init_threshold << "\nprelu_slope = " << prelu_slope
    << "\nnet_seed = " << seed << "\n";
  return o.str();
}

// ---------------------------------------------------------------- params

Tensor ParamList::add(const std::string& name, const std::string& group, Tensor t, bool learnable) {
  if (find(name)) throw ArgumentError("duplicate parameter name `" + name + "`");
  t.set_requires_grad(learnable);
  items_.push_back({name, group, t});
  return t;
}

const Param* ParamList::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

std::map<std::string, std::size_t> ParamList::counts_by_group() const {
  std::map<std::string, std::size_t> out;
  for (const auto& p : items_)
    if (p.value.requires_grad()) out[p.group] += p.value.numel();
  return out;
}

std::size_t ParamList::learnable_count() const {
  std::size_t n = 0;
  for (const auto& p : items_)
    if (p.value.requires_grad()) n += p.value.numel();
  return n;
}

void ParamList::zero_grad() {
  for (auto& p : items_) p.value.zero_grad();
}

// ---------------------------------------------------------------- layers

Tensor Conv::operator()(Tape& tape, const Tensor& x) const { return ops::conv2d(tape, x, kernel, bias, stride, padding); }

Conv make_conv(ParamList& ps, const std::string& name, const std::string& group, int cout, int cin, int k, Rng& rng,
               int stride, int padding, bool bias) {
  Conv c;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  c.kernel = ps.add(name + ".kernel", group,
                    uniform_tensor({std::size_t(cout), std::size_t(cin), std::size_t(k), std::size_t(k)}, bound, rng));
  if (bias) c.bias = ps.add(name + ".bias", group, Tensor::zeros({std::size_t(cout)}));
  c.stride = stride;
  c.padding = padding < 0 ? k / 2 : padding;
  return c;
}

Conv make_constant_conv(ParamList& ps, const std::string& name, const std::string& group, int cout, int cin,
                        double bias_value) {
  Conv c;
  c.kernel = ps.add(name + ".kernel", group, Tensor::zeros({std::size_t(cout), std::size_t(cin), 1, 1}));
  c.bias = ps.add(name + ".bias", group, Tensor::filled({std::size_t(cout)}, bias_value));
  return c;
}

Tensor DepthwiseConv::operator()(Tape& tape, const Tensor& x) const {
  return ops::depthwise_conv2d(tape, x, kernel, static_cast<int>(kernel.dim(2) / 2), bias);
}

DepthwiseConv make_depthwise(ParamList& ps, const std::string& name, const std::string& group, int channels,
                             Rng& rng) {
  DepthwiseConv d;
  d.kernel = ps.add(name + ".kernel", group, uniform_tensor({std::size_t(channels), 1, 3, 3}, 1.0 / 3.0, rng));
  d.bias = ps.add(name + ".bias", group, Tensor::zeros({std::size_t(channels)}));
  return d;
}

Tensor ConvDictionary::analyze(Tape& tape, const Tensor& x) const {
  return ops::conv2d(tape, x, kernel, bias, 1, static_cast<int>(kernel.dim(2) / 2));
}

Tensor ConvDictionary::synthesize(Tape& tape, const Tensor& g, bool with_bias) const {
  const Tensor in = with_bias ? ops::add_channel_bias(tape, g, bias) : g;
  return ops::conv2d_transpose(tape, in, kernel, 1, static_cast<int>(kernel.dim(2) / 2));
}

ConvDictionary make_dictionary(ParamList& ps, const std::string& name, const std::string& group, int atoms, int k,
                               Rng& rng) {
  const Conv c = make_conv(ps, name, group, atoms, 2, k, rng);
  return {c.kernel, c.bias};
}

FBlock make_fblock(ParamList& ps, const std::string& name, int hidden, int k, double slope, Rng& rng) {
  FBlock f;
  f.c1 = make_conv(ps, name + ".c1", "fblock", hidden, 2, k, rng);
  f.slope = ps.add(name + ".slope", "prelu", Tensor::filled({std::size_t(hidden)}, slope));
  f.c2 = make_conv(ps, name + ".c2", "fblock", 2, hidden, k, rng);
  return f;
}

Tensor fblock_forward(Tape& tape, const FBlock& f, const Tensor& x) {
  return ops::add(tape, x, f.c2(tape, ops::prelu(tape, f.c1(tape, x), f.slope)));
}

Tensor gdm_forward(Tape& tape, const GdmWeights& w, const Tensor& g_prev, const Tensor& y_img) {
  const Tensor synth = fblock_forward(tape, w.fd, g_prev);
  const Tensor resid = ops::sub(tape, y_img, ops::matmul_right(tape, synth, w.theta_c));
  const Tensor back = fblock_forward(tape, w.fa, ops::matmul_right_transposed(tape, resid, w.theta_b));
  return ops::add(tape, g_prev, ops::scale(tape, back, w.step));
}

CsaWeights make_csa(ParamList& ps, const std::string& name, int c, Rng& rng) {
  CsaWeights w;
  w.t_pw = make_conv(ps, name + ".t_pw", "pmm", c, c, 1, rng);
  w.t_dw = make_depthwise(ps, name + ".t_dw", "pmm", c, rng);
  w.s_pw1 = make_conv(ps, name + ".s_pw1", "pmm", c, c, 1, rng);
  w.s_dw = make_depthwise(ps, name + ".s_dw", "pmm", c, rng);
  w.s_pw2 = make_constant_conv(ps, name + ".s_pw2", "pmm", c, c, 1.0);
  w.c_pw = make_constant_conv(ps, name + ".c_pw", "pmm", c, c, 1.0);
  return w;
}

Tensor csa_forward(Tape& tape, const CsaWeights& w, const Tensor& x) {
  const Tensor transformed = w.t_dw(tape, w.t_pw(tape, x));
  const Tensor spatial = w.s_pw2(tape, w.s_dw(tape, w.s_pw1(tape, x)));
  const Tensor channel = w.c_pw(tape, ops::global_avg_pool(tape, x));
  return ops::channel_mul(tape, ops::mul(tape, transformed, spatial), channel);
}

CbWeights make_cb(ParamList& ps, const std::string& name, int c, double slope, Rng& rng) {
  CbWeights w;
  w.ln1_scale = ps.add(name + ".ln1.scale", "pmm", Tensor::filled({std::size_t(c)}, 1.0));
  w.ln1_shift = ps.add(name + ".ln1.shift", "pmm", Tensor::zeros({std::size_t(c)}));
  w.st_pw = make_conv(ps, name + ".st_pw", "pmm", c, c, 1, rng);
  w.st_dw = make_depthwise(ps, name + ".st_dw", "pmm", c, rng);
  w.csa = make_csa(ps, name + ".csa", c, rng);
  w.ln2_scale = ps.add(name + ".ln2.scale", "pmm", Tensor::filled({std::size_t(c)}, 1.0));
  w.ln2_shift = ps.add(name + ".ln2.shift", "pmm", Tensor::zeros({std::size_t(c)}));
  w.ff1 = make_conv(ps, name + ".ff1", "pmm", 2 * c, c, 1, rng);
  w.ff_slope = ps.add(name + ".ff_slope", "pmm", Tensor::filled({std::size_t(2 * c)}, slope));
  w.ff2 = make_conv(ps, name + ".ff2", "pmm", c, 2 * c, 1, rng);
  return w;
}

Tensor cb_forward(Tape& tape, const CbWeights& w, const Tensor& x) {
  const Tensor n1 = ops::layer_norm(tape, x, w.ln1_scale, w.ln1_shift);
  const Tensor body1 = ops::mul(tape, w.st_dw(tape, w.st_pw(tape, n1)), csa_forward(tape, w.csa, n1));
  const Tensor x1 = ops::add(tape, x, body1);
  const Tensor n2 = ops::layer_norm(tape, x1, w.ln2_scale, w.ln2_shift);
  const Tensor body2 = w.ff2(tape, ops::prelu(tape, w.ff1(tape, n2), w.ff_slope));
  return ops::add(tape, x1, body2);
}

ClfiWeights make_clfi(ParamList& ps, const std::string& name, int c, Rng& rng) {
  ClfiWeights w;
  w.fuse = make_conv(ps, name + ".fuse", "clfi", c, 2 * c, 1, rng);
  w.s_pw1 = make_conv(ps, name + ".s_pw1", "clfi", c, c, 1, rng);
  w.s_dw = make_depthwise(ps, name + ".s_dw", "clfi", c, rng);
  w.s_pw2 = make_constant_conv(ps, name + ".s_pw2", "clfi", c, c, 1.0);
  w.c_pw = make_constant_conv(ps, name + ".c_pw", "clfi", c, c, 1.0);
  return w;
}

Tensor clfi_forward(Tape& tape, const ClfiWeights& w, const Tensor& enc, const Tensor& prev_enc,
                    const Tensor& prev_dec) {
  if (prev_enc.shape() != enc.shape() || prev_dec.shape() != enc.shape())
    throw DimensionError("clfi: feature scale mismatch, current " + shape_str(enc.shape()) + ", previous " +
                         shape_str(prev_enc.shape()) + " / " + shape_str(prev_dec.shape()));
  const Tensor fused = w.fuse(tape, ops::concat_channels(tape, prev_enc, prev_dec));
  const Tensor spatial = w.s_pw2(tape, w.s_dw(tape, w.s_pw1(tape, fused)));
  const Tensor channel = w.c_pw(tape, ops::global_avg_pool(tape, fused));
  return ops::channel_mul(tape, ops::mul(tape, enc, spatial), channel);
}

PmmWeights make_pmm(ParamList& ps, const std::string& name, int c, double slope, Rng& rng) {
  PmmWeights w;
  w.in = make_conv(ps, name + ".in", "pmm", c, 2, 3, rng);
  w.enc1 = make_cb(ps, name + ".enc1", c, slope, rng);
  w.down1 = make_conv(ps, name + ".down1", "pmm", 2 * c, c, 2, rng, 2, 0);
  w.enc2 = make_cb(ps, name + ".enc2", 2 * c, slope, rng);
  w.down2 = make_conv(ps, name + ".down2", "pmm", 4 * c, 2 * c, 2, rng, 2, 0);
  w.mid = make_cb(ps, name + ".mid", 4 * c, slope, rng);
  w.up2 = make_conv(ps, name + ".up2", "pmm", 8 * c, 4 * c, 1, rng);
  w.merge2 = make_conv(ps, name + ".merge2", "pmm", 2 * c, 4 * c, 1, rng);
  w.dec2 = make_cb(ps, name + ".dec2", 2 * c, slope, rng);
  w.up1 = make_conv(ps, name + ".up1", "pmm", 4 * c, 2 * c, 1, rng);
  w.merge1 = make_conv(ps, name + ".merge1", "pmm", c, 2 * c, 1, rng);
  w.dec1 = make_cb(ps, name + ".dec1", c, slope, rng);
  w.out = make_conv(ps, name + ".out", "pmm", 2, c, 3, rng);
  // The refinement starts at zero, so every layer begins as its gradient step.
  std::fill(w.out.kernel.data().begin(), w.out.kernel.data().end(), 0.0);
  return w;
}

std::pair<Tensor, PmmFeatures> pmm_forward(Tape& tape, const PmmWeights& w, const Tensor& z, const PmmFeatures* prev) {
  if (z.rank() != 3 || z.dim(1) % 4 != 0 || z.dim(2) % 4 != 0)
    throw ConfigError("pmm: spatial dims of " + shape_str(z.shape()) +
                      " must be divisible by 4; pad N and M up to the next multiple of 4");
  const bool fuse = prev && prev->present();
  PmmFeatures f;
  Tensor x = w.in(tape, z);
  f.enc1 = cb_forward(tape, w.enc1, x);
  if (fuse) f.enc1 = clfi_forward(tape, w.clfi1, f.enc1, prev->enc1, prev->dec1);
  x = w.down1(tape, f.enc1);
  f.enc2 = cb_forward(tape, w.enc2, x);
  if (fuse) f.enc2 = clfi_forward(tape, w.clfi2, f.enc2, prev->enc2, prev->dec2);
  x = w.down2(tape, f.enc2);
  x = cb_forward(tape, w.mid, x);
  x = ops::pixel_shuffle(tape, w.up2(tape, x), 2);
  x = w.merge2(tape, ops::concat_channels(tape, x, f.enc2));
  f.dec2 = cb_forward(tape, w.dec2, x);
  x = ops::pixel_shuffle(tape, w.up1(tape, f.dec2), 2);
  x = w.merge1(tape, ops::concat_channels(tape, x, f.enc1));
  f.dec1 = cb_forward(tape, w.dec1, x);
  return {ops::add(tape, z, w.out(tape, f.dec1)), std::move(f)};
}

// ---------------------------------------------------------------- networks

double estimate_operator_norm(const std::function<Tensor(const Tensor&)>& op, const Shape& shape, Rng& rng,
                              int iters) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.normal();
  Tensor x(shape, std::move(v));
  double norm = 0.0;
  for (int it = 0; it < iters; ++it) {
    double nx = 0.0;
    for (double e : x.data()) nx += e * e;
    nx = std::sqrt(nx);
    if (nx == 0.0) return 0.0;
    for (double& e : x.data()) e /= nx;
    Tensor y = op(x);
    double ny = 0.0;
    for (double e : y.data()) ny += e * e;
    norm = std::sqrt(ny);
    x = y.detach();
  }
  return norm;
}

Network::Network(const NetConfig& config, const PhaseMatrix& theta) : config_(config) {
  if (theta.rows() != config.m || theta.cols() != config.pilots)
    throw DimensionError("network: theta is " + std::to_string(theta.rows()) + "x" + std::to_string(theta.cols()) +
                         ", config expects " + std::to_string(config.m) + "x" + std::to_string(config.pilots));
  if (config.n < 1 || config.m < 1 || config.atoms < 1 || config.kernel < 1 || config.kernel % 2 == 0)
    throw ConfigError("network: n, m, atoms >= 1 and an odd kernel size are required");
  theta_ = params_.add("theta", "pilots", theta_to_tensor(theta), false);
  Rng rng = Rng::stream(config.seed, "init");
  switch (config.kind) {
    case ModelKind::cista: build_cista(rng); break;
    case ModelKind::cista_plus: build_cista_plus(rng); break;
    case ModelKind::cnncdl: build_cnncdl(rng); break;
  }
}

PhaseMatrix Network::theta_matrix() const {
  const Eigen::Index M = static_cast<Eigen::Index>(theta_.dim(0)), P = static_cast<Eigen::Index>(theta_.dim(1));
  PhaseMatrix t(M, P);
  for (Eigen::Index m = 0; m < M; ++m)
    for (Eigen::Index p = 0; p < P; ++p) t(m, p) = theta_[static_cast<std::size_t>(m * P + p)];
  return t;
}

void Network::build_cista(Rng& rng) {
  cista_dict_ = make_dictionary(params_, "dict", "dictionary", config_.atoms, config_.kernel, rng);
  const int pad = config_.kernel / 2;
  const Shape coeff{std::size_t(config_.atoms), std::size_t(config_.n), std::size_t(config_.m)};
  // Normal operator of the data term in the coefficient maps.
  const double L = estimate_operator_norm(
      [&](const Tensor& g) {
        Tape t(false);
        const Tensor h = ops::conv2d_transpose(t, g, cista_dict_.kernel, 1, pad);
        const Tensor back = ops::matmul_right_transposed(t, ops::matmul_right(t, h, theta_), theta_);
        return ops::conv2d(t, back, cista_dict_.kernel, Tensor(), 1, pad);
      },
      coeff, rng);
  const double step = std::min(config_.init_step, 0.9 / L);
  cista_step_ = params_.add("fixed.step", "fixed", Tensor::scalar(step), false);
  cista_threshold_ = params_.add("fixed.threshold", "fixed", Tensor::scalar(config_.init_threshold), false);
}

void Network::build_cista_plus(Rng& rng) {
  const int K = config_.resolved_layers();
  const int pad = config_.kernel / 2;
  const Shape coeff{std::size_t(config_.atoms), std::size_t(config_.n), std::size_t(config_.m)};
  for (int k = 0; k < K; ++k) {
    CistaPlusLayer l;
    l.a = make_dictionary(params_, layer_name(k, "A"), "dictionary", config_.atoms, config_.kernel, rng);
    l.d = make_dictionary(params_, layer_name(k, "D"), "dictionary", config_.atoms, config_.kernel, rng);
    const double L = estimate_operator_norm(
        [&](const Tensor& g) {
          Tape t(false);
          const Tensor h = ops::conv2d_transpose(t, g, l.d.kernel, 1, pad);
          const Tensor back = ops::matmul_right_transposed(t, ops::matmul_right(t, h, theta_), theta_);
          return ops::conv2d(t, back, l.a.kernel, Tensor(), 1, pad);
        },
        coeff, rng);
    l.step = params_.add(layer_name(k, "step"), "step", Tensor::scalar(std::min(config_.init_step, 0.9 / L)));
    l.threshold = params_.add(layer_name(k, "threshold"), "step", Tensor::scalar(config_.init_threshold));
    l.theta_b = params_.add(layer_name(k, "theta_b"), "measurement", theta_.detach());
    l.theta_c = params_.add(layer_name(k, "theta_c"), "measurement", theta_.detach());
    plus_.push_back(std::move(l));
  }
  plus_final_ = make_conv(params_, "final", "final", 2, config_.atoms, config_.kernel, rng);
}

void Network::build_cnncdl(Rng& rng) {
  if (config_.n % 4 != 0 || config_.m % 4 != 0)
    throw ConfigError("cnncdl: N and M must be divisible by 4; pad N=" + std::to_string(config_.n) +
                      " and M=" + std::to_string(config_.m) + " up to the next multiple of 4");
  const int K = config_.resolved_layers();
  const Shape img{2, std::size_t(config_.n), std::size_t(config_.m)};
  for (int k = 0; k < K; ++k) {
    GdmWeights g;
    g.fa = make_fblock(params_, layer_name(k, "FA"), config_.atoms, config_.kernel, config_.prelu_slope, rng);
    g.fd = make_fblock(params_, layer_name(k, "FD"), config_.atoms, config_.kernel, config_.prelu_slope, rng);
    g.theta_b = params_.add(layer_name(k, "theta_b"), "measurement", theta_.detach());
    g.theta_c = params_.add(layer_name(k, "theta_c"), "measurement", theta_.detach());
    const double L = estimate_operator_norm(
        [&](const Tensor& x) {
          Tape t(false);
          const Tensor h = fblock_forward(t, g.fd, x);
          const Tensor back = ops::matmul_right_transposed(t, ops::matmul_right(t, h, g.theta_c), g.theta_b);
          return fblock_forward(t, g.fa, back);
        },
        img, rng);
    g.step = params_.add(layer_name(k, "step"), "step", Tensor::scalar(std::min(config_.init_step, 0.9 / L)));
    gdm_.push_back(std::move(g));
    PmmWeights p = make_pmm(params_, layer_name(k, "pmm"), config_.base_width, config_.prelu_slope, rng);
    if (k > 0) {
      p.clfi1 = make_clfi(params_, layer_name(k, "clfi1"), config_.base_width, rng);
      p.clfi2 = make_clfi(params_, layer_name(k, "clfi2"), 2 * config_.base_width, rng);
    }
    pmm_.push_back(std::move(p));
  }
}

ForwardResult Network::forward(Tape& tape, const Tensor& y_img, bool trace) const {
  const Shape expect{2, std::size_t(config_.n), std::size_t(config_.pilots)};
  if (y_img.shape() != expect)
    throw DimensionError("network forward: observation image " + shape_str(y_img.shape()) + ", expected " +
                         shape_str(expect));
  switch (config_.kind) {
    case ModelKind::cista: return forward_cista(tape, y_img, trace);
    case ModelKind::cista_plus: return forward_cista_plus(tape, y_img, trace);
    case ModelKind::cnncdl: return forward_cnncdl(tape, y_img, trace);
  }
  return {};
}

ForwardResult Network::forward_cista(Tape& tape, const Tensor& y_img, bool trace) const {
  ForwardResult out;
  const double step = cista_step_[0];
  const double tau = cista_threshold_[0] * step;
  Tensor g = Tensor::zeros({std::size_t(config_.atoms), std::size_t(config_.n), std::size_t(config_.m)});
  for (int k = 0; k < config_.resolved_layers(); ++k) {
    const Tensor h = cista_dict_.synthesize(tape, g, false);
    const Tensor resid = ops::sub(tape, y_img, ops::matmul_right(tape, h, theta_));
    const Tensor back = ops::matmul_right_transposed(tape, resid, theta_);
    const Tensor z = ops::add(tape, g, ops::scale(tape, cista_dict_.analyze(tape, back), step));
    g = ops::soft_threshold(tape, z, tau);
    if (trace) {
      out.z.push_back(z);
      out.layers.push_back(g);
    }
  }
  out.coeffs = g;
  out.h_hat = cista_dict_.synthesize(tape, g, false);
  return out;
}

ForwardResult Network::forward_cista_plus(Tape& tape, const Tensor& y_img, bool trace) const {
  ForwardResult out;
  Tensor g = Tensor::zeros({std::size_t(config_.atoms), std::size_t(config_.n), std::size_t(config_.m)});
  for (const auto& l : plus_) {
    const Tensor h = l.d.synthesize(tape, g, true);
    const Tensor resid = ops::sub(tape, y_img, ops::matmul_right(tape, h, l.theta_c));
    const Tensor back = ops::matmul_right_transposed(tape, resid, l.theta_b);
    const Tensor z = ops::add(tape, g, ops::scale(tape, l.a.analyze(tape, back), l.step));
    const Tensor tau = ops::relu(tape, ops::mul(tape, l.threshold, l.step));
    g = ops::soft_threshold(tape, z, tau);
    if (trace) {
      out.z.push_back(z);
      out.layers.push_back(g);
    }
  }
  out.coeffs = g;
  out.h_hat = plus_final_(tape, g);
  return out;
}

ForwardResult Network::forward_cnncdl(Tape& tape, const Tensor& y_img, bool trace) const {
  ForwardResult out;
  Tensor g = Tensor::zeros({2, std::size_t(config_.n), std::size_t(config_.m)});
  PmmFeatures feats;
  for (std::size_t k = 0; k < gdm_.size(); ++k) {
    const Tensor z = gdm_forward(tape, gdm_[k], g, y_img);
    auto [next, f] = pmm_forward(tape, pmm_[k], z, &feats);
    g = next;
    feats = std::move(f);
    if (trace) out.z.push_back(z);
    out.layers.push_back(g);
  }
  out.h_hat = g;
  return out;
}

std::vector<Tensor> Network::layer_estimates(Tape& tape, const Tensor& y_img) const {
  ForwardResult out = forward(tape, y_img, true);
  if (kind() == ModelKind::cnncdl) return out.layers;
  std::vector<Tensor> est;
  for (const auto& g : out.layers)
    est.push_back(kind() == ModelKind::cista ? cista_dict_.synthesize(tape, g, false) : plus_final_(tape, g));
  return est;
}

void Network::load_values(const std::vector<std::pair<std::string, Tensor>>& values) {
  for (auto& p : params_.items()) {
    auto it = std::find_if(values.begin(), values.end(), [&](const auto& kv) { return kv.first == p.name; });
    if (it == values.end()) throw ArgumentError("load_values: missing parameter `" + p.name + "`");
    if (it->second.shape() != p.value.shape())
      throw DimensionError("load_values: `" + p.name + "` has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(p.value.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), p.value.data().begin());
  }
}

// ---------------------------------------------------------------- losses and reports

Tensor compute_loss(Tape& tape, const Network& net, const ForwardResult& out, const LossInputs& in) {
  switch (net.kind()) {
    case ModelKind::cista:
      if (!in.y_img) throw ArgumentError("compute_loss: cista needs the observation");
      return ops::squared_distance(tape, ops::matmul_right(tape, out.h_hat, net.theta()), *in.y_img);
    case ModelKind::cista_plus:
      if (!in.h_true) throw ArgumentError("compute_loss: cista_plus needs the true channel");
      return ops::squared_distance(tape, out.h_hat, *in.h_true);
    case ModelKind::cnncdl: {
      if (!in.h_true) throw ArgumentError("compute_loss: cnncdl needs the true channel");
      if (out.layers.empty()) throw ArgumentError("compute_loss: cnncdl output has no layers");
      Tensor total = ops::squared_distance(tape, out.layers[0], *in.h_true);
      for (std::size_t k = 1; k < out.layers.size(); ++k)
        total = ops::add(tape, total, ops::squared_distance(tape, out.layers[k], *in.h_true));
      return total;
    }
  }
  return {};
}

ParamReport param_count(const Network& net) {
  ParamReport r;
  r.groups = net.params().counts_by_group();
  r.total = net.params().learnable_count();
  const auto& c = net.config();
  Tape tape(false);
  const std::uint64_t before = ops::mac_count();
  net.forward(tape, Tensor::zeros({2, std::size_t(c.n), std::size_t(c.pilots)}));
  r.forward_macs = ops::mac_count() - before;
  return r;
}

void save_checkpoint(const std::string& path, const Network& net,
                     const std::vector<std::pair<std::string, Tensor>>& extra, const std::string& extra_text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open checkpoint for writing");
  binio::put_magic(out, "CKPT");
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put_string(out, to_string(net.kind()));
  const auto& items = net.params().items();
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(items.size() + extra.size()));
  for (const auto& p : items) {
    binio::put_string(out, p.name);
    write_tensor(out, p.value);
  }
  for (const auto& [name, t] : extra) {
    binio::put_string(out, name);
    write_tensor(out, t);
  }
  binio::put_string(out, net.config().to_text());
  binio::put_string(out, extra_text);
  out.flush();
  if (!out) throw IoError(path, "write failed");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  try {
    binio::expect_magic(in, "CKPT");
    const auto version = binio::get<std::uint32_t>(in);
    if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
    const std::string kind = binio::get_string(in);
    const auto count = binio::get<std::uint32_t>(in);
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = binio::get_string(in);
      ck.arrays.emplace_back(std::move(name), read_tensor(in));
    }
    std::istringstream cfg(binio::get_string(in));
    ck.config.apply(parse_key_values(cfg, path));
    if (to_string(ck.config.kind) != kind) throw std::runtime_error("model tag disagrees with stored config");
    ck.text = binio::get_string(in);
    return ck;
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(path, e.what());
  }
}

Network load_network(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  auto it = std::find_if(ck.arrays.begin(), ck.arrays.end(), [](const auto& kv) { return kv.first == "theta"; });
  if (it == ck.arrays.end()) throw IoError(path, "checkpoint has no pilot matrix");
  const Tensor& t = it->second;
  PhaseMatrix theta(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (Eigen::Index m = 0; m < theta.rows(); ++m)
    for (Eigen::Index p = 0; p < theta.cols(); ++p) theta(m, p) = t[static_cast<std::size_t>(m * theta.cols() + p)];
  Network net(ck.config, theta);
  net.load_values(ck.arrays);
  return net;
}

}  // namespace xlris::nets
