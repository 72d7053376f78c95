#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "doctest.h"
#include "gradcheck.hpp"
#include "xlris/errors.hpp"
#include "xlris/nets.hpp"
#include "xlris/sparse.hpp"

using namespace xlris;
using namespace xlris::nets;
using xlris::testing::grad_check;
using xlris::testing::random_tensor;

namespace {

NetConfig tiny(ModelKind kind, int layers) {
  NetConfig c;
  c.kind = kind;
  c.n = 8;
  c.m = 8;
  c.pilots = 6;
  c.layers = layers;
  c.base_width = 4;
  return c;
}

PhaseMatrix pilots(int m, int p, std::uint64_t seed = 3) {
  Rng rng(seed);
  return gen_phase_matrix(m, p, rng);
}

void fill_matching(Network& net, const std::string& needle, double value) {
  for (auto& p : net.params().items())
    if (p.name.find(needle) != std::string::npos) std::fill(p.value.data().begin(), p.value.data().end(), value);
}

Tensor param(Network& net, const std::string& name) {
  const Param* p = net.params().find(name);
  REQUIRE(p != nullptr);
  return p->value;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

double max_abs(const Tensor& a) {
  double d = 0.0;
  for (double v : a.data()) d = std::max(d, std::abs(v));
  return d;
}

// Loop-based same-padding correlation and its adjoint, independent of ops.
std::vector<double> naive_conv(const std::vector<double>& x, int cin, int h, int w, const Tensor& k,
                               const Tensor& bias) {
  const int cout = int(k.dim(0)), ks = int(k.dim(2)), pad = ks / 2;
  std::vector<double> out(std::size_t(cout * h * w), 0.0);
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = bias.defined() ? bias[std::size_t(o)] : 0.0;
        for (int c = 0; c < cin; ++c)
          for (int a = 0; a < ks; ++a)
            for (int b = 0; b < ks; ++b) {
              const int ii = i + a - pad, jj = j + b - pad;
              if (ii < 0 || jj < 0 || ii >= h || jj >= w) continue;
              acc += x[std::size_t((c * h + ii) * w + jj)] * k[std::size_t(((o * cin + c) * ks + a) * ks + b)];
            }
        out[std::size_t((o * h + i) * w + j)] = acc;
      }
  return out;
}

std::vector<double> naive_conv_adjoint(const std::vector<double>& g, int h, int w, const Tensor& k) {
  const int s = int(k.dim(0)), cin = int(k.dim(1)), ks = int(k.dim(2)), pad = ks / 2;
  std::vector<double> out(std::size_t(cin * h * w), 0.0);
  for (int o = 0; o < s; ++o)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int c = 0; c < cin; ++c)
          for (int a = 0; a < ks; ++a)
            for (int b = 0; b < ks; ++b) {
              const int ii = i + a - pad, jj = j + b - pad;
              if (ii < 0 || jj < 0 || ii >= h || jj >= w) continue;
              out[std::size_t((c * h + ii) * w + jj)] +=
                  g[std::size_t((o * h + i) * w + j)] * k[std::size_t(((o * cin + c) * ks + a) * ks + b)];
            }
  return out;
}

std::vector<double> image_values(const CMat& h) {
  const Tensor t = channel_to_image(h);
  return {t.data().begin(), t.data().end()};
}

CMat image_from_values(const std::vector<double>& v, int n, int m) {
  return image_to_channel(Tensor({2, std::size_t(n), std::size_t(m)}, v));
}

}  // namespace

TEST_CASE("channel image round trip and layout") {
  Rng rng(5);
  CMat h(3, 4);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.complex_normal();
  const Tensor img = channel_to_image(h);
  CHECK(img.shape() == Shape{2, 3, 4});
  CHECK(img[1 * 4 + 2] == h(1, 2).real());
  CHECK(img[12 + 1 * 4 + 2] == h(1, 2).imag());
  CHECK((image_to_channel(img) - h).norm() == 0.0);
  const Tensor y = observation_to_image(vec(h), 3);
  CHECK(max_abs_diff(y, img) == 0.0);
  CHECK_THROWS_AS(observation_to_image(CVec::Zero(7), 3), DimensionError);
}

TEST_CASE("parameter counts match the published dictionary sizes") {
  NetConfig c;
  c.n = 8;
  c.m = 64;
  c.pilots = 32;
  const PhaseMatrix theta = pilots(64, 32);

  c.kind = ModelKind::cista;
  Network cista(c, theta);
  auto r = param_count(cista);
  CHECK(r.groups["dictionary"] == 608);
  CHECK(r.total == 608);
  CHECK(r.forward_macs > 0);

  c.kind = ModelKind::cista_plus;
  Network plus(c, theta);
  r = param_count(plus);
  CHECK(r.groups["dictionary"] == 608 * 13 * 2);
  CHECK(r.groups["final"] == 578);
  CHECK(r.groups["measurement"] == std::size_t(2 * 13 * 64 * 32));

  c.kind = ModelKind::cnncdl;
  Network cdl(c, theta);
  r = param_count(cdl);
  CHECK(r.groups["fblock"] == 1186 * 5 * 2);
  CHECK(r.groups["prelu"] == 32 * 5 * 2);
  CHECK(r.groups["step"] == 5);
  CHECK(r.groups["pmm"] > 0);
  CHECK(r.groups["clfi"] > 0);
  CHECK(cdl.params().find("layer0.clfi1.fuse.kernel") == nullptr);
  CHECK(cdl.params().find("layer1.clfi1.fuse.kernel") != nullptr);
}

TEST_CASE("config text and validation") {
  NetConfig c = tiny(ModelKind::cista_plus, 3);
  c.init_step = 0.25;
  std::istringstream in(c.to_text());
  NetConfig back;
  back.apply(parse_key_values(in, "mem"));
  CHECK(back.to_text() == c.to_text());
  CHECK(back.resolved_layers() == 3);
  CHECK(NetConfig{}.resolved_layers() == 17);
  CHECK_THROWS_AS(parse_model_kind("cnn"), ConfigError);

  CHECK_THROWS_AS(Network(c, pilots(8, 5)), DimensionError);
  NetConfig odd = tiny(ModelKind::cnncdl, 1);
  odd.m = 6;
  CHECK_THROWS_AS(Network(odd, pilots(6, 6)), ConfigError);
  Network net(tiny(ModelKind::cista, 2), pilots(8, 6));
  Tape tape(false);
  CHECK_THROWS_AS(net.forward(tape, Tensor::zeros({2, 8, 5})), DimensionError);
}

TEST_CASE("cista: zero step keeps the coefficient maps at zero") {
  Network net(tiny(ModelKind::cista, 4), pilots(8, 6));
  fill_matching(net, "fixed.step", 0.0);
  std::mt19937_64 gen(1);
  Tape tape(false);
  const auto out = net.forward(tape, random_tensor({2, 8, 6}, gen));
  CHECK(max_abs(out.coeffs) == 0.0);
  CHECK(max_abs(out.h_hat) == 0.0);
}

TEST_CASE("cista: unthresholded layers match a straight-line reference") {
  for (int layers : {1, 2}) {
    Network net(tiny(ModelKind::cista, layers), pilots(8, 6));
    fill_matching(net, "fixed.threshold", 0.0);
    std::mt19937_64 gen(2);
    Tensor bias = param(net, "dict.bias");
    for (double& v : bias.data()) v = 0.1 * std::normal_distribution<double>()(gen);
    const Tensor y = random_tensor({2, 8, 6}, gen);
    const double step = param(net, "fixed.step")[0];
    const Tensor& k = net.cista_dictionary().kernel;
    const PhaseMatrix theta = net.theta_matrix();
    const CMat y_c = image_to_channel(y);

    std::vector<double> g(32 * 8 * 8, 0.0);
    for (int l = 0; l < layers; ++l) {
      const CMat h = image_from_values(naive_conv_adjoint(g, 8, 8, k), 8, 8);
      const CMat back = (y_c - h * theta) * theta.transpose();
      const auto upd = naive_conv(image_values(back), 2, 8, 8, k, bias);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += step * upd[i];
    }
    Tape tape(false);
    const auto out = net.forward(tape, y);
    CHECK(max_abs_diff(out.coeffs, Tensor({32, 8, 8}, g)) <= 1e-12);
    CHECK(max_abs_diff(out.h_hat, Tensor({2, 8, 8}, naive_conv_adjoint(g, 8, 8, k))) <= 1e-12);
  }
}

TEST_CASE("cista with a unit dictionary and no threshold is plain ISTA") {
  NetConfig c = tiny(ModelKind::cista, 40);
  c.atoms = 2;
  c.kernel = 1;
  const PhaseMatrix theta = pilots(8, 6);
  Network net(c, theta);
  Tensor k = param(net, "dict.kernel");
  std::fill(k.data().begin(), k.data().end(), 0.0);
  k.data()[0] = 1.0;  // [0,0]
  k.data()[3] = 1.0;  // [1,1]
  fill_matching(net, "dict.bias", 0.0);
  fill_matching(net, "fixed.threshold", 0.0);
  const double step = param(net, "fixed.step")[0];

  Rng rng(8);
  CMat h(8, 8);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.complex_normal();
  Observation obs;
  obs.y = apply_phi(vec(h), theta, 8);
  obs.snr_db = kNoiseless;
  const auto ref = ista_solve(obs, theta, identity_dictionary(8, 8), 0.0, step, 40);

  Tape tape(false);
  const auto out = net.forward(tape, observation_to_image(obs.y, 8));
  CHECK((vec(image_to_channel(out.h_hat)) - ref.h_hat).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("cista_plus: first layer agrees with cista under tied weights") {
  const PhaseMatrix theta = pilots(8, 6);
  Network a(tiny(ModelKind::cista, 1), theta);
  Network b(tiny(ModelKind::cista_plus, 1), theta);
  const Tensor& k = a.cista_dictionary().kernel;
  for (const char* name : {"layer0.A.kernel", "layer0.D.kernel"}) {
    Tensor t = param(b, name);
    std::copy(k.data().begin(), k.data().end(), t.data().begin());
  }
  fill_matching(a, "fixed.step", 0.3);
  fill_matching(b, "layer0.step", 0.3);
  std::mt19937_64 gen(4);
  const Tensor y = random_tensor({2, 8, 6}, gen);
  Tape tape(false);
  const auto za = a.forward(tape, y, true).z.at(0);
  const auto zb = b.forward(tape, y, true).z.at(0);
  CHECK(max_abs_diff(za, zb) <= 1e-12);
}

TEST_CASE("cista_plus: zero steps give the bias-only image") {
  Network net(tiny(ModelKind::cista_plus, 3), pilots(8, 6));
  fill_matching(net, ".step", 0.0);
  Tensor fb = param(net, "final.bias");
  fb.data()[0] = 0.3;
  fb.data()[1] = -0.7;
  std::mt19937_64 gen(5);
  Tape tape(false);
  const auto out = net.forward(tape, random_tensor({2, 8, 6}, gen), true);
  for (const auto& g : out.layers) CHECK(max_abs(g) == 0.0);
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(out.h_hat[i] == 0.3);
    CHECK(out.h_hat[64 + i] == -0.7);
  }
}

TEST_CASE("gdm: zero step and identity blocks") {
  Network net(tiny(ModelKind::cnncdl, 1), pilots(8, 6));
  std::mt19937_64 gen(6);
  const Tensor y = random_tensor({2, 8, 6}, gen);
  const Tensor g = random_tensor({2, 8, 8}, gen);
  GdmWeights w = net.gdm(0);
  Tape tape(false);
  {
    const double keep = w.step[0];
    w.step.data()[0] = 0.0;
    CHECK(max_abs_diff(gdm_forward(tape, w, g, y), g) == 0.0);
    w.step.data()[0] = keep;
  }
  fill_matching(net, ".FA.c", 0.0);
  fill_matching(net, ".FD.c", 0.0);
  CHECK(max_abs_diff(fblock_forward(tape, w.fa, g), g) == 0.0);
  const PhaseMatrix theta = net.theta_matrix();
  const CMat gc = image_to_channel(g);
  const CMat expect = gc + w.step[0] * (image_to_channel(y) - gc * theta) * theta.transpose();
  CHECK((image_to_channel(gdm_forward(tape, w, g, y)) - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("csa, cb and clfi blocks") {
  ParamList ps;
  Rng rng(9);
  std::mt19937_64 gen(10);
  const auto csa = make_csa(ps, "csa", 3, rng);
  const auto cb = make_cb(ps, "cb", 3, 0.1, rng);
  const auto clfi = make_clfi(ps, "clfi", 3, rng);
  // Move the attention maps off their constant start so every path is exercised.
  for (auto& p : ps.items())
    for (double& v : p.value.data()) v += 0.2 * std::normal_distribution<double>()(gen);

  const Tensor x = random_tensor({3, 5, 7}, gen, true);
  const Tensor pe = random_tensor({3, 5, 7}, gen, true);
  const Tensor pd = random_tensor({3, 5, 7}, gen, true);
  Tape tape(false);
  CHECK(csa_forward(tape, csa, x).shape() == x.shape());
  CHECK(cb_forward(tape, cb, x).shape() == x.shape());
  CHECK(clfi_forward(tape, clfi, x, pe, pd).shape() == x.shape());
  CHECK_THROWS_AS(clfi_forward(tape, clfi, x, random_tensor({3, 4, 7}, gen), pd), DimensionError);

  std::vector<Tensor> leaves{x, pe, pd};
  for (const auto& p : ps.items()) leaves.push_back(p.value);
  auto r = grad_check([&](Tape& t) { return csa_forward(t, csa, x); }, leaves);
  CHECK_MESSAGE(r.worst_rel_err <= 1e-4, r.worst_where);
  r = grad_check([&](Tape& t) { return cb_forward(t, cb, x); }, leaves);
  CHECK_MESSAGE(r.worst_rel_err <= 1e-4, r.worst_where);
  r = grad_check([&](Tape& t) { return clfi_forward(t, clfi, x, pe, pd); }, leaves);
  CHECK_MESSAGE(r.worst_rel_err <= 1e-4, r.worst_where);

  auto zero = [&](const std::string& prefix) {
    for (auto& p : ps.items())
      if (p.name.rfind(prefix, 0) == 0) std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
  };
  zero("csa.s_pw2");
  zero("csa.c_pw");
  CHECK(max_abs(csa_forward(tape, csa, x)) == 0.0);
  zero("cb.st_");
  zero("cb.ff2");
  CHECK(max_abs_diff(cb_forward(tape, cb, x), x) <= 1e-15);
  zero("clfi.");
  CHECK(max_abs(clfi_forward(tape, clfi, x, pe, pd)) == 0.0);
}

TEST_CASE("pmm: shape, linear collapse and gradients") {
  ParamList ps;
  Rng rng(11);
  std::mt19937_64 gen(12);
  const auto w = make_pmm(ps, "pmm", 4, 0.1, rng);
  for (auto& p : ps.items())
    for (double& v : p.value.data()) v += 0.1 * std::normal_distribution<double>()(gen);
  const Tensor z = random_tensor({2, 8, 8}, gen, true);
  Tape tape(false);
  auto [out, feats] = pmm_forward(tape, w, z, nullptr);
  CHECK(out.shape() == z.shape());
  CHECK(feats.enc1.shape() == Shape{4, 8, 8});
  CHECK(feats.enc2.shape() == Shape{8, 4, 4});
  CHECK(feats.dec2.shape() == Shape{8, 4, 4});
  CHECK_THROWS_AS(pmm_forward(tape, w, Tensor::zeros({2, 8, 6}), nullptr), ConfigError);

  std::vector<Tensor> leaves{z};
  for (const auto& p : ps.items()) leaves.push_back(p.value);
  auto r = grad_check([&](Tape& t) { return pmm_forward(t, w, z, nullptr).first; }, leaves, 13, 6);
  CHECK_MESSAGE(r.worst_rel_err <= 1e-4, r.worst_where);

  // With every block body silenced, the module is z + out(merge1(up1(...), in(z))).
  for (auto& p : ps.items()) {
    const bool silenced = p.name.find(".st_") != std::string::npos || p.name.find(".ff2") != std::string::npos ||
                          p.name.find(".csa.s_pw2") != std::string::npos;
    if (silenced) std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
  }
  const Tensor got = pmm_forward(tape, w, z, nullptr).first;
  Tensor x = w.in(tape, z);
  const Tensor e1 = x;
  const Tensor e2 = w.down1(tape, e1);
  x = w.down2(tape, e2);
  x = w.merge2(tape, ops::concat_channels(tape, ops::pixel_shuffle(tape, w.up2(tape, x), 2), e2));
  x = w.merge1(tape, ops::concat_channels(tape, ops::pixel_shuffle(tape, w.up1(tape, x), 2), e1));
  const Tensor expect = ops::add(tape, z, w.out(tape, x));
  CHECK(max_abs_diff(got, expect) <= 1e-12);
  // Linear in z once the biases are removed as well.
  for (auto& p : ps.items())
    if (p.name.find(".bias") != std::string::npos) std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
  const Tensor z2 = random_tensor({2, 8, 8}, gen);
  const Tensor lhs = pmm_forward(tape, w, ops::add(tape, ops::scale(tape, z, 2.0), z2), nullptr).first;
  const Tensor rhs =
      ops::add(tape, ops::scale(tape, pmm_forward(tape, w, z, nullptr).first, 2.0), pmm_forward(tape, w, z2, nullptr).first);
  CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
}

TEST_CASE("cnncdl: per-layer outputs, zero-step collapse and determinism") {
  const PhaseMatrix theta = pilots(8, 6);
  Network a(tiny(ModelKind::cnncdl, 3), theta);
  Network b(tiny(ModelKind::cnncdl, 3), theta);
  std::mt19937_64 gen(14);
  const Tensor y = random_tensor({2, 8, 6}, gen);
  Tape tape(false);
  const auto oa = a.forward(tape, y, true);
  const auto ob = b.forward(tape, y, true);
  REQUIRE(oa.layers.size() == 3);
  for (const auto& g : oa.layers) CHECK(g.shape() == Shape{2, 8, 8});
  CHECK(max_abs_diff(oa.h_hat, ob.h_hat) == 0.0);
  CHECK(max_abs_diff(oa.h_hat, oa.layers.back()) == 0.0);

  fill_matching(a, ".step", 0.0);
  const auto oz = a.forward(tape, y, true);
  CHECK(max_abs(oz.z[0]) == 0.0);
  for (std::size_t k = 1; k < 3; ++k) CHECK(max_abs_diff(oz.z[k], oz.layers[k - 1]) == 0.0);
}

TEST_CASE("full models differentiate end to end") {
  for (ModelKind kind : {ModelKind::cista, ModelKind::cista_plus, ModelKind::cnncdl}) {
    NetConfig c = tiny(kind, 2);
    if (kind != ModelKind::cnncdl) c.atoms = 4;
    Network net(c, pilots(8, 6));
    std::mt19937_64 gen(15);
    // Nudge every parameter so no block sits at a degenerate start.
    for (auto& p : net.params().items())
      if (p.value.requires_grad())
        for (double& v : p.value.data()) v += 0.05 * std::normal_distribution<double>()(gen);
    const Tensor y = random_tensor({2, 8, 6}, gen);
    const Tensor h = random_tensor({2, 8, 8}, gen);
    std::vector<Tensor> leaves;
    for (const auto& p : net.params().items())
      if (p.value.requires_grad()) leaves.push_back(p.value);
    LossInputs in{&y, &h};
    auto r = grad_check(
        [&](Tape& t) {
          const auto out = net.forward(t, y);
          return compute_loss(t, net, out, in);
        },
        leaves, 16, 3);
    INFO(to_string(kind));
    CHECK_MESSAGE(r.worst_rel_err <= 1e-4, r.worst_where);
  }
}

TEST_CASE("losses") {
  const PhaseMatrix theta = pilots(8, 6);
  std::mt19937_64 gen(17);
  const Tensor h = random_tensor({2, 8, 8}, gen);
  const Tensor y = random_tensor({2, 8, 6}, gen);
  Tape tape(false);
  double hh = 0.0;
  for (double v : h.data()) hh += v * v;

  Network plus(tiny(ModelKind::cista_plus, 2), theta);
  ForwardResult perfect;
  perfect.h_hat = h;
  CHECK(compute_loss(tape, plus, perfect, {nullptr, &h}).item() == 0.0);
  CHECK_THROWS_AS(compute_loss(tape, plus, perfect, {&y, nullptr}), ArgumentError);

  Network cdl(tiny(ModelKind::cnncdl, 4), theta);
  ForwardResult layers;
  layers.layers = {h, h, h, h};
  CHECK(compute_loss(tape, cdl, layers, {nullptr, &h}).item() == 0.0);
  layers.layers = {Tensor::zeros({2, 8, 8}), Tensor::zeros({2, 8, 8}), h, Tensor::zeros({2, 8, 8})};
  CHECK(compute_loss(tape, cdl, layers, {nullptr, &h}).item() == doctest::Approx(3.0 * hh).epsilon(1e-14));
  CHECK_THROWS_AS(compute_loss(tape, cdl, layers, {&y, nullptr}), ArgumentError);

  Network cista(tiny(ModelKind::cista, 2), theta);
  fill_matching(cista, "fixed.step", 0.0);
  const auto out = cista.forward(tape, y);
  double yy = 0.0;
  for (double v : y.data()) yy += v * v;
  CHECK(compute_loss(tape, cista, out, {&y, nullptr}).item() == doctest::Approx(yy).epsilon(1e-14));
}

TEST_CASE("checkpoint round trip") {
  const std::string path = "test_nets_roundtrip.ckpt";
  for (ModelKind kind : {ModelKind::cista, ModelKind::cista_plus, ModelKind::cnncdl}) {
    Network net(tiny(kind, 2), pilots(8, 6));
    std::mt19937_64 gen(18);
    for (auto& p : net.params().items())
      if (p.value.requires_grad())
        for (double& v : p.value.data()) v += 0.01 * std::normal_distribution<double>()(gen);
    save_checkpoint(path, net, {{"extra.counter", Tensor::scalar(4.0)}}, "epoch = 3\n");
    const Network back = load_network(path);
    CHECK(back.kind() == kind);
    CHECK(back.config().to_text() == net.config().to_text());
    const Tensor y = random_tensor({2, 8, 6}, gen);
    Tape tape(false);
    CHECK(max_abs_diff(back.forward(tape, y).h_hat, net.forward(tape, y).h_hat) == 0.0);
    const auto ck = read_checkpoint(path);
    CHECK(ck.text == "epoch = 3\n");
    CHECK(ck.arrays.back().first == "extra.counter");
  }
  std::remove(path.c_str());
  CHECK_THROWS_AS(read_checkpoint("does_not_exist.ckpt"), IoError);
}
