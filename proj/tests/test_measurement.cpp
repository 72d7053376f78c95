#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "xlris/errors.hpp"
#include "xlris/measurement.hpp"

using namespace xlris;

namespace {

CVec random_cvec(Eigen::Index n, Rng& rng) {
  CVec v(n);
  for (auto& e : v) e = rng.complex_normal();
  return v;
}

CMat dense_phi(const PhaseMatrix& theta, int n) {
  return kron(theta.transpose().cast<cdouble>(), CMat::Identity(n, n));
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("phase matrix entries") {
  Rng rng(1);
  auto t = gen_phase_matrix(16, 200, rng);
  const double a = 1.0 / 4.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) CHECK(std::abs(t.data()[i]) == a);
  CHECK(std::abs(t.mean()) <= 3.0 / std::sqrt(16.0 * 200.0));
  Rng r1(2), r2(2);
  CHECK(gen_phase_matrix(8, 5, r1) == gen_phase_matrix(8, 5, r2));
  CHECK_THROWS_AS(gen_phase_matrix(0, 5, r1), ArgumentError);
}

TEST_CASE("measurement operator matches the dense Kronecker form") {
  Rng rng(3);
  for (int n : {1, 2, 4})
    for (int m : {1, 3, 8})
      for (int p : {1, 2, 4}) {
        auto theta = gen_phase_matrix(m, p, rng);
        auto h = random_cvec(n * m, rng);
        auto r = random_cvec(n * p, rng);
        const CMat phi = dense_phi(theta, n);
        CHECK((apply_phi(h, theta, n) - phi * h).norm() <= 1e-12 * (1 + h.norm()));
        CHECK((apply_phi_adjoint(r, theta, n) - phi.adjoint() * r).norm() <= 1e-12 * (1 + r.norm()));
      }
}

TEST_CASE("measurement operator basics") {
  Rng rng(4);
  const int n = 4, m = 8;
  PhaseMatrix col = PhaseMatrix::Constant(m, 1, 1.0 / std::sqrt(double(m)));
  auto h = random_cvec(n * m, rng);
  const CMat H = unvec(h, n);
  CHECK((apply_phi(h, col, n) - H.rowwise().sum() / std::sqrt(double(m))).norm() <= 1e-12);

  auto theta = gen_phase_matrix(m, 3, rng);
  auto h2 = random_cvec(n * m, rng);
  const cdouble a(0.3, -1.2), b(2.0, 0.5);
  CHECK((apply_phi(a * h + b * h2, theta, n) - (a * apply_phi(h, theta, n) + b * apply_phi(h2, theta, n))).norm() <=
        1e-12);
  for (int t = 0; t < 100; ++t) {
    auto x = random_cvec(n * m, rng);
    auto r = random_cvec(n * 3, rng);
    CHECK(std::abs(apply_phi(x, theta, n).dot(r) - x.dot(apply_phi_adjoint(r, theta, n))) <= 1e-12 * 100);
  }
  CHECK(apply_phi_adjoint(CVec::Zero(n * 3), theta, n).norm() == 0.0);
  CHECK_THROWS_AS(apply_phi(CVec::Zero(7), theta, n), DimensionError);
  CHECK_THROWS_AS(apply_phi_adjoint(CVec::Zero(7), theta, n), DimensionError);

  Eigen::JacobiSVD<CMat> dense(dense_phi(theta, n));
  Eigen::JacobiSVD<Eigen::MatrixXd> small(theta);
  CHECK(std::abs(dense.singularValues()[0] - small.singularValues()[0]) <= 1e-12);
}

TEST_CASE("observe") {
  auto c = ScenarioConfig::desk();
  Rng rng(5);
  auto ch = assemble_channels(sample_paths(c, rng), c);
  auto theta = gen_phase_matrix(c.m(), 16, rng);
  auto clean = observe(ch, theta, kNoiseless, rng);
  CHECK((clean.y - vec(ch.h_matrix * theta.cast<cdouble>())).norm() == 0.0);
  CHECK(clean.y.size() == c.n_bs * 16);

  const CVec signal = clean.y;
  double mean_db = 0.0;
  for (int t = 0; t < 1000; ++t) {
    auto o = observe(ch, theta, 5.0, rng);
    mean_db += 10 * std::log10(signal.squaredNorm() / (o.y - signal).squaredNorm()) / 1000.0;
  }
  CHECK(std::abs(mean_db - 5.0) <= 0.5);

  CascadedChannel zero{CMat::Zero(c.n_bs, c.m()), CMat::Zero(c.n_bs, c.m()), CVec::Zero(c.m())};
  CHECK(observe(zero, theta, 10.0, rng).y.norm() > 0.0);
}

TEST_CASE("dataset generation and persistence") {
  auto c = ScenarioConfig::desk();
  auto ds = make_dataset(c, 10, 0.0, 10.0, 8, 42);
  REQUIRE(ds.samples.size() == 10);
  for (const auto& s : ds.samples) {
    CHECK(s.obs.snr_db >= 0.0);
    CHECK(s.obs.snr_db <= 10.0);
    CHECK(s.theta == ds.samples[0].theta);
  }
  const std::string a = "ds_test_a.xrcd", b = "ds_test_b.xrcd";
  save_dataset(a, ds);
  save_dataset(b, make_dataset(c, 10, 0.0, 10.0, 8, 42));
  CHECK(file_bytes(a) == file_bytes(b));
  CHECK(file_bytes(a).substr(0, 4) == "XRCD");

  auto back = load_dataset(a);
  REQUIRE(back.samples.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& s = back.samples[i];
    CHECK(s.channel.h_matrix == ds.samples[i].channel.h_matrix);
    CHECK(s.obs.y == ds.samples[i].obs.y);
    CHECK(s.paths.user_paths.size() == ds.samples[i].paths.user_paths.size());
    // y is H*Theta plus noise of the recorded power.
    const CVec noise = s.obs.y - vec(s.channel.h_matrix * s.theta.cast<cdouble>());
    CHECK(noise.squaredNorm() / double(noise.size()) == doctest::Approx(s.obs.sigma2).epsilon(0.8));
    CHECK((assemble_channels(s.paths, back.config).h_matrix - s.channel.h_matrix).norm() <=
          1e-12 * s.channel.h_matrix.norm());
  }
  std::remove(a.c_str());
  std::remove(b.c_str());
  CHECK_THROWS_AS(load_dataset("/nonexistent/dir/x.xrcd"), IoError);
  CHECK_THROWS_AS(save_dataset("/nonexistent/dir/x.xrcd", ds), IoError);
}
