#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "xlris/channel.hpp"
#include "xlris/errors.hpp"

using namespace xlris;
constexpr double pi = std::numbers::pi;

TEST_CASE("rayleigh distance") {
  CHECK(rayleigh_distance(0.9, 0.03) == doctest::Approx(54.0).epsilon(1e-14));
  auto full = ScenarioConfig::full();
  CHECK(std::abs(full.rayleigh_m() - 62.4) <= 0.05);
  CHECK(rayleigh_distance(0.0, 0.03) == 0.0);
  CHECK_THROWS_AS(rayleigh_distance(-1.0, 0.03), ArgumentError);
  CHECK_THROWS_AS(rayleigh_distance(1.0, -0.03), ArgumentError);
}

TEST_CASE("ula steering") {
  auto a = ula_steering(0.0, 5);
  for (int k = 0; k < 5; ++k) CHECK(std::abs(a[k] - cdouble(1.0 / std::sqrt(5.0), 0)) <= 1e-15);
  Rng rng(3);
  for (int t = 0; t < 10; ++t) CHECK(std::abs(ula_steering(rng.uniform(-pi, pi), 9).norm() - 1.0) <= 1e-14);
  auto b = ula_steering(pi / 2, 2);
  CHECK(std::abs(b[0] - 1.0 / std::sqrt(2.0)) <= 1e-15);
  CHECK(std::abs(b[1] + 1.0 / std::sqrt(2.0)) <= 1e-15);
}

TEST_CASE("upa far steering") {
  auto flat = upa_far_steering(pi / 2, pi / 2, 4, 3);
  for (int i = 0; i < 12; ++i) CHECK(std::abs(flat[i] - 1.0 / std::sqrt(12.0)) <= 1e-15);
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const double phi = rng.uniform(-pi, pi), varphi = rng.uniform(-pi, pi);
    auto b = upa_far_steering(phi, varphi, 5, 3);
    CHECK(std::abs(b.norm() - 1.0) <= 1e-14);
    CMat v = upa_vertical(phi, 5), h = upa_horizontal(phi, varphi, 3);
    CHECK((kron(v, h).col(0) - b).norm() <= 1e-14);
  }
}

TEST_CASE("near steering") {
  auto c = ScenarioConfig::desk();
  auto b = near_steering({1.3, -0.2, 0.4}, c);
  for (int i = 0; i < c.m(); ++i) CHECK(std::abs(std::abs(b[i]) - 1.0 / std::sqrt(double(c.m()))) <= 1e-15);

  ScenarioConfig pair = c;
  pair.m1 = 1;
  pair.m2 = 2;
  auto s = near_steering({2.0, 0.0, 0.0}, pair);
  CHECK(std::abs(s[0] - s[1]) <= 1e-15);

  // Far-field limit at ten Rayleigh distances.
  const double r = 10 * c.rayleigh_m();
  for (auto [phi, varphi] : {std::pair{1.2, 0.4}, std::pair{0.7, -0.9}, std::pair{2.0, 0.1}}) {
    const std::array<double, 3> xyz{r * std::sin(phi) * std::sin(varphi), r * std::sin(phi) * std::cos(varphi),
                                    r * std::cos(phi)};
    auto near = near_steering(xyz, c);
    auto far = upa_far_steering(phi, varphi, c.m1, c.m2);
    CHECK(std::abs(far.dot(near)) >= 0.99);
  }
  // On an element: distance 0 is fine.
  auto on = ris_element_position(0, 0, c);
  auto e = near_steering({on.x(), on.y(), on.z()}, c);
  CHECK(std::isfinite(std::abs(e[0])));
}

TEST_CASE("sample paths") {
  auto c = ScenarioConfig::desk();
  c.l_far = 3;
  c.l_near = 3;
  Rng rng(5);
  auto ps = sample_paths(c, rng);
  REQUIRE(ps.user_paths.size() == 6);
  int near = 0;
  for (const auto& p : ps.user_paths) {
    if (p.kind == PathKind::near) {
      ++near;
      CHECK(std::hypot(p.xyz[0], p.xyz[1], p.xyz[2]) <= c.rayleigh_m());
      CHECK(p.xyz[0] >= c.nearfield_region.x_lo);
      CHECK(p.xyz[0] <= c.nearfield_region.x_hi);
    } else {
      CHECK(p.elev >= c.angle_lo);
      CHECK(p.elev <= c.angle_hi);
    }
  }
  CHECK(near == 3);
  CHECK(ps.bs_paths.size() == std::size_t(c.l1));

  c.l_far = 6;
  c.l_near = 0;
  c.nearfield_region = {1, 0, 0, 0, 0, 0};
  auto far = sample_paths(c, rng);
  for (const auto& p : far.user_paths) CHECK(p.kind == PathKind::far);

  auto c2 = ScenarioConfig::desk();
  Rng r1(9), r2(9);
  auto p1 = sample_paths(c2, r1), p2 = sample_paths(c2, r2);
  CHECK(assemble_channels(p1, c2).h_matrix == assemble_channels(p2, c2).h_matrix);

  c2.nearfield_region = {2, 1, 0, 0, 0, 0};
  CHECK_THROWS_AS(sample_paths(c2, r1), ConfigError);
}

TEST_CASE("config validation and parsing") {
  auto c = ScenarioConfig::desk();
  c.nearfield_region = {3, 5, -15, 10, -10.5, 0};  // full-scale box is outside the desk Rayleigh distance
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(ScenarioConfig::full().validate());

  std::istringstream in("# scenario\nscale = full\nl1 = 4   # override\nseed = 99\n");
  ScenarioConfig p;
  p.apply(parse_key_values(in));
  CHECK(p.n_bs == 32);
  CHECK(p.l1 == 4);
  CHECK(p.seed == 99);
  std::istringstream bad("bogus = 1\n");
  CHECK_THROWS_AS(p.apply(parse_key_values(bad)), ConfigError);
  std::istringstream round(ScenarioConfig::desk().to_text());
  ScenarioConfig q = ScenarioConfig::full();
  q.apply(parse_key_values(round));
  CHECK(q.to_text() == ScenarioConfig::desk().to_text());
}

TEST_CASE("assemble channels") {
  auto c = ScenarioConfig::desk();
  c.l1 = 1;
  c.l_far = 0;
  c.l_near = 1;
  Rng rng(6);
  auto ch = assemble_channels(sample_paths(c, rng), c);
  Eigen::JacobiSVD<CMat> svd(ch.h_matrix);
  CHECK(svd.singularValues()[1] <= 1e-12 * svd.singularValues()[0]);
  CHECK((ch.h_matrix - ch.g_matrix * ch.h_user.asDiagonal().toDenseMatrix()).norm() <= 1e-12 * ch.h_matrix.norm());

  auto full = ScenarioConfig::desk();
  for (int t = 0; t < 20; ++t) {
    auto ps = sample_paths(full, rng);
    auto cc = assemble_channels(ps, full);
    CHECK((cascaded_factored(ps, full) - cc.h_matrix).norm() <= 1e-10 * cc.h_matrix.norm());
  }

  auto ps = sample_paths(full, rng);
  for (auto& p : ps.bs_paths) p.gain = 0;
  for (auto& p : ps.user_paths) p.gain = 0;
  CHECK(assemble_channels(ps, full).h_matrix.norm() == 0.0);
}

TEST_CASE("hybrid dispatch uses far response beyond the Rayleigh distance") {
  auto c = ScenarioConfig::desk();
  const double r = 1.5 * c.rayleigh_m();
  UserPath p{cdouble(1, 0), PathKind::near, 0, 0, {0.3 * r, 0.8 * r, std::sqrt(1 - 0.73) * r}};
  auto [phi, varphi] = direction_angles(p.xyz);
  CHECK((user_path_response(p, c) - upa_far_steering(phi, varphi, c.m1, c.m2)).norm() <= 1e-14);
  p.xyz = {1.0, 0.2, 0.1};
  CHECK((user_path_response(p, c) - near_steering(p.xyz, c)).norm() <= 1e-14);
}
