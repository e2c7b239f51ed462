#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "voxseg/aggregate.hpp"
#include "voxseg/rng.hpp"

using namespace voxseg;

TEST_CASE("average_scales basics") {
  auto out = average_scales({{0.2, 0.4, 0.6, 0.8}});
  CHECK_THAT(out[0], Catch::Matchers::WithinAbs(0.5, 1e-15));

  auto same = average_scales({{0.37, 0.37, 0.37}});
  CHECK_THAT(same[0], Catch::Matchers::WithinAbs(0.37, 1e-15));

  auto pass = average_scales({{0.9}, {0.1}});
  CHECK(pass[0] == 0.9);
  CHECK(pass[1] == 0.1);

  CHECK_THROWS_AS(average_scales({{0.1, 0.2}, {0.3}}), std::invalid_argument);
}

namespace {

SuperpixelMap two_region_map() {
  LabelVolume l({4, 2, 1}, {1, 1, 1});
  l.data = {0, 0, 1, 1, 0, 0, 1, 1};
  return SuperpixelMap::from_labels(std::move(l));
}

}  // namespace

TEST_CASE("paint_voxels paints candidates and zeroes the rest") {
  auto sp = two_region_map();
  CandidateSet cs;
  cs.retained = {0, 1};
  cs.ids = {1};
  Volume p = paint_voxels(sp, cs, {0.7});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x)
      CHECK(p.at(x, y, 0) == (x >= 2 ? 0.7f : 0.0f));

  CHECK_THROWS_WITH(paint_voxels(sp, cs, {}),
                    Catch::Matchers::ContainsSubstring("missing probability"));
}

TEST_CASE("paint_voxels with all-ones probabilities equals the candidate mask") {
  auto sp = two_region_map();
  CandidateSet cs;
  cs.retained = {1, 1};
  cs.ids = {0, 1};
  Volume p = paint_voxels(sp, cs, {1.0, 1.0});
  Mask m = candidate_mask(sp, cs);
  for (size_t i = 0; i < p.data.size(); ++i) CHECK(p.data[i] == float(m.data[i]));
}

TEST_CASE("painted value set is {0} union the probabilities") {
  auto sp = two_region_map();
  CandidateSet cs;
  cs.retained = {0, 1};
  cs.ids = {1};
  Volume p = paint_voxels(sp, cs, {0.37});
  std::set<float> values(p.data.begin(), p.data.end());
  std::set<float> allowed{0.0f, 0.37f};
  for (float v : values) CHECK(allowed.count(v) == 1);
}

TEST_CASE("gaussian smoothing preserves constants bit-exactly") {
  Volume v({6, 5, 4}, {1, 1, 1}, 0.731f);
  Volume s = gaussian_smooth_3d(v, 1.5);
  for (float x : s.data) CHECK(x == 0.731f);
}

TEST_CASE("sigma zero is the identity, bit-level") {
  Volume v({5, 5, 5}, {1, 1, 1});
  Rng rng(3);
  for (auto& x : v.data) x = float(rng.uniform(0, 1));
  Volume s = gaussian_smooth_3d(v, 0.0);
  CHECK(s.data == v.data);
}

TEST_CASE("interior impulse response matches the 3D kernel product") {
  Volume v({15, 15, 15}, {1, 1, 1}, 0.0f);
  v.at(7, 7, 7) = 1.0f;
  double sigma = 1.0;
  Volume s = gaussian_smooth_3d(v, sigma);

  int radius = int(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-i * i / (2 * sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& x : k) x /= sum;

  for (int z = 0; z < 15; ++z)
    for (int y = 0; y < 15; ++y)
      for (int x = 0; x < 15; ++x) {
        double expect = 0;
        if (std::abs(x - 7) <= radius && std::abs(y - 7) <= radius && std::abs(z - 7) <= radius)
          expect = k[x - 7 + radius] * k[y - 7 + radius] * k[z - 7 + radius];
        CHECK_THAT(s.at(x, y, z), Catch::Matchers::WithinAbs(expect, 1e-6));
      }
}

TEST_CASE("smoothing preserves range and interior mass") {
  Volume v({20, 20, 20}, {1, 1, 1}, 0.0f);
  Rng rng(9);
  // Interior-supported blob.
  for (int z = 8; z < 12; ++z)
    for (int y = 8; y < 12; ++y)
      for (int x = 8; x < 12; ++x) v.at(x, y, z) = float(rng.uniform(0.2, 1.0));
  Volume s = gaussian_smooth_3d(v, 1.0);

  float in_min = *std::min_element(v.data.begin(), v.data.end());
  float in_max = *std::max_element(v.data.begin(), v.data.end());
  double mass_in = 0, mass_out = 0;
  for (size_t i = 0; i < v.data.size(); ++i) {
    CHECK(s.data[i] >= in_min - 1e-6f);
    CHECK(s.data[i] <= in_max + 1e-6f);
    mass_in += v.data[i];
    mass_out += s.data[i];
  }
  CHECK_THAT(mass_out, Catch::Matchers::WithinRel(mass_in, 1e-4));
}

TEST_CASE("threshold is strict and monotone") {
  Volume p({3, 1, 1}, {1, 1, 1});
  p.data = {0.5f, 0.6f, 0.7f};
  Mask m6 = threshold(p, OperatingPoint(2, 0.6, 0.0));
  CHECK(m6.data == std::vector<uint8_t>{0, 0, 1});  // 0.6 excluded, strict

  Volume low({2, 1, 1}, {1, 1, 1});
  low.data = {0.4f, 0.5f};
  CHECK(threshold(low, OperatingPoint(0, 0.6, 0.0)).data == std::vector<uint8_t>{0, 0});

  // Higher threshold yields a subset.
  Volume r({64, 1, 1}, {1, 1, 1});
  Rng rng(5);
  for (auto& x : r.data) x = float(rng.uniform(0, 1));
  Mask lo = threshold(r, OperatingPoint(0, 0.3, 0.0));
  Mask hi = threshold(r, OperatingPoint(0, 0.7, 0.0));
  for (size_t i = 0; i < r.data.size(); ++i)
    if (hi.data[i]) CHECK(lo.data[i] == 1);

  CHECK_THROWS_AS(OperatingPoint(0, 1.5, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(OperatingPoint(0, 0.5, -1.0), std::invalid_argument);
}
