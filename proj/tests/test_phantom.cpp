#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "voxseg/phantom.hpp"

using namespace voxseg;

TEST_CASE("phantom is deterministic in the spec") {
  PhantomSpec spec;
  spec.seed = 42;
  spec.dims = {32, 32, 32};
  spec.target_fraction = 0.01;
  spec.noise_sigma = 0.02;
  auto [v1, m1] = make_phantom(spec);
  auto [v2, m2] = make_phantom(spec);
  CHECK(v1 == v2);
  CHECK(m1 == m2);

  spec.seed = 43;
  auto [v3, m3] = make_phantom(spec);
  CHECK(v3.data != v1.data);
}

TEST_CASE("foreground count within +-50% of target fraction") {
  PhantomSpec spec;
  spec.seed = 7;
  spec.dims = {64, 64, 64};
  spec.target_fraction = 0.005;
  auto [v, m] = make_phantom(spec);
  size_t fg = 0;
  for (auto b : m.data) fg += b;
  CHECK(fg >= 655);
  CHECK(fg <= 1966);
}

TEST_CASE("zero noise yields piecewise-constant intensities") {
  PhantomSpec spec;
  spec.seed = 11;
  spec.dims = {40, 40, 40};
  spec.organ_count = 4;
  spec.noise_sigma = 0.0;
  auto [v, m] = make_phantom(spec);
  std::set<float> levels(v.data.begin(), v.data.end());
  CHECK(levels.size() >= 2);
  CHECK(levels.size() <= size_t(spec.organ_count) + 1);
}

TEST_CASE("foreground is a single 26-connected component") {
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    PhantomSpec spec;
    spec.seed = seed;
    spec.dims = {48, 48, 40};
    spec.target_fraction = 0.02;
    auto [v, m] = make_phantom(spec);
    CHECK(connected_components_26(m) == 1);
  }
}

TEST_CASE("cross-sections vary across slices") {
  PhantomSpec spec;
  spec.seed = 3;
  spec.dims = {64, 64, 64};
  spec.target_fraction = 0.02;
  auto [v, m] = make_phantom(spec);
  // Count per-slice foreground area; a tube with varying harmonics should
  // produce several distinct nonzero areas.
  std::set<int> areas;
  for (int z = 0; z < m.nz(); ++z) {
    int a = 0;
    for (int y = 0; y < m.ny(); ++y)
      for (int x = 0; x < m.nx(); ++x) a += m.at(x, y, z);
    if (a > 0) areas.insert(a);
  }
  CHECK(areas.size() >= 5);
}

TEST_CASE("infeasible target fraction rejected") {
  PhantomSpec spec;
  spec.target_fraction = 0.0;
  CHECK_THROWS_AS(make_phantom(spec), std::invalid_argument);
  spec.target_fraction = 1.0;
  CHECK_THROWS_AS(make_phantom(spec), std::invalid_argument);
  spec.target_fraction = 0.01;
  spec.organ_count = 0;
  CHECK_THROWS_AS(make_phantom(spec), std::invalid_argument);
}

TEST_CASE("distractors exist and do not join the mask") {
  PhantomSpec spec;
  spec.seed = 21;
  spec.dims = {48, 48, 48};
  spec.organ_count = 4;
  spec.target_fraction = 0.01;
  spec.noise_sigma = 0.0;
  auto [v, m] = make_phantom(spec);
  // Some non-mask voxel must carry a non-background intensity.
  bool distractor_found = false;
  for (size_t i = 0; i < v.data.size(); ++i)
    if (!m.data[i] && v.data[i] != 0.25f) distractor_found = true;
  CHECK(distractor_found);
  CHECK(connected_components_26(m) == 1);
}
