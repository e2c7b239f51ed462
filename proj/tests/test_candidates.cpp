#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "voxseg/candidates.hpp"
#include "voxseg/phantom.hpp"

using namespace voxseg;

namespace {

// Two separable 2D blobs around (0,0) and (4,4).
void blob_data(Matrix& x, std::vector<uint8_t>& y, int per_class, uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < 2 * per_class; ++i) {
    int cls = i % 2;
    double cx = cls ? 4.0 : 0.0;
    x.push_row({cx + rng.uniform(-1, 1), cx + rng.uniform(-1, 1)});
    y.push_back(uint8_t(cls));
  }
}

}  // namespace

TEST_CASE("voxel features: constant volume has zero gradient") {
  Volume v({4, 4, 2}, {1, 1, 1}, 3.5f);
  auto f = voxel_features(v, 1, 2, 0);
  CHECK(f[0] == 3.5);
  CHECK(f[1] == 3.5);                                      // 3x3 mean
  CHECK_THAT(f[2], Catch::Matchers::WithinAbs(0, 1e-12));  // 3x3 std
  CHECK(f[3] == 0.0);                                      // gradient
}

TEST_CASE("voxel features: unit ramp has unit gradient") {
  Volume v({5, 5, 1}, {1, 1, 1});
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) v.at(x, y, 0) = float(x);
  auto f = voxel_features(v, 2, 2, 0);
  CHECK_THAT(f[3], Catch::Matchers::WithinAbs(1.0, 1e-12));
  // Border central difference halves under replication.
  auto fb = voxel_features(v, 0, 2, 0);
  CHECK_THAT(fb[3], Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("voxel features: corner matches explicit replicate-pad oracle") {
  Volume v({3, 3, 1}, {1, 1, 1});
  float vals[3][3] = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) v.at(x, y, 0) = vals[y][x];
  auto f = voxel_features(v, 0, 0, 0);
  // Replicated 3x3 window around the corner: rows {1,1,2},{1,1,2},{4,4,5}.
  double w[9] = {1, 1, 2, 1, 1, 2, 4, 4, 5};
  double mean = 0;
  for (double t : w) mean += t;
  mean /= 9;
  double var = 0;
  for (double t : w) var += (t - mean) * (t - mean);
  var /= 9;
  CHECK_THAT(f[1], Catch::Matchers::WithinAbs(mean, 1e-12));
  CHECK_THAT(f[2], Catch::Matchers::WithinAbs(std::sqrt(var), 1e-12));
}

TEST_CASE("random forest separates a linear toy set") {
  Matrix x;
  std::vector<uint8_t> y;
  blob_data(x, y, 40, 1);
  RfParams p;
  p.tree_count = 16;
  p.max_depth = 4;
  p.seed = 7;
  auto m = train_rf(x, y, p);
  auto probs = rf_predict(m, x);
  int correct = 0;
  for (size_t i = 0; i < y.size(); ++i) correct += (probs[i] > 0.5) == (y[i] == 1);
  CHECK(correct == int(y.size()));
  for (double pr : probs) {
    CHECK(pr >= 0.0);
    CHECK(pr <= 1.0);
  }
}

TEST_CASE("flipping labels complements predictions") {
  Matrix x;
  std::vector<uint8_t> y;
  blob_data(x, y, 40, 2);
  std::vector<uint8_t> flipped(y.size());
  for (size_t i = 0; i < y.size(); ++i) flipped[i] = uint8_t(1 - y[i]);
  RfParams p;
  p.tree_count = 32;
  p.seed = 3;
  auto m1 = train_rf(x, y, p);
  auto m2 = train_rf(x, flipped, p);
  auto p1 = rf_predict(m1, x);
  auto p2 = rf_predict(m2, x);
  for (size_t i = 0; i < y.size(); ++i)
    CHECK_THAT(p1[i] + p2[i], Catch::Matchers::WithinAbs(1.0, 0.1));
}

TEST_CASE("training is deterministic in the seed") {
  Matrix x;
  std::vector<uint8_t> y;
  blob_data(x, y, 25, 4);
  RfParams p;
  p.tree_count = 8;
  p.seed = 99;
  auto m1 = train_rf(x, y, p);
  auto m2 = train_rf(x, y, p);
  CHECK(m1 == m2);
  p.seed = 100;
  auto m3 = train_rf(x, y, p);
  CHECK(!(m1 == m3));
}

TEST_CASE("single-class input is rejected") {
  Matrix x;
  x.push_row({1.0});
  x.push_row({2.0});
  std::vector<uint8_t> y{1, 1};
  CHECK_THROWS_WITH(train_rf(x, y, {}), Catch::Matchers::ContainsSubstring("both classes"));
}

TEST_CASE("hand-built forests predict leaf means") {
  RandomForestModel m;
  m.feature_count = 2;
  m.trees.push_back({RfNode{-1, 0, -1, -1, 0.3}});
  double x[2] = {5.0, -2.0};
  CHECK(rf_predict_one(m, x) == 0.3);

  m.trees.push_back({RfNode{-1, 0, -1, -1, 0.8}});
  // Mean of 0.3 and 0.8; mean is invariant to tree order.
  CHECK_THAT(rf_predict_one(m, x), Catch::Matchers::WithinAbs(0.55, 1e-15));
  std::reverse(m.trees.begin(), m.trees.end());
  CHECK_THAT(rf_predict_one(m, x), Catch::Matchers::WithinAbs(0.55, 1e-15));

  Matrix bad(1, 3);
  CHECK_THROWS_WITH(rf_predict(m, bad), Catch::Matchers::ContainsSubstring("width mismatch"));
}

TEST_CASE("pure-leaf forest reproduces training labels exactly") {
  Matrix x;
  std::vector<uint8_t> y;
  Rng rng(5);
  for (int i = 0; i < 30; ++i) {
    double v = rng.uniform(0, 1);
    x.push_row({v, rng.uniform(0, 1)});
    y.push_back(v > 0.5 ? 1 : 0);
  }
  RfParams p;
  p.tree_count = 8;
  p.max_depth = 32;
  p.bootstrap = false;  // every tree sees every sample -> pure leaves
  p.seed = 11;
  auto m = train_rf(x, y, p);
  auto probs = rf_predict(m, x);
  for (size_t i = 0; i < y.size(); ++i) CHECK(probs[i] == double(y[i]));
}

TEST_CASE("forest serialization round-trips") {
  Matrix x;
  std::vector<uint8_t> y;
  blob_data(x, y, 20, 6);
  RfParams p;
  p.tree_count = 5;
  p.seed = 42;
  auto m = train_rf(x, y, p);
  auto dir = std::filesystem::temp_directory_path() / "voxseg_rf";
  std::filesystem::create_directories(dir);
  save_forest(m, dir / "f.bin");
  auto r = load_forest(dir / "f.bin");
  CHECK(r == m);

  std::ofstream bad(dir / "bad.bin", std::ios::binary);
  bad << "NOPE";
  bad.close();
  CHECK_THROWS_WITH(load_forest(dir / "bad.bin"), Catch::Matchers::ContainsSubstring("magic"));
}

namespace {

struct CascadeFixture {
  std::vector<Volume> volumes;
  std::vector<Mask> gts;
  std::vector<SuperpixelMap> sps;
  std::vector<OptimalLabeling> opts;
  std::vector<CascadeTrainingCase> cases;

  explicit CascadeFixture(int n_cases) {
    for (int c = 0; c < n_cases; ++c) {
      PhantomSpec spec;
      spec.seed = 100 + uint64_t(c);
      spec.dims = {24, 24, 8};
      spec.target_fraction = 0.04;
      spec.noise_sigma = 0.03;
      spec.organ_count = 2;
      auto [v, m] = make_phantom(spec);
      volumes.push_back(std::move(v));
      gts.push_back(std::move(m));
    }
    SuperpixelParams sp_params;
    sp_params.n_per_slice = 12;
    for (int c = 0; c < n_cases; ++c) {
      sps.push_back(compute_superpixels(volumes[c], sp_params));
      opts.push_back(optimal_labels(sps[c], gts[c]));
    }
    for (int c = 0; c < n_cases; ++c)
      cases.push_back({&volumes[c], &sps[c], &gts[c], &opts[c]});
  }
};

}  // namespace

TEST_CASE("cascade: limit cut with nondegenerate scores retains everything") {
  CascadeFixture fx(1);
  // Constant-probability forests guarantee nondegenerate (nonzero) scores.
  RandomForestModel level1, level2;
  level1.feature_count = kVoxelFeatureCount;
  level1.trees.push_back({RfNode{-1, 0, -1, -1, 0.5}});
  level2.feature_count = kSuperpixelFeatureCount;
  level2.trees.push_back({RfNode{-1, 0, -1, -1, 0.5}});

  auto cs = cascade_candidates(fx.volumes[0], fx.sps[0], level1, level2, 1e-9, 0.0,
                               &fx.gts[0]);
  CHECK(cs.ids.size() == size_t(fx.sps[0].region_count()));
  CHECK(cs.recall == 1.0);

  // Exact cut semantics on a trained cascade: retained iff score > cut.
  CascadeParams params;
  params.level1.tree_count = 8;
  params.level2.tree_count = 8;
  params.level1_cap_per_class = 300;
  params.seed = 1;
  auto model = train_cascade(fx.cases, params);
  auto scores = cascade_scores(fx.volumes[0], fx.sps[0], model.level1, model.level2);
  auto trained = cascade_candidates(fx.volumes[0], fx.sps[0], model.level1, model.level2, 1e-9);
  for (int r = 0; r < fx.sps[0].region_count(); ++r)
    CHECK(bool(trained.retained[r]) == (scores[r] > 1e-9));
}

TEST_CASE("cascade: candidate sets nest as the cut drops") {
  CascadeFixture fx(2);
  CascadeParams params;
  params.level1.tree_count = 8;
  params.level2.tree_count = 8;
  params.level1_cap_per_class = 300;
  params.seed = 2;
  auto model = train_cascade(fx.cases, params);

  auto hi = cascade_candidates(fx.volumes[1], fx.sps[1], model.level1, model.level2, 0.5);
  auto lo = cascade_candidates(fx.volumes[1], fx.sps[1], model.level1, model.level2, 0.2);
  for (uint32_t id : hi.ids) CHECK(lo.retained[id] == 1);
  CHECK(lo.ids.size() >= hi.ids.size());
}

TEST_CASE("cascade: deterministic in the seed and learns the phantom") {
  CascadeFixture fx(2);
  CascadeParams params;
  params.level1.tree_count = 8;
  params.level2.tree_count = 8;
  params.level1_cap_per_class = 300;
  params.seed = 3;
  auto m1 = train_cascade(fx.cases, params);
  auto m2 = train_cascade(fx.cases, params);
  CHECK(m1.level1 == m2.level1);
  CHECK(m1.level2 == m2.level2);

  // Calibrated cut reaches high recall on the training pool.
  double cut = calibrate_cascade_cut(m1, fx.cases, 0.99, {0.1, 0.2, 0.3, 0.4, 0.5});
  auto cs = cascade_candidates(fx.volumes[0], fx.sps[0], m1.level1, m1.level2, cut, 0.0,
                               &fx.gts[0]);
  CHECK(cs.recall >= 0.97);
  CHECK(cs.ids.size() < size_t(fx.sps[0].region_count()));  // some pruning happened
  CHECK_THROWS_AS(
      cascade_candidates(fx.volumes[0], fx.sps[0], m1.level1, m1.level2, 0.0),
      std::invalid_argument);
}
