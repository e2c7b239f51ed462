#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "voxseg/convnet.hpp"

using namespace voxseg;

namespace {

Tensor random_tensor(int c, int h, int w, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(c, h, w);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Central finite differences against analytic gradients; passes when
// |a - n| <= max(1e-6, 1e-4 * max(|a|, |n|)).
void check_gradients(const NetworkSpec& spec, uint64_t seed, double* worst_rel = nullptr) {
  auto shapes = chain_shapes(spec);
  ConvNetModel m = init_model(spec);
  Rng rng(seed);
  std::vector<Tensor> batch;
  std::vector<uint8_t> labels;
  for (int i = 0; i < 3; ++i) {
    batch.push_back(
        random_tensor(spec.input_shape[0], spec.input_shape[1], spec.input_shape[2], rng));
    labels.push_back(uint8_t(i % 2));
  }
  const uint64_t dropout_seed = seed ^ 0xD0D0;
  Gradients g = loss_and_backward(m, batch, labels, dropout_seed);

  auto loss_at = [&]() {
    return loss_and_backward(m, batch, labels, dropout_seed).loss;
  };
  const double h = 1e-5;
  for (size_t li = 0; li < m.spec.layers.size(); ++li) {
    for (auto [params, grads] :
         {std::pair{&m.weights[li], &g.weights[li]}, std::pair{&m.biases[li], &g.biases[li]}}) {
      for (size_t i = 0; i < params->size(); ++i) {
        double saved = (*params)[i];
        (*params)[i] = saved + h;
        double lp = loss_at();
        (*params)[i] = saved - h;
        double lm = loss_at();
        (*params)[i] = saved;
        double numeric = (lp - lm) / (2 * h);
        double analytic = (*grads)[i];
        double tol = std::max(1e-6, 1e-4 * std::max(std::abs(analytic), std::abs(numeric)));
        if (worst_rel) {
          double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
          *worst_rel = std::max(*worst_rel, std::abs(analytic - numeric) / denom);
        }
        INFO("layer " << li << " param " << i);
        REQUIRE(std::abs(analytic - numeric) <= tol);
      }
    }
  }
}

}  // namespace

TEST_CASE("zero weights give (0.5, 0.5) for any input") {
  NetworkSpec spec;
  spec.input_shape = {1, 4, 4};
  spec.layers = {LayerSpec::conv2d(2, 3, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                 LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  ConvNetModel m = init_model(spec);
  for (auto& w : m.weights) std::fill(w.begin(), w.end(), 0.0);
  Rng rng(1);
  auto out = forward(m, {random_tensor(1, 4, 4, rng)}, RunMode::infer);
  CHECK(out[0][0] == 0.5);
  CHECK(out[0][1] == 0.5);
}

TEST_CASE("single fc layer matches closed-form softmax") {
  NetworkSpec spec;
  spec.input_shape = {1, 1, 1};
  spec.layers = {LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  ConvNetModel m = init_model(spec);
  double w = 1.7, x = 0.4;
  m.weights[0] = {w, 0.0};  // logits (w*x, 0)
  m.biases[0] = {0.0, 0.0};
  Tensor in(1, 1, 1);
  in.data = {x};
  auto out = forward(m, {in}, RunMode::infer);
  double e = std::exp(w * x);  // logits are (w*x, 0)
  CHECK_THAT(out[0][0], Catch::Matchers::WithinAbs(e / (e + 1.0), 1e-12));
  CHECK_THAT(out[0][1], Catch::Matchers::WithinAbs(1.0 / (e + 1.0), 1e-12));
}

TEST_CASE("dropout rate 1 zeroes the tail of the net in train mode") {
  NetworkSpec spec;
  spec.input_shape = {1, 2, 2};
  spec.layers = {LayerSpec::fully_connected(4), LayerSpec::relu(), LayerSpec::drop(1.0),
                 LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  ConvNetModel m = init_model(spec);  // biases are zero after init
  Rng rng(2);
  auto out = forward(m, {random_tensor(1, 2, 2, rng)}, RunMode::train, 99);
  CHECK(out[0][0] == 0.5);
  CHECK(out[0][1] == 0.5);
}

TEST_CASE("softmax pairs sum to one and lie in (0,1)") {
  NetworkSpec spec = default_network_spec(1, 16, {4, 4, 4, 4, 4}, 8, 0.5, 3);
  ConvNetModel m = init_model(spec);
  Rng rng(7);
  std::vector<Tensor> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_tensor(1, 16, 16, rng));
  for (auto mode : {RunMode::infer, RunMode::train}) {
    auto out = forward(m, batch, mode, 5);
    for (auto& p : out) {
      CHECK(p[0] > 0.0);
      CHECK(p[0] < 1.0);
      CHECK_THAT(p[0] + p[1], Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
  }
}

TEST_CASE("shape mismatch is rejected") {
  NetworkSpec spec;
  spec.input_shape = {1, 4, 4};
  spec.layers = {LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  ConvNetModel m = init_model(spec);
  Tensor wrong(2, 4, 4);
  CHECK_THROWS_AS(forward(m, {wrong}, RunMode::infer), std::invalid_argument);
  CHECK_THROWS_AS(loss_and_backward(m, {wrong}, {0}, 0), std::invalid_argument);
}

TEST_CASE("spec validation") {
  NetworkSpec no_softmax;
  no_softmax.input_shape = {1, 4, 4};
  no_softmax.layers = {LayerSpec::fully_connected(2)};
  CHECK_THROWS_AS(chain_shapes(no_softmax), std::invalid_argument);

  NetworkSpec bad_head;
  bad_head.input_shape = {1, 4, 4};
  bad_head.layers = {LayerSpec::fully_connected(3), LayerSpec::softmax2()};
  CHECK_THROWS_WITH(chain_shapes(bad_head), Catch::Matchers::ContainsSubstring("2 logits"));
}

TEST_CASE("gradients match central finite differences") {
  double worst = 0;

  NetworkSpec conv_pool_fc;
  conv_pool_fc.input_shape = {2, 6, 6};
  conv_pool_fc.layers = {LayerSpec::conv2d(2, 3, 3), LayerSpec::relu(),
                         LayerSpec::max_pool(2, 2),  LayerSpec::fully_connected(3),
                         LayerSpec::relu(),          LayerSpec::fully_connected(2),
                         LayerSpec::softmax2()};
  conv_pool_fc.init_seed = 10;
  check_gradients(conv_pool_fc, 100, &worst);

  NetworkSpec strided_valid;
  strided_valid.input_shape = {1, 7, 7};
  strided_valid.layers = {LayerSpec::conv2d(3, 3, 3, 2, false), LayerSpec::relu(),
                          LayerSpec::conv2d(2, 2, 2), LayerSpec::fully_connected(2),
                          LayerSpec::softmax2()};
  strided_valid.init_seed = 11;
  check_gradients(strided_valid, 200, &worst);

  NetworkSpec with_dropout;
  with_dropout.input_shape = {1, 2, 2};
  with_dropout.layers = {LayerSpec::fully_connected(6), LayerSpec::relu(),
                         LayerSpec::drop(0.3), LayerSpec::fully_connected(2),
                         LayerSpec::softmax2()};
  with_dropout.init_seed = 12;
  check_gradients(with_dropout, 300, &worst);

  INFO("worst relative gradient error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("duplicating the batch leaves loss and gradients unchanged") {
  NetworkSpec spec;
  spec.input_shape = {1, 5, 5};
  spec.layers = {LayerSpec::conv2d(2, 3, 3), LayerSpec::relu(), LayerSpec::fully_connected(2),
                 LayerSpec::softmax2()};
  spec.init_seed = 4;
  ConvNetModel m = init_model(spec);
  Rng rng(8);
  std::vector<Tensor> batch{random_tensor(1, 5, 5, rng), random_tensor(1, 5, 5, rng)};
  std::vector<uint8_t> labels{0, 1};
  auto g1 = loss_and_backward(m, batch, labels, 0, false);

  std::vector<Tensor> doubled{batch[0], batch[1], batch[0], batch[1]};
  std::vector<uint8_t> doubled_labels{0, 1, 0, 1};
  auto g2 = loss_and_backward(m, doubled, doubled_labels, 0, false);

  CHECK_THAT(g1.loss, Catch::Matchers::WithinAbs(g2.loss, 1e-12));
  for (size_t li = 0; li < g1.weights.size(); ++li)
    for (size_t i = 0; i < g1.weights[li].size(); ++i)
      CHECK_THAT(g1.weights[li][i], Catch::Matchers::WithinAbs(g2.weights[li][i], 1e-12));
}

TEST_CASE("confident correct predictions drive the loss to zero") {
  NetworkSpec spec;
  spec.input_shape = {1, 1, 1};
  spec.layers = {LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  ConvNetModel m = init_model(spec);
  m.weights[0] = {-50.0, 50.0};  // logit margin 100|x|
  m.biases[0] = {0.0, 0.0};
  Tensor neg(1, 1, 1), pos(1, 1, 1);
  neg.data = {-1.0};
  pos.data = {1.0};
  auto g = loss_and_backward(m, {neg, pos}, {0, 1}, 0, false);
  CHECK(g.loss < 1e-8);
}

TEST_CASE("convolution is translation-equivariant on the valid region") {
  NetworkSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers = {LayerSpec::conv2d(2, 3, 3, 1, false), LayerSpec::fully_connected(2),
                 LayerSpec::softmax2()};
  spec.init_seed = 21;
  ConvNetModel m = init_model(spec);

  Rng rng(5);
  Tensor base = random_tensor(1, 8, 8, rng);
  Tensor shifted(1, 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      shifted.at(0, y, x) = x > 0 ? base.at(0, y, x - 1) : 0.0;

  auto f_base = forward_activations(m, base)[0];     // conv output, 6x6
  auto f_shift = forward_activations(m, shifted)[0];
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 1; x < 6; ++x)
        CHECK_THAT(f_shift.at(c, y, x), Catch::Matchers::WithinAbs(f_base.at(c, y, x - 1), 1e-12));
}

TEST_CASE("max-pool output dominates its window") {
  NetworkSpec spec;
  spec.input_shape = {2, 6, 6};
  spec.layers = {LayerSpec::max_pool(2, 2), LayerSpec::fully_connected(2),
                 LayerSpec::softmax2()};
  spec.init_seed = 30;
  ConvNetModel m = init_model(spec);
  Rng rng(6);
  Tensor in = random_tensor(2, 6, 6, rng);
  auto pooled = forward_activations(m, in)[0];
  for (int c = 0; c < 2; ++c)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double mx = -1e300;
        for (int ky = 0; ky < 2; ++ky)
          for (int kx = 0; kx < 2; ++kx)
            mx = std::max(mx, in.at(c, oy * 2 + ky, ox * 2 + kx));
        CHECK(pooled.at(c, oy, ox) == mx);
      }
}

TEST_CASE("architecture template is constant apart from input channels") {
  auto a = default_network_spec(1, 64);
  auto b = default_network_spec(2, 64);
  auto c = default_network_spec(3, 64);
  CHECK(a.layers == b.layers);
  CHECK(b.layers == c.layers);
  CHECK(a.input_shape[0] == 1);
  CHECK(b.input_shape[0] == 2);
  CHECK(c.input_shape[0] == 3);
  CHECK(a.input_shape[1] == b.input_shape[1]);
  // Five convolutional layers in the template.
  int convs = 0;
  for (auto& l : a.layers) convs += l.kind == LayerKind::conv;
  CHECK(convs == 5);
}

namespace {

// Separable blob dataset on 8x8 inputs: class 1 has a bright 3x3 corner.
void blob_dataset(std::vector<Tensor>& xs, std::vector<uint8_t>& ys, int n, uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Tensor t(1, 8, 8);
    for (auto& v : t.data) v = rng.uniform(0.0, 0.2);
    uint8_t label = uint8_t(i % 2);
    if (label)
      for (int y = 1; y <= 3; ++y)
        for (int x = 1; x <= 3; ++x) t.at(0, y, x) += 0.8;
    xs.push_back(std::move(t));
    ys.push_back(label);
  }
}

}  // namespace

TEST_CASE("sgd separates 8x8 blobs") {
  std::vector<Tensor> xs;
  std::vector<uint8_t> ys;
  blob_dataset(xs, ys, 60, 44);
  NetworkSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers = {LayerSpec::conv2d(4, 3, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                 LayerSpec::fully_connected(8), LayerSpec::relu(),
                 LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  SgdParams p;
  p.epochs = 50;
  p.rate = 0.05;
  p.batch_size = 16;
  p.seed = 17;
  auto m = train_sgd(spec, xs, ys, p);
  REQUIRE(m.epoch_losses.size() == 50);

  auto probs = forward(m, xs, RunMode::infer);
  int correct = 0;
  for (size_t i = 0; i < ys.size(); ++i) correct += (probs[i][1] > 0.5) == (ys[i] == 1);
  CHECK(double(correct) / double(ys.size()) >= 0.98);
  // Loss settles low on a separable set.
  CHECK(m.epoch_losses.back() < m.epoch_losses.front());
}

TEST_CASE("zero learning rate leaves weights unchanged") {
  std::vector<Tensor> xs;
  std::vector<uint8_t> ys;
  blob_dataset(xs, ys, 10, 3);
  NetworkSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers = {LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  SgdParams p;
  p.rate = 0.0;
  p.seed = 9;
  p.epochs = 2;
  auto m2 = train_sgd(spec, xs, ys, p);
  p.epochs = 7;
  auto m7 = train_sgd(spec, xs, ys, p);
  CHECK(m2.weights == m7.weights);
  CHECK(m2.biases == m7.biases);
}

TEST_CASE("training is bit-deterministic in the seed") {
  std::vector<Tensor> xs;
  std::vector<uint8_t> ys;
  blob_dataset(xs, ys, 20, 5);
  NetworkSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers = {LayerSpec::conv2d(2, 3, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                 LayerSpec::drop(0.2), LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  SgdParams p;
  p.epochs = 3;
  p.seed = 77;
  auto m1 = train_sgd(spec, xs, ys, p);
  auto m2 = train_sgd(spec, xs, ys, p);
  CHECK(m1 == m2);
  CHECK(m1.epoch_losses == m2.epoch_losses);

  CHECK_THROWS_WITH(train_sgd(spec, xs, std::vector<uint8_t>(xs.size(), 1), p),
                    Catch::Matchers::ContainsSubstring("both classes"));
}

TEST_CASE("model serialization round-trips through float32") {
  std::vector<Tensor> xs;
  std::vector<uint8_t> ys;
  blob_dataset(xs, ys, 12, 6);
  NetworkSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers = {LayerSpec::conv2d(2, 3, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                 LayerSpec::fully_connected(2), LayerSpec::softmax2()};
  SgdParams p;
  p.epochs = 2;
  p.seed = 12;
  auto m = train_sgd(spec, xs, ys, p);

  auto dir = std::filesystem::temp_directory_path() / "voxseg_cn";
  std::filesystem::create_directories(dir);
  save_model(m, dir / "m.bin");
  auto r = load_model(dir / "m.bin");
  CHECK(r.spec == m.spec);
  // float32 write -> double read -> float32 write is exact.
  save_model(r, dir / "m2.bin");
  std::ifstream f1(dir / "m.bin", std::ios::binary), f2(dir / "m2.bin", std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  auto p1 = forward(m, {xs[0]}, RunMode::infer);
  auto p2 = forward(r, {xs[0]}, RunMode::infer);
  CHECK_THAT(p1[0][1], Catch::Matchers::WithinAbs(p2[0][1], 1e-5));

  export_first_layer_pgm(m, dir / "kernels.pgm");
  CHECK(std::filesystem::file_size(dir / "kernels.pgm") > 0);
}
