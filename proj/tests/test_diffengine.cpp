#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "gradcheck.hpp"
#include "pkdmark/autodiff.hpp"
#include "pkdmark/params.hpp"
#include "pkdmark/rng.hpp"

using namespace pkdmark;
using ad::Tensor;

TEST_CASE("forward values: matmul identity, leaky_relu, complex_magnitude") {
  Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
  Tensor eye = Tensor::from({1, 0, 0, 1}, {2, 2});
  Tensor out = ad::matmul(a, eye);
  CHECK(out.values() == std::vector<float>{1, 2, 3, 4});

  Tensor x = Tensor::from({-1.0f}, {1});
  CHECK(ad::leaky_relu(x, 0.2f).item() == doctest::Approx(-0.2));

  Tensor re = Tensor::from({3.0f}, {1});
  Tensor im = Tensor::from({4.0f}, {1});
  CHECK(ad::complex_magnitude(re, im).item() == doctest::Approx(5.0));
}

TEST_CASE("backward: loss = sum(w*w) gives grad 2w") {
  Tensor w = Tensor::from({1, 2, 3}, {3}, true);
  Tensor loss = ad::mul_scalar(ad::mean_all(ad::mul(w, w)), 3.0f);  // sum
  ad::backward(loss);
  REQUIRE(w.has_grad());
  CHECK(w.grad()[0] == doctest::Approx(2.0));
  CHECK(w.grad()[1] == doctest::Approx(4.0));
  CHECK(w.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward errors: non-scalar loss, consumed graph") {
  Tensor w = Tensor::from({1, 2}, {2}, true);
  Tensor y = ad::mul(w, w);
  CHECK_THROWS(ad::backward(y));
  Tensor loss = ad::l2_norm(y);
  ad::backward(loss);
  CHECK_THROWS(ad::backward(loss));
}

TEST_CASE("detached branch contributes zero gradient") {
  Tensor x = Tensor::from({1.5f, -0.5f}, {2}, true);
  Tensor detached = ad::stop_gradient(x);
  CHECK(detached.values() == x.values());
  Tensor w = Tensor::from({2.0f, 3.0f}, {2}, true);
  Tensor loss = ad::l2_norm(ad::mul(detached, w));
  ad::backward(loss);
  CHECK(!x.has_grad());
  CHECK(w.has_grad());
}

TEST_CASE("straight-through estimator: forward quantize, backward identity") {
  Tensor x = Tensor::from({0.123f, -0.77f, 0.5004f}, {3}, true);
  std::vector<float> quantized = {0.0f, -1.0f, 0.5f};
  Tensor q = ad::straight_through(x, quantized);
  CHECK(q.values() == quantized);
  Tensor loss = ad::mul_scalar(ad::mean_all(q), 3.0f);  // sum
  ad::backward(loss);
  REQUIRE(x.has_grad());
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("non-finite forward values raise with the op name") {
  Tensor x = Tensor::from({-1.0f}, {1});
  try {
    (void)ad::log(x);
    FAIL("expected throw");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("log") != std::string::npos);
  }
}

// ---- finite-difference oracle per primitive op (h = 1e-4, rel err < 1e-3)

namespace {

void expect_gradcheck(const gradcheck::OutputFn& fn, std::vector<std::vector<float>> values,
                      std::vector<ad::Shape> shapes, double h = 1e-4, double tol = 1e-3) {
  auto res = gradcheck::check(fn, std::move(values), std::move(shapes), h);
  CHECK(res.probes > 0);
  CHECK(res.max_rel_err < tol);
}

}  // namespace

TEST_CASE("gradcheck: elementwise binary ops") {
  auto vals_a = gradcheck::random_values(12, -0.6, 0.6, 100);
  auto vals_b = gradcheck::random_values(12, -0.6, 0.6, 101);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::add(in[0], in[1]); },
      {vals_a, vals_b}, {{12}, {12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::sub(in[0], in[1]); },
      {vals_a, vals_b}, {{12}, {12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::mul(in[0], in[1]); },
      {vals_a, vals_b}, {{12}, {12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::mul_scalar(in[0], 0.7f); },
      {vals_a}, {{12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::add_scalar(in[0], 0.3f); },
      {vals_a}, {{12}});
}

TEST_CASE("gradcheck: unary ops") {
  auto pos = gradcheck::random_values(12, 0.5, 1.2, 102);
  auto sym = gradcheck::random_values(12, -0.7, 0.7, 103);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::exp(in[0]); }, {sym}, {{12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::log(in[0]); }, {pos}, {{12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::sigmoid(in[0]); }, {sym}, {{12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::tanh(in[0]); }, {sym}, {{12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::leaky_relu(in[0], 0.2f); }, {sym}, {{12}});
}

TEST_CASE("gradcheck: matmul, linear, conv2d, embedding") {
  auto a = gradcheck::random_values(12, -0.5, 0.5, 104);
  auto b = gradcheck::random_values(20, -0.5, 0.5, 105);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::matmul(in[0], in[1]); },
      {a, b}, {{3, 4}, {4, 5}});

  auto x = gradcheck::random_values(8, -0.5, 0.5, 106);
  auto w = gradcheck::random_values(12, -0.5, 0.5, 107);
  auto bias = gradcheck::random_values(3, -0.3, 0.3, 108);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::linear(in[0], in[1], in[2]); },
      {x, w, bias}, {{2, 4}, {4, 3}, {3}});

  auto img = gradcheck::random_values(2 * 5 * 6, -0.5, 0.5, 109);
  auto kern = gradcheck::random_values(3 * 2 * 3 * 3, -0.3, 0.3, 110);
  auto cbias = gradcheck::random_values(3, -0.3, 0.3, 111);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::conv2d(in[0], in[1], in[2]); },
      {img, kern, cbias}, {{2, 5, 6}, {3, 2, 3, 3}, {3}});

  auto table = gradcheck::random_values(6 * 4, -0.6, 0.6, 112);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::embedding_lookup(in[0], {0, 3, 3, 5}); },
      {table}, {{6, 4}});
}

TEST_CASE("gradcheck: reductions and structure ops") {
  auto x = gradcheck::random_values(24, -0.6, 0.6, 113);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::mean_over_axes(in[0], {0, 2}); },
      {x}, {{2, 3, 4}});
  auto tiny = gradcheck::random_values(24, -0.06, 0.06, 119);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::l2_norm(in[0]); }, {tiny}, {{24}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) {
        auto parts = ad::split(in[0], 1, 2);
        return ad::concat({parts[1], parts[0]}, 0);
      },
      {x}, {{2, 12}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::avg_pool2(in[0]); }, {x}, {{2, 3, 4}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::reshape(in[0], {4, 6}); }, {x}, {{2, 12}});
  auto re = gradcheck::random_values(10, 0.1, 0.3, 114);
  auto im = gradcheck::random_values(10, 0.1, 0.3, 115);
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::complex_magnitude(in[0], in[1]); },
      {re, im}, {{10}, {10}});
  expect_gradcheck(
      [](const std::vector<Tensor>& in) { return ad::clamp(in[0], -0.45f, 0.45f); },
      {x}, {{24}});
}

TEST_CASE("gradcheck: stft and istft graph ops") {
  dsp::StftConfig cfg;
  cfg.fft_size = 64;
  cfg.hop = 24;
  auto x = gradcheck::random_values(400, -0.8, 0.8, 116);
  expect_gradcheck(
      [cfg](const std::vector<Tensor>& in) {
        auto [re, im] = ad::stft(in[0], cfg);
        const int t = re.shape()[0], f = re.shape()[1];
        return ad::concat({ad::reshape(re, {1, t, f}), ad::reshape(im, {1, t, f})}, 0);
      },
      {x}, {{400}}, /*h=*/1e-3);

  const int frames = dsp::frame_count(200, cfg);
  const int bins = cfg.bins();
  auto sre = gradcheck::random_values(frames * bins, -0.5, 0.5, 117);
  auto sim = gradcheck::random_values(frames * bins, -0.5, 0.5, 118);
  expect_gradcheck(
      [cfg](const std::vector<Tensor>& in) { return ad::istft(in[0], in[1], cfg, 200); },
      {sre, sim}, {{frames, bins}, {frames, bins}}, /*h=*/1e-3);
}

TEST_CASE("adam: closed-form first step and zero-grad behaviour") {
  ad::NetworkParams params;
  params.add("w", Tensor::from({1.0f}, {1}, true));
  ad::AdamConfig cfg;
  cfg.lr = 0.1f;
  ad::AdamOptimizer opt(params, cfg);
  Tensor w = params.get("w");
  w.node()->ensure_grad();
  w.node()->grad[0] = 1.0f;
  opt.step();
  // bias-corrected first step moves by ~lr for a unit gradient
  CHECK(w.values()[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(w.grad()[0] == 0.0f);  // grads zeroed afterward

  // zero gradient from a fresh state leaves the parameter unchanged
  ad::NetworkParams params2;
  params2.add("w", Tensor::from({2.5f}, {1}, true));
  ad::AdamOptimizer opt2(params2, cfg);
  Tensor w2 = params2.get("w");
  w2.node()->ensure_grad();
  opt2.step();
  CHECK(w2.values()[0] == 2.5f);

  // two identical params with identical grads stay identical
  ad::NetworkParams params3;
  params3.add("a", Tensor::from({0.7f, -0.3f}, {2}, true));
  params3.add("b", Tensor::from({0.7f, -0.3f}, {2}, true));
  ad::AdamOptimizer opt3(params3, cfg);
  for (int s = 0; s < 3; ++s) {
    for (const char* n : {"a", "b"}) {
      Tensor t = params3.get(n);
      t.node()->ensure_grad();
      t.node()->grad[0] = 0.4f;
      t.node()->grad[1] = -0.2f;
    }
    opt3.step();
  }
  CHECK(params3.get("a").values() == params3.get("b").values());
}

TEST_CASE("adam: missing gradient raises") {
  ad::NetworkParams params;
  params.add("w", Tensor::from({1.0f}, {1}, true));
  ad::AdamOptimizer opt(params, {});
  CHECK_THROWS(opt.step());
}

TEST_CASE("checkpoint save/load round trip is bit-exact") {
  rng::Prng rng(200);
  ad::NetworkParams params;
  params.add("layer1.w", Tensor::from(gradcheck::random_values(12, -2, 2, 201), {3, 4}, true));
  params.add("layer1.b", Tensor::from(gradcheck::random_values(3, -1, 1, 202), {3}, true));
  params.add("emb", Tensor::from(gradcheck::random_values(30, -1, 1, 203), {5, 3, 2}, true));
  const char* path = "/tmp/pkdmark_test_ckpt.bin";
  ad::save_checkpoint(params, path);
  ad::NetworkParams loaded = ad::load_checkpoint(path);
  REQUIRE(loaded.size() == params.size());
  CHECK(loaded.names() == params.names());
  for (const auto& name : params.names()) {
    CHECK(loaded.get(name).shape() == params.get(name).shape());
    CHECK(loaded.get(name).values() == params.get(name).values());
  }
  CHECK(loaded.checksum() == params.checksum());
  // saving the loaded copy reproduces identical bytes
  const char* path2 = "/tmp/pkdmark_test_ckpt2.bin";
  ad::save_checkpoint(loaded, path2);
  auto slurp = [](const char* p) {
    FILE* f = std::fopen(p, "rb");
    REQUIRE(f);
    std::vector<unsigned char> b;
    unsigned char buf[4096];
    size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) b.insert(b.end(), buf, buf + got);
    std::fclose(f);
    return b;
  };
  CHECK(slurp(path) == slurp(path2));
  std::remove(path);
  std::remove(path2);
}

TEST_CASE("checkpoint rejects corrupt files") {
  const char* path = "/tmp/pkdmark_test_badckpt.bin";
  FILE* f = std::fopen(path, "wb");
  std::fwrite("XXXX", 1, 4, f);
  std::fclose(f);
  CHECK_THROWS(ad::load_checkpoint(path));
  std::remove(path);
}

TEST_CASE("NetworkParams: unique names, shared tensors, subset views") {
  ad::NetworkParams p;
  p.add("a.x", Tensor::from({1.0f}, {1}, true));
  CHECK_THROWS(p.add("a.x", Tensor::from({2.0f}, {1}, true)));
  p.add("b.y", Tensor::from({3.0f}, {1}, true));
  ad::NetworkParams sub = p.subset("a.");
  REQUIRE(sub.size() == 1);
  // shared underlying buffers
  sub.get("x").node()->value[0] = 9.0f;
  CHECK(p.get("a.x").values()[0] == 9.0f);
}
