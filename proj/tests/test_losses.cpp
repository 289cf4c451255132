#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pkdmark/losses.hpp"
#include "pkdmark/rng.hpp"

using namespace pkdmark;
using ad::Tensor;

namespace {

Tensor noise_tensor(int n, uint64_t seed, double amp = 0.3) {
  rng::Prng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = (float)(amp * rng.normal());
  return Tensor::from(std::move(v), {n});
}

std::vector<float> ones_alpha() { return {1, 1, 1, 1, 1, 1, 1}; }

}  // namespace

TEST_CASE("perceptual loss: zero at equality, symmetric, monotone in noise") {
  Tensor x = noise_tensor(4096, 1);
  CHECK(losses::perceptual_loss(x, x, ones_alpha()).item() == 0.0f);

  Tensor y = noise_tensor(4096, 2);
  const float lxy = losses::perceptual_loss(x, y, ones_alpha()).item();
  const float lyx = losses::perceptual_loss(y, x, ones_alpha()).item();
  CHECK(lxy == doctest::Approx(lyx).epsilon(1e-6));
  CHECK(lxy > 0.0f);

  // sine plus increasing noise: loss increases monotonically
  std::vector<float> sine(4096);
  for (int i = 0; i < 4096; ++i) sine[i] = 0.5f * std::sin(2.0 * M_PI * 440.0 * i / 24000.0);
  Tensor s = Tensor::from(sine, {4096});
  double prev = 0.0;
  for (double eps : {1e-3, 1e-2, 1e-1}) {
    rng::Prng rng(3);
    std::vector<float> pert = sine;
    for (auto& v : pert) v += (float)(eps * rng.normal());
    const double l = losses::perceptual_loss(s, Tensor::from(pert, {4096}), ones_alpha()).item();
    CHECK(l > prev);
    prev = l;
  }
}

TEST_CASE("perceptual loss: phase-only difference vanishes") {
  Tensor x = noise_tensor(4096, 4);
  std::vector<float> neg(x.values());
  for (auto& v : neg) v = -v;  // flips every phase, keeps magnitudes
  Tensor y = Tensor::from(neg, {4096});
  CHECK(losses::perceptual_loss(x, y, ones_alpha()).item() == 0.0f);
}

TEST_CASE("perceptual loss: scales longer than the signal are skipped") {
  Tensor x = noise_tensor(40, 5);
  Tensor y = noise_tensor(40, 6);
  CHECK(losses::perceptual_loss(x, y, ones_alpha()).item() > 0.0f);  // only the 32-window scale
}

TEST_CASE("decoding loss: frozen values") {
  // || m - m_hat ||_2 with m=[1,0], m_hat=[0,0] -> 1.0
  Tensor m = Tensor::from({1, 0}, {2});
  Tensor m_hat = Tensor::from({0, 0}, {2});
  CHECK(losses::decoding_loss(m, m_hat, Tensor(), Tensor(), 0.0f).item() ==
        doctest::Approx(1.0));

  // alpha=1, feature maps differing by 0.1 over 4 elements, m == m_hat -> 0.2
  Tensor feat = Tensor::from({0.5f, 0.5f, 0.5f, 0.5f}, {4});
  Tensor feat_hat = Tensor::from({0.6f, 0.6f, 0.6f, 0.6f}, {4});
  CHECK(losses::decoding_loss(m, m, feat, feat_hat, 1.0f).item() == doctest::Approx(0.2));

  // equal messages and maps -> 0
  CHECK(losses::decoding_loss(m, m, feat, feat, 1.0f).item() == 0.0f);
  CHECK_THROWS(losses::decoding_loss(m, Tensor::from({0.f}, {1}), Tensor(), Tensor(), 0.0f));
}

TEST_CASE("adversarial losses: printed formulas and minimized orientation") {
  auto [dis_printed, adv_printed] = losses::printed_gan_formulas(0.5, 0.5);
  CHECK(adv_printed == doctest::Approx(std::log(0.5)));
  CHECK(dis_printed == doctest::Approx(2.0 * std::log(0.5)));

  // d(x_w) -> 1: printed L_adv approaches log(eps) under the clamp
  auto [d2, a2] = losses::printed_gan_formulas(0.5, 1.0);
  CHECK(a2 == doctest::Approx(std::log(1e-6)).epsilon(1e-3));

  Tensor d_real = Tensor::from({0.3f}, {1});
  Tensor d_fake = Tensor::from({0.6f}, {1});
  auto out = losses::adversarial_losses(d_real, d_fake);
  CHECK(out.adv_printed.item() == doctest::Approx(std::log(0.4)));
  CHECK(out.dis_printed.item() == doctest::Approx(std::log(0.7) + std::log(0.6)));
  CHECK(out.adv.item() == doctest::Approx(-std::log(0.4)));
  CHECK(out.dis.item() == doctest::Approx(-(std::log(0.7) + std::log(0.6))));
}

TEST_CASE("adversarial loss gradient: d/dd log(1-d) == -1/(1-d)") {
  auto res = gradcheck::check(
      [](const std::vector<Tensor>& in) {
        return losses::adversarial_losses(Tensor::from({0.4f}, {1}), in[0]).adv_printed;
      },
      {{0.55f}}, {{1}}, 1e-4);
  CHECK(res.max_rel_err < 1e-3);
  // plug-in slope at d = 0.55 is -1/0.45
  Tensor d = Tensor::from({0.55f}, {1}, true);
  Tensor adv = losses::adversarial_losses(Tensor::from({0.4f}, {1}), d).adv_printed;
  ad::backward(adv);
  CHECK(d.grad()[0] == doctest::Approx(-1.0 / 0.45).epsilon(1e-4));
}

TEST_CASE("total loss: weighted sum exactly") {
  losses::LossWeights w;
  w.lambda_per = 1;
  w.lambda_dec = 1;
  w.lambda_adv = 1;
  Tensor total = losses::total_loss(Tensor::scalar(0.1f), Tensor::scalar(0.2f),
                                    Tensor::scalar(0.3f), w);
  CHECK(total.item() == doctest::Approx(0.6));

  losses::LossWeights w2;
  w2.lambda_per = 0;
  w2.lambda_dec = 2;
  w2.lambda_adv = 0;
  CHECK(losses::total_loss(Tensor::scalar(9.0f), Tensor::scalar(0.5f), Tensor::scalar(7.0f), w2)
            .item() == doctest::Approx(1.0));

  // random parts satisfy the LossReport identity
  rng::Prng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    losses::LossWeights wr;
    wr.lambda_per = (float)rng.uniform(0, 2);
    wr.lambda_dec = (float)rng.uniform(0, 2);
    wr.lambda_adv = (float)rng.uniform(0.01, 2);
    const float p = (float)rng.uniform(0, 1), d = (float)rng.uniform(0, 1),
                a = (float)rng.uniform(-1, 1);
    const float total_v =
        losses::total_loss(Tensor::scalar(p), Tensor::scalar(d), Tensor::scalar(a), wr).item();
    CHECK(total_v ==
          doctest::Approx(wr.lambda_per * p + wr.lambda_dec * d + wr.lambda_adv * a)
              .epsilon(1e-5));
  }

  losses::LossWeights bad;
  bad.lambda_per = bad.lambda_dec = bad.lambda_adv = 0;
  CHECK_THROWS(losses::total_loss(Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1), bad));
}

TEST_CASE("student perceptual loss: zero at equality, monotone, symmetric") {
  Tensor t = noise_tensor(2048, 9);
  CHECK(losses::student_perceptual_loss(t, t, ones_alpha()).item() == 0.0f);
  double prev = 0.0;
  for (double eps : {1e-3, 1e-2, 1e-1}) {
    rng::Prng rng(10);
    std::vector<float> pert(t.values());
    for (auto& v : pert) v += (float)(eps * rng.normal());
    Tensor s = Tensor::from(pert, {2048});
    const double l = losses::student_perceptual_loss(s, t, ones_alpha()).item();
    const double l2 = losses::student_perceptual_loss(t, s, ones_alpha()).item();
    CHECK(l == doctest::Approx(l2).epsilon(1e-6));
    CHECK(l > prev);
    prev = l;
  }
}

TEST_CASE("gradcheck: perceptual, decoding, adversarial, student losses") {
  // perceptual (Eq. 2 form) and student perceptual (Eq. 8 form)
  auto x = gradcheck::random_values(2048, -0.4, 0.4, 30);
  auto y = x;
  {
    rng::Prng rng(31);
    for (auto& v : y) v += (float)(0.01 * rng.normal());
  }
  auto res = gradcheck::check(
      [](const std::vector<Tensor>& in) {
        return losses::perceptual_loss(in[0], in[1], {1, 1, 1, 1, 1, 1, 1});
      },
      {x, y}, {{2048}, {2048}}, /*h=*/3e-4);
  CHECK(res.probes > 0);
  CHECK(res.max_rel_err < 1e-3);

  // decoding loss with the feature-map term
  auto m = gradcheck::random_values(8, 0.2, 0.8, 32);
  auto mh = gradcheck::random_values(8, 0.2, 0.8, 33);
  auto f1 = gradcheck::random_values(24, -0.3, 0.3, 34);
  auto f2 = gradcheck::random_values(24, -0.3, 0.3, 35);
  res = gradcheck::check(
      [](const std::vector<Tensor>& in) {
        return losses::decoding_loss(in[0], in[1], in[2], in[3], 0.7f);
      },
      {m, mh, f1, f2}, {{8}, {8}, {24}, {24}}, /*h=*/1e-3);
  CHECK(res.max_rel_err < 1e-3);

  // adversarial pair (Eqs. 4-5)
  res = gradcheck::check(
      [](const std::vector<Tensor>& in) {
        auto out = losses::adversarial_losses(in[0], in[1]);
        return ad::add(out.dis, out.adv);
      },
      {{0.35f}, {0.65f}}, {{1}, {1}}, /*h=*/1e-4);
  CHECK(res.max_rel_err < 1e-3);
}
