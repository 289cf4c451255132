#include "pkdmark/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace pkdmark::losses {

using ad::Tensor;

namespace {

constexpr float kProbEps = 1e-6f;
constexpr float kLogMagEps = 1e-4f;  // smoothing inside log(mag^2 + eps)
constexpr int kScaleExpLo = 5;
constexpr int kScaleExpHi = 11;

Tensor rms(const Tensor& x) {
  return ad::mul_scalar(ad::l2_norm(x), 1.0f / std::sqrt((float)x.numel()));
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_per < 0 || lambda_dec < 0 || lambda_adv < 0 || alpha_featmap < 0)
    throw std::invalid_argument("LossWeights: weights must be nonnegative");
  if (lambda_per == 0 && lambda_dec == 0 && lambda_adv == 0)
    throw std::invalid_argument("LossWeights: at least one weight must be positive");
  if ((int)alpha_scales.size() != kScaleExpHi - kScaleExpLo + 1)
    throw std::invalid_argument("LossWeights: alpha_scales must have 7 entries");
  for (float a : alpha_scales)
    if (a < 0) throw std::invalid_argument("LossWeights: alpha_scales must be nonnegative");
}

Tensor perceptual_loss(const Tensor& x, const Tensor& x_w,
                       const std::vector<float>& alpha_scales) {
  if (x.shape() != x_w.shape() || x.shape().size() != 1)
    throw std::invalid_argument("perceptual_loss: length mismatch");
  if ((int)alpha_scales.size() != kScaleExpHi - kScaleExpLo + 1)
    throw std::invalid_argument("perceptual_loss: need 7 scale coefficients");
  const int len = x.shape()[0];
  Tensor total = Tensor::scalar(0.0f);
  for (int e = kScaleExpLo; e <= kScaleExpHi; ++e) {
    const int win = 1 << e;
    if (len < win) continue;
    dsp::StftConfig cfg;
    cfg.fft_size = win;
    cfg.hop = win / 4;
    auto [xr, xi] = ad::stft(x, cfg);
    auto [yr, yi] = ad::stft(x_w, cfg);
    Tensor mx = ad::complex_magnitude(xr, xi);
    Tensor my = ad::complex_magnitude(yr, yi);
    Tensor lin = rms(ad::sub(mx, my));
    // smoothed log-magnitude: 0.5*log(mag^2 + eps) keeps the curvature bounded
    Tensor lgx = ad::mul_scalar(ad::log(ad::add_scalar(ad::mul(mx, mx), kLogMagEps)), 0.5f);
    Tensor lgy = ad::mul_scalar(ad::log(ad::add_scalar(ad::mul(my, my), kLogMagEps)), 0.5f);
    Tensor lg = rms(ad::sub(lgx, lgy));
    total = ad::add(total, ad::mul_scalar(ad::add(lin, lg), alpha_scales[e - kScaleExpLo]));
  }
  return total;
}

Tensor decoding_loss(const Tensor& m, const Tensor& m_hat, const Tensor& feat,
                     const Tensor& feat_hat, float alpha) {
  if (m.shape() != m_hat.shape())
    throw std::invalid_argument("decoding_loss: message shape mismatch");
  Tensor loss = ad::l2_norm(ad::sub(m, m_hat));
  if (alpha != 0.0f && feat.defined() && feat_hat.defined()) {
    if (feat.shape() != feat_hat.shape())
      throw std::invalid_argument("decoding_loss: feature map shape mismatch");
    loss = ad::add(loss, ad::mul_scalar(ad::l2_norm(ad::sub(feat, feat_hat)), alpha));
  }
  return loss;
}

AdversarialLosses adversarial_losses(const Tensor& d_real, const Tensor& d_fake) {
  if (d_real.numel() != 1 || d_fake.numel() != 1)
    throw std::invalid_argument("adversarial_losses: expects scalar probabilities");
  Tensor dr = ad::clamp(d_real, kProbEps, 1.0f - kProbEps);
  Tensor df = ad::clamp(d_fake, kProbEps, 1.0f - kProbEps);
  Tensor one_minus_dr = ad::add_scalar(ad::mul_scalar(dr, -1.0f), 1.0f);
  Tensor one_minus_df = ad::add_scalar(ad::mul_scalar(df, -1.0f), 1.0f);
  AdversarialLosses out;
  out.dis_printed = ad::add(ad::log(one_minus_dr), ad::log(df));
  out.adv_printed = ad::log(one_minus_df);
  out.dis = ad::mul_scalar(out.dis_printed, -1.0f);
  out.adv = ad::mul_scalar(out.adv_printed, -1.0f);
  return out;
}

std::pair<double, double> printed_gan_formulas(double d_real, double d_fake) {
  auto clamp01 = [](double p) {
    return std::min(1.0 - (double)kProbEps, std::max((double)kProbEps, p));
  };
  const double dr = clamp01(d_real), df = clamp01(d_fake);
  return {std::log(1.0 - dr) + std::log(df), std::log(1.0 - df)};
}

Tensor total_loss(const Tensor& per, const Tensor& dec, const Tensor& adv,
                  const LossWeights& w) {
  w.validate();
  Tensor total = ad::mul_scalar(per, w.lambda_per);
  total = ad::add(total, ad::mul_scalar(dec, w.lambda_dec));
  total = ad::add(total, ad::mul_scalar(adv, w.lambda_adv));
  return total;
}

Tensor student_perceptual_loss(const Tensor& x_w_student, const Tensor& x_w_teacher,
                               const std::vector<float>& alpha_scales) {
  return perceptual_loss(x_w_student, x_w_teacher, alpha_scales);
}

}  // namespace pkdmark::losses
