#pragma once

#include <utility>
#include <vector>

#include "pkdmark/autodiff.hpp"

namespace pkdmark::losses {

struct LossWeights {
  float lambda_per = 1.0f;
  float lambda_dec = 10.0f;
  float lambda_adv = 0.1f;
  std::vector<float> alpha_scales = {1, 1, 1, 1, 1, 1, 1};  // one per scale 2^5..2^11
  float alpha_featmap = 1.0f;

  void validate() const;
};

struct LossReport {
  double per = 0, dec = 0, adv = 0, dis = 0, total = 0;
};

// Multi-scale STFT loss over windows 2^5..2^11 (hop = window/4): per scale,
// RMS of the linear-magnitude difference plus RMS of the log-magnitude
// difference, weighted by alpha_scales. Scales longer than the signal are
// skipped.
ad::Tensor perceptual_loss(const ad::Tensor& x, const ad::Tensor& x_w,
                           const std::vector<float>& alpha_scales);

// || m - m_hat ||_2 + alpha * || M - M_hat ||_2 (plain L2 norms).
// Pass undefined feature-map tensors (or alpha = 0) to drop the second term.
ad::Tensor decoding_loss(const ad::Tensor& m, const ad::Tensor& m_hat,
                         const ad::Tensor& feat, const ad::Tensor& feat_hat,
                         float alpha);

// d(.) is the discriminator probability that the input is watermarked.
// dis/adv are the quantities the two players minimize; *_printed are the
// formulas log(1-d(x)) + log(d(x_w)) and log(1-d(x_w)) kept for reference.
struct AdversarialLosses {
  ad::Tensor dis;          // -(log d(x_w) + log(1 - d(x)))
  ad::Tensor adv;          // -log(1 - d(x_w))
  ad::Tensor dis_printed;  // log(1 - d(x)) + log(d(x_w))
  ad::Tensor adv_printed;  // log(1 - d(x_w))
};
AdversarialLosses adversarial_losses(const ad::Tensor& d_real, const ad::Tensor& d_fake);

// Plain-double evaluation of the reference formulas above, for tests.
std::pair<double, double> printed_gan_formulas(double d_real, double d_fake);

ad::Tensor total_loss(const ad::Tensor& per, const ad::Tensor& dec, const ad::Tensor& adv,
                      const LossWeights& w);

// Same multi-scale STFT form, between student and teacher watermarked signals.
ad::Tensor student_perceptual_loss(const ad::Tensor& x_w_student,
                                   const ad::Tensor& x_w_teacher,
                                   const std::vector<float>& alpha_scales);

}  // namespace pkdmark::losses
