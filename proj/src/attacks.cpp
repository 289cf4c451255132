#include "pkdmark/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <stdexcept>

#include "pkdmark/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pkdmark::attacks {

namespace {
constexpr double kPi = 3.14159265358979323846;

const char* kNames[] = {"ND", "GN", "MF", "CODEC", "LP", "DS", "QT",
                        "AS", "EA", "SS", "FS", "RA", "PU", "PD"};
}  // namespace

const char* kind_name(Kind k) { return kNames[(int)k]; }

Kind kind_from_name(const std::string& name) {
  std::string up = name;
  for (auto& c : up) c = (char)std::toupper((unsigned char)c);
  if (up == "MP3") up = "CODEC";  // reporting alias
  for (int i = 0; i < 14; ++i)
    if (up == kNames[i]) return (Kind)i;
  std::string valid;
  for (int i = 0; i < 14; ++i) valid += std::string(i ? " " : "") + kNames[i];
  throw std::invalid_argument("unknown attack kind '" + name + "' (valid: " + valid + ")");
}

const std::vector<Kind>& all_kinds() {
  static const std::vector<Kind> kinds = [] {
    std::vector<Kind> v;
    for (int i = 0; i < 14; ++i) v.push_back((Kind)i);
    return v;
  }();
  return kinds;
}

AttackSpec AttackSpec::make(Kind k, uint64_t seed) {
  AttackSpec s;
  s.kind = k;
  s.seed = seed;
  switch (k) {
    case Kind::SS: s.speed = 0.9; break;
    case Kind::FS: s.speed = 1.1; break;
    case Kind::PU: s.pitch_factor = 1.1; break;
    case Kind::PD: s.pitch_factor = 0.9; break;
    default: break;
  }
  switch (k) {
    case Kind::ND:
    case Kind::GN:
    case Kind::AS:
    case Kind::EA:
    case Kind::LP:
    case Kind::RA:
      s.grad_policy = GradPolicy::Differentiable;
      break;
    default:
      s.grad_policy = GradPolicy::StraightThrough;
  }
  return s;
}

void AttackSpec::validate(int sample_rate) const {
  if (sample_rate <= 0) throw std::invalid_argument("attack: bad sample rate");
  switch (kind) {
    case Kind::GN:
      if (!std::isfinite(snr_db)) throw std::invalid_argument("GN: bad snr");
      break;
    case Kind::MF:
      if (median_kernel < 1 || median_kernel % 2 == 0)
        throw std::invalid_argument("MF: kernel must be odd and >= 1");
      break;
    case Kind::LP:
      if (lp_cutoff_hz <= 0 || lp_cutoff_hz >= sample_rate / 2.0)
        throw std::invalid_argument("LP: cutoff must lie below Nyquist for this sample rate");
      break;
    case Kind::CODEC:
      if (codec_mag_bits < 2 || codec_mag_bits > 16)
        throw std::invalid_argument("CODEC: mag bits out of range");
      if (codec_cutoff_hz <= 0 || codec_cutoff_hz >= sample_rate / 2.0)
        throw std::invalid_argument("CODEC: cutoff must lie below Nyquist");
      break;
    case Kind::DS:
      if (ds_rate <= 0 || ds_rate >= sample_rate)
        throw std::invalid_argument("DS: bottleneck rate must be below the working rate");
      break;
    case Kind::QT:
      if (quant_bits < 2 || quant_bits > 16) throw std::invalid_argument("QT: bits out of range");
      break;
    case Kind::AS:
      if (gain <= 0) throw std::invalid_argument("AS: gain must be positive");
      break;
    case Kind::EA:
      if (echo_delay_s < 0) throw std::invalid_argument("EA: negative delay");
      if ((int)std::llround(echo_delay_s * sample_rate) < 1)
        throw std::invalid_argument("EA: delay below one sample at this rate");
      break;
    case Kind::SS:
    case Kind::FS:
      if (speed <= 0 || speed > 4) throw std::invalid_argument("speed factor out of range");
      break;
    case Kind::RA:
      if (rt60_s <= 0 || reverb_len < 2) throw std::invalid_argument("RA: bad parameters");
      break;
    case Kind::PU:
    case Kind::PD:
      if (pitch_factor <= 0 || pitch_factor > 4)
        throw std::invalid_argument("pitch factor out of range");
      break;
    default:
      break;
  }
}

// ------------------------------------------------------------- helpers

namespace {

std::vector<double> gaussian_noise_matched(const std::vector<double>& x, double snr_db,
                                           uint64_t seed) {
  rng::Prng rng(seed);
  std::vector<double> n(x.size());
  double nx = 0.0, nn = 0.0;
  for (double v : x) nx += v * v;
  for (auto& v : n) {
    v = rng.normal();
    nn += v * v;
  }
  if (nx <= 0.0 || nn <= 0.0) return std::vector<double>(x.size(), 0.0);
  // scale so the realized SNR equals snr_db exactly
  const double target = std::sqrt(nx) / std::pow(10.0, snr_db / 20.0);
  const double scale = target / std::sqrt(nn);
  for (auto& v : n) v *= scale;
  return n;
}

std::vector<double> convolve_center(const std::vector<double>& x,
                                    const std::vector<double>& h) {
  // zero-phase: kernel center aligned with the current sample
  const int n = (int)x.size(), m = (int)h.size(), c = m / 2;
  std::vector<double> y(n, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && n > 4096)
#endif
  for (int t = 0; t < n; ++t) {
    double acc = 0.0;
    const int klo = std::max(0, c - t);
    const int khi = std::min(m, n + c - t);
    for (int k = klo; k < khi; ++k) acc += h[k] * x[t + k - c];
    y[t] = acc;
  }
  return y;
}

std::vector<double> convolve_causal_trunc(const std::vector<double>& x,
                                          const std::vector<double>& ir) {
  const int n = (int)x.size(), m = (int)ir.size();
  std::vector<double> y(n, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && n > 4096)
#endif
  for (int t = 0; t < n; ++t) {
    double acc = 0.0;
    const int khi = std::min(m, t + 1);
    for (int k = 0; k < khi; ++k) acc += ir[k] * x[t - k];
    y[t] = acc;
  }
  return y;
}

std::vector<double> restore_length(std::vector<double> x, size_t n) {
  x.resize(n, 0.0);
  return x;
}

double quantize_sample(double v, int levels, double step) {
  double c = std::clamp(v, -1.0, 1.0);
  long q = std::lround((c + 1.0) / step);
  if (q > levels - 1) q = levels - 1;
  if (q < 0) q = 0;
  return q * step - 1.0;
}

std::atomic<uint64_t> g_codec_counter{0};

dsp::AudioClip run_external_codec(const AttackSpec& spec, const dsp::AudioClip& x) {
  const uint64_t id = g_codec_counter.fetch_add(1);
  const std::string in_path = "/tmp/pkdmark_codec_in_" + std::to_string(id) + ".wav";
  const std::string out_path = "/tmp/pkdmark_codec_out_" + std::to_string(id) + ".wav";
  dsp::write_wav(x, in_path);
  std::string cmd = spec.codec_external_cmd;
  auto replace_all = [&cmd](const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = cmd.find(from, pos)) != std::string::npos) {
      cmd.replace(pos, from.size(), to);
      pos += to.size();
    }
  };
  replace_all("{in}", in_path);
  replace_all("{out}", out_path);
  const int rc = std::system(cmd.c_str());
  std::remove(in_path.c_str());
  if (rc != 0) {
    std::remove(out_path.c_str());
    throw std::runtime_error("external codec command failed (exit " + std::to_string(rc) +
                             "): " + cmd);
  }
  dsp::AudioClip out;
  try {
    out = dsp::read_wav(out_path, x.sample_rate);
  } catch (...) {
    std::remove(out_path.c_str());
    throw;
  }
  std::remove(out_path.c_str());
  return out;
}

dsp::AudioClip codec_proxy(const AttackSpec& spec, const dsp::AudioClip& x) {
  // band-limit then quantize spectral magnitudes: the two dominant effects
  // of lossy audio coding at moderate bitrates
  const auto taps = lowpass_taps(spec.codec_cutoff_hz, x.sample_rate, 257);
  dsp::AudioClip limited = x;
  limited.samples = convolve_center(x.samples, taps);

  dsp::StftConfig cfg;
  cfg.fft_size = x.length() >= 1025 ? 1024 : 256;
  cfg.hop = cfg.fft_size / 4;
  if (x.length() < cfg.fft_size / 2 + 1)
    throw std::invalid_argument("CODEC: clip too short for the proxy transform");
  dsp::ComplexSpec spec_x = dsp::stft(limited, cfg);
  double max_mag = 0.0;
  const size_t total = spec_x.re.size();
  std::vector<double> mag(total);
  for (size_t i = 0; i < total; ++i) {
    mag[i] = std::hypot(spec_x.re[i], spec_x.im[i]);
    max_mag = std::max(max_mag, mag[i]);
  }
  if (max_mag > 0.0) {
    const int levels = 1 << spec.codec_mag_bits;
    const double step = max_mag / (levels - 1);
    for (size_t i = 0; i < total; ++i) {
      if (mag[i] <= 0.0) continue;
      const double q = std::round(mag[i] / step) * step;
      const double r = q / mag[i];
      spec_x.re[i] *= r;
      spec_x.im[i] *= r;
    }
  }
  dsp::AudioClip out = dsp::istft(spec_x, x.sample_rate);
  out.samples = restore_length(std::move(out.samples), x.samples.size());
  return out;
}

}  // namespace

std::vector<double> lowpass_taps(double cutoff_hz, int sample_rate, int ntaps) {
  if (ntaps % 2 == 0) throw std::invalid_argument("lowpass_taps: tap count must be odd");
  const double fc = cutoff_hz / sample_rate;  // cycles per sample
  const int c = ntaps / 2;
  std::vector<double> h(ntaps);
  double sum = 0.0;
  for (int i = 0; i < ntaps; ++i) {
    const int k = i - c;
    double v;
    if (k == 0)
      v = 2.0 * fc;
    else
      v = std::sin(2.0 * kPi * fc * k) / (kPi * k);
    v *= 0.54 + 0.46 * std::cos(kPi * k / c);  // Hamming
    h[i] = v;
    sum += v;
  }
  for (auto& v : h) v /= sum;  // unit DC gain
  return h;
}

std::vector<double> reverb_impulse(uint64_t seed, int sample_rate, double rt60_s, int len,
                                   double wet) {
  rng::Prng rng(seed);
  std::vector<double> ir(len, 0.0);
  ir[0] = 1.0;
  const double decay = std::log(1000.0) / (rt60_s * sample_rate);  // 60 dB over rt60
  for (int i = 1; i < len; ++i) ir[i] = wet * rng.normal() * std::exp(-decay * i);
  return ir;
}

std::vector<double> time_stretch(const std::vector<double>& x, int target_len) {
  const int n = (int)x.size();
  if (n == 0 || target_len <= 0) return std::vector<double>(std::max(0, target_len), 0.0);
  int grain = 1024;
  while (grain > n && grain > 8) grain /= 2;
  const int hop_s = grain / 4;
  std::vector<double> win(grain);
  for (int i = 0; i < grain; ++i) win[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / grain);
  std::vector<double> out(target_len, 0.0), wsum(target_len, 0.0);
  const int span_out = std::max(1, target_len - grain);
  const int span_in = std::max(1, n - grain);
  for (int o = 0; o < target_len; o += hop_s) {
    const int a = (int)std::llround((double)o * span_in / span_out);
    for (int i = 0; i < grain; ++i) {
      const int oi = o + i, ai = std::min(n - 1, a + i);
      if (oi >= target_len) break;
      out[oi] += x[ai] * win[i];
      wsum[oi] += win[i];
    }
  }
  for (int i = 0; i < target_len; ++i)
    if (wsum[i] > 1e-9) out[i] /= wsum[i];
  return out;
}

double measured_snr_db(const dsp::AudioClip& ref, const dsp::AudioClip& deg) {
  if (ref.samples.size() != deg.samples.size())
    throw std::invalid_argument("measured_snr_db: length mismatch");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < ref.samples.size(); ++i) {
    num += ref.samples[i] * ref.samples[i];
    const double d = ref.samples[i] - deg.samples[i];
    den += d * d;
  }
  if (den == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(num / den);
}

// ---------------------------------------------------------------- apply

AttackOutcome apply(const AttackSpec& spec, const dsp::AudioClip& x) {
  spec.validate(x.sample_rate);
  if (x.samples.empty()) throw std::invalid_argument("attack: empty clip");
  const size_t n = x.samples.size();
  AttackOutcome out;
  out.applied = spec;
  out.audio.sample_rate = x.sample_rate;

  switch (spec.kind) {
    case Kind::ND:
      out.audio.samples = x.samples;
      break;
    case Kind::GN: {
      const auto noise = gaussian_noise_matched(x.samples, spec.snr_db, spec.seed);
      out.audio.samples.resize(n);
      for (size_t i = 0; i < n; ++i) out.audio.samples[i] = x.samples[i] + noise[i];
      break;
    }
    case Kind::MF: {
      const int h = spec.median_kernel / 2;
      out.audio.samples.resize(n);
      std::vector<double> window(spec.median_kernel);
      for (size_t t = 0; t < n; ++t) {
        for (int k = -h; k <= h; ++k) {
          long idx = std::clamp<long>((long)t + k, 0, (long)n - 1);
          window[k + h] = x.samples[idx];
        }
        std::nth_element(window.begin(), window.begin() + h, window.end());
        out.audio.samples[t] = window[h];
      }
      break;
    }
    case Kind::CODEC:
      out.audio = spec.codec_external_cmd.empty() ? codec_proxy(spec, x)
                                                  : run_external_codec(spec, x);
      out.audio.samples = restore_length(std::move(out.audio.samples), n);
      break;
    case Kind::LP: {
      const auto taps = lowpass_taps(spec.lp_cutoff_hz, x.sample_rate, 257);
      out.audio.samples = convolve_center(x.samples, taps);
      break;
    }
    case Kind::DS: {
      const double down = (double)spec.ds_rate / x.sample_rate;
      auto low = kernels::resample_ratio(x.samples.data(), (int)n, down);
      auto up = kernels::resample_ratio(low.data(), (int)low.size(), (double)n / low.size());
      out.audio.samples = restore_length(std::move(up), n);
      break;
    }
    case Kind::QT: {
      const int levels = 1 << spec.quant_bits;
      const double step = 2.0 / (levels - 1);
      out.audio.samples.resize(n);
      for (size_t i = 0; i < n; ++i)
        out.audio.samples[i] = quantize_sample(x.samples[i], levels, step);
      break;
    }
    case Kind::AS: {
      out.audio.samples.resize(n);
      for (size_t i = 0; i < n; ++i) out.audio.samples[i] = x.samples[i] * spec.gain;
      break;
    }
    case Kind::EA: {
      const int d = (int)std::llround(spec.echo_delay_s * x.sample_rate);
      out.audio.samples.resize(n);
      for (size_t t = 0; t < n; ++t) {
        double v = x.samples[t];
        if ((long)t >= d) v += spec.echo_gain * x.samples[t - d];
        out.audio.samples[t] = v;
      }
      break;
    }
    case Kind::SS:
    case Kind::FS: {
      auto stretched = kernels::resample_ratio(x.samples.data(), (int)n, 1.0 / spec.speed);
      auto back = kernels::resample_ratio(stretched.data(), (int)stretched.size(),
                                          (double)n / stretched.size());
      out.audio.samples = restore_length(std::move(back), n);
      break;
    }
    case Kind::RA: {
      const auto ir =
          reverb_impulse(spec.seed, x.sample_rate, spec.rt60_s, spec.reverb_len, spec.reverb_wet);
      out.audio.samples = convolve_causal_trunc(x.samples, ir);
      break;
    }
    case Kind::PU:
    case Kind::PD: {
      auto shifted = kernels::resample_ratio(x.samples.data(), (int)n, 1.0 / spec.pitch_factor);
      out.audio.samples = time_stretch(shifted, (int)n);
      break;
    }
  }
  if (out.audio.samples.size() != n)
    throw std::logic_error("attack: output length was not restored");
  return out;
}

// ------------------------------------------------- differentiable version

namespace {

ad::Tensor fir_as_conv(const ad::Tensor& x, const std::vector<double>& centered_taps) {
  const int len = x.shape()[0];
  const int k = (int)centered_taps.size();
  std::vector<float> w(k);
  for (int i = 0; i < k; ++i) w[i] = (float)centered_taps[i];
  ad::Tensor img = ad::reshape(x, {1, 1, len});
  ad::Tensor kernel = ad::Tensor::from(std::move(w), {1, 1, 1, k});
  return ad::reshape(ad::conv2d(img, kernel, ad::Tensor()), {len});
}

dsp::AudioClip clip_from_tensor(const ad::Tensor& x, int sample_rate) {
  dsp::AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.assign(x.values().begin(), x.values().end());
  return clip;
}

}  // namespace

ad::Tensor apply_differentiable(const AttackSpec& spec, const ad::Tensor& x, int sample_rate) {
  if (x.shape().size() != 1) throw std::invalid_argument("apply_differentiable: rank-1 input");
  spec.validate(sample_rate);
  const int n = x.shape()[0];

  if (spec.grad_policy == GradPolicy::StraightThrough) {
    AttackOutcome out = apply(spec, clip_from_tensor(x, sample_rate));
    std::vector<float> vals(n);
    for (int i = 0; i < n; ++i) vals[i] = (float)out.audio.samples[i];
    return ad::straight_through(x, std::move(vals));
  }

  switch (spec.kind) {
    case Kind::ND:
      return x;
    case Kind::GN: {
      std::vector<double> xs(x.values().begin(), x.values().end());
      const auto noise = gaussian_noise_matched(xs, spec.snr_db, spec.seed);
      std::vector<float> nf(n);
      for (int i = 0; i < n; ++i) nf[i] = (float)noise[i];
      return ad::add(x, ad::Tensor::from(std::move(nf), {n}));
    }
    case Kind::AS:
      return ad::mul_scalar(x, (float)spec.gain);
    case Kind::EA: {
      const int d = (int)std::llround(spec.echo_delay_s * sample_rate);
      std::vector<double> taps(2 * d + 1, 0.0);
      taps[d] = 1.0;              // offset 0
      taps[0] = spec.echo_gain;   // offset -d
      return fir_as_conv(x, taps);
    }
    case Kind::LP:
      return fir_as_conv(x, lowpass_taps(spec.lp_cutoff_hz, sample_rate, 257));
    case Kind::RA: {
      const auto ir =
          reverb_impulse(spec.seed, sample_rate, spec.rt60_s, spec.reverb_len, spec.reverb_wet);
      const int m = (int)ir.size();
      std::vector<double> taps(2 * m - 1, 0.0);
      for (int i = 0; i < m; ++i) taps[m - 1 - i] = ir[i];
      return fir_as_conv(x, taps);
    }
    default:
      throw std::logic_error("apply_differentiable: kind is not differentiable");
  }
}

// ----------------------------------------------------------------- menu

void AttackMenu::validate() const {
  if (entries.empty()) throw std::invalid_argument("attack menu: empty");
  double sum = 0.0;
  bool has_nd = false;
  for (const auto& e : entries) {
    if (e.prob < 0) throw std::invalid_argument("attack menu: negative probability");
    sum += e.prob;
    if (e.spec.kind == Kind::ND && e.prob > 0) has_nd = true;
  }
  if (std::fabs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("attack menu: probabilities must sum to 1");
  if (!has_nd)
    throw std::invalid_argument("attack menu: ND must be included with nonzero probability");
}

AttackSpec sample_attack(rng::Prng& rng, const AttackMenu& menu) {
  menu.validate();
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& e : menu.entries) {
    acc += e.prob;
    if (u < acc) return e.spec;
  }
  return menu.entries.back().spec;
}

}  // namespace pkdmark::attacks
