#include "pkdmark/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "pkdmark/rng.hpp"

namespace pkdmark::training {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void CorpusSpec::validate() const {
  if (sample_rate <= 0) throw std::invalid_argument("CorpusSpec: bad sample rate");
  if (clip_seconds <= 0) throw std::invalid_argument("CorpusSpec: bad clip length");
  if (std::fabs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw std::invalid_argument("CorpusSpec: split fractions must sum to 1");
  if (source == Source::Synthetic && n_clips < 3)
    throw std::invalid_argument("CorpusSpec: need at least 3 synthetic clips");
  if (source == Source::WavDir && wav_dir.empty())
    throw std::invalid_argument("CorpusSpec: wav_dir not set");
}

dsp::AudioClip synth_speech_clip(uint64_t seed, int sample_rate, int len) {
  rng::Prng rng(seed);
  dsp::AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.assign(len, 0.0);

  const double f0 = rng.uniform(80.0, 400.0);
  const int max_harm = std::max(1, std::min(14, (int)(4200.0 / f0)));
  const double formants[3] = {rng.uniform(400.0, 700.0), rng.uniform(1100.0, 1900.0),
                              rng.uniform(2300.0, 3200.0)};
  const double bw[3] = {90.0, 140.0, 200.0};

  std::vector<double> amp(max_harm), phase(max_harm);
  for (int h = 0; h < max_harm; ++h) {
    const double freq = f0 * (h + 1);
    double shaped = 0.04 / (h + 1);
    for (int fi = 0; fi < 3; ++fi) {
      const double d = (freq - formants[fi]) / bw[fi];
      shaped += std::exp(-0.5 * d * d) / (fi + 1);
    }
    amp[h] = shaped / std::sqrt((double)(h + 1));
    phase[h] = rng.uniform(0.0, 2.0 * kPi);
  }

  const double vib_rate = rng.uniform(4.0, 7.0);
  const double vib_depth = rng.uniform(0.002, 0.012);
  const double vib_phase = rng.uniform(0.0, 2.0 * kPi);

  // voiced part via incremental phase so vibrato stays coherent
  double inst_phase = 0.0;
  std::vector<double> voiced(len, 0.0);
  for (int t = 0; t < len; ++t) {
    const double ts = (double)t / sample_rate;
    const double f = f0 * (1.0 + vib_depth * std::sin(2.0 * kPi * vib_rate * ts + vib_phase));
    inst_phase += 2.0 * kPi * f / sample_rate;
    double v = 0.0;
    for (int h = 0; h < max_harm; ++h) v += amp[h] * std::sin((h + 1) * inst_phase + phase[h]);
    voiced[t] = v;
  }

  // band-limited noise floor: white noise through a single-pole lowpass
  std::vector<double> noise(len);
  double lp = 0.0;
  const double pole = std::exp(-2.0 * kPi * 2500.0 / sample_rate);
  for (int t = 0; t < len; ++t) {
    lp = pole * lp + (1.0 - pole) * rng.normal();
    noise[t] = lp;
  }

  // segment-level amplitude envelope with edge fades
  const int n_seg = rng.uniform_int(2, 4);
  std::vector<double> seg_gain(n_seg);
  for (auto& g : seg_gain) g = rng.uniform(0.45, 1.0);
  const bool gap = rng.uniform() < 0.3;
  const int gap_seg = gap ? rng.uniform_int(0, n_seg - 1) : -1;
  const int fade = std::max(1, sample_rate / 100);  // 10 ms

  const double noise_mix = rng.uniform(0.05, 0.2);
  for (int t = 0; t < len; ++t) {
    const int seg = std::min(n_seg - 1, t * n_seg / len);
    double env = (seg == gap_seg) ? 0.0 : seg_gain[seg];
    // soften segment boundaries
    const int seg_pos = t - seg * len / n_seg;
    if (seg_pos < fade) {
      const int prev = seg == 0 ? seg : seg - 1;
      const double prev_env = (prev == gap_seg) ? 0.0 : seg_gain[prev];
      const double a = (double)seg_pos / fade;
      env = prev_env * (1.0 - a) + env * a;
    }
    if (t < fade) env *= (double)t / fade;
    if (len - 1 - t < fade) env *= (double)(len - 1 - t) / fade;
    clip.samples[t] = env * (voiced[t] * (1.0 - noise_mix) + noise[t] * noise_mix);
  }

  double peak = 1e-9;
  for (double v : clip.samples) peak = std::max(peak, std::fabs(v));
  const double target = rng.uniform(0.45, 0.7);
  for (auto& v : clip.samples) v *= target / peak;
  return clip;
}

Corpus::Corpus(const CorpusSpec& spec, uint64_t seed) : spec_(spec), seed_(seed) {
  spec_.validate();
  int total = 0;
  if (spec_.source == CorpusSpec::Source::Synthetic) {
    total = spec_.n_clips;
  } else {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (fs::exists(spec_.wav_dir))
      for (const auto& e : fs::directory_iterator(spec_.wav_dir))
        if (e.path().extension() == ".wav") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw std::runtime_error("Corpus: no .wav files in " + spec_.wav_dir);
    const int clip_len = spec_.clip_len();
    for (const auto& f : files) {
      dsp::AudioClip full = dsp::read_wav(f, spec_.sample_rate);
      for (int off = 0; off + clip_len <= full.length(); off += clip_len) {
        dsp::AudioClip c;
        c.sample_rate = spec_.sample_rate;
        c.samples.assign(full.samples.begin() + off, full.samples.begin() + off + clip_len);
        loaded_.push_back(std::move(c));
      }
    }
    if (loaded_.empty())
      throw std::runtime_error("Corpus: wav files shorter than one clip");
    total = (int)loaded_.size();
  }
  train_n_ = std::max(1, (int)(total * spec_.train_frac));
  val_n_ = std::max(1, (int)(total * spec_.val_frac));
  test_n_ = std::max(1, total - train_n_ - val_n_);
  if (train_n_ + val_n_ + test_n_ > total) {
    train_n_ = total - val_n_ - test_n_;
    if (train_n_ < 1) throw std::runtime_error("Corpus: too few clips for the requested split");
  }
}

dsp::AudioClip Corpus::clip_at(int idx) const {
  if (spec_.source == CorpusSpec::Source::Synthetic)
    return synth_speech_clip(seed_ * 0x9e3779b97f4a7c15ull + (uint64_t)idx, spec_.sample_rate,
                             spec_.clip_len());
  return loaded_[idx];
}

dsp::AudioClip Corpus::train_clip(int i) const {
  if (i < 0 || i >= train_n_) throw std::out_of_range("Corpus: train index");
  return clip_at(i);
}

dsp::AudioClip Corpus::val_clip(int i) const {
  if (i < 0 || i >= val_n_) throw std::out_of_range("Corpus: val index");
  return clip_at(train_n_ + i);
}

dsp::AudioClip Corpus::test_clip(int i) const {
  if (i < 0 || i >= test_n_) throw std::out_of_range("Corpus: test index");
  return clip_at(train_n_ + val_n_ + i);
}

}  // namespace pkdmark::training
