#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pkdmark/dsp.hpp"

namespace pkdmark::training {

struct CorpusSpec {
  enum class Source { Synthetic, WavDir };
  Source source = Source::Synthetic;
  std::string wav_dir;
  double clip_seconds = 0.6;
  int sample_rate = 24000;
  int n_clips = 2000;  // synthetic population size
  double train_frac = 0.9;
  double val_frac = 0.05;
  double test_frac = 0.05;

  int clip_len() const { return (int)(clip_seconds * sample_rate + 0.5); }
  void validate() const;
};

// Deterministic speech-like clip: harmonic stack with formant-shaped
// amplitudes, vibrato, band-limited noise, amplitude envelope and
// occasional silence gaps.
dsp::AudioClip synth_speech_clip(uint64_t seed, int sample_rate, int len);

// Synthetic clips are generated lazily per index; wav_dir clips are sliced
// from the directory's files at load time.
class Corpus {
 public:
  Corpus(const CorpusSpec& spec, uint64_t seed);

  int train_size() const { return train_n_; }
  int val_size() const { return val_n_; }
  int test_size() const { return test_n_; }

  dsp::AudioClip train_clip(int i) const;
  dsp::AudioClip val_clip(int i) const;
  dsp::AudioClip test_clip(int i) const;

 private:
  dsp::AudioClip clip_at(int global_index) const;

  CorpusSpec spec_;
  uint64_t seed_;
  int train_n_ = 0, val_n_ = 0, test_n_ = 0;
  std::vector<dsp::AudioClip> loaded_;  // wav_dir mode only
};

}  // namespace pkdmark::training
