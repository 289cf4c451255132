#pragma once

#include <optional>
#include <string>
#include <vector>

namespace pkdmark::dsp {

// Mono waveform, unit-range amplitudes. Values are kept at full precision
// internally; clamping to [-1, 1] happens only on PCM export.
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 24000;

  int length() const { return (int)samples.size(); }
  double seconds() const { return samples.empty() ? 0.0 : (double)samples.size() / sample_rate; }
};

enum class Window { PeriodicHann };
enum class PadMode { Reflect };

struct StftConfig {
  int fft_size = 1024;
  int hop = 600;
  Window window = Window::PeriodicHann;
  PadMode pad_mode = PadMode::Reflect;

  int bins() const { return fft_size / 2 + 1; }
  void validate() const;
};

// Number of analysis frames for a clip of `len` samples under `cfg`
// (reflect padding of fft_size/2 on each side).
int frame_count(int len, const StftConfig& cfg);

// Periodic Hann of length n.
std::vector<double> make_window(const StftConfig& cfg);

// T x F complex spectrogram, row-major.
struct ComplexSpec {
  std::vector<double> re, im;
  int frames = 0;
  int bins = 0;
  StftConfig config;
  int origin_len = 0;

  double& re_at(int t, int f) { return re[(size_t)t * bins + f]; }
  double& im_at(int t, int f) { return im[(size_t)t * bins + f]; }
  double re_at(int t, int f) const { return re[(size_t)t * bins + f]; }
  double im_at(int t, int f) const { return im[(size_t)t * bins + f]; }
};

ComplexSpec stft(const AudioClip& clip, const StftConfig& cfg);
AudioClip istft(const ComplexSpec& spec, int sample_rate);

// WAV (RIFF PCM, 16/24-bit, mono or stereo). Stereo is downmixed by
// averaging. If target_rate is set the clip is resampled after reading.
AudioClip read_wav(const std::string& path, std::optional<int> target_rate = {});
// Writes PCM 16-bit little-endian mono.
void write_wav(const AudioClip& clip, const std::string& path);

AudioClip resample(const AudioClip& clip, int target_rate);

}  // namespace pkdmark::dsp
