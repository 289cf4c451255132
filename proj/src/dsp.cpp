#include "pkdmark/dsp.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pkdmark/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pkdmark::dsp {

namespace {
constexpr double kPi = 3.14159265358979323846;

void check_finite(const AudioClip& clip, const char* who) {
  for (double v : clip.samples)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite sample");
}

// Reflect-padded sample lookup: pad of fft_size/2 on each side.
// Index i runs over the padded signal.
inline double padded_at(const std::vector<double>& x, int i, int pad) {
  const int n = (int)x.size();
  int j = i - pad;
  if (j < 0) j = -j;
  if (j >= n) j = 2 * (n - 1) - j;
  return x[(size_t)j];
}

}  // namespace

void StftConfig::validate() const {
  if (fft_size <= 0 || (fft_size & (fft_size - 1)) != 0)
    throw std::invalid_argument("StftConfig: fft_size must be a positive power of two");
  if (hop <= 0 || hop > fft_size)
    throw std::invalid_argument("StftConfig: need 0 < hop <= fft_size");
}

int frame_count(int len, const StftConfig& cfg) {
  cfg.validate();
  // padded length = len + fft_size; frames start at multiples of hop.
  return len / cfg.hop + 1;
}

std::vector<double> make_window(const StftConfig& cfg) {
  std::vector<double> w(cfg.fft_size);
  for (int i = 0; i < cfg.fft_size; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / cfg.fft_size);
  return w;
}

ComplexSpec stft(const AudioClip& clip, const StftConfig& cfg) {
  cfg.validate();
  if (clip.samples.empty()) throw std::invalid_argument("stft: empty clip");
  check_finite(clip, "stft");
  const int n = cfg.fft_size;
  const int pad = n / 2;
  if (clip.length() < pad + 1)
    throw std::invalid_argument("stft: clip too short for reflect padding");

  ComplexSpec spec;
  spec.config = cfg;
  spec.origin_len = clip.length();
  spec.frames = frame_count(clip.length(), cfg);
  spec.bins = cfg.bins();
  spec.re.assign((size_t)spec.frames * spec.bins, 0.0);
  spec.im.assign((size_t)spec.frames * spec.bins, 0.0);

  const std::vector<double> win = make_window(cfg);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && spec.frames > 1)
#endif
  for (int t = 0; t < spec.frames; ++t) {
    static thread_local std::vector<double> frame;
    if ((int)frame.size() < n) frame.resize(n);
    for (int i = 0; i < n; ++i)
      frame[i] = padded_at(clip.samples, t * cfg.hop + i, pad) * win[i];
    kernels::rfft(frame.data(), n, &spec.re[(size_t)t * spec.bins],
                  &spec.im[(size_t)t * spec.bins]);
  }
  return spec;
}

AudioClip istft(const ComplexSpec& spec, int sample_rate) {
  spec.config.validate();
  if (spec.bins != spec.config.bins())
    throw std::invalid_argument("istft: bin count does not match config");
  if (spec.frames != frame_count(spec.origin_len, spec.config))
    throw std::invalid_argument("istft: frame count does not match origin_len");

  const int n = spec.config.fft_size;
  const int hop = spec.config.hop;
  const int pad = n / 2;
  const int padded_len = spec.origin_len + n;
  const std::vector<double> win = make_window(spec.config);

  std::vector<double> acc(padded_len, 0.0), wsum(padded_len, 0.0);
  std::vector<double> frame(n);
  for (int t = 0; t < spec.frames; ++t) {
    kernels::irfft(&spec.re[(size_t)t * spec.bins], &spec.im[(size_t)t * spec.bins], n,
                   frame.data());
    const int base = t * hop;
    for (int i = 0; i < n && base + i < padded_len; ++i) {
      acc[base + i] += frame[i] * win[i];
      wsum[base + i] += win[i] * win[i];
    }
  }

  AudioClip out;
  out.sample_rate = sample_rate;
  out.samples.resize(spec.origin_len);
  for (int i = 0; i < spec.origin_len; ++i) {
    const double d = wsum[pad + i];
    if (d < 1e-10)
      throw std::runtime_error("istft: zero overlap-add normalization (window/hop pair invalid)");
    out.samples[i] = acc[pad + i] / d;
  }
  return out;
}

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw std::invalid_argument("resample: target_rate must be > 0");
  if (target_rate == clip.sample_rate) return clip;
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples = kernels::resample_ratio(clip.samples.data(), clip.length(),
                                        (double)target_rate / clip.sample_rate);
  return out;
}

// ------------------------------------------------------------- WAV I/O

namespace {

uint32_t read_u32(const unsigned char* p) {
  return (uint32_t)p[0] | ((uint32_t)p[1] << 8) | ((uint32_t)p[2] << 16) | ((uint32_t)p[3] << 24);
}
uint16_t read_u16(const unsigned char* p) { return (uint16_t)(p[0] | (p[1] << 8)); }

}  // namespace

AudioClip read_wav(const std::string& path, std::optional<int> target_rate) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  std::vector<unsigned char> bytes;
  unsigned char buf[65536];
  size_t got;
  while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.insert(bytes.end(), buf, buf + got);
  std::fclose(f);

  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("read_wav: malformed RIFF header in " + path);

  int channels = 0, rate = 0, bits = 0;
  size_t data_off = 0, data_len = 0;
  bool have_fmt = false;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const uint32_t chunk_len = read_u32(hdr + 4);
    const size_t body = pos + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (body + 16 > bytes.size()) throw std::runtime_error("read_wav: truncated fmt chunk");
      const uint16_t codec = read_u16(bytes.data() + body);
      if (codec != 1) throw std::runtime_error("read_wav: unsupported codec (PCM only)");
      channels = read_u16(bytes.data() + body + 2);
      rate = (int)read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data_off = body;
      data_len = std::min((size_t)chunk_len, bytes.size() - body);
      break;
    }
    pos = body + chunk_len + (chunk_len & 1);
  }
  if (!have_fmt || data_off == 0) throw std::runtime_error("read_wav: missing fmt/data chunk");
  if (channels < 1 || channels > 2) throw std::runtime_error("read_wav: only mono/stereo supported");
  if (bits != 16 && bits != 24) throw std::runtime_error("read_wav: only 16/24-bit PCM supported");

  const int bytes_per = bits / 8;
  const size_t frames = data_len / (bytes_per * channels);
  AudioClip clip;
  clip.sample_rate = rate;
  clip.samples.resize(frames);
  const unsigned char* d = bytes.data() + data_off;
  for (size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* s = d + (i * channels + c) * bytes_per;
      int32_t v;
      if (bits == 16) {
        v = (int16_t)(s[0] | (s[1] << 8));
        acc += v / 32768.0;
      } else {
        uint32_t u = (uint32_t)s[0] << 8 | (uint32_t)s[1] << 16 | (uint32_t)s[2] << 24;
        v = (int32_t)u >> 8;
        acc += v / 8388608.0;
      }
    }
    clip.samples[i] = acc / channels;
  }
  if (target_rate && *target_rate != clip.sample_rate) clip = resample(clip, *target_rate);
  return clip;
}

void write_wav(const AudioClip& clip, const std::string& path) {
  check_finite(clip, "write_wav");
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_wav: cannot open " + path);
  const uint32_t n = (uint32_t)clip.samples.size();
  const uint32_t data_len = n * 2;
  const uint32_t riff_len = 36 + data_len;
  const uint32_t rate = (uint32_t)clip.sample_rate;
  const uint32_t byte_rate = rate * 2;
  unsigned char hdr[44];
  std::memcpy(hdr, "RIFF", 4);
  std::memcpy(hdr + 8, "WAVEfmt ", 8);
  std::memcpy(hdr + 36, "data", 4);
  auto put32 = [&](int off, uint32_t v) {
    hdr[off] = v & 0xff; hdr[off + 1] = (v >> 8) & 0xff;
    hdr[off + 2] = (v >> 16) & 0xff; hdr[off + 3] = (v >> 24) & 0xff;
  };
  auto put16 = [&](int off, uint16_t v) { hdr[off] = v & 0xff; hdr[off + 1] = (v >> 8) & 0xff; };
  put32(4, riff_len);
  put32(16, 16);       // fmt chunk size
  put16(20, 1);        // PCM
  put16(22, 1);        // mono
  put32(24, rate);
  put32(28, byte_rate);
  put16(32, 2);        // block align
  put16(34, 16);       // bits
  put32(40, data_len);
  std::fwrite(hdr, 1, 44, f);
  std::vector<unsigned char> pcm((size_t)n * 2);
  for (uint32_t i = 0; i < n; ++i) {
    double v = clip.samples[i];
    if (v > 1.0) v = 1.0;
    if (v < -1.0) v = -1.0;
    long q = std::lround(v * 32768.0);
    if (q > 32767) q = 32767;
    if (q < -32768) q = -32768;
    pcm[i * 2] = (unsigned char)(q & 0xff);
    pcm[i * 2 + 1] = (unsigned char)((q >> 8) & 0xff);
  }
  std::fwrite(pcm.data(), 1, pcm.size(), f);
  std::fclose(f);
}

}  // namespace pkdmark::dsp
