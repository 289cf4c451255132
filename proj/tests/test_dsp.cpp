#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "pkdmark/dsp.hpp"
#include "pkdmark/rng.hpp"

using namespace pkdmark;

namespace {
constexpr double kPi = 3.14159265358979323846;

dsp::AudioClip noise_clip(int n, uint64_t seed, int sr = 24000) {
  rng::Prng rng(seed);
  dsp::AudioClip c;
  c.sample_rate = sr;
  c.samples.resize(n);
  for (auto& v : c.samples) v = 0.4 * rng.normal();
  return c;
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b, int lo, int hi) {
  double num = 0, den = 0;
  for (int i = lo; i < hi; ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("stft shape law") {
  dsp::StftConfig cfg;
  CHECK(cfg.bins() == 513);  // fft 1024 -> 513 bins
  rng::Prng rng(5);
  for (int len : {1024, 4000, 24000, 24001, 30000}) {
    auto spec = dsp::stft(noise_clip(len, len), cfg);
    CHECK(spec.bins == 513);
    CHECK(spec.frames == dsp::frame_count(len, cfg));
    CHECK(spec.frames == len / cfg.hop + 1);
    CHECK(spec.origin_len == len);
  }
}

TEST_CASE("all-zero clip gives all-zero spectrogram and back") {
  dsp::StftConfig cfg;
  dsp::AudioClip zeros;
  zeros.samples.assign(24000, 0.0);
  auto spec = dsp::stft(zeros, cfg);
  for (double v : spec.re) CHECK(v == 0.0);
  for (double v : spec.im) CHECK(v == 0.0);
  auto back = dsp::istft(spec, 24000);
  CHECK(back.length() == 24000);
  for (double v : back.samples) CHECK(v == 0.0);
}

TEST_CASE("istft(stft(x)) round trip") {
  dsp::StftConfig cfg;
  auto clip = noise_clip(24000, 7);
  auto spec = dsp::stft(clip, cfg);
  auto back = dsp::istft(spec, clip.sample_rate);
  REQUIRE(back.length() == clip.length());  // origin_len preserved exactly
  // interior error (excluding fft_size samples at each edge)
  CHECK(rel_l2(back.samples, clip.samples, cfg.fft_size, clip.length() - cfg.fft_size) < 1e-6);
  // with reflect padding + WOLA the edges reconstruct too
  CHECK(rel_l2(back.samples, clip.samples, 0, clip.length()) < 1e-6);
}

TEST_CASE("stft linearity") {
  dsp::StftConfig cfg;
  auto x = noise_clip(12000, 8);
  auto y = noise_clip(12000, 9);
  dsp::AudioClip z = x;
  const double a = 0.7, b = -1.3;
  for (int i = 0; i < 12000; ++i) z.samples[i] = a * x.samples[i] + b * y.samples[i];
  auto sx = dsp::stft(x, cfg), sy = dsp::stft(y, cfg), sz = dsp::stft(z, cfg);
  double max_err = 0;
  for (size_t i = 0; i < sz.re.size(); ++i) {
    max_err = std::max(max_err, std::fabs(sz.re[i] - (a * sx.re[i] + b * sy.re[i])));
    max_err = std::max(max_err, std::fabs(sz.im[i] - (a * sx.im[i] + b * sy.im[i])));
  }
  CHECK(max_err < 1e-6);
}

TEST_CASE("Parseval-style energy identity") {
  dsp::StftConfig cfg;
  auto clip = noise_clip(20000, 10);
  auto spec = dsp::stft(clip, cfg);
  // sum_k c_k |X[t,k]|^2 == N * sum_n (w[n] x_frame[n])^2, summed over frames:
  // N * sum_p x_pad[p]^2 * wsum[p] with wsum computed once from the window
  double lhs = 0;
  for (int t = 0; t < spec.frames; ++t)
    for (int k = 0; k < spec.bins; ++k) {
      const double c = (k == 0 || k == cfg.fft_size / 2) ? 1.0 : 2.0;
      lhs += c * (spec.re_at(t, k) * spec.re_at(t, k) + spec.im_at(t, k) * spec.im_at(t, k));
    }
  const auto win = dsp::make_window(cfg);
  const int pad = cfg.fft_size / 2;
  const int padded = clip.length() + cfg.fft_size;
  std::vector<double> wsum(padded, 0.0);
  for (int t = 0; t < spec.frames; ++t)
    for (int i = 0; i < cfg.fft_size && t * cfg.hop + i < padded; ++i)
      wsum[t * cfg.hop + i] += win[i] * win[i];
  auto padded_at = [&](int i) {
    int j = i - pad;
    if (j < 0) j = -j;
    if (j >= clip.length()) j = 2 * (clip.length() - 1) - j;
    return clip.samples[j];
  };
  double rhs = 0;
  for (int i = 0; i < padded; ++i) rhs += padded_at(i) * padded_at(i) * wsum[i];
  rhs *= cfg.fft_size;
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
}

TEST_CASE("bin-centered sine concentrates on three window bins") {
  // periodic Hann has a 3-bin DFT, so a bin-centered sine leaks into
  // exactly the two neighbouring bins and nowhere else
  dsp::StftConfig cfg;
  const int k0 = 100;
  const double freq = (double)k0 * 24000.0 / cfg.fft_size;
  dsp::AudioClip sine;
  sine.samples.resize(24000);
  for (int i = 0; i < 24000; ++i) sine.samples[i] = std::sin(2.0 * kPi * freq * i / 24000.0);
  auto spec = dsp::stft(sine, cfg);
  const int t = spec.frames / 2;  // interior frame
  double peak = 0;
  for (int k = 0; k < spec.bins; ++k)
    peak = std::max(peak, std::hypot(spec.re_at(t, k), spec.im_at(t, k)));
  for (int k = 0; k < spec.bins; ++k) {
    if (std::abs(k - k0) <= 1) continue;
    const double mag = std::hypot(spec.re_at(t, k), spec.im_at(t, k));
    CHECK(mag < 1e-8 * peak);
  }
  const double center = std::hypot(spec.re_at(t, k0), spec.im_at(t, k0));
  CHECK(center > 0.4 * peak);
}

TEST_CASE("istft rejects mismatched metadata") {
  dsp::StftConfig cfg;
  auto spec = dsp::stft(noise_clip(12000, 11), cfg);
  spec.origin_len = 500;  // wrong frame count for this length
  CHECK_THROWS(dsp::istft(spec, 24000));
}

TEST_CASE("stft input validation") {
  dsp::StftConfig cfg;
  dsp::AudioClip empty;
  CHECK_THROWS(dsp::stft(empty, cfg));
  dsp::AudioClip nan_clip = noise_clip(4000, 12);
  nan_clip.samples[5] = std::nan("");
  CHECK_THROWS(dsp::stft(nan_clip, cfg));
  dsp::StftConfig bad;
  bad.hop = 0;
  CHECK_THROWS(dsp::stft(noise_clip(4000, 13), bad));
}

TEST_CASE("wav 16-bit mono round trip is bit-stable") {
  rng::Prng rng(14);
  dsp::AudioClip clip;
  clip.sample_rate = 24000;
  clip.samples.resize(5000);
  for (auto& v : clip.samples) {
    // start from exactly representable int16 amplitudes
    v = (double)rng.uniform_int(-32768, 32767) / 32768.0;
  }
  const char* path1 = "/tmp/pkdmark_test_rt1.wav";
  const char* path2 = "/tmp/pkdmark_test_rt2.wav";
  dsp::write_wav(clip, path1);
  auto clip2 = dsp::read_wav(path1);
  CHECK(clip2.sample_rate == 24000);
  REQUIRE(clip2.length() == clip.length());
  dsp::write_wav(clip2, path2);
  // compare file bytes
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
  CHECK(slurp(path1) == slurp(path2));
  std::remove(path1);
  std::remove(path2);
}

TEST_CASE("wav amplitude scaling: int16 16384 reads as 0.5") {
  dsp::AudioClip clip;
  clip.sample_rate = 24000;
  clip.samples.assign(100, 16384.0 / 32768.0);
  const char* path = "/tmp/pkdmark_test_amp.wav";
  dsp::write_wav(clip, path);
  auto back = dsp::read_wav(path);
  CHECK(std::fabs(back.samples[0] - 0.5) <= 1.0 / 32768.0);
  std::remove(path);
}

TEST_CASE("stereo wav downmixes by averaging") {
  // hand-build a 2-channel PCM16 file with L=0.2, R=0.4
  const char* path = "/tmp/pkdmark_test_stereo.wav";
  const int n = 200;
  const int16_t l = (int16_t)std::lround(0.2 * 32768.0);
  const int16_t r = (int16_t)std::lround(0.4 * 32768.0);
  FILE* f = std::fopen(path, "wb");
  REQUIRE(f);
  const uint32_t data_len = n * 4;
  unsigned char hdr[44] = {0};
  std::memcpy(hdr, "RIFF", 4);
  std::memcpy(hdr + 8, "WAVEfmt ", 8);
  std::memcpy(hdr + 36, "data", 4);
  auto put32 = [&](int off, uint32_t v) {
    for (int i = 0; i < 4; ++i) hdr[off + i] = (v >> (8 * i)) & 0xff;
  };
  auto put16 = [&](int off, uint16_t v) {
    hdr[off] = v & 0xff;
    hdr[off + 1] = (v >> 8) & 0xff;
  };
  put32(4, 36 + data_len);
  put32(16, 16);
  put16(20, 1);
  put16(22, 2);
  put32(24, 24000);
  put32(28, 24000 * 4);
  put16(32, 4);
  put16(34, 16);
  put32(40, data_len);
  std::fwrite(hdr, 1, 44, f);
  for (int i = 0; i < n; ++i) {
    unsigned char s[4] = {(unsigned char)(l & 0xff), (unsigned char)((l >> 8) & 0xff),
                          (unsigned char)(r & 0xff), (unsigned char)((r >> 8) & 0xff)};
    std::fwrite(s, 1, 4, f);
  }
  std::fclose(f);
  auto clip = dsp::read_wav(path);
  REQUIRE(clip.length() == n);
  CHECK(std::fabs(clip.samples[0] - 0.3) < 1e-4);
  std::remove(path);
}

TEST_CASE("malformed wav headers are rejected") {
  const char* path = "/tmp/pkdmark_test_bad.wav";
  FILE* f = std::fopen(path, "wb");
  std::fwrite("NOTAWAVEFILE", 1, 12, f);
  std::fclose(f);
  CHECK_THROWS(dsp::read_wav(path));
  std::remove(path);
  CHECK_THROWS(dsp::read_wav("/tmp/definitely_not_here_pkdmark.wav"));
}

TEST_CASE("resample module API: identity and length law") {
  auto clip = noise_clip(24000, 15);
  auto same = dsp::resample(clip, 24000);
  for (int i = 0; i < clip.length(); ++i)
    CHECK(std::fabs(same.samples[i] - clip.samples[i]) < 1e-7);
  auto down = dsp::resample(clip, 8000);
  CHECK(down.length() == 8000);
  CHECK(down.sample_rate == 8000);
  CHECK_THROWS(dsp::resample(clip, 0));
}
