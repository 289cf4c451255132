#include "pkdmark/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pkdmark::kernels {

namespace {
std::atomic<bool> g_parallel{true};
constexpr double kPi = 3.14159265358979323846;
}  // namespace

void set_parallel(bool on) { g_parallel.store(on); }
bool parallel_enabled() { return g_parallel.load(); }

// ---------------------------------------------------------------- FFT

namespace {

struct Twiddles {
  std::vector<double> re, im;  // exp(-2*pi*i*k/n), k < n/2
};

// lock-free lazily built table per power of two (double-checked publish)
const Twiddles& twiddles_for(int n) {
  constexpr int kMaxLog2 = 24;
  static std::atomic<const Twiddles*> cache[kMaxLog2 + 1] = {};
  static std::mutex build_mu;
  int lg = 0;
  while ((1 << lg) < n) ++lg;
  if (lg > kMaxLog2) throw std::invalid_argument("fft: size too large");
  const Twiddles* t = cache[lg].load(std::memory_order_acquire);
  if (t) return *t;
  std::lock_guard<std::mutex> lock(build_mu);
  t = cache[lg].load(std::memory_order_acquire);
  if (t) return *t;
  auto* fresh = new Twiddles;
  fresh->re.resize(n / 2);
  fresh->im.resize(n / 2);
  for (int k = 0; k < n / 2; ++k) {
    fresh->re[k] = std::cos(2.0 * kPi * k / n);
    fresh->im[k] = -std::sin(2.0 * kPi * k / n);
  }
  cache[lg].store(fresh, std::memory_order_release);
  return *fresh;
}

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

struct FftScratch {
  std::vector<double> a, b;
  double* get_a(int n) {
    if ((int)a.size() < n) a.resize(n);
    return a.data();
  }
  double* get_b(int n) {
    if ((int)b.size() < n) b.resize(n);
    return b.data();
  }
};

thread_local FftScratch g_fft_scratch;

}  // namespace

void fft(double* re, double* im, int n, int sign) {
  if (!is_pow2(n)) throw std::invalid_argument("fft: size must be a power of two");
  const Twiddles& tw = twiddles_for(n);
  // bit-reversal permutation
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (int len = 2; len <= n; len <<= 1) {
    const int half = len >> 1;
    const int stride = n / len;
    for (int base = 0; base < n; base += len) {
      for (int j = 0; j < half; ++j) {
        const double wr = tw.re[j * stride];
        const double wi = sign < 0 ? tw.im[j * stride] : -tw.im[j * stride];
        const int a = base + j, b = base + j + half;
        const double xr = re[b] * wr - im[b] * wi;
        const double xi = re[b] * wi + im[b] * wr;
        re[b] = re[a] - xr;
        im[b] = im[a] - xi;
        re[a] += xr;
        im[a] += xi;
      }
    }
  }
}

void rfft(const double* x, int n, double* out_re, double* out_im) {
  double* re = g_fft_scratch.get_a(n);
  double* im = g_fft_scratch.get_b(n);
  std::memcpy(re, x, sizeof(double) * n);
  std::memset(im, 0, sizeof(double) * n);
  fft(re, im, n, -1);
  for (int k = 0; k <= n / 2; ++k) {
    out_re[k] = re[k];
    out_im[k] = im[k];
  }
}

void irfft(const double* re, const double* im, int n, double* out_x) {
  double* fr = g_fft_scratch.get_a(n);
  double* fi = g_fft_scratch.get_b(n);
  fr[0] = re[0];
  fi[0] = 0.0;
  fr[n / 2] = re[n / 2];
  fi[n / 2] = 0.0;
  for (int k = 1; k < n / 2; ++k) {
    fr[k] = re[k];
    fi[k] = im[k];
    fr[n - k] = re[k];
    fi[n - k] = -im[k];
  }
  fft(fr, fi, n, +1);
  const double scale = 1.0 / n;
  for (int t = 0; t < n; ++t) out_x[t] = fr[t] * scale;
}

void rfft_adjoint(const double* gre, const double* gim, int n, double* gx) {
  double* fr = g_fft_scratch.get_a(n);
  double* fi = g_fft_scratch.get_b(n);
  std::memset(fr, 0, sizeof(double) * n);
  std::memset(fi, 0, sizeof(double) * n);
  for (int k = 0; k <= n / 2; ++k) {
    fr[k] = gre[k];
    fi[k] = gim[k];
  }
  fft(fr, fi, n, +1);
  std::memcpy(gx, fr, sizeof(double) * n);
}

void irfft_adjoint(const double* gx, int n, double* gre, double* gim) {
  double* fr = g_fft_scratch.get_a(n);
  double* fi = g_fft_scratch.get_b(n);
  std::memcpy(fr, gx, sizeof(double) * n);
  std::memset(fi, 0, sizeof(double) * n);
  fft(fr, fi, n, -1);
  const double scale = 1.0 / n;
  for (int k = 0; k <= n / 2; ++k) {
    const double c = (k == 0 || k == n / 2) ? 1.0 : 2.0;
    gre[k] = c * scale * fr[k];
    gim[k] = (k == 0 || k == n / 2) ? 0.0 : c * scale * fi[k];
  }
}

// --------------------------------------------------------------- GEMM

void gemm_ref(const float* a, const float* b, float* c, int m, int k, int n,
              bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = accumulate ? c[i * n + j] : 0.0f;
      for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void gemm_nt_ref(const float* a, const float* b, float* c, int m, int k, int n,
                 bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = accumulate ? c[i * n + j] : 0.0f;
      for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
  }
}

namespace {

constexpr int kGemmTile = 256;
constexpr int kGemmRows = 8;

// up to 8 rows x one column tile over a packed B panel; k-loop in fixed
// order, so the result matches gemm_ref bit-for-bit up to FMA contraction.
template <int MR>
inline void gemm_microkernel(const float* a, const float* bpack, float* c, int m0, int k,
                             int n, int j0, int jn, bool accumulate) {
  float acc[MR][kGemmTile];
  for (int r = 0; r < MR; ++r) {
    if (accumulate)
      std::memcpy(acc[r], c + (size_t)(m0 + r) * n + j0, sizeof(float) * jn);
    else
      std::memset(acc[r], 0, sizeof(float) * jn);
  }
  for (int p = 0; p < k; ++p) {
    const float* brow = bpack + (size_t)p * jn;
    float av[MR];
    for (int r = 0; r < MR; ++r) av[r] = a[(size_t)(m0 + r) * k + p];
    for (int j = 0; j < jn; ++j) {
      const float bv = brow[j];
      for (int r = 0; r < MR; ++r) acc[r][j] += av[r] * bv;
    }
  }
  for (int r = 0; r < MR; ++r)
    std::memcpy(c + (size_t)(m0 + r) * n + j0, acc[r], sizeof(float) * jn);
}

inline void gemm_block(const float* a, const float* bpack, float* c, int m0, int mrows,
                       int k, int n, int j0, int jn, bool accumulate) {
  switch (mrows) {
    case 8: gemm_microkernel<8>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    case 7: gemm_microkernel<7>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    case 6: gemm_microkernel<6>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    case 5: gemm_microkernel<5>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    case 4: gemm_microkernel<4>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    case 3: gemm_microkernel<3>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    case 2: gemm_microkernel<2>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
    default: gemm_microkernel<1>(a, bpack, c, m0, k, n, j0, jn, accumulate); break;
  }
}

}  // namespace

void gemm(const float* a, const float* b, float* c, int m, int k, int n,
          bool accumulate) {
  const int ntiles = (n + kGemmTile - 1) / kGemmTile;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g_parallel.load() && ntiles > 1)
#endif
  for (int tile = 0; tile < ntiles; ++tile) {
    const int j0 = tile * kGemmTile;
    const int jn = std::min(kGemmTile, n - j0);
    // pack the B panel once per tile; it is reused by every row block
    static thread_local std::vector<float> bpack;
    if ((int)bpack.size() < k * kGemmTile) bpack.resize((size_t)k * kGemmTile);
    for (int p = 0; p < k; ++p)
      std::memcpy(bpack.data() + (size_t)p * jn, b + (size_t)p * n + j0, sizeof(float) * jn);
    for (int m0 = 0; m0 < m; m0 += kGemmRows) {
      const int mrows = std::min(kGemmRows, m - m0);
      // microkernel reads the packed panel with row stride jn and offset 0
      gemm_block(a, bpack.data(), c, m0, mrows, k, n, j0, jn, accumulate);
    }
  }
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n,
             bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g_parallel.load() && m * n > 8)
#endif
  for (int ij = 0; ij < m * n; ++ij) {
    const int i = ij / n, j = ij % n;
    const float* ar = a + (size_t)i * k;
    const float* br = b + (size_t)j * k;
    float s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int p = 0;
    for (; p + 4 <= k; p += 4) {
      s0 += ar[p] * br[p];
      s1 += ar[p + 1] * br[p + 1];
      s2 += ar[p + 2] * br[p + 2];
      s3 += ar[p + 3] * br[p + 3];
    }
    float s = (s0 + s1) + (s2 + s3);
    for (; p < k; ++p) s += ar[p] * br[p];
    c[ij] = accumulate ? c[ij] + s : s;
  }
}

// ------------------------------------------------------------- conv2d

void conv2d_ref(const float* x, const float* wgt, const float* bias, float* y,
                int cin, int h, int w, int cout, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  for (int co = 0; co < cout; ++co) {
    for (int t = 0; t < h; ++t) {
      for (int f = 0; f < w; ++f) {
        float acc = bias ? bias[co] : 0.0f;
        for (int ci = 0; ci < cin; ++ci) {
          for (int a = 0; a < kh; ++a) {
            const int ti = t + a - ph;
            if (ti < 0 || ti >= h) continue;
            for (int bb = 0; bb < kw; ++bb) {
              const int fi = f + bb - pw;
              if (fi < 0 || fi >= w) continue;
              acc += wgt[((co * cin + ci) * kh + a) * kw + bb] *
                     x[(ci * h + ti) * w + fi];
            }
          }
        }
        y[(co * h + t) * w + f] = acc;
      }
    }
  }
}

namespace {

constexpr int kConvRowChunk = 48;

thread_local std::vector<float> g_col_scratch;

// im2col for rows [t0, t0+rows) of the output; col is (cin*kh*kw, rows*w).
void im2col_rows(const float* x, float* col, int cin, int h, int w, int kh,
                 int kw, int t0, int rows) {
  const int ph = kh / 2, pw = kw / 2;
  const int cols = rows * w;
  for (int ci = 0; ci < cin; ++ci) {
    for (int a = 0; a < kh; ++a) {
      for (int bb = 0; bb < kw; ++bb) {
        float* dst = col + (size_t)((ci * kh + a) * kw + bb) * cols;
        for (int r = 0; r < rows; ++r) {
          const int ti = t0 + r + a - ph;
          float* drow = dst + (size_t)r * w;
          if (ti < 0 || ti >= h) {
            std::memset(drow, 0, sizeof(float) * w);
            continue;
          }
          const float* srow = x + (size_t)(ci * h + ti) * w;
          const int off = bb - pw;
          const int lo = std::max(0, -off);
          const int hi = std::min(w, w - off);
          if (lo > 0) std::memset(drow, 0, sizeof(float) * lo);
          if (hi > lo) std::memcpy(drow + lo, srow + lo + off, sizeof(float) * (hi - lo));
          if (hi < w) std::memset(drow + hi, 0, sizeof(float) * (w - hi));
        }
      }
    }
  }
}

// Direct path for single-channel 1xK filters (long FIR kernels); im2col
// would materialize K copies of the signal.
void conv2d_direct_1x(const float* x, const float* wgt, const float* bias,
                      float* y, int h, int w, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g_parallel.load() && h * w > 4096)
#endif
  for (int tf = 0; tf < h * w; ++tf) {
    const int t = tf / w, f = tf % w;
    float acc = bias ? bias[0] : 0.0f;
    for (int a = 0; a < kh; ++a) {
      const int ti = t + a - ph;
      if (ti < 0 || ti >= h) continue;
      const int blo = std::max(0, pw - f);
      const int bhi = std::min(kw, w + pw - f);
      const float* xr = x + (size_t)ti * w + (f - pw);
      const float* wr = wgt + (size_t)a * kw;
      float s = 0.0f;
      for (int bb = blo; bb < bhi; ++bb) s += wr[bb] * xr[bb];
      acc += s;
    }
    y[tf] = acc;
  }
}

}  // namespace

void conv2d(const float* x, const float* wgt, const float* bias, float* y,
            int cin, int h, int w, int cout, int kh, int kw) {
  if ((kh % 2) == 0 || (kw % 2) == 0)
    throw std::invalid_argument("conv2d: kernel dims must be odd");
  if (cin == 1 && cout == 1) {
    conv2d_direct_1x(x, wgt, bias, y, h, w, kh, kw);
    return;
  }
  const int krows = cin * kh * kw;
  for (int t0 = 0; t0 < h; t0 += kConvRowChunk) {
    const int rows = std::min(kConvRowChunk, h - t0);
    const int cols = rows * w;
    if ((int)g_col_scratch.size() < krows * cols)
      g_col_scratch.resize((size_t)krows * cols);
    im2col_rows(x, g_col_scratch.data(), cin, h, w, kh, kw, t0, rows);
    // y rows for this chunk: (cout, cols) but strided by full h*w per channel;
    // run gemm into a compact buffer then scatter.
    static thread_local std::vector<float> out_buf;
    if ((int)out_buf.size() < cout * cols) out_buf.resize((size_t)cout * cols);
    gemm(wgt, g_col_scratch.data(), out_buf.data(), cout, krows, cols);
    for (int co = 0; co < cout; ++co) {
      float* dst = y + ((size_t)co * h + t0) * w;
      const float* src = out_buf.data() + (size_t)co * cols;
      if (bias) {
        const float bv = bias[co];
        for (int i = 0; i < cols; ++i) dst[i] = src[i] + bv;
      } else {
        std::memcpy(dst, src, sizeof(float) * cols);
      }
    }
  }
}

void conv2d_grad_w(const float* x, const float* gy, float* gw, float* gb,
                   int cin, int h, int w, int cout, int kh, int kw) {
  const int krows = cin * kh * kw;
  std::memset(gw, 0, sizeof(float) * (size_t)cout * krows);
  if (gb) {
    for (int co = 0; co < cout; ++co) {
      double acc = 0.0;
      const float* g = gy + (size_t)co * h * w;
      for (int i = 0; i < h * w; ++i) acc += g[i];
      gb[co] = (float)acc;
    }
  }
  static thread_local std::vector<float> col, gchunk;
  for (int t0 = 0; t0 < h; t0 += kConvRowChunk) {
    const int rows = std::min(kConvRowChunk, h - t0);
    const int cols = rows * w;
    if ((int)col.size() < krows * cols) col.resize((size_t)krows * cols);
    im2col_rows(x, col.data(), cin, h, w, kh, kw, t0, rows);
    if ((int)gchunk.size() < cout * cols) gchunk.resize((size_t)cout * cols);
    for (int co = 0; co < cout; ++co)
      std::memcpy(gchunk.data() + (size_t)co * cols, gy + ((size_t)co * h + t0) * w,
                  sizeof(float) * cols);
    gemm_nt(gchunk.data(), col.data(), gw, cout, cols, krows, /*accumulate=*/true);
  }
}

std::vector<float> flip_weights(const float* wgt, int cout, int cin, int kh, int kw) {
  std::vector<float> out((size_t)cin * cout * kh * kw);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int a = 0; a < kh; ++a)
        for (int bb = 0; bb < kw; ++bb)
          out[((ci * cout + co) * kh + (kh - 1 - a)) * kw + (kw - 1 - bb)] =
              wgt[((co * cin + ci) * kh + a) * kw + bb];
  return out;
}

// ---------------------------------------------------------- resampling

std::vector<double> resample_ratio(const double* x, int n, double ratio) {
  if (ratio <= 0.0) throw std::invalid_argument("resample_ratio: ratio must be > 0");
  if (ratio == 1.0) return std::vector<double>(x, x + n);
  const int out_len = (int)std::llround((double)n * ratio);
  std::vector<double> out(out_len, 0.0);
  const double scale = std::min(1.0, ratio);     // anti-alias cutoff factor
  const double cutoff = 0.475 * scale;           // cycles per input sample
  const int zeros = 16;                          // sinc zero crossings per side
  const double half_width = zeros / scale;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (g_parallel.load() && out_len > 4096)
#endif
  for (int j = 0; j < out_len; ++j) {
    const double pos = j / ratio;
    const int lo = (int)std::ceil(pos - half_width);
    const int hi = (int)std::floor(pos + half_width);
    double acc = 0.0;
    for (int i = std::max(0, lo); i <= std::min(n - 1, hi); ++i) {
      const double t = i - pos;
      double sinc;
      const double a = 2.0 * kPi * cutoff * t;
      if (std::fabs(a) < 1e-12)
        sinc = 2.0 * cutoff;
      else
        sinc = std::sin(a) / (kPi * t);
      const double win = 0.5 + 0.5 * std::cos(kPi * t / half_width);  // Hann
      acc += x[i] * sinc * win;
    }
    out[j] = acc;
  }
  return out;
}

}  // namespace pkdmark::kernels
