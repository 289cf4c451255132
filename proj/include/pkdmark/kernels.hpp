#pragma once

#include <cstdint>
#include <vector>

// Low-level numeric kernels. Every routine here has a serial reference
// twin (suffix _ref) used by the tests and the kernel benchmark; the
// unsuffixed versions are OpenMP-parallel but assign each output element
// to exactly one thread, so results do not depend on the thread count.

namespace pkdmark::kernels {

void set_parallel(bool on);
bool parallel_enabled();

// ---- FFT (double precision, power-of-two sizes) ----

// In-place complex FFT, unnormalized. sign = -1 forward, +1 inverse.
void fft(double* re, double* im, int n, int sign);

// Real-input transform, spectrum of length n/2+1.
void rfft(const double* x, int n, double* out_re, double* out_im);

// True inverse of rfft (conjugate symmetry + 1/n). Imaginary parts of
// bins 0 and n/2 are ignored.
void irfft(const double* re, const double* im, int n, double* out_x);

// Adjoint (transpose) maps of rfft/irfft viewed as linear R^n <-> R^(2(n/2+1)).
void rfft_adjoint(const double* gre, const double* gim, int n, double* gx);
void irfft_adjoint(const double* gx, int n, double* gre, double* gim);

// ---- single-precision GEMM ----

// c(m x n) = a(m x k) * b(k x n); accumulate adds into c instead of overwriting.
void gemm(const float* a, const float* b, float* c, int m, int k, int n,
          bool accumulate = false);
void gemm_ref(const float* a, const float* b, float* c, int m, int k, int n,
              bool accumulate = false);

// c(m x n) = a(m x k) * b(n x k)^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n,
             bool accumulate = false);
void gemm_nt_ref(const float* a, const float* b, float* c, int m, int k, int n,
                 bool accumulate = false);

// ---- 2-D convolution, stride 1, zero-padded "same", odd kernel dims ----
// x: (cin, h, w) row-major, wgt: (cout, cin, kh, kw), y: (cout, h, w).

void conv2d(const float* x, const float* wgt, const float* bias, float* y,
            int cin, int h, int w, int cout, int kh, int kw);
void conv2d_ref(const float* x, const float* wgt, const float* bias, float* y,
                int cin, int h, int w, int cout, int kh, int kw);

// Gradients: gw (cout,cin,kh,kw), gb (cout) accumulate from gy (cout,h,w).
void conv2d_grad_w(const float* x, const float* gy, float* gw, float* gb,
                   int cin, int h, int w, int cout, int kh, int kw);

// Weight tensor with in/out channels swapped and kernel flipped, so that
// grad wrt x is conv2d(gy, flipped).
std::vector<float> flip_weights(const float* wgt, int cout, int cin, int kh, int kw);

// ---- resampling ----

// Windowed-sinc resampler; ratio = out samples per in sample.
// Output length = round(n * ratio). Exact identity when ratio == 1.
std::vector<double> resample_ratio(const double* x, int n, double ratio);

}  // namespace pkdmark::kernels
