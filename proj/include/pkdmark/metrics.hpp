#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pkdmark/attacks.hpp"
#include "pkdmark/dsp.hpp"
#include "pkdmark/net.hpp"

namespace pkdmark::metrics {

// Hamming distance / length.
double ber(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b);

// 20*log10(||x|| / ||x - x_w||); +inf when the signals are identical.
double snr_db(const dsp::AudioClip& x, const dsp::AudioClip& x_w);

struct DetectionResult {
  std::vector<uint8_t> decoded_bits;
  int sync_matches = 0;
  bool is_watermarked = false;
  std::vector<uint8_t> payload;
};

// Decision rule on already-decoded bits.
DetectionResult detect_bits(const std::vector<uint8_t>& decoded,
                            const std::vector<uint8_t>& sync_code, int threshold);

DetectionResult detect(const dsp::AudioClip& clip, const net::WatermarkModel& model,
                       int threshold = 7);

struct AttackEval {
  std::string name;
  double ber = 0.0;
  double f1 = 0.0;
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct EvalReport {
  std::vector<AttackEval> per_attack;
  double mean_ber = 0.0;   // unweighted mean over attack kinds
  double snr_db = 0.0;     // embedding distortion, before attacks
  double f1 = 0.0;         // aggregate over all clip/attack conditions
  long tp = 0, fp = 0, fn = 0, tn = 0;

  std::string to_table() const;  // aligned text table
  std::string to_json() const;
};

struct EvalOptions {
  uint64_t seed = 7;
  int sync_threshold = 7;
};

EvalReport evaluate(const net::WatermarkModel& model, const std::vector<dsp::AudioClip>& clips,
                    const std::vector<attacks::AttackSpec>& attack_list,
                    const EvalOptions& opts = {});

// Analytic FLOP counts per second of audio for the embedding path
// (message map + INN forward + STFT/ISTFT). Counting rules: one
// multiply-accumulate = 2 FLOPs, elementwise ops counted once per element,
// each FFT = 5*N*log2(N).
struct FlopsBreakdown {
  double conv = 0, msg = 0, head = 0, stft = 0, elementwise = 0;
  double total_gflops = 0;  // per audio-second
};

FlopsBreakdown estimate_flops(const net::ModelConfig& cfg, const dsp::StftConfig& stft,
                              int sample_rate);

struct BenchReport {
  double gflops_estimate = 0;
  double rtf = 0;  // median over repeats
  std::vector<double> rtf_repeats;
  int threads = 1;
  std::string hardware;
  double audio_seconds = 0;

  std::string to_json() const;
};

// Single-threaded embedding benchmark; first (warmup) run excluded.
BenchReport bench_rtf(const net::WatermarkModel& model, double seconds_of_audio, int repeats);

}  // namespace pkdmark::metrics
