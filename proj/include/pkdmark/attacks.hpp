#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pkdmark/autodiff.hpp"
#include "pkdmark/dsp.hpp"
#include "pkdmark/rng.hpp"

namespace pkdmark::attacks {

enum class Kind { ND, GN, MF, CODEC, LP, DS, QT, AS, EA, SS, FS, RA, PU, PD };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);  // throws listing valid kinds
const std::vector<Kind>& all_kinds();

enum class GradPolicy { Differentiable, StraightThrough };

struct AttackSpec {
  Kind kind = Kind::ND;

  double snr_db = 30.0;            // GN
  int median_kernel = 3;           // MF
  double lp_cutoff_hz = 4000.0;    // LP
  double codec_cutoff_hz = 10000.0;  // CODEC proxy band limit
  int codec_mag_bits = 6;            // CODEC proxy spectral quantization
  std::string codec_external_cmd;    // optional "cmd {in} {out}" hook
  int ds_rate = 8000;              // DS bottleneck rate
  int quant_bits = 9;              // QT
  double gain = 0.8;               // AS
  double echo_delay_s = 0.1;       // EA
  double echo_gain = 0.3;
  double speed = 1.0;              // SS -> 0.9, FS -> 1.1
  double rt60_s = 0.2;             // RA
  double reverb_wet = 0.3;
  int reverb_len = 4800;
  double pitch_factor = 1.0;       // PU -> 1.1, PD -> 0.9
  uint64_t seed = 0;
  GradPolicy grad_policy = GradPolicy::Differentiable;

  void validate(int sample_rate) const;
  static AttackSpec make(Kind k, uint64_t seed = 0);
};

struct AttackOutcome {
  dsp::AudioClip audio;  // length restored to the input length
  AttackSpec applied;
  bool length_restored = true;
};

AttackOutcome apply(const AttackSpec& spec, const dsp::AudioClip& x);

// Training-time version: differentiable kinds propagate exact gradients,
// the rest run the value-level attack with a straight-through backward.
ad::Tensor apply_differentiable(const AttackSpec& spec, const ad::Tensor& x, int sample_rate);

struct MenuEntry {
  AttackSpec spec;
  double prob = 0.0;
};

struct AttackMenu {
  std::vector<MenuEntry> entries;
  void validate() const;  // probs sum to 1, ND present with positive prob
};

AttackSpec sample_attack(rng::Prng& rng, const AttackMenu& menu);

// helpers exposed for the parameter tests
std::vector<double> reverb_impulse(uint64_t seed, int sample_rate, double rt60_s, int len,
                                   double wet);
std::vector<double> lowpass_taps(double cutoff_hz, int sample_rate, int ntaps);
std::vector<double> time_stretch(const std::vector<double>& x, int target_len);
double measured_snr_db(const dsp::AudioClip& ref, const dsp::AudioClip& deg);

}  // namespace pkdmark::attacks
