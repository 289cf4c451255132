#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pkdmark/attacks.hpp"
#include "pkdmark/corpus.hpp"
#include "pkdmark/losses.hpp"
#include "pkdmark/net.hpp"
#include "pkdmark/params.hpp"

namespace pkdmark::training {

struct PkdSchedule {
  double lambda_start = 0.1;
  double lambda_end = 1.0;
  long ramp_steps = 40000;
  long post_ramp_steps = 0;      // lambda held at lambda_end, teacher still frozen
  long finetune_steps = 0;       // teacher decoder unfrozen, reduced lr
  double finetune_lr_scale = 0.1;
  bool freeze_discriminator = false;
  bool finetune_teacher_encoder = false;

  long total_steps() const { return ramp_steps + post_ramp_steps + finetune_steps; }
  void validate() const;
};

// Linear ramp, clamped at lambda_end.
double lambda_of(long n, const PkdSchedule& s);

// Eq-style convex combination of the two watermarked signals.
dsp::AudioClip combine_outputs(const dsp::AudioClip& student, const dsp::AudioClip& teacher,
                               double lam);

struct TrainRunConfig {
  net::ModelConfig teacher;
  net::ModelConfig student;
  dsp::StftConfig stft;
  int sample_rate = 24000;
  losses::LossWeights weights;
  attacks::AttackMenu menu;
  ad::AdamConfig optimizer;
  int batch_size = 1;
  long steps = 1000;
  long attack_warmup_steps = 0;  // ND only for the first N steps
  int val_every = 100;
  int val_clips = 16;
  uint64_t seed = 1;
  CorpusSpec corpus;
  std::vector<uint8_t> sync_code;
  int sync_threshold = 7;
  PkdSchedule pkd;

  void validate() const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step(step) {}
  long step;
};

struct TrainResult {
  net::WatermarkModel model;  // best-validation parameters
  std::vector<long> val_steps;
  std::vector<double> val_ber;
  std::vector<double> val_snr;
  std::vector<double> per_history;  // per-step perceptual loss values
  std::vector<double> dec_history;
  double best_val_ber = 1.0;
  long best_step = -1;
  long steps_run = 0;
};

// Clean-path validation: embed a fixed set of random messages into the
// corpus validation clips and measure BER / SNR with the current weights.
struct ValidationScore {
  double ber = 0.5;
  double snr_db = 0.0;
};
ValidationScore validate_clean(const net::WatermarkModel& model, const Corpus& corpus,
                               int n_clips, uint64_t seed);

// Stage 1: teacher training (encoder-attack-decoder with discriminator).
TrainResult train_teacher(const TrainRunConfig& cfg, const std::string& metrics_path = "");

// Stage 2: progressive knowledge distillation into cfg.student. The teacher
// model is cloned; the returned model holds the student encoder plus the
// (possibly fine-tuned) teacher decoder.
TrainResult distill_student(const net::WatermarkModel& teacher, const TrainRunConfig& cfg,
                            const std::string& metrics_path = "");

// Distillation with the mixing factor pinned at 1 from step 0.
TrainResult direct_distill_baseline(const net::WatermarkModel& teacher,
                                    const TrainRunConfig& cfg,
                                    const std::string& metrics_path = "");

}  // namespace pkdmark::training
