#include "pkdmark/training.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "pkdmark/metrics.hpp"

namespace pkdmark::training {

using ad::Tensor;

void PkdSchedule::validate() const {
  if (!(0.0 <= lambda_start && lambda_start <= lambda_end && lambda_end <= 1.0))
    throw std::invalid_argument("PkdSchedule: need 0 <= start <= end <= 1");
  if (ramp_steps < 1) throw std::invalid_argument("PkdSchedule: ramp_steps must be >= 1");
  if (post_ramp_steps < 0 || finetune_steps < 0)
    throw std::invalid_argument("PkdSchedule: negative phase length");
  if (finetune_lr_scale <= 0) throw std::invalid_argument("PkdSchedule: bad finetune lr scale");
}

double lambda_of(long n, const PkdSchedule& s) {
  s.validate();
  if (n < 0) throw std::invalid_argument("lambda_of: negative step");
  const double lam = s.lambda_start + (s.lambda_end - s.lambda_start) * (double)n / s.ramp_steps;
  return std::min(s.lambda_end, lam);
}

dsp::AudioClip combine_outputs(const dsp::AudioClip& student, const dsp::AudioClip& teacher,
                               double lam) {
  if (student.samples.size() != teacher.samples.size())
    throw std::invalid_argument("combine_outputs: length mismatch");
  if (lam < 0.0 || lam > 1.0) throw std::invalid_argument("combine_outputs: lambda out of [0,1]");
  dsp::AudioClip out;
  out.sample_rate = student.sample_rate;
  out.samples.resize(student.samples.size());
  for (size_t i = 0; i < out.samples.size(); ++i)
    out.samples[i] = lam * student.samples[i] + (1.0 - lam) * teacher.samples[i];
  return out;
}

void TrainRunConfig::validate() const {
  teacher.validate();
  student.validate();
  stft.validate();
  weights.validate();
  menu.validate();
  corpus.validate();
  pkd.validate();
  if (batch_size < 1) throw std::invalid_argument("TrainRunConfig: batch_size must be >= 1");
  if (steps < 1) throw std::invalid_argument("TrainRunConfig: steps must be >= 1");
  if (val_every < 1 || val_clips < 1)
    throw std::invalid_argument("TrainRunConfig: bad validation settings");
  if ((int)sync_code.size() != teacher.sync_len)
    throw std::invalid_argument("TrainRunConfig: sync code length mismatch");
  if (corpus.sample_rate != sample_rate)
    throw std::invalid_argument("TrainRunConfig: corpus/run sample rate mismatch");
}

// ------------------------------------------------------------- utilities

namespace {

Tensor pack_spec(const Tensor& re, const Tensor& im) {
  const int t = re.shape()[0], f = re.shape()[1];
  return ad::concat({ad::reshape(re, {1, t, f}), ad::reshape(im, {1, t, f})}, 0);
}

Tensor clip_to_tensor(const dsp::AudioClip& clip) {
  std::vector<float> data(clip.samples.begin(), clip.samples.end());
  return Tensor::from(std::move(data), {(int)clip.samples.size()});
}

Tensor message_to_tensor(const net::Message& m) {
  std::vector<float> data(m.bits.begin(), m.bits.end());
  return Tensor::from(std::move(data), {(int)m.bits.size()});
}

struct MetricsLog {
  FILE* f = nullptr;
  explicit MetricsLog(const std::string& path) {
    if (path.empty()) return;
    f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open metrics log " + path);
    std::fprintf(f, "# pkdmark-metrics v1\n");
    std::fprintf(f, "step,per,dec,adv,dis,total,lambda,val_ber,val_snr\n");
  }
  ~MetricsLog() {
    if (f) std::fclose(f);
  }
  void line(long step, const losses::LossReport& r, double lambda, double val_ber,
            double val_snr, bool has_val) {
    if (!f) return;
    std::fprintf(f, "%ld,%.6g,%.6g,%.6g,%.6g,%.6g,%.4f,", step, r.per, r.dec, r.adv, r.dis,
                 r.total, lambda);
    if (has_val)
      std::fprintf(f, "%.6g,%.6g\n", val_ber, val_snr);
    else
      std::fprintf(f, ",\n");
  }
};

}  // namespace

ValidationScore validate_clean(const net::WatermarkModel& model, const Corpus& corpus,
                               int n_clips, uint64_t seed) {
  rng::Prng rng(seed);
  ValidationScore score;
  double ber_sum = 0.0, snr_sum = 0.0;
  int snr_count = 0;
  const int n = std::min(n_clips, corpus.val_size());
  for (int i = 0; i < n; ++i) {
    dsp::AudioClip clip = corpus.val_clip(i);
    net::Message m =
        net::Message::random(rng, model.enc_cfg.message_bits, model.enc_cfg.sync_len);
    dsp::AudioClip wm = net::embed_clip(model, clip, m);
    net::DecodeResult decoded = net::decode_clip(model, wm);
    ber_sum += metrics::ber(m.bits, decoded.bits);
    const double s = metrics::snr_db(clip, wm);
    if (std::isfinite(s)) {
      snr_sum += s;
      ++snr_count;
    }
  }
  score.ber = ber_sum / std::max(1, n);
  score.snr_db = snr_count ? snr_sum / snr_count : 99.0;
  return score;
}

// --------------------------------------------------------- teacher stage

TrainResult train_teacher(const TrainRunConfig& cfg, const std::string& metrics_path) {
  cfg.validate();
  Corpus corpus(cfg.corpus, cfg.seed);
  net::WatermarkModel model = net::make_teacher_model(cfg.teacher, cfg.stft, cfg.sample_rate,
                                                      cfg.sync_code, cfg.seed + 1);
  ad::AdamConfig disc_opt_cfg = cfg.optimizer;
  std::vector<ad::AdamOptimizer> opts;
  // main optimizer over everything except the discriminator
  ad::NetworkParams main_params;
  for (const auto& name : model.params.names())
    if (name.rfind("disc.", 0) != 0) main_params.add(name, model.params.get(name));
  ad::AdamOptimizer opt_main(main_params, cfg.optimizer);
  ad::AdamOptimizer opt_disc(model.params, disc_opt_cfg, "disc.");

  rng::Prng rng(cfg.seed + 2);
  const uint64_t val_seed = cfg.seed + 3;
  MetricsLog log(metrics_path);
  TrainResult result;
  result.model = model;

  auto run_validation = [&](long step, const losses::LossReport& rep, double lam) {
    ValidationScore score = validate_clean(model, corpus, cfg.val_clips, val_seed);
    result.val_steps.push_back(step);
    result.val_ber.push_back(score.ber);
    result.val_snr.push_back(score.snr_db);
    if (score.ber < result.best_val_ber) {
      result.best_val_ber = score.ber;
      result.best_step = step;
      result.model.params = model.params.clone();
    }
    log.line(step, rep, lam, score.ber, score.snr_db, true);
  };

  run_validation(-1, {}, 1.0);  // untrained baseline

  for (long step = 0; step < cfg.steps; ++step) {
    losses::LossReport report;
    std::vector<std::vector<float>> fake_specs;  // detached X_w for the disc step
    std::vector<std::vector<float>> real_specs;
    try {
      Tensor per_sum, dec_sum, adv_sum;
      for (int b = 0; b < cfg.batch_size; ++b) {
        dsp::AudioClip clip = corpus.train_clip(rng.uniform_int(0, corpus.train_size() - 1));
        net::Message m =
            net::Message::random(rng, cfg.teacher.message_bits, cfg.teacher.sync_len);
        attacks::AttackSpec attack = (step < cfg.attack_warmup_steps)
                                         ? attacks::AttackSpec::make(attacks::Kind::ND)
                                         : attacks::sample_attack(rng, cfg.menu);
        attack.seed = rng.next_u64();

        Tensor x = clip_to_tensor(clip);
        auto [xr, xi] = ad::stft(x, cfg.stft);
        Tensor host = pack_spec(xr, xi);
        Tensor msg_map =
            net::build_message_map_t(m, host.shape()[1], host.shape()[2], model.params,
                                     cfg.teacher);
        Tensor xw_spec = net::encode_t(host, msg_map, model.params, cfg.teacher);
        auto xw_halves = ad::split(xw_spec, 0, 2);
        const int t = host.shape()[1], f = host.shape()[2];
        Tensor xw = ad::istft(ad::reshape(xw_halves[0], {t, f}),
                              ad::reshape(xw_halves[1], {t, f}), cfg.stft, clip.length());

        Tensor l_per = losses::perceptual_loss(x, xw, cfg.weights.alpha_scales);

        Tensor xa = attacks::apply_differentiable(attack, xw, cfg.sample_rate);
        auto [ar, ai] = ad::stft(xa, cfg.stft);
        net::DecodeOut decoded = net::decode_t(pack_spec(ar, ai), model.params, cfg.teacher);
        Tensor m_hat = ad::sigmoid(decoded.logits);
        Tensor l_dec = losses::decoding_loss(message_to_tensor(m), m_hat, msg_map,
                                             decoded.feature_map, cfg.weights.alpha_featmap);

        Tensor mag = ad::complex_magnitude(ad::reshape(xw_halves[0], {1, t, f}),
                                           ad::reshape(xw_halves[1], {1, t, f}));
        Tensor d_fake = net::discriminate_t(mag, model.params, cfg.teacher);
        Tensor l_adv =
            losses::adversarial_losses(Tensor::scalar(0.5f), d_fake).adv;

        per_sum = b == 0 ? l_per : ad::add(per_sum, l_per);
        dec_sum = b == 0 ? l_dec : ad::add(dec_sum, l_dec);
        adv_sum = b == 0 ? l_adv : ad::add(adv_sum, l_adv);

        fake_specs.push_back(xw_spec.values());
        real_specs.push_back(host.values());
      }
      const float inv_b = 1.0f / cfg.batch_size;
      Tensor per = ad::mul_scalar(per_sum, inv_b);
      Tensor dec = ad::mul_scalar(dec_sum, inv_b);
      Tensor adv = ad::mul_scalar(adv_sum, inv_b);
      Tensor total = losses::total_loss(per, dec, adv, cfg.weights);
      report.per = per.item();
      report.dec = dec.item();
      report.adv = adv.item();
      report.total = total.item();
      if (!std::isfinite(report.total)) throw std::runtime_error("non-finite total loss");

      ad::backward(total);
      opt_main.step();
      model.params.zero_grads();

      // discriminator step, 1:1 with the main step
      Tensor dis_sum;
      const int t = dsp::frame_count(cfg.corpus.clip_len(), cfg.stft);
      const int f = cfg.stft.bins();
      for (int b = 0; b < cfg.batch_size; ++b) {
        Tensor real_spec = Tensor::from(real_specs[b], {2, t, f});
        auto real_halves = ad::split(real_spec, 0, 2);
        Tensor real_mag = ad::complex_magnitude(ad::reshape(real_halves[0], {1, t, f}),
                                                ad::reshape(real_halves[1], {1, t, f}));
        Tensor d_real = net::discriminate_t(real_mag, model.params, cfg.teacher);

        Tensor fake_spec = Tensor::from(fake_specs[b], {2, t, f});
        auto fake_halves = ad::split(fake_spec, 0, 2);
        Tensor fake_mag = ad::complex_magnitude(ad::reshape(fake_halves[0], {1, t, f}),
                                                ad::reshape(fake_halves[1], {1, t, f}));
        Tensor d_fake = net::discriminate_t(fake_mag, model.params, cfg.teacher);

        Tensor l_dis = losses::adversarial_losses(d_real, d_fake).dis;
        dis_sum = b == 0 ? l_dis : ad::add(dis_sum, l_dis);
      }
      Tensor dis = ad::mul_scalar(dis_sum, inv_b);
      report.dis = dis.item();
      ad::backward(dis);
      opt_disc.step();
      model.params.zero_grads();
    } catch (const std::exception& e) {
      throw DivergenceError(step, e.what());
    }

    result.per_history.push_back(report.per);
    result.dec_history.push_back(report.dec);
    result.steps_run = step + 1;
    if ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps)
      run_validation(step, report, 1.0);
    else
      log.line(step, report, 1.0, 0, 0, false);
  }
  return result;
}

// ----------------------------------------------------- distillation stage

TrainResult distill_student(const net::WatermarkModel& teacher, const TrainRunConfig& cfg,
                            const std::string& metrics_path) {
  cfg.validate();
  if (teacher.stft.fft_size != cfg.stft.fft_size || teacher.stft.hop != cfg.stft.hop)
    throw std::invalid_argument("distill: teacher/student STFT configs differ");
  if (teacher.distilled)
    throw std::invalid_argument("distill: teacher checkpoint is already a distilled model");

  Corpus corpus(cfg.corpus, cfg.seed);
  // clone so several distillation runs can start from the identical teacher
  ad::NetworkParams tparams = teacher.params.clone();
  tparams.set_requires_grad(false);
  if (!cfg.pkd.freeze_discriminator) tparams.set_requires_grad("disc.", true);

  ad::NetworkParams sparams = net::init_model_params(cfg.student, cfg.stft.bins(), cfg.seed + 5);
  // only the student encoder (coupling blocks + message nets) trains
  ad::NetworkParams student_enc;
  for (const auto& name : sparams.names())
    if (name.rfind("inn.", 0) == 0 || name.rfind("msg.", 0) == 0)
      student_enc.add(name, sparams.get(name));

  ad::AdamOptimizer opt_student(student_enc, cfg.optimizer);
  ad::AdamOptimizer opt_disc(tparams, cfg.optimizer, "disc.");
  ad::AdamConfig ft_cfg = cfg.optimizer;
  ft_cfg.lr *= (float)cfg.pkd.finetune_lr_scale;

  // deployable artifact: student encoder + teacher decoder
  auto make_artifact = [&]() {
    net::WatermarkModel artifact;
    artifact.enc_cfg = cfg.student;
    artifact.dec_cfg = teacher.dec_cfg;
    artifact.stft = cfg.stft;
    artifact.sample_rate = cfg.sample_rate;
    artifact.sync_code = cfg.sync_code;
    artifact.distilled = true;
    artifact.params.absorb(student_enc, "enc.");
    ad::NetworkParams tdec;
    for (const auto& name : tparams.names())
      if (name.rfind("inn.", 0) == 0 || name.rfind("head.", 0) == 0)
        tdec.add(name, tparams.get(name));
    artifact.params.absorb(tdec, "dec.");
    return artifact;
  };

  net::WatermarkModel deploy = make_artifact();

  // teacher-side encoder view for producing x_w^T
  net::WatermarkModel teacher_frozen = teacher;
  teacher_frozen.params = tparams;

  rng::Prng rng(cfg.seed + 6);
  const uint64_t val_seed = cfg.seed + 7;
  MetricsLog log(metrics_path);
  TrainResult result;
  result.model = deploy;

  auto run_validation = [&](long step, const losses::LossReport& rep, double lam) {
    ValidationScore score = validate_clean(deploy, corpus, cfg.val_clips, val_seed);
    result.val_steps.push_back(step);
    result.val_ber.push_back(score.ber);
    result.val_snr.push_back(score.snr_db);
    if (score.ber < result.best_val_ber) {
      result.best_val_ber = score.ber;
      result.best_step = step;
      result.model.params = deploy.params.clone();
    }
    log.line(step, rep, lam, score.ber, score.snr_db, true);
  };

  run_validation(-1, {}, lambda_of(0, cfg.pkd));

  const long total_steps = cfg.pkd.total_steps();
  std::unique_ptr<ad::AdamOptimizer> opt_finetune;

  for (long step = 0; step < total_steps; ++step) {
    const bool finetune_phase = step >= cfg.pkd.ramp_steps + cfg.pkd.post_ramp_steps;
    if (finetune_phase && !opt_finetune) {
      // unfreeze the teacher decoder for the global fine-tune
      tparams.set_requires_grad("inn.", true);
      tparams.set_requires_grad("head.", true);
      if (cfg.pkd.finetune_teacher_encoder) tparams.set_requires_grad("msg.", true);
      ad::NetworkParams tdec;
      for (const auto& name : tparams.names())
        if (name.rfind("inn.", 0) == 0 || name.rfind("head.", 0) == 0 ||
            (cfg.pkd.finetune_teacher_encoder && name.rfind("msg.", 0) == 0))
          tdec.add(name, tparams.get(name));
      opt_finetune = std::make_unique<ad::AdamOptimizer>(tdec, ft_cfg);
    }
    const double lam = lambda_of(std::min(step, cfg.pkd.ramp_steps), cfg.pkd);

    losses::LossReport report;
    std::vector<std::vector<float>> fake_specs;
    std::vector<std::vector<float>> real_specs;
    try {
      Tensor per_sum, dec_sum, adv_sum;
      for (int b = 0; b < cfg.batch_size; ++b) {
        dsp::AudioClip clip = corpus.train_clip(rng.uniform_int(0, corpus.train_size() - 1));
        net::Message m =
            net::Message::random(rng, cfg.student.message_bits, cfg.student.sync_len);
        attacks::AttackSpec attack = (step < cfg.attack_warmup_steps)
                                         ? attacks::AttackSpec::make(attacks::Kind::ND)
                                         : attacks::sample_attack(rng, cfg.menu);
        attack.seed = rng.next_u64();

        // teacher watermarked signal: values only, no graph
        dsp::AudioClip xw_teacher = net::embed_clip(teacher_frozen, clip, m);
        Tensor xw_t = clip_to_tensor(xw_teacher);

        Tensor x = clip_to_tensor(clip);
        auto [xr, xi] = ad::stft(x, cfg.stft);
        Tensor host = pack_spec(xr, xi);
        const int t = host.shape()[1], f = host.shape()[2];
        Tensor msg_map = net::build_message_map_t(m, t, f, sparams, cfg.student);
        Tensor xw_spec = net::encode_t(host, msg_map, sparams, cfg.student);
        auto xw_halves = ad::split(xw_spec, 0, 2);
        Tensor xw_s = ad::istft(ad::reshape(xw_halves[0], {t, f}),
                                ad::reshape(xw_halves[1], {t, f}), cfg.stft, clip.length());

        Tensor l_per = losses::student_perceptual_loss(xw_s, xw_t, cfg.weights.alpha_scales);

        Tensor x_com = ad::add(ad::mul_scalar(xw_s, (float)lam),
                               ad::mul_scalar(xw_t, (float)(1.0 - lam)));
        Tensor xa = attacks::apply_differentiable(attack, x_com, cfg.sample_rate);
        auto [ar, ai] = ad::stft(xa, cfg.stft);
        net::DecodeOut decoded = net::decode_t(pack_spec(ar, ai), tparams, teacher.dec_cfg);
        Tensor m_hat = ad::sigmoid(decoded.logits);
        // the feature-map term is dropped during distillation
        Tensor l_dec =
            losses::decoding_loss(message_to_tensor(m), m_hat, Tensor(), Tensor(), 0.0f);

        Tensor mag = ad::complex_magnitude(ad::reshape(xw_halves[0], {1, t, f}),
                                           ad::reshape(xw_halves[1], {1, t, f}));
        Tensor d_fake = net::discriminate_t(mag, tparams, teacher.dec_cfg);
        Tensor l_adv = losses::adversarial_losses(Tensor::scalar(0.5f), d_fake).adv;

        per_sum = b == 0 ? l_per : ad::add(per_sum, l_per);
        dec_sum = b == 0 ? l_dec : ad::add(dec_sum, l_dec);
        adv_sum = b == 0 ? l_adv : ad::add(adv_sum, l_adv);

        fake_specs.push_back(xw_spec.values());
        real_specs.push_back(host.values());
      }
      const float inv_b = 1.0f / cfg.batch_size;
      Tensor per = ad::mul_scalar(per_sum, inv_b);
      Tensor dec = ad::mul_scalar(dec_sum, inv_b);
      Tensor adv = ad::mul_scalar(adv_sum, inv_b);
      Tensor total = losses::total_loss(per, dec, adv, cfg.weights);
      report.per = per.item();
      report.dec = dec.item();
      report.adv = adv.item();
      report.total = total.item();
      if (!std::isfinite(report.total)) throw std::runtime_error("non-finite total loss");

      ad::backward(total);
      opt_student.step();
      if (finetune_phase && opt_finetune) opt_finetune->step();
      sparams.zero_grads();
      tparams.zero_grads();

      if (!cfg.pkd.freeze_discriminator) {
        Tensor dis_sum;
        const int t = dsp::frame_count(cfg.corpus.clip_len(), cfg.stft);
        const int f = cfg.stft.bins();
        for (int b = 0; b < cfg.batch_size; ++b) {
          Tensor real_spec = Tensor::from(real_specs[b], {2, t, f});
          auto real_halves = ad::split(real_spec, 0, 2);
          Tensor real_mag = ad::complex_magnitude(ad::reshape(real_halves[0], {1, t, f}),
                                                  ad::reshape(real_halves[1], {1, t, f}));
          Tensor d_real = net::discriminate_t(real_mag, tparams, teacher.dec_cfg);

          Tensor fake_spec = Tensor::from(fake_specs[b], {2, t, f});
          auto fake_halves = ad::split(fake_spec, 0, 2);
          Tensor fake_mag = ad::complex_magnitude(ad::reshape(fake_halves[0], {1, t, f}),
                                                  ad::reshape(fake_halves[1], {1, t, f}));
          Tensor d_fake = net::discriminate_t(fake_mag, tparams, teacher.dec_cfg);
          Tensor l_dis = losses::adversarial_losses(d_real, d_fake).dis;
          dis_sum = b == 0 ? l_dis : ad::add(dis_sum, l_dis);
        }
        Tensor dis = ad::mul_scalar(dis_sum, inv_b);
        report.dis = dis.item();
        ad::backward(dis);
        opt_disc.step();
        tparams.zero_grads();
      }
    } catch (const DivergenceError&) {
      throw;
    } catch (const std::exception& e) {
      throw DivergenceError(step, e.what());
    }

    result.per_history.push_back(report.per);
    result.dec_history.push_back(report.dec);
    result.steps_run = step + 1;
    if ((step + 1) % cfg.val_every == 0 || step + 1 == total_steps)
      run_validation(step, report, lam);
    else
      log.line(step, report, lam, 0, 0, false);
  }
  return result;
}

TrainResult direct_distill_baseline(const net::WatermarkModel& teacher,
                                    const TrainRunConfig& cfg,
                                    const std::string& metrics_path) {
  TrainRunConfig dkd = cfg;
  dkd.pkd.lambda_start = 1.0;
  dkd.pkd.lambda_end = 1.0;
  return distill_student(teacher, dkd, metrics_path);
}

}  // namespace pkdmark::training
