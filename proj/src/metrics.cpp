#include "pkdmark/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "pkdmark/kernels.hpp"
#include "pkdmark/rng.hpp"

namespace pkdmark::metrics {

double ber(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("ber: length mismatch");
  int diff = 0;
  for (size_t i = 0; i < a.size(); ++i) diff += (a[i] != b[i]) ? 1 : 0;
  return (double)diff / a.size();
}

double snr_db(const dsp::AudioClip& x, const dsp::AudioClip& x_w) {
  if (x.samples.size() != x_w.samples.size() || x.samples.empty())
    throw std::invalid_argument("snr_db: length mismatch");
  double sig = 0.0, err = 0.0;
  for (size_t i = 0; i < x.samples.size(); ++i) {
    sig += x.samples[i] * x.samples[i];
    const double d = x.samples[i] - x_w.samples[i];
    err += d * d;
  }
  if (sig == 0.0) throw std::invalid_argument("snr_db: zero reference signal");
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(std::sqrt(sig) / std::sqrt(err));
}

DetectionResult detect_bits(const std::vector<uint8_t>& decoded,
                            const std::vector<uint8_t>& sync_code, int threshold) {
  if (decoded.size() < sync_code.size())
    throw std::invalid_argument("detect: decoded message shorter than sync code");
  DetectionResult res;
  res.decoded_bits = decoded;
  for (size_t i = 0; i < sync_code.size(); ++i)
    res.sync_matches += (decoded[i] == sync_code[i]) ? 1 : 0;
  res.is_watermarked = res.sync_matches >= threshold;
  res.payload.assign(decoded.begin() + sync_code.size(), decoded.end());
  return res;
}

DetectionResult detect(const dsp::AudioClip& clip, const net::WatermarkModel& model,
                       int threshold) {
  if (clip.length() < model.stft.fft_size / 2 + 1)
    throw std::invalid_argument("detect: clip too short for a single analysis frame");
  net::DecodeResult decoded = net::decode_clip(model, clip);
  return detect_bits(decoded.bits, model.sync_code, threshold);
}

// ---------------------------------------------------------------- evaluate

EvalReport evaluate(const net::WatermarkModel& model, const std::vector<dsp::AudioClip>& clips,
                    const std::vector<attacks::AttackSpec>& attack_list,
                    const EvalOptions& opts) {
  if (clips.empty()) throw std::invalid_argument("evaluate: empty corpus");
  if (attack_list.empty()) throw std::invalid_argument("evaluate: no attacks");
  rng::Prng rng(opts.seed);
  EvalReport report;
  report.per_attack.resize(attack_list.size());
  for (size_t a = 0; a < attack_list.size(); ++a)
    report.per_attack[a].name = attacks::kind_name(attack_list[a].kind);

  double snr_sum = 0.0;
  int snr_count = 0;
  std::vector<double> ber_sums(attack_list.size(), 0.0);

  for (size_t c = 0; c < clips.size(); ++c) {
    const dsp::AudioClip& clip = clips[c];
    net::Message m = net::Message::random(rng, model.enc_cfg.message_bits,
                                          model.enc_cfg.sync_len);
    for (int i = 0; i < model.enc_cfg.sync_len; ++i) m.bits[i] = model.sync_code[i];
    dsp::AudioClip watermarked = net::embed_clip(model, clip, m);
    const double s = snr_db(clip, watermarked);
    if (std::isfinite(s)) {
      snr_sum += s;
      ++snr_count;
    }

    for (size_t a = 0; a < attack_list.size(); ++a) {
      attacks::AttackSpec spec = attack_list[a];
      spec.seed = rng.next_u64();
      dsp::AudioClip wm_attacked = attacks::apply(spec, watermarked).audio;
      net::DecodeResult decoded = net::decode_clip(model, wm_attacked);
      ber_sums[a] += ber(m.bits, decoded.bits);

      AttackEval& ae = report.per_attack[a];
      DetectionResult wm_det =
          detect_bits(decoded.bits, model.sync_code, opts.sync_threshold);
      (wm_det.is_watermarked ? ae.tp : ae.fn) += 1;

      dsp::AudioClip orig_attacked = attacks::apply(spec, clip).audio;
      DetectionResult orig_det = detect_bits(net::decode_clip(model, orig_attacked).bits,
                                             model.sync_code, opts.sync_threshold);
      (orig_det.is_watermarked ? ae.fp : ae.tn) += 1;
    }
  }

  double mean_acc = 0.0;
  for (size_t a = 0; a < attack_list.size(); ++a) {
    AttackEval& ae = report.per_attack[a];
    ae.ber = ber_sums[a] / clips.size();
    ae.f1 = (2.0 * ae.tp) > 0 || (ae.fp + ae.fn) > 0
                ? (2.0 * ae.tp) / (2.0 * ae.tp + ae.fp + ae.fn)
                : 0.0;
    mean_acc += ae.ber;
    report.tp += ae.tp;
    report.fp += ae.fp;
    report.fn += ae.fn;
    report.tn += ae.tn;
  }
  report.mean_ber = mean_acc / attack_list.size();
  report.snr_db = snr_count ? snr_sum / snr_count : std::numeric_limits<double>::infinity();
  report.f1 = (2.0 * report.tp + report.fp + report.fn) > 0
                  ? (2.0 * report.tp) / (2.0 * report.tp + report.fp + report.fn)
                  : 0.0;
  return report;
}

std::string EvalReport::to_table() const {
  std::string out;
  char buf[64];
  out += "METRIC   MEAN";
  for (const auto& a : per_attack) {
    std::snprintf(buf, sizeof(buf), " %6s", a.name == "CODEC" ? "MP3" : a.name.c_str());
    out += buf;
  }
  out += "\nBER(%) ";
  std::snprintf(buf, sizeof(buf), "%6.2f", mean_ber * 100.0);
  out += buf;
  for (const auto& a : per_attack) {
    std::snprintf(buf, sizeof(buf), " %6.2f", a.ber * 100.0);
    out += buf;
  }
  out += "\nF1(%)  ";
  std::snprintf(buf, sizeof(buf), "%6.2f", f1 * 100.0);
  out += buf;
  for (const auto& a : per_attack) {
    std::snprintf(buf, sizeof(buf), " %6.2f", a.f1 * 100.0);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "\nSNR(dB) %.2f\n", snr_db);
  out += buf;
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["format"] = 1;
  j["mean_ber"] = mean_ber;
  j["snr_db"] = std::isfinite(snr_db) ? snr_db : 1e9;
  j["f1"] = f1;
  j["counts"] = {{"tp", tp}, {"fp", fp}, {"fn", fn}, {"tn", tn}};
  j["per_attack"] = nlohmann::json::array();
  for (const auto& a : per_attack)
    j["per_attack"].push_back({{"kind", a.name},
                               {"ber", a.ber},
                               {"f1", a.f1},
                               {"tp", a.tp},
                               {"fp", a.fp},
                               {"fn", a.fn},
                               {"tn", a.tn}});
  return j.dump(2);
}

// ------------------------------------------------------------------ FLOPs

FlopsBreakdown estimate_flops(const net::ModelConfig& cfg, const dsp::StftConfig& stft,
                              int sample_rate) {
  stft.validate();
  if (sample_rate <= 0) throw std::invalid_argument("estimate_flops: bad sample rate");
  const double frames_per_sec = (double)sample_rate / stft.hop;
  const double bins = stft.bins();
  const double px = frames_per_sec * bins;  // spectrogram pixels per second
  const int k2 = cfg.kernel * cfg.kernel;

  FlopsBreakdown fb;
  // coupling subnets: depth conv layers, 2 -> C -> ... -> C -> 4
  for (int b = 0; b < cfg.n_blocks; ++b) {
    for (int j = 0; j < cfg.subnet_depth; ++j) {
      const double cin = j == 0 ? 2 : cfg.channels;
      const double cout = j == cfg.subnet_depth - 1 ? 4 : cfg.channels;
      fb.conv += 2.0 * px * cin * cout * k2 + px * cout;  // MACs + bias
    }
    // tanh, exp, two muls, add over the 2-channel updated branch + lrelu stack
    fb.elementwise += 10.0 * px * 2.0 + (cfg.subnet_depth - 1) * px * cfg.channels;
  }
  // message map, amortized per second (one map per 1 s clip)
  const double K = cfg.message_bits;
  fb.msg += 2.0 * K * cfg.embed_dim * cfg.msg_hidden + K * cfg.msg_hidden;  // fc1
  fb.msg += 2.0 * K * cfg.msg_hidden * bins + K * bins;                     // fc2
  fb.msg += K * bins;                                                       // averaging
  // head, amortized per second (decode path, counted for completeness)
  fb.head += 2.0 * px;  // temporal/complex reduction
  fb.head += 2.0 * bins * cfg.head_hidden + cfg.head_hidden;
  fb.head += 2.0 * cfg.head_hidden * K + K;
  // analysis + synthesis transforms and windowing
  const double fft_cost = 5.0 * stft.fft_size * std::log2((double)stft.fft_size);
  fb.stft += 2.0 * frames_per_sec * (fft_cost + stft.fft_size);

  fb.total_gflops = (fb.conv + fb.msg + fb.head + fb.stft + fb.elementwise) * 1e-9;
  return fb;
}

// ------------------------------------------------------------------- RTF

namespace {

std::string cpu_model_name() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto pos = line.find(':');
      if (pos != std::string::npos) return line.substr(pos + 2);
    }
  }
  return "unknown cpu";
}

}  // namespace

BenchReport bench_rtf(const net::WatermarkModel& model, double seconds_of_audio, int repeats) {
  if (repeats < 1) throw std::invalid_argument("bench_rtf: repeats must be >= 1");
  const int n = (int)std::llround(seconds_of_audio * model.sample_rate);
  rng::Prng rng(1234);
  dsp::AudioClip clip;
  clip.sample_rate = model.sample_rate;
  clip.samples.resize(n);
  for (auto& v : clip.samples) v = 0.3 * rng.normal();
  for (auto& v : clip.samples) v = std::clamp(v, -1.0, 1.0);
  net::Message m = net::Message::random(rng, model.enc_cfg.message_bits, model.enc_cfg.sync_len);

  BenchReport report;
  report.audio_seconds = seconds_of_audio;
  report.threads = 1;
  report.hardware = cpu_model_name();
  report.gflops_estimate = estimate_flops(model.enc_cfg, model.stft, model.sample_rate).total_gflops;

  const bool was_parallel = kernels::parallel_enabled();
  kernels::set_parallel(false);  // sequential single-threaded processing
  try {
    (void)net::embed_clip(model, clip, m);  // warmup
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      volatile double sink = net::embed_clip(model, clip, m).samples[0];
      (void)sink;
      const auto t1 = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(t1 - t0).count();
      report.rtf_repeats.push_back(secs / seconds_of_audio);
    }
  } catch (...) {
    kernels::set_parallel(was_parallel);
    throw;
  }
  kernels::set_parallel(was_parallel);

  std::vector<double> sorted = report.rtf_repeats;
  std::sort(sorted.begin(), sorted.end());
  report.rtf = sorted[sorted.size() / 2];
  return report;
}

std::string BenchReport::to_json() const {
  nlohmann::json j;
  j["format"] = 1;
  j["gflops_estimate"] = gflops_estimate;
  j["rtf"] = rtf;
  j["rtf_repeats"] = rtf_repeats;
  j["threads"] = threads;
  j["hardware"] = hardware;
  j["audio_seconds"] = audio_seconds;
  return j.dump(2);
}

}  // namespace pkdmark::metrics
