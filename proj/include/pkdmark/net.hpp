#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pkdmark/autodiff.hpp"
#include "pkdmark/dsp.hpp"
#include "pkdmark/params.hpp"
#include "pkdmark/rng.hpp"

namespace pkdmark::net {

// Binary message; the first sync_len bits are the synchronization code,
// the rest is payload.
struct Message {
  std::vector<uint8_t> bits;
  int sync_len = 8;

  int size() const { return (int)bits.size(); }
  int payload_len() const { return size() - sync_len; }
  void validate() const;
  std::vector<uint8_t> payload() const;

  static Message random(rng::Prng& rng, int k, int sync_len);
  static Message compose(const std::vector<uint8_t>& sync_code,
                         const std::vector<uint8_t>& payload);
};

// hex <-> bit-vector helpers (MSB-first within the hex string)
std::vector<uint8_t> bits_from_hex(const std::string& hex, int nbits);
std::string hex_from_bits(const std::vector<uint8_t>& bits);

// T x F complex message map; by construction re == im and every time row
// is identical.
struct MessageFeatureMap {
  std::vector<float> row;  // h, length = bins
  int frames = 0;
  int bins = 0;

  float re_at(int t, int f) const { return row[f]; }
  float im_at(int t, int f) const { return row[f]; }
  ad::Tensor as_tensor() const;  // (2, T, F)
};

struct ModelConfig {
  int n_blocks = 8;
  int channels = 32;
  int subnet_depth = 5;
  int message_bits = 16;
  int sync_len = 8;
  int embed_dim = 32;
  int msg_hidden = 128;
  int head_hidden = 64;
  int kernel = 3;
  float s_max = 2.0f;
  float leaky_slope = 0.2f;
  int disc_channels = 8;
  int disc_layers = 4;

  void validate() const;
};

struct DiscriminatorOut {
  float p = 0.5f;  // probability the input is watermarked, in (0,1)
};

// Parameter groups: msg.* (message feature map), inn.* (coupling blocks,
// shared by encode and decode), head.* (message reconstruction),
// disc.* (discriminator).
ad::NetworkParams init_model_params(const ModelConfig& cfg, int bins, uint64_t seed);

// ---- graph-level ----
ad::Tensor build_message_map_t(const Message& m, int frames, int bins,
                               const ad::NetworkParams& p, const ModelConfig& cfg);
// state branches are (2,T,F) tensors (re/im channels)
std::pair<ad::Tensor, ad::Tensor> inn_forward(const ad::Tensor& host, const ad::Tensor& msg,
                                              const ad::NetworkParams& p, const ModelConfig& cfg);
std::pair<ad::Tensor, ad::Tensor> inn_inverse(const ad::Tensor& host, const ad::Tensor& msg,
                                              const ad::NetworkParams& p, const ModelConfig& cfg);
ad::Tensor encode_t(const ad::Tensor& x_spec, const ad::Tensor& msg_map,
                    const ad::NetworkParams& p, const ModelConfig& cfg);
struct DecodeOut {
  ad::Tensor feature_map;  // (2,T,F) recovered message branch
  ad::Tensor logits;       // (K)
};
DecodeOut decode_t(const ad::Tensor& x_spec, const ad::NetworkParams& p, const ModelConfig& cfg);
ad::Tensor discriminate_t(const ad::Tensor& mag, const ad::NetworkParams& p,
                          const ModelConfig& cfg);  // mag: (1,T,F) -> scalar

// ---- value-level (no gradient recording) ----
MessageFeatureMap build_message_map(const Message& m, int frames, int bins,
                                    const ad::NetworkParams& p, const ModelConfig& cfg);
dsp::ComplexSpec encode(const dsp::ComplexSpec& x, const MessageFeatureMap& m,
                        const ad::NetworkParams& p, const ModelConfig& cfg);
struct DecodeResult {
  std::vector<float> logits;
  std::vector<uint8_t> bits;
};
DecodeResult decode(const dsp::ComplexSpec& x, const ad::NetworkParams& p,
                    const ModelConfig& cfg);
DiscriminatorOut discriminate(const dsp::AudioClip& clip, const dsp::StftConfig& stft_cfg,
                              const ad::NetworkParams& p, const ModelConfig& cfg);

// spectrogram <-> tensor bridges
ad::Tensor spec_to_tensor(const dsp::ComplexSpec& spec);          // (2,T,F)
dsp::ComplexSpec tensor_to_spec(const ad::Tensor& t, const dsp::StftConfig& cfg,
                                int origin_len);

// ---- deployable model ----
struct WatermarkModel {
  ModelConfig enc_cfg, dec_cfg;
  dsp::StftConfig stft;
  int sample_rate = 24000;
  std::vector<uint8_t> sync_code;
  bool distilled = false;  // enc/dec parameter groups are separate networks
  ad::NetworkParams params;

  // Teacher models share one parameter set between encode and decode;
  // distilled models use prefixes enc. / dec.
  ad::NetworkParams enc_view() const;
  ad::NetworkParams dec_view() const;
};

WatermarkModel make_teacher_model(const ModelConfig& cfg, const dsp::StftConfig& stft,
                                  int sample_rate, const std::vector<uint8_t>& sync_code,
                                  uint64_t seed);

void save_model(const WatermarkModel& model, const std::string& path);
WatermarkModel load_model(const std::string& path);

// embed/extract round trip at clip granularity
dsp::AudioClip embed_clip(const WatermarkModel& model, const dsp::AudioClip& clip,
                          const Message& m);
DecodeResult decode_clip(const WatermarkModel& model, const dsp::AudioClip& clip);

}  // namespace pkdmark::net
