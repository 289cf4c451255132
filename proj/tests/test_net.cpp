#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "pkdmark/net.hpp"
#include "pkdmark/rng.hpp"

using namespace pkdmark;
using ad::Tensor;

namespace {

net::ModelConfig small_cfg(int blocks, int channels) {
  net::ModelConfig cfg;
  cfg.n_blocks = blocks;
  cfg.channels = channels;
  return cfg;
}

// random params with the zero-initialized final coupling layers perturbed,
// so the blocks are genuinely non-identity; weights are scaled into the
// regime where activations stay O(1) (the float32 invertibility bound is
// about magnitudes, not structure)
ad::NetworkParams random_params(const net::ModelConfig& cfg, int bins, uint64_t seed) {
  ad::NetworkParams p = net::init_model_params(cfg, bins, seed);
  rng::Prng rng(seed + 99);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    for (int j = 0; j < cfg.subnet_depth; ++j) {
      std::string base = "inn.b" + std::to_string(b) + ".c" + std::to_string(j) + ".";
      if (j == cfg.subnet_depth - 1) {
        for (auto& v : p.get(base + "w").node()->value) v = (float)(0.02 * rng.normal());
        for (auto& v : p.get(base + "b").node()->value) v = (float)(0.02 * rng.normal());
      } else {
        for (auto& v : p.get(base + "w").node()->value) v *= 0.4f;
      }
    }
  }
  return p;
}

Tensor random_branch(int t, int f, uint64_t seed, double amp = 0.5) {
  rng::Prng rng(seed);
  std::vector<float> v((size_t)2 * t * f);
  for (auto& x : v) x = (float)(amp * rng.normal());
  return Tensor::from(std::move(v), {2, t, f});
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs((double)a[i] - b[i]));
  return m;
}

net::Message make_msg(uint64_t seed, int k = 16, int sync = 8) {
  rng::Prng rng(seed);
  return net::Message::random(rng, k, sync);
}

}  // namespace

TEST_CASE("message bits and hex round trips") {
  auto bits = net::bits_from_hex("a6", 8);
  CHECK(bits == std::vector<uint8_t>{1, 0, 1, 0, 0, 1, 1, 0});
  CHECK(net::hex_from_bits(bits) == "a6");
  CHECK_THROWS(net::bits_from_hex("1ZZ", 12));
  CHECK_THROWS(net::bits_from_hex("ff", 12));  // wrong bit count

  net::Message m = net::Message::compose({1, 0, 1}, {0, 1});
  CHECK(m.size() == 5);
  CHECK(m.sync_len == 3);
  CHECK(m.payload() == std::vector<uint8_t>{0, 1});
}

TEST_CASE("message map: rows identical across T and re == im") {
  net::ModelConfig cfg = small_cfg(2, 8);
  ad::NetworkParams p = net::init_model_params(cfg, 33, 42);
  const int t = 5, f = 33;
  Tensor map = net::build_message_map_t(make_msg(1), t, f, p, cfg);
  REQUIRE(map.shape() == ad::Shape{2, t, f});
  const auto& v = map.values();
  const size_t plane = (size_t)t * f;
  for (int row = 0; row < t; ++row)
    for (int col = 0; col < f; ++col) {
      CHECK(v[(size_t)row * f + col] == v[col]);                  // Repeat_T
      CHECK(v[plane + (size_t)row * f + col] == v[col]);          // re == im
    }

  net::MessageFeatureMap value_map = net::build_message_map(make_msg(1), t, f, p, cfg);
  CHECK(value_map.row.size() == (size_t)f);
  for (int col = 0; col < f; ++col) CHECK(value_map.row[col] == v[col]);
}

TEST_CASE("message map: stubbed params force h, Repeat_T replicates it") {
  net::ModelConfig cfg = small_cfg(2, 8);
  cfg.message_bits = 4;
  cfg.sync_len = 2;
  ad::NetworkParams p = net::init_model_params(cfg, 4, 7);
  // zero fc2 weights and set its bias: h becomes exactly the bias vector
  for (auto& v : p.get("msg.fc2.w").node()->value) v = 0.0f;
  p.get("msg.fc2.b").node()->value = {1, 2, 3, 4};
  net::Message m;
  m.bits = {1, 0, 1, 1};
  m.sync_len = 2;
  Tensor map = net::build_message_map_t(m, 3, 4, p, cfg);
  const std::vector<float> expect = {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4,
                                     1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4};
  CHECK(map.values() == expect);
}

TEST_CASE("message map: flipping one bit changes the map") {
  net::ModelConfig cfg = small_cfg(2, 8);
  ad::NetworkParams p = net::init_model_params(cfg, 33, 43);
  net::Message a = make_msg(2);
  net::Message b = a;
  b.bits[11] ^= 1;
  Tensor ma = net::build_message_map_t(a, 3, 33, p, cfg);
  Tensor mb = net::build_message_map_t(b, 3, 33, p, cfg);
  double l2 = 0;
  for (size_t i = 0; i < ma.values().size(); ++i) {
    const double d = ma.values()[i] - mb.values()[i];
    l2 += d * d;
  }
  CHECK(std::sqrt(l2) > 0.0);
}

TEST_CASE("identity-start: encode(X, M) == X bit-exactly") {
  for (auto [blocks, ch] : {std::pair{8, 32}, {2, 16}}) {
    net::ModelConfig cfg = small_cfg(blocks, ch);
    ad::NetworkParams p = net::init_model_params(cfg, 33, 44);  // zero final layers
    Tensor x = random_branch(7, 33, 45);
    Tensor m = random_branch(7, 33, 46, 0.1);
    Tensor xw = net::encode_t(x, m, p, cfg);
    CHECK(xw.values() == x.values());
  }
}

TEST_CASE("INN algebraic invertibility on random params and inputs") {
  for (auto [blocks, ch] : {std::pair{8, 32}, {2, 16}}) {
    net::ModelConfig cfg = small_cfg(blocks, ch);
    ad::NetworkParams p = random_params(cfg, 129, 50 + blocks);
    Tensor x = random_branch(9, 129, 51);
    Tensor m = random_branch(9, 129, 52, 0.3);
    auto [u, v] = net::inn_forward(x, m, p, cfg);
    auto [x2, m2] = net::inn_inverse(u, v, p, cfg);
    CHECK(max_abs_diff(x2.values(), x.values()) < 1e-4);
    CHECK(max_abs_diff(m2.values(), m.values()) < 1e-4);
  }
}

TEST_CASE("encode is deterministic") {
  net::ModelConfig cfg = small_cfg(2, 16);
  ad::NetworkParams p = random_params(cfg, 33, 60);
  Tensor x = random_branch(5, 33, 61);
  Tensor m = random_branch(5, 33, 62, 0.2);
  Tensor a = net::encode_t(x, m, p, cfg);
  Tensor b = net::encode_t(x, m, p, cfg);
  CHECK(a.values() == b.values());
}

TEST_CASE("one payload bit flips the watermarked spectrogram") {
  net::ModelConfig cfg = small_cfg(2, 16);
  ad::NetworkParams p = random_params(cfg, 33, 63);
  Tensor x = random_branch(5, 33, 64);
  net::Message m1 = make_msg(65);
  net::Message m2 = m1;
  m2.bits[12] ^= 1;  // payload bit
  Tensor xw1 = net::encode_t(x, net::build_message_map_t(m1, 5, 33, p, cfg), p, cfg);
  Tensor xw2 = net::encode_t(x, net::build_message_map_t(m2, 5, 33, p, cfg), p, cfg);
  CHECK(max_abs_diff(xw1.values(), xw2.values()) > 0.0);
}

TEST_CASE("decode runs on identity params and is shape-correct") {
  net::ModelConfig cfg = small_cfg(2, 16);
  ad::NetworkParams p = net::init_model_params(cfg, 33, 66);
  Tensor x = random_branch(5, 33, 67);
  net::DecodeOut out = net::decode_t(x, p, cfg);
  CHECK(out.logits.shape() == ad::Shape{16});
  CHECK(out.feature_map.shape() == ad::Shape{2, 5, 33});
  // dual input: with identity blocks the recovered branch equals the input
  CHECK(out.feature_map.values() == x.values());
}

TEST_CASE("discriminator: output in (0,1), exactly 0.5 untrained, deterministic") {
  net::ModelConfig cfg = small_cfg(2, 16);
  ad::NetworkParams p = net::init_model_params(cfg, 129, 68);
  rng::Prng rng(69);
  std::vector<float> mag((size_t)20 * 129);
  for (auto& v : mag) v = (float)std::fabs(rng.normal());
  Tensor m = Tensor::from(mag, {1, 20, 129});
  Tensor d1 = net::discriminate_t(m, p, cfg);
  Tensor d2 = net::discriminate_t(m, p, cfg);
  CHECK(d1.item() > 0.0f);
  CHECK(d1.item() < 1.0f);
  CHECK(std::fabs(d1.item() - 0.5f) < 0.2f);
  CHECK(d1.item() == d2.item());
}

TEST_CASE("teacher model shares parameters between encode and decode views") {
  dsp::StftConfig stft;
  net::ModelConfig cfg = small_cfg(2, 8);
  net::WatermarkModel model =
      net::make_teacher_model(cfg, stft, 24000, net::bits_from_hex("a6", 8), 70);
  CHECK(model.enc_view().get("inn.b0.c0.w").node() ==
        model.dec_view().get("inn.b0.c0.w").node());
  CHECK(model.enc_view().subset("inn.").checksum() ==
        model.dec_view().subset("inn.").checksum());
}

TEST_CASE("model save/load round trip preserves behaviour") {
  dsp::StftConfig stft;
  stft.fft_size = 256;
  stft.hop = 128;
  net::ModelConfig cfg = small_cfg(2, 8);
  net::WatermarkModel model =
      net::make_teacher_model(cfg, stft, 24000, net::bits_from_hex("a6", 8), 71);
  // make it non-identity so the behaviour is nontrivial
  model.params = random_params(cfg, stft.bins(), 72);

  rng::Prng rng(73);
  dsp::AudioClip clip;
  clip.sample_rate = 24000;
  clip.samples.resize(4000);
  for (auto& v : clip.samples) v = 0.3 * rng.normal();
  net::Message m = make_msg(74);

  dsp::AudioClip wm1 = net::embed_clip(model, clip, m);
  const char* path = "/tmp/pkdmark_test_model.ckpt";
  net::save_model(model, path);
  net::WatermarkModel loaded = net::load_model(path);
  CHECK(loaded.stft.fft_size == 256);
  CHECK(loaded.sync_code == model.sync_code);
  dsp::AudioClip wm2 = net::embed_clip(loaded, clip, m);
  REQUIRE(wm1.length() == wm2.length());
  for (int i = 0; i < wm1.length(); ++i) CHECK(wm1.samples[i] == wm2.samples[i]);
  CHECK(net::decode_clip(model, wm1).bits == net::decode_clip(loaded, wm2).bits);
  std::remove(path);
  std::remove((std::string(path) + ".json").c_str());
}

TEST_CASE("capacity accounting: 16 bits per second at the working rate") {
  net::ModelConfig cfg;
  const double clip_seconds = 1.0;
  CHECK(cfg.message_bits / clip_seconds == 16.0);
}
