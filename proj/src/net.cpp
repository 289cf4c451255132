#include "pkdmark/net.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace pkdmark::net {

using ad::NetworkParams;
using ad::Tensor;

// ---------------------------------------------------------------- Message

void Message::validate() const {
  if (bits.empty()) throw std::invalid_argument("Message: empty");
  if (sync_len < 0 || sync_len > size())
    throw std::invalid_argument("Message: sync_len out of range");
  for (uint8_t b : bits)
    if (b != 0 && b != 1) throw std::invalid_argument("Message: bits must be 0/1");
}

std::vector<uint8_t> Message::payload() const {
  return std::vector<uint8_t>(bits.begin() + sync_len, bits.end());
}

Message Message::random(rng::Prng& rng, int k, int sync_len) {
  Message m;
  m.sync_len = sync_len;
  m.bits.resize(k);
  for (int i = 0; i < k; ++i) m.bits[i] = (uint8_t)(rng.next_u64() & 1);
  m.validate();
  return m;
}

Message Message::compose(const std::vector<uint8_t>& sync_code,
                         const std::vector<uint8_t>& payload) {
  Message m;
  m.sync_len = (int)sync_code.size();
  m.bits = sync_code;
  m.bits.insert(m.bits.end(), payload.begin(), payload.end());
  m.validate();
  return m;
}

std::vector<uint8_t> bits_from_hex(const std::string& hex, int nbits) {
  if ((int)hex.size() * 4 != nbits)
    throw std::invalid_argument("hex payload must encode exactly " + std::to_string(nbits) +
                                " bits");
  std::vector<uint8_t> bits;
  bits.reserve(nbits);
  for (char c : hex) {
    int v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else throw std::invalid_argument(std::string("invalid hex digit '") + c + "'");
    for (int b = 3; b >= 0; --b) bits.push_back((uint8_t)((v >> b) & 1));
  }
  return bits;
}

std::string hex_from_bits(const std::vector<uint8_t>& bits) {
  if (bits.size() % 4 != 0) throw std::invalid_argument("hex_from_bits: length not nibble-aligned");
  std::string out;
  for (size_t i = 0; i < bits.size(); i += 4) {
    int v = (bits[i] << 3) | (bits[i + 1] << 2) | (bits[i + 2] << 1) | bits[i + 3];
    out += "0123456789abcdef"[v];
  }
  return out;
}

Tensor MessageFeatureMap::as_tensor() const {
  std::vector<float> data((size_t)2 * frames * bins);
  for (int c = 0; c < 2; ++c)
    for (int t = 0; t < frames; ++t)
      for (int f = 0; f < bins; ++f)
        data[((size_t)c * frames + t) * bins + f] = row[f];
  return Tensor::from(std::move(data), {2, frames, bins});
}

// ------------------------------------------------------------ ModelConfig

void ModelConfig::validate() const {
  if (n_blocks < 1) throw std::invalid_argument("ModelConfig: n_blocks must be >= 1");
  if (channels < 1) throw std::invalid_argument("ModelConfig: channels must be >= 1");
  if (subnet_depth < 2) throw std::invalid_argument("ModelConfig: subnet_depth must be >= 2");
  if (message_bits < 1 || sync_len < 0 || sync_len > message_bits)
    throw std::invalid_argument("ModelConfig: bad message layout");
  if (kernel < 1 || kernel % 2 == 0)
    throw std::invalid_argument("ModelConfig: kernel must be odd");
  if (s_max <= 0) throw std::invalid_argument("ModelConfig: s_max must be > 0");
  if (disc_layers < 1 || disc_channels < 1)
    throw std::invalid_argument("ModelConfig: bad discriminator config");
}

// ----------------------------------------------------------- param init

namespace {

Tensor kaiming_uniform(rng::Prng& rng, ad::Shape shape, int fan_in) {
  const float bound = std::sqrt(6.0f / (float)fan_in);
  std::vector<float> data((size_t)ad::numel(shape));
  for (auto& v : data) v = (float)rng.uniform(-bound, bound);
  return Tensor::from(std::move(data), std::move(shape), true);
}

Tensor zeros_param(ad::Shape shape) { return Tensor::zeros(std::move(shape), true); }

std::string block_conv(int b, int j, const char* leaf) {
  return "inn.b" + std::to_string(b) + ".c" + std::to_string(j) + "." + leaf;
}

}  // namespace

NetworkParams init_model_params(const ModelConfig& cfg, int bins, uint64_t seed) {
  cfg.validate();
  if (bins < 2) throw std::invalid_argument("init_model_params: bad bin count");
  rng::Prng rng(seed);
  NetworkParams p;

  // message feature map: per-(position,bit) embedding + two-layer net to F
  {
    std::vector<float> emb((size_t)2 * cfg.message_bits * cfg.embed_dim);
    for (auto& v : emb) v = (float)rng.uniform(-0.5, 0.5);
    p.add("msg.embed", Tensor::from(std::move(emb), {2 * cfg.message_bits, cfg.embed_dim}, true));
    p.add("msg.fc1.w", kaiming_uniform(rng, {cfg.embed_dim, cfg.msg_hidden}, cfg.embed_dim));
    p.add("msg.fc1.b", zeros_param({cfg.msg_hidden}));
    p.add("msg.fc2.w", kaiming_uniform(rng, {cfg.msg_hidden, bins}, cfg.msg_hidden));
    p.add("msg.fc2.b", zeros_param({bins}));
  }

  // coupling blocks; the final conv of each subnet starts at zero so every
  // block begins as the identity
  const int k = cfg.kernel;
  for (int b = 0; b < cfg.n_blocks; ++b) {
    for (int j = 0; j < cfg.subnet_depth; ++j) {
      const int cin = j == 0 ? 2 : cfg.channels;
      const int cout = j == cfg.subnet_depth - 1 ? 4 : cfg.channels;
      if (j == cfg.subnet_depth - 1) {
        p.add(block_conv(b, j, "w"), zeros_param({cout, cin, k, k}));
        p.add(block_conv(b, j, "b"), zeros_param({cout}));
      } else {
        p.add(block_conv(b, j, "w"), kaiming_uniform(rng, {cout, cin, k, k}, cin * k * k));
        p.add(block_conv(b, j, "b"), zeros_param({cout}));
      }
    }
  }

  // message reconstruction head
  p.add("head.fc1.w", kaiming_uniform(rng, {bins, cfg.head_hidden}, bins));
  p.add("head.fc1.b", zeros_param({cfg.head_hidden}));
  p.add("head.fc2.w", kaiming_uniform(rng, {cfg.head_hidden, cfg.message_bits}, cfg.head_hidden));
  p.add("head.fc2.b", zeros_param({cfg.message_bits}));

  // discriminator: conv + pool stack, zero-initialized final projection so
  // the untrained output is exactly 0.5
  for (int l = 0; l < cfg.disc_layers; ++l) {
    const int cin = l == 0 ? 1 : cfg.disc_channels;
    p.add("disc.c" + std::to_string(l) + ".w",
          kaiming_uniform(rng, {cfg.disc_channels, cin, 3, 3}, cin * 9));
    p.add("disc.c" + std::to_string(l) + ".b", zeros_param({cfg.disc_channels}));
  }
  p.add("disc.fc.w", zeros_param({cfg.disc_channels, 1}));
  p.add("disc.fc.b", zeros_param({1}));
  return p;
}

// ------------------------------------------------------------ message map

namespace {

Tensor message_row(const Message& m, int bins, const NetworkParams& p,
                   const ModelConfig& cfg) {
  m.validate();
  if (m.size() != cfg.message_bits)
    throw std::invalid_argument("build_message_map: message length does not match config");
  std::vector<int> idx(m.size());
  for (int i = 0; i < m.size(); ++i) idx[i] = 2 * i + (int)m.bits[i];
  Tensor e = ad::embedding_lookup(p.get("msg.embed"), idx);          // (K, D)
  Tensor h1 = ad::leaky_relu(ad::linear(e, p.get("msg.fc1.w"), p.get("msg.fc1.b")),
                             cfg.leaky_slope);                        // (K, H)
  Tensor h2 = ad::linear(h1, p.get("msg.fc2.w"), p.get("msg.fc2.b"));  // (K, F)
  return ad::mean_over_axes(h2, {0});                                 // (F)
}

}  // namespace

Tensor build_message_map_t(const Message& m, int frames, int bins, const NetworkParams& p,
                           const ModelConfig& cfg) {
  if (frames < 1 || bins < 1) throw std::invalid_argument("build_message_map: bad T/F");
  Tensor h = message_row(m, bins, p, cfg);
  Tensor row = ad::reshape(h, {1, bins});
  std::vector<Tensor> rows(frames, row);
  Tensor plane = ad::reshape(ad::concat(rows, 0), {1, frames, bins});  // Repeat_T
  return ad::concat({plane, plane}, 0);  // same h on the real and imaginary axes
}

MessageFeatureMap build_message_map(const Message& m, int frames, int bins,
                                    const NetworkParams& p, const ModelConfig& cfg) {
  ad::NoGradGuard guard;
  Tensor h = message_row(m, bins, p, cfg);
  MessageFeatureMap out;
  out.frames = frames;
  out.bins = bins;
  out.row = h.values();
  return out;
}

// -------------------------------------------------------- coupling blocks

namespace {

struct CouplingNets {
  Tensor scale;  // (2,T,F), already bounded by s_max * tanh
  Tensor shift;  // (2,T,F)
};

CouplingNets subnet(const Tensor& x, int block, const NetworkParams& p,
                    const ModelConfig& cfg) {
  Tensor y = ad::leaky_relu(ad::conv2d(x, p.get(block_conv(block, 0, "w")),
                                       p.get(block_conv(block, 0, "b"))),
                            cfg.leaky_slope);
  for (int j = 1; j < cfg.subnet_depth - 1; ++j) {
    Tensor z = ad::leaky_relu(ad::conv2d(y, p.get(block_conv(block, j, "w")),
                                         p.get(block_conv(block, j, "b"))),
                              cfg.leaky_slope);
    y = ad::add(y, z);
  }
  Tensor out = ad::conv2d(y, p.get(block_conv(block, cfg.subnet_depth - 1, "w")),
                          p.get(block_conv(block, cfg.subnet_depth - 1, "b")));
  auto parts = ad::split(out, 0, 2);
  CouplingNets nets;
  nets.scale = ad::mul_scalar(ad::tanh(parts[0]), cfg.s_max);
  nets.shift = parts[1];
  return nets;
}

}  // namespace

std::pair<Tensor, Tensor> inn_forward(const Tensor& host, const Tensor& msg,
                                      const NetworkParams& p, const ModelConfig& cfg) {
  if (host.shape() != msg.shape() || host.shape().size() != 3 || host.shape()[0] != 2)
    throw std::invalid_argument("inn_forward: branches must both be (2,T,F)");
  Tensor u = host, v = msg;
  for (int b = 0; b < cfg.n_blocks; ++b) {
    if (b % 2 == 0) {
      CouplingNets nets = subnet(v, b, p, cfg);
      u = ad::add(ad::mul(u, ad::exp(nets.scale)), nets.shift);
    } else {
      CouplingNets nets = subnet(u, b, p, cfg);
      v = ad::add(ad::mul(v, ad::exp(nets.scale)), nets.shift);
    }
  }
  return {u, v};
}

std::pair<Tensor, Tensor> inn_inverse(const Tensor& host, const Tensor& msg,
                                      const NetworkParams& p, const ModelConfig& cfg) {
  if (host.shape() != msg.shape() || host.shape().size() != 3 || host.shape()[0] != 2)
    throw std::invalid_argument("inn_inverse: branches must both be (2,T,F)");
  Tensor u = host, v = msg;
  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    if (b % 2 == 0) {
      CouplingNets nets = subnet(v, b, p, cfg);
      u = ad::mul(ad::sub(u, nets.shift), ad::exp(ad::mul_scalar(nets.scale, -1.0f)));
    } else {
      CouplingNets nets = subnet(u, b, p, cfg);
      v = ad::mul(ad::sub(v, nets.shift), ad::exp(ad::mul_scalar(nets.scale, -1.0f)));
    }
  }
  return {u, v};
}

Tensor encode_t(const Tensor& x_spec, const Tensor& msg_map, const NetworkParams& p,
                const ModelConfig& cfg) {
  return inn_forward(x_spec, msg_map, p, cfg).first;
}

DecodeOut decode_t(const Tensor& x_spec, const NetworkParams& p, const ModelConfig& cfg) {
  // the watermarked spectrogram is fed as dual input
  auto [u, v] = inn_inverse(x_spec, x_spec, p, cfg);
  (void)u;
  DecodeOut out;
  out.feature_map = v;
  Tensor reduced = ad::mean_over_axes(v, {0, 1});  // mean over complex and time axes
  Tensor h = ad::leaky_relu(
      ad::linear(ad::reshape(reduced, {1, x_spec.shape()[2]}), p.get("head.fc1.w"),
                 p.get("head.fc1.b")),
      cfg.leaky_slope);
  Tensor logits = ad::linear(h, p.get("head.fc2.w"), p.get("head.fc2.b"));
  out.logits = ad::reshape(logits, {cfg.message_bits});
  return out;
}

Tensor discriminate_t(const Tensor& mag, const NetworkParams& p, const ModelConfig& cfg) {
  if (mag.shape().size() != 3 || mag.shape()[0] != 1)
    throw std::invalid_argument("discriminate: expects (1,T,F) magnitude input");
  Tensor x = mag;
  for (int l = 0; l < cfg.disc_layers; ++l) {
    x = ad::leaky_relu(ad::conv2d(x, p.get("disc.c" + std::to_string(l) + ".w"),
                                  p.get("disc.c" + std::to_string(l) + ".b")),
                       cfg.leaky_slope);
    if (x.shape()[1] >= 2 && x.shape()[2] >= 2) x = ad::avg_pool2(x);
  }
  Tensor pooled = ad::mean_over_axes(x, {1, 2});  // (C)
  Tensor logit = ad::linear(ad::reshape(pooled, {1, cfg.disc_channels}), p.get("disc.fc.w"),
                            p.get("disc.fc.b"));
  return ad::reshape(ad::sigmoid(logit), {1});
}

// ----------------------------------------------------------- value level

Tensor spec_to_tensor(const dsp::ComplexSpec& spec) {
  const size_t plane = (size_t)spec.frames * spec.bins;
  std::vector<float> data(2 * plane);
  for (size_t i = 0; i < plane; ++i) {
    data[i] = (float)spec.re[i];
    data[plane + i] = (float)spec.im[i];
  }
  return Tensor::from(std::move(data), {2, spec.frames, spec.bins});
}

dsp::ComplexSpec tensor_to_spec(const Tensor& t, const dsp::StftConfig& cfg, int origin_len) {
  if (t.shape().size() != 3 || t.shape()[0] != 2)
    throw std::invalid_argument("tensor_to_spec: expects (2,T,F)");
  dsp::ComplexSpec spec;
  spec.config = cfg;
  spec.origin_len = origin_len;
  spec.frames = t.shape()[1];
  spec.bins = t.shape()[2];
  const size_t plane = (size_t)spec.frames * spec.bins;
  spec.re.resize(plane);
  spec.im.resize(plane);
  for (size_t i = 0; i < plane; ++i) {
    spec.re[i] = t.values()[i];
    spec.im[i] = t.values()[plane + i];
  }
  return spec;
}

dsp::ComplexSpec encode(const dsp::ComplexSpec& x, const MessageFeatureMap& m,
                        const NetworkParams& p, const ModelConfig& cfg) {
  if (m.frames != x.frames || m.bins != x.bins)
    throw std::invalid_argument("encode: spectrogram/message map shape mismatch");
  ad::NoGradGuard guard;
  Tensor xw = encode_t(spec_to_tensor(x), m.as_tensor(), p, cfg);
  return tensor_to_spec(xw, x.config, x.origin_len);
}

DecodeResult decode(const dsp::ComplexSpec& x, const NetworkParams& p, const ModelConfig& cfg) {
  ad::NoGradGuard guard;
  DecodeOut out = decode_t(spec_to_tensor(x), p, cfg);
  DecodeResult res;
  res.logits = out.logits.values();
  res.bits.resize(res.logits.size());
  for (size_t i = 0; i < res.logits.size(); ++i) res.bits[i] = res.logits[i] > 0 ? 1 : 0;
  return res;
}

DiscriminatorOut discriminate(const dsp::AudioClip& clip, const dsp::StftConfig& stft_cfg,
                              const NetworkParams& p, const ModelConfig& cfg) {
  ad::NoGradGuard guard;
  dsp::ComplexSpec spec = dsp::stft(clip, stft_cfg);
  Tensor packed = spec_to_tensor(spec);
  auto halves = ad::split(packed, 0, 2);
  Tensor mag = ad::complex_magnitude(halves[0], halves[1]);
  DiscriminatorOut out;
  out.p = discriminate_t(mag, p, cfg).item();
  return out;
}

// ------------------------------------------------------------- model I/O

NetworkParams WatermarkModel::enc_view() const {
  return distilled ? params.subset("enc.") : params;
}

NetworkParams WatermarkModel::dec_view() const {
  return distilled ? params.subset("dec.") : params;
}

WatermarkModel make_teacher_model(const ModelConfig& cfg, const dsp::StftConfig& stft,
                                  int sample_rate, const std::vector<uint8_t>& sync_code,
                                  uint64_t seed) {
  cfg.validate();
  stft.validate();
  if ((int)sync_code.size() != cfg.sync_len)
    throw std::invalid_argument("make_teacher_model: sync code length mismatch");
  WatermarkModel model;
  model.enc_cfg = cfg;
  model.dec_cfg = cfg;
  model.stft = stft;
  model.sample_rate = sample_rate;
  model.sync_code = sync_code;
  model.distilled = false;
  model.params = init_model_params(cfg, stft.bins(), seed);
  return model;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_blocks", c.n_blocks},       {"channels", c.channels},
          {"subnet_depth", c.subnet_depth}, {"message_bits", c.message_bits},
          {"sync_len", c.sync_len},       {"embed_dim", c.embed_dim},
          {"msg_hidden", c.msg_hidden},   {"head_hidden", c.head_hidden},
          {"kernel", c.kernel},           {"s_max", c.s_max},
          {"leaky_slope", c.leaky_slope}, {"disc_channels", c.disc_channels},
          {"disc_layers", c.disc_layers}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_blocks = j.at("n_blocks");
  c.channels = j.at("channels");
  c.subnet_depth = j.at("subnet_depth");
  c.message_bits = j.at("message_bits");
  c.sync_len = j.at("sync_len");
  c.embed_dim = j.at("embed_dim");
  c.msg_hidden = j.at("msg_hidden");
  c.head_hidden = j.at("head_hidden");
  c.kernel = j.at("kernel");
  c.s_max = j.at("s_max");
  c.leaky_slope = j.at("leaky_slope");
  c.disc_channels = j.at("disc_channels");
  c.disc_layers = j.at("disc_layers");
  return c;
}

}  // namespace

void save_model(const WatermarkModel& model, const std::string& path) {
  ad::save_checkpoint(model.params, path);
  nlohmann::json j;
  j["format"] = 1;
  j["kind"] = model.distilled ? "distilled" : "teacher";
  j["encoder"] = config_to_json(model.enc_cfg);
  j["decoder"] = config_to_json(model.dec_cfg);
  j["stft"] = {{"fft_size", model.stft.fft_size}, {"hop", model.stft.hop}};
  j["sample_rate"] = model.sample_rate;
  j["sync_code_hex"] = hex_from_bits(model.sync_code);
  std::ofstream out(path + ".json");
  if (!out) throw std::runtime_error("save_model: cannot open sidecar for " + path);
  out << j.dump(2) << "\n";
}

WatermarkModel load_model(const std::string& path) {
  WatermarkModel model;
  model.params = ad::load_checkpoint(path);
  std::ifstream in(path + ".json");
  if (!in) throw std::runtime_error("load_model: missing sidecar " + path + ".json");
  nlohmann::json j;
  in >> j;
  model.distilled = j.at("kind") == "distilled";
  model.enc_cfg = config_from_json(j.at("encoder"));
  model.dec_cfg = config_from_json(j.at("decoder"));
  model.stft.fft_size = j.at("stft").at("fft_size");
  model.stft.hop = j.at("stft").at("hop");
  model.sample_rate = j.at("sample_rate");
  model.sync_code = bits_from_hex(j.at("sync_code_hex"), model.enc_cfg.sync_len);
  return model;
}

dsp::AudioClip embed_clip(const WatermarkModel& model, const dsp::AudioClip& clip,
                          const Message& m) {
  dsp::ComplexSpec x = dsp::stft(clip, model.stft);
  NetworkParams enc = model.enc_view();
  MessageFeatureMap map = build_message_map(m, x.frames, x.bins, enc, model.enc_cfg);
  dsp::ComplexSpec xw = encode(x, map, enc, model.enc_cfg);
  return dsp::istft(xw, clip.sample_rate);
}

DecodeResult decode_clip(const WatermarkModel& model, const dsp::AudioClip& clip) {
  dsp::ComplexSpec x = dsp::stft(clip, model.stft);
  return decode(x, model.dec_view(), model.dec_cfg);
}

}  // namespace pkdmark::net
