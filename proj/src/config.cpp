#include "pkdmark/config.hpp"

#include <fstream>

namespace pkdmark::config {

using nlohmann::json;

json default_config_json() {
  return json{
      {"seed", 1},
      {"sample_rate", 24000},
      {"stft", {{"fft_size", 1024}, {"hop", 600}}},
      {"teacher",
       {{"n_blocks", 8},
        {"channels", 32},
        {"subnet_depth", 5},
        {"message_bits", 16},
        {"sync_len", 8},
        {"embed_dim", 32},
        {"msg_hidden", 128},
        {"head_hidden", 64},
        {"kernel", 3},
        {"s_max", 2.0},
        {"leaky_slope", 0.2},
        {"disc_channels", 8},
        {"disc_layers", 4}}},
      {"student",
       {{"n_blocks", 2},
        {"channels", 16},
        {"subnet_depth", 5},
        {"message_bits", 16},
        {"sync_len", 8},
        {"embed_dim", 32},
        {"msg_hidden", 128},
        {"head_hidden", 64},
        {"kernel", 3},
        {"s_max", 2.0},
        {"leaky_slope", 0.2},
        {"disc_channels", 8},
        {"disc_layers", 4}}},
      {"losses",
       {{"lambda_per", 1.0},
        {"lambda_dec", 10.0},
        {"lambda_adv", 0.1},
        {"alpha_featmap", 1.0},
        {"alpha_scales", {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0}}}},
      {"optimizer", {{"lr", 1e-4}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}},
      {"train",
       {{"steps", 1000},
        {"batch_size", 1},
        {"attack_warmup_steps", 0},
        {"val_every", 100},
        {"val_clips", 16}}},
      {"attacks", json::array({json{{"kind", "ND"}, {"prob", 1.0}}})},
      {"corpus",
       {{"source", "synthetic"},
        {"wav_dir", ""},
        {"clip_seconds", 0.6},
        {"n_clips", 2000},
        {"train_frac", 0.9},
        {"val_frac", 0.05},
        {"test_frac", 0.05}}},
      {"pkd",
       {{"lambda_start", 0.1},
        {"lambda_end", 1.0},
        {"ramp_steps", 40000},
        {"post_ramp_steps", 0},
        {"finetune_steps", 0},
        {"finetune_lr_scale", 0.1},
        {"freeze_discriminator", false},
        {"finetune_teacher_encoder", false}}},
      {"detect", {{"sync_code_hex", "a6"}, {"sync_threshold", 7}}}};
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object())
    throw ConfigError("config: expected an object at '" + (path.empty() ? "." : path) + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_strict(slot, it.value(), key);
    } else if (same_kind(slot, it.value()) || slot.is_array()) {
      slot = it.value();
    } else {
      throw ConfigError("config: type mismatch at '" + key + "'");
    }
  }
}

void apply_override(json& root, const std::string& setting) {
  const auto eq = setting.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + setting + "' is not of the form key=value");
  const std::string path = setting.substr(0, eq);
  const std::string value = setting.substr(eq + 1);

  json* node = &root;
  size_t pos = 0;
  while (true) {
    const size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (!node->is_object() || !node->contains(key))
      throw ConfigError("override: unknown key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  try {
    if (node->is_string())
      *node = value;
    else if (node->is_boolean())
      *node = (value == "true" || value == "1");
    else if (node->is_number_integer())
      *node = std::stoll(value);
    else if (node->is_number_float())
      *node = std::stod(value);
    else
      throw ConfigError("override: key '" + path + "' is not a scalar setting");
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    throw ConfigError("override: cannot parse value '" + value + "' for '" + path + "'");
  }
}

// known per-attack-entry keys; anything else is rejected
const std::vector<std::string> kAttackKeys = {
    "kind",       "prob",         "snr_db",       "median_kernel",  "lp_cutoff_hz",
    "codec_cutoff_hz", "codec_mag_bits", "codec_external_cmd", "ds_rate",     "quant_bits",
    "gain",       "echo_delay_s", "echo_gain",    "speed",          "rt60_s",
    "reverb_wet", "reverb_len",   "pitch_factor"};

attacks::MenuEntry parse_attack_entry(const json& j) {
  if (!j.is_object() || !j.contains("kind"))
    throw ConfigError("attacks: each entry needs at least a 'kind'");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const auto& k : kAttackKeys) known = known || (k == it.key());
    if (!known) throw ConfigError("attacks: unknown key '" + it.key() + "'");
  }
  attacks::MenuEntry e;
  e.spec = attacks::AttackSpec::make(attacks::kind_from_name(j.at("kind").get<std::string>()));
  e.prob = j.value("prob", 0.0);
  if (j.contains("snr_db")) e.spec.snr_db = j["snr_db"];
  if (j.contains("median_kernel")) e.spec.median_kernel = j["median_kernel"];
  if (j.contains("lp_cutoff_hz")) e.spec.lp_cutoff_hz = j["lp_cutoff_hz"];
  if (j.contains("codec_cutoff_hz")) e.spec.codec_cutoff_hz = j["codec_cutoff_hz"];
  if (j.contains("codec_mag_bits")) e.spec.codec_mag_bits = j["codec_mag_bits"];
  if (j.contains("codec_external_cmd")) e.spec.codec_external_cmd = j["codec_external_cmd"];
  if (j.contains("ds_rate")) e.spec.ds_rate = j["ds_rate"];
  if (j.contains("quant_bits")) e.spec.quant_bits = j["quant_bits"];
  if (j.contains("gain")) e.spec.gain = j["gain"];
  if (j.contains("echo_delay_s")) e.spec.echo_delay_s = j["echo_delay_s"];
  if (j.contains("echo_gain")) e.spec.echo_gain = j["echo_gain"];
  if (j.contains("speed")) e.spec.speed = j["speed"];
  if (j.contains("rt60_s")) e.spec.rt60_s = j["rt60_s"];
  if (j.contains("reverb_wet")) e.spec.reverb_wet = j["reverb_wet"];
  if (j.contains("reverb_len")) e.spec.reverb_len = j["reverb_len"];
  if (j.contains("pitch_factor")) e.spec.pitch_factor = j["pitch_factor"];
  return e;
}

net::ModelConfig parse_model(const json& j) {
  net::ModelConfig c;
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

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  json user;
  try {
    in >> user;
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  json merged = default_config_json();
  merge_strict(merged, user, "");
  for (const auto& s : overrides) apply_override(merged, s);
  return merged;
}

training::TrainRunConfig to_train_config(const json& j) {
  training::TrainRunConfig cfg;
  try {
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.sample_rate = j.at("sample_rate");
    cfg.stft.fft_size = j.at("stft").at("fft_size");
    cfg.stft.hop = j.at("stft").at("hop");
    cfg.teacher = parse_model(j.at("teacher"));
    cfg.student = parse_model(j.at("student"));
    const auto& jl = j.at("losses");
    cfg.weights.lambda_per = jl.at("lambda_per");
    cfg.weights.lambda_dec = jl.at("lambda_dec");
    cfg.weights.lambda_adv = jl.at("lambda_adv");
    cfg.weights.alpha_featmap = jl.at("alpha_featmap");
    cfg.weights.alpha_scales = jl.at("alpha_scales").get<std::vector<float>>();
    const auto& jo = j.at("optimizer");
    cfg.optimizer.lr = jo.at("lr");
    cfg.optimizer.beta1 = jo.at("beta1");
    cfg.optimizer.beta2 = jo.at("beta2");
    cfg.optimizer.eps = jo.at("eps");
    const auto& jt = j.at("train");
    cfg.steps = jt.at("steps");
    cfg.batch_size = jt.at("batch_size");
    cfg.attack_warmup_steps = jt.at("attack_warmup_steps");
    cfg.val_every = jt.at("val_every");
    cfg.val_clips = jt.at("val_clips");
    for (const auto& e : j.at("attacks")) cfg.menu.entries.push_back(parse_attack_entry(e));
    const auto& jc = j.at("corpus");
    const std::string source = jc.at("source");
    if (source == "synthetic")
      cfg.corpus.source = training::CorpusSpec::Source::Synthetic;
    else if (source == "wav_dir")
      cfg.corpus.source = training::CorpusSpec::Source::WavDir;
    else
      throw ConfigError("corpus.source must be 'synthetic' or 'wav_dir'");
    cfg.corpus.wav_dir = jc.at("wav_dir");
    cfg.corpus.clip_seconds = jc.at("clip_seconds");
    cfg.corpus.n_clips = jc.at("n_clips");
    cfg.corpus.train_frac = jc.at("train_frac");
    cfg.corpus.val_frac = jc.at("val_frac");
    cfg.corpus.test_frac = jc.at("test_frac");
    cfg.corpus.sample_rate = cfg.sample_rate;
    const auto& jp = j.at("pkd");
    cfg.pkd.lambda_start = jp.at("lambda_start");
    cfg.pkd.lambda_end = jp.at("lambda_end");
    cfg.pkd.ramp_steps = jp.at("ramp_steps");
    cfg.pkd.post_ramp_steps = jp.at("post_ramp_steps");
    cfg.pkd.finetune_steps = jp.at("finetune_steps");
    cfg.pkd.finetune_lr_scale = jp.at("finetune_lr_scale");
    cfg.pkd.freeze_discriminator = jp.at("freeze_discriminator");
    cfg.pkd.finetune_teacher_encoder = jp.at("finetune_teacher_encoder");
    const auto& jd = j.at("detect");
    cfg.sync_code = net::bits_from_hex(jd.at("sync_code_hex"), cfg.teacher.sync_len);
    cfg.sync_threshold = jd.at("sync_threshold");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

}  // namespace pkdmark::config
