#include "pkdmark/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace pkdmark::ad {

Tensor& NetworkParams::add(const std::string& name, Tensor t) {
  if (by_name_.count(name))
    throw std::invalid_argument("NetworkParams: duplicate name " + name);
  order_.push_back(name);
  return by_name_.emplace(name, std::move(t)).first->second;
}

const Tensor& NetworkParams::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end())
    throw std::out_of_range("NetworkParams: missing parameter " + name);
  return it->second;
}

bool NetworkParams::has(const std::string& name) const { return by_name_.count(name) > 0; }

void NetworkParams::zero_grads() {
  for (const auto& name : order_) {
    auto& t = by_name_.at(name);
    if (t.has_grad()) t.zero_grad();
  }
}

uint64_t NetworkParams::checksum() const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t len) {
    const unsigned char* p = (const unsigned char*)data;
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& name : order_) {
    mix(name.data(), name.size());
    const auto& v = by_name_.at(name).values();
    mix(v.data(), v.size() * sizeof(float));
  }
  return h;
}

NetworkParams NetworkParams::clone() const {
  NetworkParams out;
  out.version = version;
  for (const auto& name : order_) {
    const Tensor& t = by_name_.at(name);
    out.add(name, Tensor::from(t.values(), t.shape(), t.requires_grad()));
  }
  return out;
}

void NetworkParams::set_requires_grad(bool on) {
  for (const auto& name : order_) by_name_.at(name).node()->requires_grad = on;
}

void NetworkParams::set_requires_grad(const std::string& prefix, bool on) {
  for (const auto& name : order_)
    if (name.rfind(prefix, 0) == 0) by_name_.at(name).node()->requires_grad = on;
}

void NetworkParams::absorb(const NetworkParams& other, const std::string& prefix) {
  for (const auto& name : other.order_) add(prefix + name, other.by_name_.at(name));
}

NetworkParams NetworkParams::subset(const std::string& prefix) const {
  NetworkParams out;
  out.version = version;
  for (const auto& name : order_)
    if (name.rfind(prefix, 0) == 0)
      out.add(name.substr(prefix.size()), by_name_.at(name));
  return out;
}

// ------------------------------------------------------------------ Adam

AdamOptimizer::AdamOptimizer(const NetworkParams& params, AdamConfig cfg)
    : AdamOptimizer(params, cfg, "") {}

AdamOptimizer::AdamOptimizer(const NetworkParams& params, AdamConfig cfg,
                             const std::string& name_prefix_filter)
    : cfg_(cfg) {
  for (const auto& name : params.names()) {
    if (!name_prefix_filter.empty() && name.rfind(name_prefix_filter, 0) != 0) continue;
    const Tensor& t = params.get(name);
    Slot slot;
    slot.name = name;
    slot.param = t;
    slot.m.assign(t.numel(), 0.0f);
    slot.v.assign(t.numel(), 0.0f);
    slots_.push_back(std::move(slot));
  }
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow((double)cfg_.beta1, (double)t_);
  const double bc2 = 1.0 - std::pow((double)cfg_.beta2, (double)t_);
  for (auto& slot : slots_) {
    Node& node = *slot.param.node();
    if (!node.requires_grad) continue;  // frozen parameters are skipped
    if (node.grad.empty())
      throw std::runtime_error("adam_step: missing gradient for " + slot.name);
    const size_t n = node.value.size();
    for (size_t i = 0; i < n; ++i) {
      const float g = node.grad[i];
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0f - cfg_.beta1) * g;
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0f - cfg_.beta2) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      node.value[i] -= (float)(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    std::fill(node.grad.begin(), node.grad.end(), 0.0f);
  }
}

// ------------------------------------------------------------ checkpoints

namespace {

constexpr char kMagic[4] = {'P', 'K', 'D', 'M'};
constexpr uint32_t kFormatVersion = 1;

void put_u32(FILE* f, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  std::fwrite(b, 1, 4, f);
}

uint32_t get_u32(FILE* f) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("checkpoint: truncated file");
  return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

}  // namespace

void save_checkpoint(const NetworkParams& params, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  std::fwrite(kMagic, 1, 4, f);
  put_u32(f, kFormatVersion);
  put_u32(f, (uint32_t)params.size());
  for (const auto& name : params.names()) {
    const Tensor& t = params.get(name);
    put_u32(f, (uint32_t)name.size());
    std::fwrite(name.data(), 1, name.size(), f);
    unsigned char dtype = 0;  // f32
    unsigned char rank = (unsigned char)t.shape().size();
    std::fwrite(&dtype, 1, 1, f);
    std::fwrite(&rank, 1, 1, f);
    for (int d : t.shape()) put_u32(f, (uint32_t)d);
    std::fwrite(t.values().data(), sizeof(float), t.values().size(), f);
  }
  std::fclose(f);
}

NetworkParams load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    std::fclose(f);
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  const uint32_t version = get_u32(f);
  if (version != kFormatVersion) {
    std::fclose(f);
    throw std::runtime_error("load_checkpoint: unsupported format version");
  }
  const uint32_t count = get_u32(f);
  NetworkParams params;
  try {
    for (uint32_t r = 0; r < count; ++r) {
      const uint32_t name_len = get_u32(f);
      std::string name(name_len, '\0');
      if (std::fread(name.data(), 1, name_len, f) != name_len)
        throw std::runtime_error("checkpoint: truncated name");
      unsigned char dtype, rank;
      if (std::fread(&dtype, 1, 1, f) != 1 || std::fread(&rank, 1, 1, f) != 1)
        throw std::runtime_error("checkpoint: truncated record header");
      if (dtype != 0) throw std::runtime_error("checkpoint: unknown dtype tag");
      Shape shape(rank);
      for (int i = 0; i < rank; ++i) shape[i] = (int)get_u32(f);
      std::vector<float> data((size_t)numel(shape));
      if (std::fread(data.data(), sizeof(float), data.size(), f) != data.size())
        throw std::runtime_error("checkpoint: truncated tensor data");
      params.add(name, Tensor::from(std::move(data), std::move(shape), true));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return params;
}

}  // namespace pkdmark::ad
