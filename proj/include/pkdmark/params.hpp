#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pkdmark/autodiff.hpp"

namespace pkdmark::ad {

// Named, shaped parameter store. Insertion order is preserved and defines
// the serialization order. Tensors are shared by reference: two modules
// holding the same NetworkParams see the same underlying buffers.
class NetworkParams {
 public:
  Tensor& add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  void zero_grads();
  // FNV-1a over the raw value bits, in name order.
  uint64_t checksum() const;
  // Deep copy: fresh leaf tensors with copied values.
  NetworkParams clone() const;
  void set_requires_grad(bool on);
  void set_requires_grad(const std::string& prefix, bool on);
  // Adds every tensor of `other` under `prefix` + name (shared, not copied).
  void absorb(const NetworkParams& other, const std::string& prefix);
  NetworkParams subset(const std::string& prefix) const;  // shared tensors

  uint32_t version = 1;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> by_name_;
};

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Standard Adam with bias correction; gradients are zeroed after a step.
class AdamOptimizer {
 public:
  AdamOptimizer(const NetworkParams& params, AdamConfig cfg);
  AdamOptimizer(const NetworkParams& params, AdamConfig cfg,
                const std::string& name_prefix_filter);

  void step();
  long step_count() const { return t_; }
  void set_lr(float lr) { cfg_.lr = lr; }
  float lr() const { return cfg_.lr; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<float> m, v;
  };
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  long t_ = 0;
};

// Versioned binary container: magic "PKDM", u32 format version, then one
// record per tensor: u32 name length, UTF-8 name, u8 dtype tag (0 = f32),
// u8 rank, u32 dims, little-endian raw values. Save/load round-trips are
// bit-exact.
void save_checkpoint(const NetworkParams& params, const std::string& path);
NetworkParams load_checkpoint(const std::string& path);

}  // namespace pkdmark::ad
