#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pkdmark/dsp.hpp"

// Reverse-mode autodiff over float32 tensors with exactly the operator set
// the watermarking networks need. A graph is confined to one thread for a
// forward/backward pass; distinct graphs may run on distinct threads.

namespace pkdmark::ad {

using Shape = std::vector<int>;

int numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated on demand during backward
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
  }
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(std::vector<float> data, Shape shape, bool requires_grad = false);
  static Tensor scalar(float v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int numel() const;
  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<float>& values() const { return node_->value; }
  std::vector<float>& raw_values();  // leaf tensors only
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<float>& grad() const { return node_->grad; }
  void zero_grad();
  float item() const;
  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float c);
Tensor mul_scalar(const Tensor& a, float c);
Tensor leaky_relu(const Tensor& a, float slope = 0.2f);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, float lo, float hi);
Tensor complex_magnitude(const Tensor& re, const Tensor& im);

// ---- linear algebra / nets ----
Tensor matmul(const Tensor& a, const Tensor& b);              // (m,k)x(k,n)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // (r,d)x(d,h)+b
// x: (cin,h,w), w: (cout,cin,kh,kw), bias optional (cout) — stride 1, same padding
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices);

// ---- reductions / structure ----
Tensor mean_over_axes(const Tensor& a, std::vector<int> axes);
Tensor mean_all(const Tensor& a);
// (c,h,w) -> (c, h/2, w/2) averaging 2x2 windows; odd trailing row/col dropped
Tensor avg_pool2(const Tensor& a);
Tensor l2_norm(const Tensor& a);  // sqrt(sum of squares), scalar
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& a, int axis, int parts);
Tensor reshape(const Tensor& a, Shape shape);

// ---- gradient control ----
// While alive, ops do not record the graph (pure inference).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

Tensor stop_gradient(const Tensor& a);
// value = forward_values, backward = identity into x
Tensor straight_through(const Tensor& x, std::vector<float> forward_values);

// ---- DSP ops (double-precision FFT inside, float at the boundary) ----
std::pair<Tensor, Tensor> stft(const Tensor& x, const dsp::StftConfig& cfg);
Tensor istft(const Tensor& re, const Tensor& im, const dsp::StftConfig& cfg, int origin_len);

void backward(const Tensor& loss);

}  // namespace pkdmark::ad
