#include "pkdmark/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

#include "pkdmark/kernels.hpp"

namespace pkdmark::ad {

int numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor shape with non-positive dim");
    n *= d;
  }
  return n;
}

int Tensor::numel() const { return ad::numel(node_->shape); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(ad::numel(shape), 0.0f);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(std::vector<float> data, Shape shape, bool requires_grad) {
  if ((int)data.size() != ad::numel(shape))
    throw std::invalid_argument("Tensor::from: data length does not match shape");
  auto n = std::make_shared<Node>();
  n->value = std::move(data);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return from({v}, {1}); }

std::vector<float>& Tensor::raw_values() {
  if (!node_->leaf) throw std::logic_error("raw_values: only leaf tensors may be mutated");
  return node_->value;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item: tensor is not scalar");
  return node_->value[0];
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

void check_finite(const Node& n) {
  // branch-free exponent scan; NaN and Inf both have an all-ones exponent
  uint32_t bad = 0;
  const float* p = n.value.data();
  const size_t count = n.value.size();
  for (size_t i = 0; i < count; ++i) {
    uint32_t u;
    std::memcpy(&u, p + i, 4);
    bad |= (uint32_t)((u & 0x7f800000u) == 0x7f800000u);
  }
  if (bad) throw std::runtime_error(std::string("non-finite value in op: ") + n.op);
}

NodePtr make_out(Shape shape, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(numel(n->shape));
  n->op = op;
  n->leaf = false;
  return n;
}

Tensor finish(NodePtr out, std::vector<NodePtr> inputs, std::function<void(Node&)> bw) {
  check_finite(*out);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in->requires_grad;
  if (rg && g_grad_enabled) {
    out->requires_grad = true;
    out->inputs = std::move(inputs);
    out->backward_fn = std::move(bw);
  }
  return Tensor(std::move(out));
}

void acc_grad(Node& in, const float* g, size_t n) {
  if (!in.requires_grad) return;
  in.ensure_grad();
  for (size_t i = 0; i < n; ++i) in.grad[i] += g[i];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

// ------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = make_out(a.shape(), "add");
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] + b.values()[i];
  return finish(out, {a.node(), b.node()}, [n](Node& self) {
    acc_grad(*self.inputs[0], self.grad.data(), n);
    acc_grad(*self.inputs[1], self.grad.data(), n);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = make_out(a.shape(), "sub");
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] - b.values()[i];
  return finish(out, {a.node(), b.node()}, [n](Node& self) {
    acc_grad(*self.inputs[0], self.grad.data(), n);
    Node& bn = *self.inputs[1];
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (size_t i = 0; i < n; ++i) bn.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = make_out(a.shape(), "mul");
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] * b.values()[i];
  return finish(out, {a.node(), b.node()}, [n](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (size_t i = 0; i < n; ++i) an.grad[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (size_t i = 0; i < n; ++i) bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, float c) {
  auto out = make_out(a.shape(), "add_scalar");
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] + c;
  return finish(out, {a.node()}, [n](Node& self) {
    acc_grad(*self.inputs[0], self.grad.data(), n);
  });
}

Tensor mul_scalar(const Tensor& a, float c) {
  auto out = make_out(a.shape(), "mul_scalar");
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] * c;
  return finish(out, {a.node()}, [n, c](Node& self) {
    Node& an = *self.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < n; ++i) an.grad[i] += self.grad[i] * c;
  });
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
  auto out = make_out(a.shape(), name);
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) out->value[i] = fwd(a.values()[i]);
  return finish(out, {a.node()}, [n, bwd](Node& self) {
    Node& an = *self.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < n; ++i)
      an.grad[i] += self.grad[i] * bwd(an.value[i], self.value[i]);
  });
}

}  // namespace

Tensor leaky_relu(const Tensor& a, float slope) {
  return unary_op(
      a, "leaky_relu", [slope](float x) { return x > 0 ? x : slope * x; },
      [slope](float x, float) { return x > 0 ? 1.0f : slope; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, "tanh", [](float x) { return std::tanh(x); },
      [](float, float y) { return 1.0f - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid", [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log", [](float x) { return std::log(x); },
      [](float x, float) { return 1.0f / x; });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  return unary_op(
      a, "clamp",
      [lo, hi](float x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; });
}

Tensor complex_magnitude(const Tensor& re, const Tensor& im) {
  require_same_shape(re, im, "complex_magnitude");
  auto out = make_out(re.shape(), "complex_magnitude");
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i)
    out->value[i] = std::sqrt(re.values()[i] * re.values()[i] +
                              im.values()[i] * im.values()[i]);
  return finish(out, {re.node(), im.node()}, [n](Node& self) {
    Node& rn = *self.inputs[0];
    Node& in = *self.inputs[1];
    for (size_t i = 0; i < n; ++i) {
      const float m = std::max(self.value[i], 1e-12f);
      const float g = self.grad[i] / m;
      if (rn.requires_grad) {
        rn.ensure_grad();
        rn.grad[i] += g * rn.value[i];
      }
      if (in.requires_grad) {
        in.ensure_grad();
        in.grad[i] += g * in.value[i];
      }
    }
  });
}

// --------------------------------------------------------- linear algebra

namespace {

std::vector<float> transpose(const std::vector<float>& a, int rows, int cols) {
  std::vector<float> t((size_t)rows * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) t[(size_t)j * rows + i] = a[(size_t)i * cols + j];
  return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: shape mismatch");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = make_out({m, n}, "matmul");
  kernels::gemm(a.values().data(), b.values().data(), out->value.data(), m, k, n);
  return finish(out, {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      kernels::gemm_nt(self.grad.data(), bn.value.data(), an.grad.data(), m, n, k, true);
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      auto at = transpose(an.value, m, k);
      kernels::gemm(at.data(), self.grad.data(), bn.grad.data(), k, m, n, true);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[0])
    throw std::invalid_argument("linear: shape mismatch");
  const int r = x.shape()[0], d = x.shape()[1], h = w.shape()[1];
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != h))
    throw std::invalid_argument("linear: bias shape mismatch");
  auto out = make_out({r, h}, "linear");
  kernels::gemm(x.values().data(), w.values().data(), out->value.data(), r, d, h);
  if (b.defined())
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < h; ++j) out->value[(size_t)i * h + j] += b.values()[j];
  std::vector<NodePtr> ins = {x.node(), w.node()};
  if (b.defined()) ins.push_back(b.node());
  return finish(out, std::move(ins), [r, d, h](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    if (xn.requires_grad) {
      xn.ensure_grad();
      kernels::gemm_nt(self.grad.data(), wn.value.data(), xn.grad.data(), r, h, d, true);
    }
    if (wn.requires_grad) {
      wn.ensure_grad();
      auto xt = transpose(xn.value, r, d);
      kernels::gemm(xt.data(), self.grad.data(), wn.grad.data(), d, r, h, true);
    }
    if (self.inputs.size() > 2) {
      Node& bn = *self.inputs[2];
      if (bn.requires_grad) {
        bn.ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < h; ++j) bn.grad[j] += self.grad[(size_t)i * h + j];
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.shape().size() != 3 || w.shape().size() != 4)
    throw std::invalid_argument("conv2d: expects x (cin,h,w), w (cout,cin,kh,kw)");
  const int cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != cout))
    throw std::invalid_argument("conv2d: bias shape mismatch");
  auto out = make_out({cout, h, wd}, "conv2d");
  kernels::conv2d(x.values().data(), w.values().data(),
                  bias.defined() ? bias.values().data() : nullptr, out->value.data(),
                  cin, h, wd, cout, kh, kw);
  std::vector<NodePtr> ins = {x.node(), w.node()};
  if (bias.defined()) ins.push_back(bias.node());
  return finish(out, std::move(ins), [cin, h, wd, cout, kh, kw](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    if (wn.requires_grad || (bn && bn->requires_grad)) {
      std::vector<float> gw((size_t)cout * cin * kh * kw);
      std::vector<float> gb(cout);
      kernels::conv2d_grad_w(xn.value.data(), self.grad.data(), gw.data(), gb.data(),
                             cin, h, wd, cout, kh, kw);
      if (wn.requires_grad) acc_grad(wn, gw.data(), gw.size());
      if (bn && bn->requires_grad) acc_grad(*bn, gb.data(), gb.size());
    }
    if (xn.requires_grad) {
      auto flipped = kernels::flip_weights(wn.value.data(), cout, cin, kh, kw);
      std::vector<float> gx((size_t)cin * h * wd);
      kernels::conv2d(self.grad.data(), flipped.data(), nullptr, gx.data(), cout, h, wd,
                      cin, kh, kw);
      acc_grad(xn, gx.data(), gx.size());
    }
  });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices) {
  if (table.shape().size() != 2) throw std::invalid_argument("embedding_lookup: table rank");
  const int v = table.shape()[0], d = table.shape()[1];
  for (int idx : indices)
    if (idx < 0 || idx >= v) throw std::invalid_argument("embedding_lookup: index out of range");
  auto out = make_out({(int)indices.size(), d}, "embedding_lookup");
  for (size_t i = 0; i < indices.size(); ++i)
    std::memcpy(&out->value[i * d], &table.values()[(size_t)indices[i] * d],
                sizeof(float) * d);
  return finish(out, {table.node()}, [indices, d](Node& self) {
    Node& tn = *self.inputs[0];
    if (!tn.requires_grad) return;
    tn.ensure_grad();
    for (size_t i = 0; i < indices.size(); ++i)
      for (int j = 0; j < d; ++j)
        tn.grad[(size_t)indices[i] * d + j] += self.grad[i * d + j];
  });
}

// ------------------------------------------------------------- reductions

namespace {

struct AxisPlan {
  std::vector<int> out_shape;
  std::vector<size_t> out_index;  // per input element
  int count = 1;
};

AxisPlan plan_reduction(const Shape& shape, std::vector<int> axes) {
  std::sort(axes.begin(), axes.end());
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= (int)shape.size())
      throw std::invalid_argument("mean_over_axes: axis out of range");
    if (i > 0 && axes[i] == axes[i - 1])
      throw std::invalid_argument("mean_over_axes: duplicate axis");
  }
  AxisPlan plan;
  std::vector<bool> reduced(shape.size(), false);
  for (int a : axes) {
    reduced[a] = true;
    plan.count *= shape[a];
  }
  for (size_t i = 0; i < shape.size(); ++i)
    if (!reduced[i]) plan.out_shape.push_back(shape[i]);
  if (plan.out_shape.empty()) plan.out_shape.push_back(1);

  const int n = numel(shape);
  plan.out_index.resize(n);
  std::vector<int> coord(shape.size(), 0);
  for (int lin = 0; lin < n; ++lin) {
    size_t oi = 0;
    for (size_t i = 0; i < shape.size(); ++i)
      if (!reduced[i]) oi = oi * shape[i] + coord[i];
    plan.out_index[lin] = oi;
    for (int i = (int)shape.size() - 1; i >= 0; --i) {
      if (++coord[i] < shape[i]) break;
      coord[i] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor mean_over_axes(const Tensor& a, std::vector<int> axes) {
  AxisPlan plan = plan_reduction(a.shape(), std::move(axes));
  auto out = make_out(plan.out_shape, "mean_over_axes");
  std::vector<double> acc(out->value.size(), 0.0);
  const auto& v = a.values();
  for (size_t i = 0; i < v.size(); ++i) acc[plan.out_index[i]] += v[i];
  for (size_t i = 0; i < acc.size(); ++i) out->value[i] = (float)(acc[i] / plan.count);
  const float inv = 1.0f / plan.count;
  return finish(out, {a.node()},
                [plan = std::move(plan), inv](Node& self) {
                  Node& an = *self.inputs[0];
                  if (!an.requires_grad) return;
                  an.ensure_grad();
                  for (size_t i = 0; i < an.grad.size(); ++i)
                    an.grad[i] += self.grad[plan.out_index[i]] * inv;
                });
}

Tensor mean_all(const Tensor& a) {
  std::vector<int> axes(a.shape().size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = (int)i;
  return mean_over_axes(a, axes);
}

Tensor avg_pool2(const Tensor& a) {
  if (a.shape().size() != 3) throw std::invalid_argument("avg_pool2: expects (c,h,w)");
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  const int ho = h / 2, wo = w / 2;
  if (ho < 1 || wo < 1) throw std::invalid_argument("avg_pool2: input too small");
  auto out = make_out({c, ho, wo}, "avg_pool2");
  const auto& v = a.values();
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        const size_t base = ((size_t)ci * h + 2 * i) * w + 2 * j;
        out->value[((size_t)ci * ho + i) * wo + j] =
            0.25f * (v[base] + v[base + 1] + v[base + w] + v[base + w + 1]);
      }
  return finish(out, {a.node()}, [c, h, w, ho, wo](Node& self) {
    Node& an = *self.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          const float g = 0.25f * self.grad[((size_t)ci * ho + i) * wo + j];
          const size_t base = ((size_t)ci * h + 2 * i) * w + 2 * j;
          an.grad[base] += g;
          an.grad[base + 1] += g;
          an.grad[base + w] += g;
          an.grad[base + w + 1] += g;
        }
  });
}

Tensor l2_norm(const Tensor& a) {
  auto out = make_out({1}, "l2_norm");
  double acc = 0.0;
  for (float v : a.values()) acc += (double)v * v;
  out->value[0] = (float)std::sqrt(acc);
  return finish(out, {a.node()}, [](Node& self) {
    Node& an = *self.inputs[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const float norm = std::max(self.value[0], 1e-12f);
    const float g = self.grad[0] / norm;
    for (size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += g * an.value[i];
  });
}

// -------------------------------------------------------------- structure

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= (int)s0.size()) throw std::invalid_argument("concat: bad axis");
  int axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if ((int)i != axis && s[i] != s0[i])
        throw std::invalid_argument("concat: shape mismatch");
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  auto out = make_out(out_shape, "concat");
  std::vector<NodePtr> ins;
  std::vector<int> spans;
  size_t off = 0;
  for (const auto& p : parts) {
    ins.push_back(p.node());
    spans.push_back(p.shape()[axis]);
  }
  for (int o = 0; o < outer; ++o) {
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const size_t blk = (size_t)spans[pi] * inner;
      std::memcpy(&out->value[off], &parts[pi].values()[(size_t)o * blk], sizeof(float) * blk);
      off += blk;
    }
  }
  return finish(out, std::move(ins), [outer, inner, spans](Node& self) {
    size_t off = 0;
    std::vector<size_t> in_off(self.inputs.size(), 0);
    for (int o = 0; o < outer; ++o) {
      for (size_t pi = 0; pi < self.inputs.size(); ++pi) {
        const size_t blk = (size_t)spans[pi] * inner;
        Node& in = *self.inputs[pi];
        if (in.requires_grad) {
          in.ensure_grad();
          for (size_t i = 0; i < blk; ++i) in.grad[in_off[pi] + i] += self.grad[off + i];
        }
        in_off[pi] += blk;
        off += blk;
      }
    }
  });
}

std::vector<Tensor> split(const Tensor& a, int axis, int nparts) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= (int)s.size()) throw std::invalid_argument("split: bad axis");
  if (nparts <= 0 || s[axis] % nparts != 0)
    throw std::invalid_argument("split: axis not divisible by parts");
  const int span = s[axis] / nparts;
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape part_shape = s;
  part_shape[axis] = span;

  std::vector<Tensor> outs;
  const size_t blk = (size_t)span * inner;
  const size_t row = (size_t)s[axis] * inner;
  for (int pi = 0; pi < nparts; ++pi) {
    auto out = make_out(part_shape, "split");
    for (int o = 0; o < outer; ++o)
      std::memcpy(&out->value[(size_t)o * blk], &a.values()[(size_t)o * row + pi * blk],
                  sizeof(float) * blk);
    outs.push_back(finish(out, {a.node()}, [outer, blk, row, pi](Node& self) {
      Node& an = *self.inputs[0];
      if (!an.requires_grad) return;
      an.ensure_grad();
      for (int o = 0; o < outer; ++o)
        for (size_t i = 0; i < blk; ++i)
          an.grad[(size_t)o * row + pi * blk + i] += self.grad[(size_t)o * blk + i];
    }));
  }
  return outs;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) throw std::invalid_argument("reshape: element count mismatch");
  auto out = make_out(std::move(shape), "reshape");
  out->value = a.values();
  return finish(out, {a.node()}, [](Node& self) {
    acc_grad(*self.inputs[0], self.grad.data(), self.grad.size());
  });
}

// -------------------------------------------------------- gradient control

Tensor stop_gradient(const Tensor& a) {
  auto n = std::make_shared<Node>();
  n->shape = a.shape();
  n->value = a.values();
  n->op = "stop_gradient";
  return Tensor(std::move(n));
}

Tensor straight_through(const Tensor& x, std::vector<float> forward_values) {
  if ((int)forward_values.size() != x.numel())
    throw std::invalid_argument("straight_through: value length mismatch");
  auto out = make_out(x.shape(), "straight_through");
  out->value = std::move(forward_values);
  return finish(out, {x.node()}, [](Node& self) {
    acc_grad(*self.inputs[0], self.grad.data(), self.grad.size());
  });
}

// ---------------------------------------------------------------- DSP ops

namespace {

// Reflect-pad index map (pad = n/2 each side).
inline int reflect_index(int i, int pad, int len) {
  int j = i - pad;
  if (j < 0) j = -j;
  if (j >= len) j = 2 * (len - 1) - j;
  return j;
}

Tensor stft_packed(const Tensor& x, const dsp::StftConfig& cfg) {
  if (x.shape().size() != 1) throw std::invalid_argument("stft: expects rank-1 input");
  cfg.validate();
  const int len = x.shape()[0];
  dsp::AudioClip clip;
  clip.samples.assign(x.values().begin(), x.values().end());
  dsp::ComplexSpec spec = dsp::stft(clip, cfg);
  const int t = spec.frames, f = spec.bins;
  auto out = make_out({2, t, f}, "stft");
  for (size_t i = 0; i < spec.re.size(); ++i) {
    out->value[i] = (float)spec.re[i];
    out->value[spec.re.size() + i] = (float)spec.im[i];
  }
  const int n = cfg.fft_size, hop = cfg.hop, pad = n / 2;
  return finish(out, {x.node()}, [t, f, n, hop, pad, len, cfg](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const std::vector<double> win = dsp::make_window(cfg);
    std::vector<double> gpad(len + n, 0.0);
    std::vector<double> gre(f), gim(f), gframe(n);
    const size_t plane = (size_t)t * f;
    for (int fr = 0; fr < t; ++fr) {
      for (int k = 0; k < f; ++k) {
        gre[k] = self.grad[(size_t)fr * f + k];
        gim[k] = self.grad[plane + (size_t)fr * f + k];
      }
      kernels::rfft_adjoint(gre.data(), gim.data(), n, gframe.data());
      const int base = fr * hop;
      for (int i = 0; i < n && base + i < (int)gpad.size(); ++i)
        gpad[base + i] += gframe[i] * win[i];
    }
    for (int i = 0; i < (int)gpad.size(); ++i)
      xn.grad[reflect_index(i, pad, len)] += (float)gpad[i];
  });
}

Tensor istft_packed(const Tensor& c, const dsp::StftConfig& cfg, int origin_len) {
  if (c.shape().size() != 3 || c.shape()[0] != 2)
    throw std::invalid_argument("istft: expects (2,T,F) input");
  cfg.validate();
  const int t = c.shape()[1], f = c.shape()[2];
  dsp::ComplexSpec spec;
  spec.config = cfg;
  spec.origin_len = origin_len;
  spec.frames = t;
  spec.bins = f;
  const size_t plane = (size_t)t * f;
  spec.re.resize(plane);
  spec.im.resize(plane);
  for (size_t i = 0; i < plane; ++i) {
    spec.re[i] = c.values()[i];
    spec.im[i] = c.values()[plane + i];
  }
  dsp::AudioClip audio = dsp::istft(spec, 1);
  auto out = make_out({origin_len}, "istft");
  for (int i = 0; i < origin_len; ++i) out->value[i] = (float)audio.samples[i];

  const int n = cfg.fft_size, hop = cfg.hop, pad = n / 2;
  return finish(out, {c.node()}, [t, f, n, hop, pad, origin_len, cfg](Node& self) {
    Node& cn = *self.inputs[0];
    if (!cn.requires_grad) return;
    cn.ensure_grad();
    const std::vector<double> win = dsp::make_window(cfg);
    const int padded = origin_len + n;
    std::vector<double> wsum(padded, 0.0);
    for (int fr = 0; fr < t; ++fr) {
      const int base = fr * hop;
      for (int i = 0; i < n && base + i < padded; ++i) wsum[base + i] += win[i] * win[i];
    }
    std::vector<double> gpad(padded, 0.0);
    for (int i = 0; i < origin_len; ++i) gpad[pad + i] = self.grad[i] / wsum[pad + i];
    std::vector<double> gframe(n), gre(f), gim(f);
    const size_t plane2 = (size_t)t * f;
    for (int fr = 0; fr < t; ++fr) {
      const int base = fr * hop;
      for (int i = 0; i < n; ++i)
        gframe[i] = (base + i < padded) ? gpad[base + i] * win[i] : 0.0;
      kernels::irfft_adjoint(gframe.data(), n, gre.data(), gim.data());
      for (int k = 0; k < f; ++k) {
        cn.grad[(size_t)fr * f + k] += (float)gre[k];
        cn.grad[plane2 + (size_t)fr * f + k] += (float)gim[k];
      }
    }
  });
}

}  // namespace

std::pair<Tensor, Tensor> stft(const Tensor& x, const dsp::StftConfig& cfg) {
  Tensor packed = stft_packed(x, cfg);
  const int t = packed.shape()[1], f = packed.shape()[2];
  auto parts = split(packed, 0, 2);
  return {reshape(parts[0], {t, f}), reshape(parts[1], {t, f})};
}

Tensor istft(const Tensor& re, const Tensor& im, const dsp::StftConfig& cfg, int origin_len) {
  require_same_shape(re, im, "istft");
  if (re.shape().size() != 2) throw std::invalid_argument("istft: expects (T,F) inputs");
  const int t = re.shape()[0], f = re.shape()[1];
  Tensor packed = concat({reshape(re, {1, t, f}), reshape(im, {1, t, f})}, 0);
  return istft_packed(packed, cfg, origin_len);
}

// ------------------------------------------------------------- backward

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  NodePtr root = loss.node();
  if (numel(root->shape) != 1) throw std::invalid_argument("backward: non-scalar loss");
  if (root->consumed) throw std::logic_error("backward: graph already consumed");
  if (!root->requires_grad) return;  // nothing reachable

  // iterative post-order DFS over the requires_grad subgraph
  std::vector<NodePtr> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed && !node->leaf)
      throw std::logic_error("backward: graph already consumed");
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++];
      if (child->requires_grad && !visited.count(child.get())) {
        visited.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node& node = **it;
    if (node.backward_fn) {
      node.ensure_grad();
      node.backward_fn(node);
    }
    if (!node.leaf) {
      node.consumed = true;
      node.backward_fn = nullptr;
      node.grad.clear();
      node.grad.shrink_to_fit();
      node.inputs.clear();
    }
  }
}

}  // namespace pkdmark::ad
