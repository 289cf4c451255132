#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "pkdmark/autodiff.hpp"
#include "pkdmark/rng.hpp"

// Central finite-difference oracle for reverse-mode gradients. The callable
// returns the raw op output; the checker projects it onto a fixed random
// +/-1 vector, accumulating the numeric side in double so float rounding of
// unperturbed elements cancels between the two evaluations. Probes use the
// effectively-representable step (float(x+h) - float(x-h))/2.

namespace gradcheck {

using pkdmark::ad::Shape;
using pkdmark::ad::Tensor;

struct Result {
  double max_rel_err = 0.0;
  int probes = 0;
};

using OutputFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Case {
  OutputFn fn;
  std::vector<std::vector<float>> values;
  std::vector<Shape> shapes;
  double h = 1e-4;
  int max_probes_per_input = 10;
  uint64_t sign_seed = 7;
};

inline double project(const OutputFn& fn, const std::vector<std::vector<float>>& values,
                      const std::vector<Shape>& shapes, const std::vector<float>& signs) {
  pkdmark::ad::NoGradGuard guard;
  std::vector<Tensor> leaves;
  for (size_t i = 0; i < values.size(); ++i)
    leaves.push_back(Tensor::from(values[i], shapes[i]));
  Tensor out = fn(leaves);
  const auto& v = out.values();
  double acc = 0.0;
  for (size_t i = 0; i < v.size(); ++i) acc += (double)v[i] * signs[i];
  return acc;
}

inline Result check(const Case& c) {
  if (c.values.size() != c.shapes.size())
    throw std::invalid_argument("gradcheck: values/shapes size mismatch");

  // analytic gradients of the projected scalar
  std::vector<Tensor> leaves;
  for (size_t i = 0; i < c.values.size(); ++i)
    leaves.push_back(Tensor::from(c.values[i], c.shapes[i], /*requires_grad=*/true));
  Tensor out = c.fn(leaves);
  pkdmark::rng::Prng rng(c.sign_seed);
  std::vector<float> signs(out.numel());
  for (auto& s : signs) s = rng.uniform() < 0.5 ? -1.0f : 1.0f;
  Tensor proj = pkdmark::ad::mul_scalar(
      pkdmark::ad::mean_all(pkdmark::ad::mul(out, Tensor::from(signs, out.shape()))),
      (float)out.numel());
  pkdmark::ad::backward(proj);

  Result res;
  for (size_t i = 0; i < c.values.size(); ++i) {
    if (!leaves[i].has_grad()) continue;
    const std::vector<float> grad = leaves[i].grad();
    std::vector<int> order(grad.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return std::fabs(grad[a]) > std::fabs(grad[b]); });
    const int probes = std::min<int>(c.max_probes_per_input, (int)order.size());
    for (int p = 0; p < probes; ++p) {
      const int idx = order[p];
      const double analytic = grad[idx];
      auto vp = c.values, vm = c.values;
      vp[i][idx] = (float)((double)c.values[i][idx] + c.h);
      vm[i][idx] = (float)((double)c.values[i][idx] - c.h);
      const double eff_h = ((double)vp[i][idx] - (double)vm[i][idx]) / 2.0;
      const double fp = project(c.fn, vp, c.shapes, signs);
      const double fm = project(c.fn, vm, c.shapes, signs);
      const double numeric = (fp - fm) / (2.0 * eff_h);
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
      const double rel = std::fabs(analytic - numeric) / denom;
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.probes;
    }
  }
  return res;
}

inline Result check(const OutputFn& fn, std::vector<std::vector<float>> values,
                    std::vector<Shape> shapes, double h = 1e-4) {
  Case c;
  c.fn = fn;
  c.values = std::move(values);
  c.shapes = std::move(shapes);
  c.h = h;
  return check(c);
}

inline std::vector<float> random_values(int n, double lo, double hi, uint64_t seed) {
  pkdmark::rng::Prng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = (float)rng.uniform(lo, hi);
  return v;
}

}  // namespace gradcheck
