#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "semitts/tensor.hpp"

namespace semitts {

// Adam with bias correction. Moment buffers are keyed by parameter name and
// created lazily on first update; `step` counts calls to adam_step.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// Scales all gradients by min(1, max_norm / global_norm) in place and
// returns the pre-clip global norm.
inline double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : *g.data) sq += x * x;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (auto& [name, g] : grads)
      for (auto& x : *g.data) x *= s;
  }
  return norm;
}

// One optimizer step over every parameter that has a gradient entry.
// Frozen parameters are skipped entirely: values, moments and effective
// state stay bit-identical no matter what gradient was supplied.
inline void adam_step(ParameterSet& params, const std::map<std::string, Tensor>& grads,
                      AdamState& st) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : params.values) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    if (params.frozen(name)) continue;
    const Tensor& g = git->second;
    if (!p.same_shape(g)) throw std::runtime_error("adam: gradient shape mismatch for " + name);

    auto mit = st.m.find(name);
    if (mit == st.m.end()) {
      Tensor zm; zm.shape = p.shape;
      zm.data = std::make_shared<std::vector<double>>(p.numel(), 0.0);
      mit = st.m.emplace(name, std::move(zm)).first;
      Tensor zv; zv.shape = p.shape;
      zv.data = std::make_shared<std::vector<double>>(p.numel(), 0.0);
      st.v.emplace(name, std::move(zv));
    }
    auto& mv = *mit->second.data;
    auto& vv = *st.v.at(name).data;
    auto& pv = *p.data;
    const auto& gv = *g.data;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = st.beta1 * mv[i] + (1.0 - st.beta1) * gv[i];
      vv[i] = st.beta2 * vv[i] + (1.0 - st.beta2) * gv[i] * gv[i];
      double mhat = mv[i] / bc1;
      double vhat = vv[i] / bc2;
      pv[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

}  // namespace semitts
