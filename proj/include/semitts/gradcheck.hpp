#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "semitts/rng.hpp"
#include "semitts/tensor.hpp"

namespace semitts {

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string worst;  // "param[index]" of the worst coordinate
  std::size_t checked = 0;
};

// Compares analytic gradients against central finite differences.
//
// `loss_fn` must be a pure function of `params` (any internal randomness
// fixed beforehand); this is verified by evaluating it twice and requiring
// bit-identical results. For each parameter up to `max_coords_per_param`
// coordinates are probed (all of them if the tensor is small enough,
// otherwise a seeded sample). Relative error uses
// |a - n| / max(|a|, |n|, 1e-8) and must stay below `tol`.
inline GradCheckResult gradient_check(ParameterSet& params,
                                      const std::function<double(ParameterSet&)>& loss_fn,
                                      const std::map<std::string, Tensor>& analytic,
                                      double eps = 1e-5, double tol = 1e-4,
                                      std::size_t max_coords_per_param = 24,
                                      std::uint64_t seed = 1234) {
  double l1 = loss_fn(params);
  double l2 = loss_fn(params);
  if (l1 != l2) throw std::runtime_error("gradient_check: loss closure is not deterministic");

  GradCheckResult res;
  Rng rng(seed);
  for (auto& [name, p] : params.values) {
    auto ait = analytic.find(name);
    if (ait == analytic.end()) continue;
    const Tensor& ag = ait->second;

    std::vector<std::size_t> coords;
    if (p.numel() <= max_coords_per_param) {
      coords.resize(p.numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(rng.below(p.numel()));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }

    auto& pv = *p.data;
    for (std::size_t c : coords) {
      const double orig = pv[c];
      pv[c] = orig + eps;
      double lp = loss_fn(params);
      pv[c] = orig - eps;
      double lm = loss_fn(params);
      pv[c] = orig;
      double num = (lp - lm) / (2.0 * eps);
      double ana = (*ag.data)[c];
      double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = name + "[" + std::to_string(c) + "]";
      }
      if (rel >= tol) res.ok = false;
    }
  }
  return res;
}

}  // namespace semitts
