#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "pafu/autodiff.hpp"
#include "pafu/rng.hpp"

namespace pafu {

struct GradCheckOptions {
  double eps = 1e-3;
  std::uint64_t seed = 0;
  // 0 checks every coordinate; otherwise a seeded sample of this many per input.
  std::size_t max_coords = 0;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor).
  double denom_floor = 1e-2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f(tape, inputs)` must build its graph on `tape` and return a
/// single-element Var. Runs in double precision.
template <typename F>
GradCheckResult grad_check(F&& f, const std::vector<BasicTensor<double>>& inputs, const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  auto evaluate = [&](const std::vector<BasicTensor<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    const Var<double> out = f(tape, vars);
    if (out.value().size() != 1) throw ContractError("grad_check: function must return a scalar");
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  const Var<double> out = f(tape, vars);
  if (out.value().size() != 1) throw ContractError("grad_check: function must return a scalar");
  if (!std::isfinite(out.value()[0])) throw NumericError("grad_check: non-finite function value");
  const Gradients<double> grads = tape.backward(out);

  Rng rng(opt.seed);
  GradCheckResult result;
  std::vector<BasicTensor<double>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords != 0 && opt.max_coords < n) {
      for (std::size_t j = 0; j < opt.max_coords; ++j) {
        std::swap(coords[j], coords[j + rng.below(n - j)]);
      }
      coords.resize(opt.max_coords);
    }
    const BasicTensor<double>& analytic = grads[vars[i]];
    for (std::size_t c : coords) {
      const double orig = probe[i][c];
      probe[i][c] = orig + opt.eps;
      const double fp = evaluate(probe);
      probe[i][c] = orig - opt.eps;
      const double fm = evaluate(probe);
      probe[i][c] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.coords_checked;
    }
  }
  return result;
}

}  // namespace pafu
