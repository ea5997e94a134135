#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "memloc/rng.hpp"
#include "memloc/tensor.hpp"

namespace memloc {

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences.
///
/// `f` is a generic callable `f(basic_tape<S>&, std::span<const basic_var<S>>)`
/// returning a scalar var; it is instantiated twice. The analytic gradient is
/// taken from the float tape. The central differences are evaluated on a
/// double instantiation so that the reference is not swamped by float32
/// rounding of the loss.
///
/// Relative error per coordinate: |a - n| / (|a| + |n| + 1e-12).
/// `coords_per_param` == 0 checks every coordinate.
template <class Fn>
FiniteDiffReport finite_diff_check(Fn&& f, std::span<const Tensor> params, double step = 1e-3,
                                   std::size_t coords_per_param = 0,
                                   std::uint64_t seed = 0) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(p, true));
    Var out = f(tape, std::span<const Var>(vars));
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  std::vector<basic_tensor<double>> dparams;
  dparams.reserve(params.size());
  for (const auto& p : params) dparams.push_back(p.template cast<double>());

  auto evaluate = [&]() {
    basic_tape<double> tape(false);
    std::vector<basic_var<double>> vars;
    vars.reserve(dparams.size());
    for (const auto& p : dparams) vars.push_back(tape.leaf(p, false));
    return f(tape, std::span<const basic_var<double>>(vars)).value()[0];
  };

  Rng rng(seed);
  FiniteDiffReport report;
  for (std::size_t pi = 0; pi < dparams.size(); ++pi) {
    const std::size_t n = dparams[pi].size();
    std::vector<std::size_t> coords;
    if (coords_per_param == 0 || coords_per_param >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      auto perm = permutation(n, rng);
      coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(coords_per_param));
    }
    for (std::size_t idx : coords) {
      const double orig = dparams[pi][idx];
      dparams[pi][idx] = orig + step;
      const double up = evaluate();
      dparams[pi][idx] = orig - step;
      const double down = evaluate();
      dparams[pi][idx] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][idx];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      ++report.coordinates_checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = pi;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace memloc
