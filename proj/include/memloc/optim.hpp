#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "memloc/model.hpp"
#include "memloc/tensor.hpp"

namespace memloc {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with one moment pair and one step counter per parameter tensor, in
/// canonical parameter order. A tensor that is not stepped keeps its value,
/// its moments and its counter.
class Adam {
 public:
  Adam() = default;
  Adam(const ModelState& model, AdamConfig cfg) : cfg_(cfg) {
    for_each_parameter(model, [&](const std::string&, const Tensor& t, ParamGroup) {
      m_.emplace_back(t.size(), 0.0f);
      v_.emplace_back(t.size(), 0.0f);
      steps_.push_back(0);
    });
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  void set_learning_rate(double lr) noexcept { cfg_.learning_rate = lr; }
  std::uint64_t steps(std::size_t param) const { return steps_.at(param); }

  /// Applies one update to parameter `index` from gradient `g`.
  void step(std::size_t index, Tensor& param, const float* g) {
    auto& m = m_.at(index);
    auto& v = v_.at(index);
    const auto t = ++steps_[index];
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const double lr = cfg_.learning_rate;
    float* p = param.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
      const double mh = m[i] / c1, vh = v[i] / c2;
      p[i] = static_cast<float>(p[i] - lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }

  /// Steps every parameter whose group is trainable under `mask` and that
  /// received a gradient on `tape`. Returns the number of tensors updated.
  std::size_t apply(ModelState& model, const Tape& tape, const model_vars<float>& vars,
                    const Trainability& mask) {
    std::vector<const Var*> flat;
    for_each_parameter(vars, [&](const std::string&, const Var& v, ParamGroup) { flat.push_back(&v); });
    std::size_t i = 0, updated = 0;
    for_each_parameter(model, [&](const std::string&, Tensor& t, ParamGroup g) {
      const Var& v = *flat[i];
      const float* grad = tape.grad_data(v.id);
      if (is_trainable(mask, g) && v.requires_grad() && grad) {
        step(i, t, grad);
        ++updated;
      }
      ++i;
    });
    return updated;
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::vector<std::uint64_t> steps_;
};

}  // namespace memloc
