#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/autodiff.hpp"

namespace opdlab {

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  AdamState() = default;
  AdamState(const ParamList& params, AdamConfig cfg) : config(cfg) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor.size(), 0.0);
      v.emplace_back(p.tensor.size(), 0.0);
    }
  }
};

inline void require_grads(const ParamList& params, const char* who) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::logic_error(std::string(who) + ": parameter '" + p.name + "' has no gradient");
  }
}

/// Bias-corrected Adam, applied in place. Throws before touching any
/// parameter if a gradient entry is non-finite.
inline void adam_step(ParamList& params, AdamState& state) {
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameter list");
  require_grads(params, "adam_step");
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw std::domain_error("adam_step: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  const auto& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].tensor.data();
    const auto& g = params[k].tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) throw std::invalid_argument("adam_step: moment size mismatch for '" + params[k].name + "'");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

inline double global_grad_norm(const ParamList& params) {
  require_grads(params, "global_grad_norm");
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their global norm is at most max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(ParamList& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.tensor.grad()) g *= s;
  }
  return norm;
}

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace opdlab
