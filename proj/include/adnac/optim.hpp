#pragma once

// AdamW with decoupled weight decay and a reduce-on-plateau learning-rate
// scheduler. Both keep their state in plain structs so checkpoints can
// serialize them directly.

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "adnac/error.hpp"
#include "adnac/tensor.hpp"

namespace adnac {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("adamw: lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adamw: betas must be in [0,1)");
    if (!(eps > 0)) throw ConfigError("adamw: eps must be positive");
    if (weight_decay < 0) throw ConfigError("adamw: weight_decay must be non-negative");
  }
};

// Moments live in the parameter type so a checkpoint holds them exactly;
// the update arithmetic itself runs in double.
template <typename T>
struct AdamWState {
  AdamWConfig config;
  std::uint64_t t = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

template <typename T>
void adamw_step(ParamStore<T>& params, AdamWState<T>& st) {
  const AdamWConfig& c = st.config;
  st.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = params[i];
    if (p.frozen) continue;
    const std::size_t n = p.value.size();
    if (p.grad.size() != n) throw ShapeError("adamw: gradient shape mismatch for " + p.name);
    auto& m = st.m[p.name];
    auto& v = st.v[p.name];
    if (m.empty()) m.assign(n, T(0));
    if (v.empty()) v.assign(n, T(0));
    if (m.size() != n || v.size() != n) throw ShapeError("adamw: moment shape mismatch for " + p.name);
    for (std::size_t k = 0; k < n; ++k) {
      const double g = static_cast<double>(p.grad.data[k]);
      const double th = static_cast<double>(p.value.data[k]);
      const double mk = c.beta1 * static_cast<double>(m[k]) + (1 - c.beta1) * g;
      const double vk = c.beta2 * static_cast<double>(v[k]) + (1 - c.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mh = mk / bc1, vh = vk / bc2;
      p.value.data[k] = static_cast<T>(th - c.lr * mh / (std::sqrt(vh) + c.eps) - c.lr * c.weight_decay * th);
    }
  }
}

struct PlateauConfig {
  double factor = 0.5;
  int patience = 3;
  double min_lr = 1e-6;
  double threshold = 1e-4;  // relative

  void validate() const {
    if (!(factor > 0 && factor < 1)) throw ConfigError("plateau: factor must be in (0,1)");
    if (patience < 0) throw ConfigError("plateau: patience must be >= 0");
    if (!(min_lr >= 0)) throw ConfigError("plateau: min_lr must be >= 0");
    if (!(threshold >= 0)) throw ConfigError("plateau: threshold must be >= 0");
  }
};

struct PlateauState {
  PlateauConfig config;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  int reductions = 0;
};

// Mode "min". Returns the (possibly reduced) learning rate.
inline double plateau_step(PlateauState& st, double metric, double lr) {
  if (!std::isfinite(metric)) throw NumericError("plateau: non-finite validation metric");
  const PlateauConfig& c = st.config;
  // best - |best|*threshold equals best*(1-threshold) for positive best and
  // stays a stricter bound when the monitored loss goes negative
  const bool improved = !std::isfinite(st.best) || metric < st.best - std::abs(st.best) * c.threshold;
  if (improved) {
    st.best = metric;
    st.bad_epochs = 0;
    return lr;
  }
  st.bad_epochs += 1;
  if (st.bad_epochs > c.patience) {
    st.bad_epochs = 0;
    const double next = std::max(lr * c.factor, c.min_lr);
    if (next < lr) st.reductions += 1;
    return next;
  }
  return lr;
}

}  // namespace adnac
