#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpbert/error.hpp"
#include "cpbert/tensor.hpp"

namespace cpbert {

struct OptimizerConfig {
  double lr = 2e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool update_clipping = true;
  double clip_threshold = 1.0;

  void validate() const {
    if (!(lr >= 0.0)) throw ValidationError("learning rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw ValidationError("betas must lie in (0,1)");
    if (!(eps > 0.0)) throw ValidationError("epsilon must be > 0");
    if (!(clip_threshold > 0.0)) throw ValidationError("clip threshold must be > 0");
  }

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"betas", {c.beta1, c.beta2}},
                     {"eps", c.eps},
                     {"update_clipping", c.update_clipping},
                     {"clip_threshold", c.clip_threshold}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    c.beta1 = j["betas"].at(0).get<double>();
    c.beta2 = j["betas"].at(1).get<double>();
  }
  c.eps = j.value("eps", c.eps);
  c.update_clipping = j.value("update_clipping", c.update_clipping);
  c.clip_threshold = j.value("clip_threshold", c.clip_threshold);
  c.validate();
}

/// First/second moments per parameter tensor, in parameter order.
template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;

  template <class P>
  static AdamState zeros_for(const std::vector<P>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Matrix<T>::Zero(p.value->rows(), p.value->cols()));
      s.v.push_back(Matrix<T>::Zero(p.value->rows(), p.value->cols()));
    }
    return s;
  }
};

struct StepReport {
  bool applied = true;
  std::string reason;
  std::vector<double> lr_scale;  // per tensor 1/max(1, RMS/threshold)
};

/// One AdamW step with per-tensor update clipping (StableAdamW).
///
/// m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2, bias-corrected m^, v^.
/// With clipping, each tensor's rate is lr / max(1, RMS(g^2 / max(v^, eps^2)) / threshold).
/// theta <- theta (1 - rate wd) - rate m^ / (sqrt(v^) + eps).
/// A non-finite gradient aborts the step with nothing modified.
template <class T>
StepReport stable_adamw_step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads,
                             AdamState<T>& state, const OptimizerConfig& config) {
  StepReport rep;
  if (params.size() != grads.size() || state.m.size() != params.size())
    throw ValidationError("optimizer: parameter/gradient/state count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].value->rows() != params[i].value->rows() || grads[i].value->cols() != params[i].value->cols())
      throw ValidationError("optimizer: gradient shape mismatch for " + params[i].name);
    if (!grads[i].value->allFinite()) {
      rep.applied = false;
      rep.reason = "non-finite gradient in " + params[i].name;
      return rep;
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double eps2 = config.eps * config.eps;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix<T>& p = *params[i].value;
    const Matrix<T>& g = *grads[i].value;
    Matrix<T>& m = state.m[i];
    Matrix<T>& v = state.v[i];
    const Eigen::Index size = p.size();
    double rms_acc = 0.0;
    for (Eigen::Index k = 0; k < size; ++k) {
      const double gk = static_cast<double>(g.data()[k]);
      const double mk = config.beta1 * static_cast<double>(m.data()[k]) + (1.0 - config.beta1) * gk;
      const double vk = config.beta2 * static_cast<double>(v.data()[k]) + (1.0 - config.beta2) * gk * gk;
      m.data()[k] = static_cast<T>(mk);
      v.data()[k] = static_cast<T>(vk);
      if (config.update_clipping) rms_acc += gk * gk / std::max(vk / bc2, eps2);
    }
    double rate = config.lr;
    double scale = 1.0;
    if (config.update_clipping && size > 0) {
      const double rms = std::sqrt(rms_acc / static_cast<double>(size));
      scale = 1.0 / std::max(1.0, rms / config.clip_threshold);
      rate = config.lr * scale;
    }
    rep.lr_scale.push_back(scale);
    const double decay = 1.0 - rate * config.weight_decay;
    for (Eigen::Index k = 0; k < size; ++k) {
      const double mhat = static_cast<double>(m.data()[k]) / bc1;
      const double vhat = static_cast<double>(v.data()[k]) / bc2;
      const double pk = static_cast<double>(p.data()[k]) * decay;
      p.data()[k] = static_cast<T>(pk - rate * mhat / (std::sqrt(vhat) + config.eps));
    }
  }
  return rep;
}

}  // namespace cpbert
