#pragma once

#include <cmath>
#include <vector>

#include "revcol/tensor.hpp"

namespace revcol {

struct AdamWConfig {
  double lr = 4e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled-weight-decay Adam with bias correction by step count. Moments
// are parameter-tagged storage.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  void step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads) {
    if (params.size() != grads.size())
      throw ShapeError("adamw: parameter/gradient count mismatch");
    ensure_state(params);
    ++step_;
    const T bc1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    const T lr = static_cast<T>(cfg_.lr);
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.eps), wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!grads[i].defined()) {
        if (wd != T(0)) {
          T* p = params[i].data();
          for (std::int64_t j = 0; j < params[i].numel(); ++j) p[j] -= lr * wd * p[j];
        }
        continue;
      }
      params[i].check_same_shape(grads[i], "adamw");
      T* p = params[i].data();
      const T* g = grads[i].data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const std::int64_t n = params[i].numel();
      for (std::int64_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        p[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[j]);
      }
    }
  }

 private:
  void ensure_state(const std::vector<Tensor<T>>& params) {
    if (m_.size() == params.size()) return;
    m_.clear();
    v_.clear();
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
      m_.push_back(Tensor<T>::zeros(p.dims(), MemTag::parameter));
      v_.push_back(Tensor<T>::zeros(p.dims(), MemTag::parameter));
    }
  }

  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Linear warmup to the peak, then cosine decay to zero.
inline double cosine_lr(std::int64_t step, std::int64_t warmup, std::int64_t total, double peak) {
  if (step < 0 || step > total) throw ValueError("cosine_lr: step outside [0, total]");
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <class T>
double global_grad_norm(const std::vector<Tensor<T>>& grads) {
  double sq = 0;
  for (const auto& g : grads) {
    if (!g.defined()) continue;
    const T* p = g.data();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      sq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
  }
  return std::sqrt(sq);
}

template <class T>
void clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm <= max_norm || norm == 0) return;
  const T s = static_cast<T>(max_norm / norm);
  for (auto& g : grads) {
    if (!g.defined()) continue;
    T* p = g.data();
    for (std::int64_t i = 0; i < g.numel(); ++i) p[i] *= s;
  }
}

}  // namespace revcol
