#include "pmf/optim.hpp"

namespace pmf {

Sgd::Sgd(std::vector<Tensor> params, SgdConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr >= 0.0)) throw Error("sgd: lr must be non-negative");
  if (config_.momentum < 0.0 || config_.momentum >= 1.0) throw Error("sgd: momentum must be in [0,1)");
  if (config_.weight_decay < 0.0) throw Error("sgd: weight_decay must be non-negative");
  velocity_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.requires_grad()) {
      velocity_.emplace_back(std::nullopt);
      continue;
    }
    velocity_.emplace_back(visit_dtype(p.dtype(), [&]<class T>() -> Buffer {
      return std::vector<T>(p.numel(), T(0));
    }));
  }
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) throw Error("sgd: trainable parameter " + std::to_string(i) + " has no grad");
    visit_dtype(p.dtype(), [&]<class T>() {
      auto values = p.data<T>();
      auto grad = p.grad_data<T>();
      auto& v = std::get<std::vector<T>>(*velocity_[i]);
      const T mom = static_cast<T>(config_.momentum);
      const T wd = static_cast<T>(config_.weight_decay);
      const T lr = static_cast<T>(config_.lr);
      for (std::size_t j = 0; j < values.size(); ++j) {
        v[j] = mom * v[j] + (grad[j] + wd * values[j]);
        values[j] -= lr * v[j];
      }
    });
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.clear_grad();
}

}  // namespace pmf
