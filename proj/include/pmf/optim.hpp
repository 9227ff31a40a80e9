#pragma once

#include <optional>
#include <vector>

#include "pmf/tensor.hpp"

namespace pmf {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with momentum and classical (coupled) weight decay:
///   v <- momentum * v + (g + weight_decay * p)
///   p <- p - lr * v
/// Velocities exist only for parameters that require grad.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdConfig config);

  /// Applies one update. Throws if a trainable parameter has no grad.
  void step();
  void zero_grad();

  const SgdConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }
  /// Velocity of params()[i], or nullopt for frozen params.
  const std::optional<Buffer>& velocity(std::size_t i) const { return velocity_.at(i); }

 private:
  std::vector<Tensor> params_;
  std::vector<std::optional<Buffer>> velocity_;
  SgdConfig config_;
};

}  // namespace pmf
