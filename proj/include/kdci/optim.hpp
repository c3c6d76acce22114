#pragma once

#include <span>
#include <vector>

namespace kdci {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled weight decay (AdamW). Zero gives plain Adam.
  double weight_decay = 0.0;
};

/// Adaptive-moments optimizer over a flat parameter vector.
class Adam {
 public:
  Adam(AdamConfig config, std::size_t size) : config_(config), m_(size, 0.0), v_(size, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad);
  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace kdci
