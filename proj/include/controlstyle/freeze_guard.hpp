#pragma once

#include <vector>

#include <torch/torch.h>

namespace controlstyle {

/// Turns off requires_grad on a module's parameters for the guard's lifetime.
/// Operations recorded meanwhile leave those parameters out of the graph.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& m) : params_(m.parameters()) {
    for (auto& p : params_) {
      saved_.push_back(p.requires_grad());
      p.requires_grad_(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].requires_grad_(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> saved_;
};

}  // namespace controlstyle
