#pragma once

#include <functional>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace controlstyle {

/// Precomputed beta / alpha / alpha-bar ladders, indexed by timestep t in [1, T].
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  /// Takes ownership of an explicit beta ladder (betas[0] is t = 1).
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(index(t)); }
  /// Reverse-step noise scale: sqrt(beta_t), with sigma_1 = 0.
  double sigma(int t) const;

  std::span<const double> betas() const { return betas_; }
  std::span<const double> alphas() const { return alphas_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }

  /// Throws std::out_of_range unless 1 <= t <= T.
  void check_timestep(int t) const;

 private:
  std::size_t index(int t) const {
    check_timestep(t);
    return static_cast<std::size_t>(t - 1);
  }
  std::vector<double> betas_, alphas_, alpha_bars_;
};

/// Betas linearly spaced from beta_start to beta_end over T steps.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
torch::Tensor q_sample(const torch::Tensor& z0, int t, const torch::Tensor& eps, const NoiseSchedule& sched);
/// Per-sample timesteps: `t` is an int64 tensor of shape [B] matching z0's batch.
torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);

/// One-step clean estimate (z_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t).
torch::Tensor predict_clean(const torch::Tensor& z_t, int t, const torch::Tensor& eps_pred, const NoiseSchedule& sched);
torch::Tensor predict_clean(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& eps_pred,
                            const NoiseSchedule& sched);

/// Ancestral step t -> t-1. `noise` is ignored at t = 1.
torch::Tensor reverse_step(const torch::Tensor& z_t, int t, const torch::Tensor& eps_pred, const torch::Tensor& noise,
                           const NoiseSchedule& sched);

using TimestepWeight = std::function<double(int)>;
inline double unit_weight(int) { return 1.0; }

/// w(t) * mean squared error over all elements.
torch::Tensor denoise_loss(const torch::Tensor& eps_pred, const torch::Tensor& eps, int t,
                           const TimestepWeight& weight = unit_weight);
/// Batched form: per-sample w(t_b) * per-sample MSE, averaged over the batch.
torch::Tensor denoise_loss(const torch::Tensor& eps_pred, const torch::Tensor& eps, const torch::Tensor& t,
                           const TimestepWeight& weight = unit_weight);

}  // namespace controlstyle
