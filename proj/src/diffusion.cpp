#include "controlstyle/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace controlstyle {
namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " +
                                c10::str(b.sizes()));
  }
}

/// Gathers f(t_b) per sample as a [B,1,...,1] tensor in `like`'s dtype.
torch::Tensor per_sample(const torch::Tensor& t, const torch::Tensor& like, const NoiseSchedule& sched,
                         double (*f)(const NoiseSchedule&, int)) {
  if (t.dim() != 1 || t.size(0) != like.size(0)) {
    throw std::invalid_argument("timestep tensor must be [B] matching the batch");
  }
  auto tc = t.to(torch::kCPU, torch::kInt64).contiguous();
  std::vector<double> vals(static_cast<std::size_t>(tc.size(0)));
  for (int64_t b = 0; b < tc.size(0); ++b) vals[b] = f(sched, static_cast<int>(tc.data_ptr<int64_t>()[b]));
  std::vector<int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = tc.size(0);
  return torch::tensor(vals, torch::kFloat64).view(shape).to(like.options());
}

double sqrt_ab(const NoiseSchedule& s, int t) { return std::sqrt(s.alpha_bar(t)); }
double sqrt_one_minus_ab(const NoiseSchedule& s, int t) { return std::sqrt(1.0 - s.alpha_bar(t)); }

}  // namespace

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("noise schedule needs T >= 1");
  alphas_.reserve(betas_.size());
  alpha_bars_.reserve(betas_.size());
  double running = 1.0;
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("betas must lie in (0, 1)");
    alphas_.push_back(1.0 - b);
    running *= 1.0 - b;
    alpha_bars_.push_back(running);
  }
}

double NoiseSchedule::sigma(int t) const { return t == 1 ? (check_timestep(t), 0.0) : std::sqrt(beta(t)); }

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
  }
  return NoiseSchedule(std::move(betas));
}

torch::Tensor q_sample(const torch::Tensor& z0, int t, const torch::Tensor& eps, const NoiseSchedule& sched) {
  check_same_shape(z0, eps, "q_sample");
  const double ab = sched.alpha_bar(t);
  return z0 * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
  check_same_shape(z0, eps, "q_sample");
  return z0 * per_sample(t, z0, sched, sqrt_ab) + eps * per_sample(t, z0, sched, sqrt_one_minus_ab);
}

torch::Tensor predict_clean(const torch::Tensor& z_t, int t, const torch::Tensor& eps_pred,
                            const NoiseSchedule& sched) {
  check_same_shape(z_t, eps_pred, "predict_clean");
  const double ab = sched.alpha_bar(t);
  return (z_t - eps_pred * std::sqrt(1.0 - ab)) / std::sqrt(ab);
}

torch::Tensor predict_clean(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& eps_pred,
                            const NoiseSchedule& sched) {
  check_same_shape(z_t, eps_pred, "predict_clean");
  return (z_t - eps_pred * per_sample(t, z_t, sched, sqrt_one_minus_ab)) / per_sample(t, z_t, sched, sqrt_ab);
}

torch::Tensor reverse_step(const torch::Tensor& z_t, int t, const torch::Tensor& eps_pred, const torch::Tensor& noise,
                           const NoiseSchedule& sched) {
  check_same_shape(z_t, eps_pred, "reverse_step");
  const double a = sched.alpha(t);
  const double coef = (1.0 - a) / std::sqrt(1.0 - sched.alpha_bar(t));
  auto mean = (z_t - eps_pred * coef) / std::sqrt(a);
  if (t == 1) return mean;
  check_same_shape(z_t, noise, "reverse_step");
  return mean + noise * sched.sigma(t);
}

torch::Tensor denoise_loss(const torch::Tensor& eps_pred, const torch::Tensor& eps, int t,
                           const TimestepWeight& weight) {
  check_same_shape(eps_pred, eps, "denoise_loss");
  return (eps_pred - eps).pow(2).mean() * weight(t);
}

torch::Tensor denoise_loss(const torch::Tensor& eps_pred, const torch::Tensor& eps, const torch::Tensor& t,
                           const TimestepWeight& weight) {
  check_same_shape(eps_pred, eps, "denoise_loss");
  if (t.dim() != 1 || t.size(0) != eps.size(0)) throw std::invalid_argument("denoise_loss: timestep batch mismatch");
  auto tc = t.to(torch::kCPU, torch::kInt64).contiguous();
  std::vector<double> w(static_cast<std::size_t>(tc.size(0)));
  for (int64_t b = 0; b < tc.size(0); ++b) w[b] = weight(static_cast<int>(tc.data_ptr<int64_t>()[b]));
  auto per = (eps_pred - eps).pow(2).flatten(1).mean(1);
  return (per * torch::tensor(w, torch::kFloat64).to(per.options())).mean();
}

}  // namespace controlstyle
