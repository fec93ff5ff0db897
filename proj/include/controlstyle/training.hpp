#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "controlstyle/adversarial.hpp"
#include "controlstyle/autoencoder.hpp"
#include "controlstyle/config.hpp"
#include "controlstyle/diffusion.hpp"
#include "controlstyle/modulation.hpp"
#include "controlstyle/regularizers.hpp"
#include "controlstyle/text.hpp"
#include "controlstyle/unet.hpp"

namespace controlstyle {

/// The pre-trained, frozen half of the system.
struct FrozenModels {
  Autoencoder ae{nullptr};
  UNet unet{nullptr};
  TextEncoder text{nullptr};
  NoiseSchedule schedule;
};

/// Makes every parameter of the frozen models non-trainable.
void freeze(FrozenModels& m);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct ContentSet {
  torch::Tensor images;  // [N,3,S,S] in [-1, 1]
  std::vector<std::string> captions;
  std::size_t size() const { return captions.size(); }
};

struct StyleSet {
  torch::Tensor images;  // [M,3,S,S]
  std::vector<int> classes;
  std::size_t size() const { return classes.size(); }
};

/// One unpaired training record.
struct Triplet {
  torch::Tensor image;  // content x, [3,S,S]
  std::string caption;
  torch::Tensor style;  // c_style, [3,S,S]
  int content_id = -1;
  int style_id = -1;
};

/// Endless seed-deterministic triplet stream: content records in a fresh
/// shuffled order every epoch, each joined with an independently and
/// uniformly drawn style image.
class TripletStream {
 public:
  TripletStream(const ContentSet& content, const StyleSet& styles, uint64_t seed);
  Triplet next();
  std::vector<Triplet> next_batch(int n);
  /// Index pair (content, style) of the next draw without materialising images.
  std::pair<int, int> next_ids();

 private:
  const ContentSet* content_;
  const StyleSet* styles_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
};

/// Throws std::invalid_argument if either set is empty.
TripletStream make_triplets(const ContentSet& content, const StyleSet& styles, uint64_t seed);

// ---------------------------------------------------------------------------
// Base text-to-image model
// ---------------------------------------------------------------------------

struct BaseTrainConfig {
  int steps = 20000;
  int batch = 32;
  double lr = 3e-4;
  double holdout_fraction = 0.1;
  uint64_t seed = 0;
  int log_every = 200;

  static BaseTrainConfig from_config(const Config& cfg);
};

struct BaseTrainReport {
  std::vector<std::pair<int, double>> curve;  // (step, smoothed training loss)
  double initial_loss = 0;
  double train_plateau = 0;  // mean training loss over the last 10% of steps
  double heldout_loss = 0;
};

/// Fixed-draw estimate of the denoising loss (same t and noise per call).
double denoise_eval_loss(UNet& unet, TextEncoder& text, const NoiseSchedule& sched, const torch::Tensor& latents,
                         const torch::Tensor& tokens, uint64_t seed, int draws = 4, int batch = 256);

/// Trains the U-Net and text encoder jointly on precomputed latents.
BaseTrainReport train_base_model(UNet& unet, TextEncoder& text, const NoiseSchedule& sched,
                                 const torch::Tensor& latents, const torch::Tensor& tokens,
                                 const BaseTrainConfig& cfg,
                                 const std::function<void(int, double)>& on_log = {});

// ---------------------------------------------------------------------------
// ControlStyle
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double disc_lr = 1e-4;
  int batch = 4;
  int iterations = 3000;
  double lambda_ldm = 1.0;
  double lambda_style = 1.0;
  double lambda_content = 1.0;
  double lambda_adv = 1.0;
  /// Regularizers and the adversarial term apply only when t <= fraction * T.
  double reg_t_max_fraction = 1.0;
  uint64_t seed = 0;
  RegConfig reg;
  AugmentConfig aug;
  int log_every = 50;
  int checkpoint_every = 1000;
  double divergence_factor = 10.0;
  int divergence_window = 50;

  /// Throws std::invalid_argument on non-positive lr/batch/iterations or negative weights.
  void validate() const;
  static TrainConfig from_config(const Config& cfg);
};

struct LossReport {
  int64_t step = 0;
  double l_ldm = 0, l_style = 0, l_content = 0, l_adv = 0, l_total = 0;
  double l_disc = 0;
  std::vector<int64_t> timesteps;
  nlohmann::json to_json() const;
};

struct NamedParameter {
  std::string name;
  torch::Tensor tensor;
};

/// Frozen {U-Net, autoencoder, text encoder}, trainable {copy, psi, embedder}
/// and adversarial {discriminator} parameter sets.
struct ParameterPartition {
  std::vector<NamedParameter> frozen, trainable, adversarial;
  /// Throws std::logic_error if the sets overlap, if any parameter of
  /// `modules` is missing from every set, or if a set names a parameter
  /// outside `modules`.
  void audit(const std::vector<torch::nn::Module*>& modules) const;
};

/// Thrown when a step produces a non-finite loss; carries the component dump.
struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(const std::string& what, LossReport r) : std::runtime_error(what), report(std::move(r)) {}
  LossReport report;
};

class ControlStyleTrainer {
 public:
  ControlStyleTrainer(FrozenModels frozen, ModulationNetwork mod, Discriminator disc, TrainConfig cfg);

  /// One generator step on L_total and one discriminator step.
  LossReport step(std::span<const Triplet> batch);

  ParameterPartition partition();
  FrozenModels& frozen() { return frozen_; }
  ModulationNetwork& modulation() { return mod_; }
  Discriminator& discriminator() { return disc_; }
  const TrainConfig& config() const { return cfg_; }
  int64_t steps_done() const { return step_; }
  /// Seed of the generator that draws the forward-process noise.
  static uint64_t noise_seed(uint64_t seed) { return seed ^ 0xd1b54a32d192ed03ULL; }

  /// Trainable groups that have received a nonzero gradient in any step so far.
  const std::map<std::string, bool>& nonzero_grad_groups() const { return grad_seen_; }

 private:
  const StyleTarget& cached_target(const Triplet& t, const torch::Tensor& style_image);

  FrozenModels frozen_;
  ModulationNetwork mod_;
  Discriminator disc_;
  TrainConfig cfg_;
  torch::optim::Adam gen_opt_;
  torch::optim::Adam disc_opt_;
  std::mt19937_64 rng_;
  at::Generator noise_gen_;
  int64_t step_ = 0;
  std::map<int, StyleTarget> style_cache_;
  std::map<std::string, bool> grad_seen_;
};

/// Thin free-function form of ControlStyleTrainer::step.
LossReport controlstyle_train_step(std::span<const Triplet> batch, ControlStyleTrainer& trainer);

struct TrainRunOptions {
  std::function<void(const LossReport&)> on_step;
  std::function<void(int64_t)> on_checkpoint;
};

/// Runs cfg.iterations steps. Throws std::runtime_error when the moving
/// average of L_total exceeds divergence_factor times its initial value.
std::vector<LossReport> train_controlstyle(ControlStyleTrainer& trainer, TripletStream& stream,
                                           const TrainRunOptions& opts = {});

// ---------------------------------------------------------------------------
// Edge branch (second control for multi-control fusion)
// ---------------------------------------------------------------------------

struct EdgeTrainConfig {
  int steps = 1500;
  int batch = 16;
  double lr = 1e-4;
  uint64_t seed = 0;
  static EdgeTrainConfig from_config(const Config& cfg);
};

/// Trains an edge-conditioned modulation branch with the denoising loss only.
std::vector<double> train_edge_branch(FrozenModels& frozen, ModulationNetwork& edge, const torch::Tensor& latents,
                                      const torch::Tensor& tokens, const torch::Tensor& edges,
                                      const EdgeTrainConfig& cfg,
                                      const std::function<void(int, double)>& on_log = {});

}  // namespace controlstyle
