#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "controlstyle/modulation.hpp"
#include "controlstyle/regularizers.hpp"
#include "controlstyle/training.hpp"

namespace controlstyle {

struct SampleRequest {
  std::string caption;
  torch::Tensor style;  // optional [3,S,S] style image
  double style_weight = 1.0;
  /// Additional branches; their conditions are unbatched [C,S,S].
  std::vector<ControlBranch> extra;
  int steps = 0;  // 0 or T; the chain always runs over every timestep
  uint64_t seed = 0;
};

/// Gaussian z_T for one seed; independent of batch composition.
torch::Tensor initial_noise(uint64_t seed, int64_t channels, int64_t size);

/// Batched reverse chain. Each row b uses its own seed for z_T and for the
/// per-step noise, so a row's result does not depend on what it is batched
/// with. `styles` may be undefined (plain text-to-image sampling); `style_net`
/// may be null only then. Returns z_0, [B,C,s,s].
torch::Tensor sample_latents(FrozenModels& m, ModulationNetwork* style_net, std::span<const std::string> captions,
                             const torch::Tensor& styles, std::span<const uint64_t> seeds, double style_weight = 1.0,
                             std::span<ControlBranch> extra = {});

/// Full chain for one request, decoded to a [3,S,S] image in [-1, 1].
torch::Tensor sample(const SampleRequest& req, FrozenModels& m, ModulationNetwork* style_net = nullptr);

/// Style regularization value between a sample image and a style image, both
/// passed through the frozen encoder.
double style_distance(Autoencoder& ae, const torch::Tensor& image, const torch::Tensor& style_image,
                      const RegConfig& cfg);
/// Content regularization value between two images (second is the reference).
double structure_score(Autoencoder& ae, const torch::Tensor& image, const torch::Tensor& reference,
                       const RegConfig& cfg);

struct EvalPair {
  std::string caption;
  torch::Tensor style;  // [3,S,S]
  int style_id = -1;
};

struct EvalRecord {
  int id = 0;
  int pair = 0;
  std::string caption;
  int style_id = -1;
  uint64_t seed = 0;
  double style_distance = 0;       // stylized sample vs target style
  double base_style_distance = 0;  // base sample vs target style
  double structure_score = 0;      // stylized vs same-seed base sample
  double shuffled_structure = 0;   // stylized vs the base sample of another record
  nlohmann::json to_json() const;
};

struct MeanCI {
  double mean = 0;
  double half_width = 0;  // 95% normal-approximation interval
  nlohmann::json to_json() const { return {{"mean", mean}, {"ci95", half_width}}; }
};
MeanCI mean_ci(std::span<const double> values);

struct EvalReport {
  std::vector<EvalRecord> records;
  MeanCI style_distance, base_style_distance, structure_score, shuffled_structure;
  nlohmann::json summary() const;
  /// Per-record lines followed by one summary line.
  void write_jsonl(const std::string& path) const;
};

struct EvalOptions {
  int seeds_per_pair = 2;
  uint64_t seed = 0;
  int batch = 32;
  RegConfig reg;
  /// Receives (record id, stylized image, base image) for grids.
  std::function<void(int, const torch::Tensor&, const torch::Tensor&)> on_images;
};

/// Throws std::invalid_argument on an empty eval set.
EvalReport evaluate(FrozenModels& m, ModulationNetwork& style_net, std::span<const EvalPair> pairs,
                    const EvalOptions& opts = {});

}  // namespace controlstyle
