#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "controlstyle/adversarial.hpp"
#include "controlstyle/archive.hpp"
#include "controlstyle/autoencoder.hpp"
#include "controlstyle/config.hpp"
#include "controlstyle/diffusion.hpp"
#include "controlstyle/modulation.hpp"
#include "controlstyle/sampler.hpp"
#include "controlstyle/text.hpp"
#include "controlstyle/training.hpp"
#include "controlstyle/unet.hpp"

namespace controlstyle {

namespace fs = std::filesystem;

/// Directory layout shared by every stage.
struct Workspace {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path logs() const { return root / "logs"; }
  fs::path runs() const { return root / "runs"; }
  fs::path samples() const { return root / "samples"; }
  fs::path autoencoder() const { return checkpoints() / "autoencoder.csarch"; }
  fs::path base() const { return checkpoints() / "base.csarch"; }
  fs::path branch(BranchKind k) const { return checkpoints() / (branch_kind_name(k) + ".csarch"); }
  static Workspace from_config(const Config& cfg);
};

/// Throws std::runtime_error("checkpoint not found: <path>") when absent.
void require_file(const fs::path& path, const char* what = "checkpoint");

NoiseSchedule schedule_from_config(const Config& cfg);

/// Checkpoint lineage entry: path plus content digest.
nlohmann::json lineage_entry(const fs::path& path);

void save_autoencoder(const fs::path& path, Autoencoder& ae, const nlohmann::json& meta = {});
Autoencoder load_autoencoder(const fs::path& path);

struct BaseModel {
  UNet unet{nullptr};
  TextEncoder text{nullptr};
  NoiseSchedule schedule;
};
void save_base(const fs::path& path, BaseModel& m, const nlohmann::json& meta = {});
BaseModel load_base(const fs::path& path);

/// Autoencoder + base model, frozen.
FrozenModels load_frozen(const Workspace& ws);

/// Modulation branch checkpoint. The branch kind is stored as a manifest flag
/// and checked on load; `disc` may be null (edge branch, or inference-only).
void save_branch(const fs::path& path, ModulationNetwork& net, Discriminator* disc, const nlohmann::json& meta = {});
ModulationNetwork load_branch(const fs::path& path, const UNetConfig& base, BranchKind expected,
                              Discriminator* disc = nullptr);

/// Run manifest: stage, config hash and text, seed, input/output lineage.
struct RunManifest {
  std::string stage;
  const Config* config = nullptr;
  std::vector<fs::path> inputs, outputs;
  nlohmann::json results = nlohmann::json::object();
  nlohmann::json to_json() const;
  void write(const fs::path& path) const;
};

/// Content images + captions from the scene manifest.
ContentSet load_content(const fs::path& data_dir);
StyleSet load_style_set(const fs::path& data_dir);
torch::Tensor load_image_tensor(const fs::path& png);

using LogFn = std::function<void(const std::string&)>;

nlohmann::json stage_gen_data(const Config& cfg, const LogFn& log = {});
nlohmann::json stage_train_ae(const Config& cfg, const LogFn& log = {});
nlohmann::json stage_train_base(const Config& cfg, const LogFn& log = {});
nlohmann::json stage_train_branch(const Config& cfg, BranchKind kind, const LogFn& log = {});
/// 32-pair (by default) evaluation with sample grids; returns the summary.
nlohmann::json stage_eval(const Config& cfg, const LogFn& log = {});

/// Fixed eval set: fresh captions and fresh style images, one style class per
/// pair cycling through all classes.
std::vector<EvalPair> make_eval_pairs(int n, uint64_t seed, int image_size);

}  // namespace controlstyle
