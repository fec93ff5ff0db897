#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace controlstyle {

/// Named-array checkpoint archive.
///
/// On disk: the 8-byte magic `CSARCH01`, a little-endian uint64 manifest
/// length, the JSON manifest, then the raw little-endian array payloads in
/// manifest order. The manifest lists every array's name, dtype, shape,
/// byte offset (relative to the payload start) and byte count, plus a free
/// `kind` string and a `meta` object. See docs/checkpoint_format.md.
class Archive {
 public:
  Archive() = default;
  explicit Archive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  void set_kind(std::string kind) { kind_ = std::move(kind); }

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  /// Stores a contiguous CPU copy. float32, float64 and int64 are supported.
  void put(const std::string& name, const torch::Tensor& tensor);
  bool has(std::string_view name) const;
  const torch::Tensor& get(std::string_view name) const;
  std::vector<std::string> names() const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::string kind_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> arrays_;
};

/// Writes every parameter and buffer of `module` under `prefix`.
void put_module(Archive& archive, const std::string& prefix, const torch::nn::Module& module);

/// Loads parameters and buffers saved by put_module. Missing names or shape
/// mismatches raise std::runtime_error naming the offending array.
void load_module(const Archive& archive, const std::string& prefix, torch::nn::Module& module);

}  // namespace controlstyle
