#include "controlstyle/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace controlstyle {
namespace {

static_assert(std::endian::native == std::endian::little, "archive payloads are little-endian");

constexpr char kMagic[8] = {'C', 'S', 'A', 'R', 'C', 'H', '0', '1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw std::invalid_argument("archive: unsupported dtype " + std::string(c10::toString(t)));
  }
}

torch::ScalarType dtype_from(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  throw std::runtime_error("archive: unknown dtype '" + name + "'");
}

}  // namespace

void Archive::put(const std::string& name, const torch::Tensor& tensor) {
  dtype_name(tensor.scalar_type());
  auto copy = tensor.detach().to(torch::kCPU).contiguous().clone();
  for (auto& [n, t] : arrays_) {
    if (n == name) {
      t = std::move(copy);
      return;
    }
  }
  arrays_.emplace_back(name, std::move(copy));
}

bool Archive::has(std::string_view name) const {
  for (const auto& [n, t] : arrays_)
    if (n == name) return true;
  return false;
}

const torch::Tensor& Archive::get(std::string_view name) const {
  for (const auto& [n, t] : arrays_)
    if (n == name) return t;
  throw std::runtime_error("archive: missing array '" + std::string(name) + "'");
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  out.reserve(arrays_.size());
  for (const auto& [n, t] : arrays_) out.push_back(n);
  return out;
}

void Archive::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["format"] = "controlstyle-archive";
  manifest["version"] = 1;
  manifest["kind"] = kind_;
  manifest["meta"] = meta_;
  auto arrays = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : arrays_) {
    const uint64_t nbytes = t.numel() * t.element_size();
    arrays.push_back({{"name", name},
                      {"dtype", dtype_name(t.scalar_type())},
                      {"shape", t.sizes().vec()},
                      {"offset", offset},
                      {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["arrays"] = std::move(arrays);
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("archive: cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : arrays_) {
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw std::runtime_error("archive: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("not a controlstyle archive: " + path.string());
  }
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated archive manifest: " + path.string());
  const auto manifest = nlohmann::json::parse(text);

  Archive ar(manifest.at("kind").get<std::string>());
  ar.meta_ = manifest.value("meta", nlohmann::json::object());
  const auto payload_start = in.tellg();
  for (const auto& entry : manifest.at("arrays")) {
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype").get<std::string>())));
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(t.numel() * t.element_size())) {
      throw std::runtime_error("archive: size mismatch for '" + entry.at("name").get<std::string>() + "'");
    }
    in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw std::runtime_error("truncated archive payload: " + path.string());
    ar.arrays_.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ar;
}

void put_module(Archive& archive, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& item : module.named_parameters(true)) archive.put(prefix + item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) archive.put(prefix + item.key(), item.value());
}

void load_module(const Archive& archive, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    const auto& src = archive.get(prefix + key);
    if (src.sizes() != target.sizes()) {
      throw std::runtime_error("architecture mismatch at '" + prefix + key + "': checkpoint shape " +
                               c10::str(src.sizes()) + " vs model " + c10::str(target.sizes()));
    }
    target.copy_(src.to(target.dtype()));
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign(item.key(), item.value());
}

}  // namespace controlstyle
