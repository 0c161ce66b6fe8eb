#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace octet {

/// Versioned container of named tensors plus a JSON metadata block.
///
/// On-disk layout (little endian):
///   8 bytes  magic "OCTETCK\0"
///   u32      format version (kCheckpointVersion)
///   u32      metadata length, followed by that many bytes of UTF-8 JSON
///   u32      tensor count
///   per tensor:
///     u32 name length, name bytes
///     u8  dtype (0 = f32, 1 = f64, 2 = i64, 3 = u8)
///     u32 rank, then rank x i64 dims
///     raw contiguous element bytes
struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  void put(std::string name, torch::Tensor t);
};

inline constexpr uint32_t kCheckpointVersion = 1;

std::vector<uint8_t> serialize(const TensorArchive& archive);
TensorArchive deserialize(const std::vector<uint8_t>& bytes);

void save_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive load_archive(const std::filesystem::path& path);

/// Adds every parameter and buffer of `module` under `prefix`.
void export_module(TensorArchive& archive, const torch::nn::Module& module, const std::string& prefix);
/// Copies tensors named `prefix + name` into the module. Missing or mis-shaped
/// entries throw std::runtime_error.
void import_module(const TensorArchive& archive, torch::nn::Module& module, const std::string& prefix);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

}  // namespace octet
