#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace unihand::io {

/// Sectioned little-endian binary container shared by scenes, feature grids
/// and checkpoints:
///
///   "UHND" | u32 version | u32 len + kind | u64 len + JSON metadata |
///   u32 count | count x (u32 len + name | u32 ndim | u64 dims[ndim] |
///   float32 payload, row-major)
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> data;
};

struct Archive {
  std::string kind;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  bool contains(const std::string& name) const;
  /// Throws FormatError when absent.
  const NamedArray& get(const std::string& name) const;

  void add(std::string name, std::vector<int64_t> shape, std::vector<float> data);
  void add(std::string name, const torch::Tensor& tensor);
  /// float32 tensor copy of a stored array.
  torch::Tensor tensor(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws FormatError on bad magic, version, or truncation.
Archive read_archive(const std::filesystem::path& path);

/// FNV-1a over the raw bytes of every array (names included), for
/// byte-level equality checks.
std::uint64_t content_hash(const Archive& archive);

}  // namespace unihand::io
