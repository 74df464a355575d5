#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "camelu/tensor.hpp"

// CMLT tensor container.
//
// Single tensor (version 1):
//   "CMLT" | u8 version=1 | u8 dtype=1 (f64) | u8 rank | rank x u64 dims | payload
//
// Named bundle (version 2), used for checkpoints and embedding tables:
//   "CMLT" | u8 version=2 | u64 header_len | header JSON (UTF-8)
//   | u32 count | count x (u16 name_len | name | single-tensor record)
//
// All integers and payload doubles are little-endian.
namespace camelu::cmlt {

inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kBundleVersion = 2;
inline constexpr std::uint8_t kDtypeF64 = 1;

std::vector<std::uint8_t> encode(const Tensor& t);
Tensor decode(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

struct Bundle {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
  bool contains(const std::string& name) const;
  // Throws a lookup error naming the missing entry.
  const Tensor& get(const std::string& name) const;
};

std::vector<std::uint8_t> encode_bundle(const Bundle& b);
Bundle decode_bundle(const std::vector<std::uint8_t>& bytes);

void write_bundle(const std::filesystem::path& path, const Bundle& b);
Bundle read_bundle(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace camelu::cmlt
