#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kvc/tensor.hpp"

namespace kvc {

/// Named tensors in on-disk order.
///
/// Container layout (all integers little-endian):
///   "KVT1" | u32 count | count x { u32 name_len | name | u8 rank |
///   rank x u64 extent | row-major f32 data }
using TensorMap = std::map<std::string, Tensor>;

std::vector<std::uint8_t> encode_kvt(const TensorMap& tensors);
TensorMap decode_kvt(const std::vector<std::uint8_t>& bytes);

void write_kvt(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap read_kvt(const std::filesystem::path& path);

} // namespace kvc
