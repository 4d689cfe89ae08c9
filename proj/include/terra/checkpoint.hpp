#pragma once

#include <map>
#include <string>

#include "terra/tensor.hpp"

namespace terra::core {

// Flat parameter checkpoint: magic, schema version, name-to-shape table,
// then raw little-endian 32-bit payloads in table order.
inline constexpr char kCheckpointMagic[4] = {'T', 'F', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

}  // namespace terra::core
