#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "regionlets/tensor.hpp"

namespace regionlets {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// File layout (all integers little-endian uint64):
//   "REGIONLET-CKPT v1 <n_tensors>\n"
//   per tensor: name_len, name bytes, rank, extents[rank], float64 payload.
void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(const std::string& bytes);

}  // namespace regionlets
