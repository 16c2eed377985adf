// SPDX-License-Identifier: Apache-2.0
//
// Minimal safetensors reader/writer. Floating tensors of dtype F32, F16 and
// BF16 are upcast to float on read; writes always use F32.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace finterp::safetensors {

struct Tensor {
    std::string dtype;  // as stored in the file
    std::vector<std::int64_t> shape;
    std::vector<float> values;
};

using TensorMap = std::map<std::string, Tensor>;

/// Reads every floating-point tensor in the file. Non-float tensors are
/// skipped. Throws IoError on unreadable files and FormatError on a
/// malformed header.
TensorMap read(const std::filesystem::path& path);

/// Writes tensors as F32, keys in sorted order.
void write(const std::filesystem::path& path, const TensorMap& tensors);

float half_to_float(std::uint16_t bits);
float bfloat16_to_float(std::uint16_t bits);

}  // namespace finterp::safetensors
