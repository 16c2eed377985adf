// SPDX-License-Identifier: Apache-2.0

#include "finterp/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "finterp/error.hpp"

namespace finterp::safetensors {

namespace {

std::uint64_t read_le64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") {
        return 4;
    }
    if (dtype == "F16" || dtype == "BF16") {
        return 2;
    }
    return 0;
}

}  // namespace

float half_to_float(std::uint16_t bits) {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    std::uint32_t exponent = (bits >> 10) & 0x1Fu;
    std::uint32_t mantissa = bits & 0x3FFu;
    std::uint32_t out = 0;
    if (exponent == 0) {
        if (mantissa == 0) {
            out = sign;
        } else {
            // subnormal: renormalise
            exponent = 127 - 15 + 1;
            while ((mantissa & 0x400u) == 0) {
                mantissa <<= 1;
                --exponent;
            }
            mantissa &= 0x3FFu;
            out = sign | (exponent << 23) | (mantissa << 13);
        }
    } else if (exponent == 0x1F) {
        out = sign | 0x7F800000u | (mantissa << 13);
    } else {
        out = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(out);
}

float bfloat16_to_float(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

TensorMap read(const std::filesystem::path& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
        throw IoError{"cannot open " + path.string()};
    }
    unsigned char len_bytes[8];
    if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) {
        throw FormatError{path.string() + ": truncated safetensors header"};
    }
    const std::uint64_t header_len = read_le64(len_bytes);
    const auto file_size = std::filesystem::file_size(path);
    if (header_len > file_size - 8) {
        throw FormatError{path.string() + ": header length exceeds file size"};
    }
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError{path.string() + ": malformed safetensors header: " + e.what()};
    }
    if (!doc.is_object()) {
        throw FormatError{path.string() + ": safetensors header is not an object"};
    }

    const std::uint64_t data_start = 8 + header_len;
    TensorMap out;
    std::vector<unsigned char> raw;
    for (const auto& [name, info] : doc.items()) {
        if (name == "__metadata__") {
            continue;
        }
        Tensor t;
        std::uint64_t begin = 0, end = 0;
        try {
            t.dtype = info.at("dtype").get<std::string>();
            t.shape = info.at("shape").get<std::vector<std::int64_t>>();
            const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2) {
                throw FormatError{"bad data_offsets"};
            }
            begin = offsets[0];
            end = offsets[1];
        } catch (const nlohmann::json::exception& e) {
            throw FormatError{path.string() + ": bad entry for tensor " + name + ": " + e.what()};
        }
        const std::size_t elem = dtype_size(t.dtype);
        if (elem == 0) {
            continue;
        }
        std::uint64_t count = 1;
        for (const auto d : t.shape) {
            if (d < 0) {
                throw FormatError{path.string() + ": negative dimension in tensor " + name};
            }
            count *= static_cast<std::uint64_t>(d);
        }
        if (end < begin || end - begin != count * elem || data_start + end > file_size) {
            throw FormatError{path.string() + ": data range of tensor " + name + " is inconsistent with its shape"};
        }
        raw.resize(end - begin);
        in.seekg(static_cast<std::streamoff>(data_start + begin));
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
            throw IoError{path.string() + ": failed reading tensor " + name};
        }
        t.values.resize(count);
        if (t.dtype == "F32") {
            for (std::uint64_t i = 0; i < count; ++i) {
                std::uint32_t bits = 0;
                for (int b = 3; b >= 0; --b) {
                    bits = (bits << 8) | raw[i * 4 + b];
                }
                t.values[i] = std::bit_cast<float>(bits);
            }
        } else {
            const bool half = t.dtype == "F16";
            for (std::uint64_t i = 0; i < count; ++i) {
                const auto bits = static_cast<std::uint16_t>(raw[i * 2] | (raw[i * 2 + 1] << 8));
                t.values[i] = half ? half_to_float(bits) : bfloat16_to_float(bits);
            }
        }
        out.emplace(name, std::move(t));
    }
    return out;
}

void write(const std::filesystem::path& path, const TensorMap& tensors) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::uint64_t bytes = t.values.size() * 4;
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) {
        text += ' ';
    }

    std::ofstream out{path, std::ios::binary | std::ios::trunc};
    if (!out) {
        throw IoError{"cannot write " + path.string()};
    }
    unsigned char len_bytes[8];
    std::uint64_t len = text.size();
    for (auto& b : len_bytes) {
        b = static_cast<unsigned char>(len & 0xFF);
        len >>= 8;
    }
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<unsigned char> buf;
    for (const auto& [name, t] : tensors) {
        buf.resize(t.values.size() * 4);
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            auto bits = std::bit_cast<std::uint32_t>(t.values[i]);
            for (int b = 0; b < 4; ++b) {
                buf[i * 4 + b] = static_cast<unsigned char>(bits & 0xFF);
                bits >>= 8;
            }
        }
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) {
        throw IoError{"failed writing " + path.string()};
    }
}

}  // namespace finterp::safetensors
