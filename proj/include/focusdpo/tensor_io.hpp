#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "focusdpo/tensor.hpp"

// On-disk tensors.
//
// FDT1 tensor:  "FDT1" | u32 ndim | ndim x u32 dims | row-major f64 payload
// All integers and floats little-endian.
//
// Checkpoint:   "FDCK" | u32 manifest_len | manifest JSON | FDT1 blobs
// The manifest is an array of {"name", "offset", "dims"} where offset counts
// bytes from the first blob.
namespace focusdpo::io {

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(std::string_view bytes, std::size_t* consumed = nullptr);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 over arbitrary bytes; used to fingerprint datasets and files.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace focusdpo::io
