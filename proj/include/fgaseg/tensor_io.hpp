#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fgaseg/grad_check.hpp"
#include "fgaseg/tensor.hpp"

namespace fgaseg {

// FGT1 tensor encoding, little-endian:
//   "FGT1" | u32 rank | u32 dims[rank] | f32 payload (row-major)
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Writes `dir/params.fgt` (concatenated FGT1 records) and
/// `dir/manifest.txt` (one "name<TAB>byte_offset<TAB>shape" line per tensor).
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors);
/// Reads a checkpoint written by save_checkpoint, in manifest order.
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& dir);

}  // namespace fgaseg
