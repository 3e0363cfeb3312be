#pragma once

#include <filesystem>

#include "convreg/volume.hpp"

namespace convreg {

// ".vol" files: a JSON header {dims, spacing, origin, dtype, data} next to a raw
// little-endian payload in x-fastest order. Intensities use dtype "f32le",
// label volumes "u16le". The payload path is relative to the header.

void write_volume(const std::filesystem::path& header, const Volume& vol);
void write_volume(const std::filesystem::path& header, const LabelVolume& labels);

Volume read_volume(const std::filesystem::path& header);
LabelVolume read_label_volume(const std::filesystem::path& header);

/// Raw little-endian float32 array helpers, shared with network checkpoints.
void write_f32le(const std::filesystem::path& path, const float* data, std::size_t n);
std::vector<float> read_f32le(const std::filesystem::path& path, std::size_t expected);

}  // namespace convreg
