#pragma once

#include <filesystem>
#include <vector>

#include "hybridscan/synthetic.hpp"

namespace hybridscan {

/// "vseg" volume file:
///   u32 header bytes | JSON header | float32 image [C,D,H,W] | uint8 label [D,H,W]
/// header: {"version": 1, "dims": [D,H,W], "channels": C, "spacing": [sd,sh,sw],
///          "dtype": "real32", "label_dtype": "uint8", "case_id": "..."}
/// All values little-endian.
inline constexpr int kVsegVersion = 1;

void write_vseg(const std::filesystem::path& path, const VolumeSample& sample);
VolumeSample read_vseg(const std::filesystem::path& path);

/// Writes every case as <dir>/<case_id>.vseg plus <dir>/dataset.json
/// listing the case ids in order.
void write_dataset(const std::filesystem::path& dir, const std::vector<VolumeSample>& cases);
std::vector<VolumeSample> read_dataset(const std::filesystem::path& dir);

}  // namespace hybridscan
