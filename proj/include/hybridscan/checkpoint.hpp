#pragma once

#include <filesystem>
#include <string>

#include "hybridscan/autodiff.hpp"

namespace hybridscan {

/// Binary parameter file, little-endian:
///   "HSCK" | u8 version | u32 metadata bytes | metadata (UTF-8 JSON)
///   | u32 entry count | entries
/// entry: u32 name bytes | name | u8 dtype (0 real32, 1 real64) | u8 rank
///        | u64 dims[rank] | raw values
inline constexpr std::uint8_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<Scalar>& params,
                     const std::string& metadata = "{}");

/// Loads values into an existing parameter set. Every parameter must be
/// present with matching dtype and shape, and the file must not contain
/// extras. Returns the metadata string. Throws IoError / DataError.
template <typename Scalar>
std::string load_checkpoint(const std::filesystem::path& path, ParameterSet<Scalar>& params);

std::string read_checkpoint_metadata(const std::filesystem::path& path);

}  // namespace hybridscan
