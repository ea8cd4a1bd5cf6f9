#pragma once

#include <filesystem>

#include "mpdt/param_store.hpp"

namespace mpdt {

// Manifest (JSON: name, shape, byte offset, element count per parameter) plus
// a blob of little-endian float32 values in manifest order. The manifest
// records the blob's file name, not its path.
template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& manifest_path,
                     const std::filesystem::path& blob_path);

ParamStore<float> load_checkpoint(const std::filesystem::path& manifest_path,
                                  const std::filesystem::path& blob_path);

// Overwrites values of an existing store; names and shapes must match exactly.
template <typename T>
void load_checkpoint_into(ParamStore<T>& store, const std::filesystem::path& manifest_path,
                          const std::filesystem::path& blob_path);

}  // namespace mpdt
