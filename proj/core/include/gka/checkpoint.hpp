#pragma once

// Versioned flat binary checkpoints: a text index (model config, metadata,
// tensor table) followed by raw little-endian tensor data. See
// docs/checkpoint.md for the byte layout.

#include <filesystem>
#include <map>
#include <string>

#include "gka/model.hpp"

namespace gka {

inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
    Model<T> model;
    std::map<std::string, std::string> meta;  // free-form key/value pairs
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const std::map<std::string, std::string>& meta = {});

/// Loads a checkpoint into precision T, converting stored data if needed.
/// Throws InputError for missing files and malformed or truncated content.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace gka
