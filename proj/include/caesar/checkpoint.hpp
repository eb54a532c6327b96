#pragma once

// Single-file checkpoints: an 8-byte magic, a little-endian uint64 manifest
// length, the JSON manifest, then raw little-endian IEEE-754 payloads at the
// byte offsets listed in the manifest.

#include <filesystem>
#include <memory>

#include "caesar/config.hpp"
#include "caesar/render.hpp"
#include "caesar/training.hpp"

namespace caesar::checkpoint {

inline constexpr char kMagic[8] = {'C', 'A', 'E', 'S', 'A', 'R', 'C', 'K'};

struct Archive {
  config::json manifest;
  std::vector<char> payload;
};

Archive read_archive(const std::filesystem::path& path);

/// Parameters, optimizer moments, iteration and RNG state.
template <class T>
void save(const std::filesystem::path& path, const train::Trainer<T>& trainer, const config::RunConfig& config);

/// Restores a trainer created from the checkpoint's own config.
template <class T>
void restore(const Archive& archive, train::Trainer<T>& trainer);

/// Config stored in the manifest.
config::RunConfig stored_config(const Archive& archive);

/// Model with parameters loaded (optimizer state ignored).
template <class T>
std::unique_ptr<render::CaesarModel<T>> load_model(const Archive& archive);

}  // namespace caesar::checkpoint
