#pragma once

#include "cbav/avatar.hpp"
#include "cbav/training.hpp"

#include <filesystem>
#include <string>

namespace cbav {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kAvatarVersion = 1;

// Binary little-endian container: "CBAV", version, template hash, sizes,
// dictionaries, decoders, discriminators, optimizer states, RNG state and
// iteration counter.
std::string serialize_model(const Model& model);
Model deserialize_model(const std::string& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
// Also checks that the checkpoint was trained on `tmpl`.
Model load_checkpoint(const std::filesystem::path& path, const TemplateMesh& tmpl);

// "CBAA" files: codebook, pose, template and decoder hashes, provenance.
std::string serialize_avatar(const Avatar& avatar);
Avatar deserialize_avatar(const std::string& bytes);
void save_avatar(const Avatar& avatar, const std::filesystem::path& path);
Avatar load_avatar(const std::filesystem::path& path);

// FNV-1a of the codebook bytes.
std::uint64_t codebook_checksum(const Codebook& cb);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace cbav
