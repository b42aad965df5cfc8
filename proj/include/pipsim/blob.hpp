#pragma once

// Binary tensor files shared by datasets and checkpoints.
//
// Blob layout (all integers little-endian):
//   bytes 0..3   magic "PIPB"
//   u32          format version (1)
//   u32          dtype (1 = float32, 2 = float64)
//   u32          rank
//   u64 x rank   dimensions
//   payload      prod(dims) little-endian IEEE values
//
// Checkpoint layout:
//   bytes 0..3   magic "PIPC"
//   u32          format version (1)
//   u32          metadata length, then that many UTF-8 bytes
//   u32          entry count
//   per entry:   u32 name length, name bytes, u32 rank, u64 x rank dims
//   payload      float64 values of every entry, in directory order
//   u64          FNV-1a 64 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pipsim::io {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

struct Blob {
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

// Writes a float32 blob and returns the FNV-1a checksum of the whole file as
// 16 hex digits.
std::string write_blob(const std::filesystem::path& path, const std::vector<std::int64_t>& shape,
                       std::span<const float> data);

// Missing file -> IoError; bad magic, version or dtype -> FormatError;
// truncated payload or checksum mismatch -> CorruptionError. An empty
// expected checksum skips the comparison.
Blob read_blob(const std::filesystem::path& path, const std::string& expected_checksum = {});

struct NamedArray {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<double> data;
};

struct Checkpoint {
    std::string metadata;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace pipsim::io
