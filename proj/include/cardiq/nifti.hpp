#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cardiq/types.hpp"

namespace cardiq::nifti {

// NIfTI-1 datatype codes we support (covers ACDC).
inline constexpr std::int16_t kDtUint8 = 2;
inline constexpr std::int16_t kDtInt16 = 4;
inline constexpr std::int16_t kDtFloat32 = 16;

/// Decoded single-file NIfTI-1 image. Data is stored as doubles with
/// scl_slope/scl_inter already applied (slope 0 treated as 1);
/// linear order is column-fastest (x, then y, z, t), matching the file.
struct Volume {
    std::array<std::int16_t, 8> dim{};  // dim[0] = rank
    std::int16_t datatype = 0;
    VoxelSpacing spacing;
    std::vector<double> data;

    int rank() const { return dim[0]; }
    int nx() const { return dim[1]; }  // columns
    int ny() const { return dim[2]; }  // rows
    int nz() const { return dim[0] >= 3 ? dim[3] : 1; }  // slices
    int nt() const { return dim[0] >= 4 ? dim[4] : 1; }  // frames
    std::size_t voxel_count() const {
        std::size_t n = 1;
        for (int i = 1; i <= rank(); ++i) n *= static_cast<std::size_t>(dim[i]);
        return n;
    }
};

/// Options for writing; exist so tests can cover both byte orders and
/// both the raw and gzip encodings.
struct WriteOptions {
    std::int16_t datatype = kDtFloat32;
    bool big_endian = false;
    bool gzip = false;
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
};

/// Parse a raw or gzip-compressed single-file NIfTI-1 image.
/// Byte order is auto-detected from sizeof_hdr. Throws FormatError,
/// UnsupportedDatatypeError or TruncationError per the format contract.
Volume parse(const std::vector<std::uint8_t>& bytes);

/// Serialize to single-file NIfTI-1 ("n+1" magic, data at offset 352).
/// Values are quantized to the requested datatype; the inverse of the
/// scl transform is applied before quantization.
std::vector<std::uint8_t> write(const Volume& vol, const WriteOptions& opts = {});

Volume read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Volume& vol,
                const WriteOptions& opts = {});

/// RFC 1952 helpers (zlib-backed).
bool is_gzip(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> gzip_compress(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> gzip_decompress(const std::vector<std::uint8_t>& bytes);

}  // namespace cardiq::nifti
