#include "cardiq/nifti.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cardiq/errors.hpp"

namespace cardiq::nifti {

namespace {

// Fixed offsets from the NIfTI-1 standard, 348-byte header.
constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffMagic = 344;

template <typename T>
T load_swapped(const std::uint8_t* p, bool swap) {
    std::array<std::uint8_t, sizeof(T)> buf;
    std::memcpy(buf.data(), p, sizeof(T));
    if (swap) std::reverse(buf.begin(), buf.end());
    T v;
    std::memcpy(&v, buf.data(), sizeof(T));
    return v;
}

template <typename T>
void store_swapped(std::uint8_t* p, T v, bool swap) {
    std::array<std::uint8_t, sizeof(T)> buf;
    std::memcpy(buf.data(), &v, sizeof(T));
    if (swap) std::reverse(buf.begin(), buf.end());
    std::memcpy(p, buf.data(), sizeof(T));
}

int bitpix_for(std::int16_t datatype) {
    switch (datatype) {
        case kDtUint8: return 8;
        case kDtInt16: return 16;
        case kDtFloat32: return 32;
        default: return 0;
    }
}

bool host_is_big_endian() {
    return std::endian::native == std::endian::big;
}

}  // namespace

bool is_gzip(const std::vector<std::uint8_t>& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<std::uint8_t> gzip_compress(const std::vector<std::uint8_t>& bytes) {
    z_stream zs{};
    // windowBits 15+16 selects the gzip container.
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                     Z_DEFAULT_STRATEGY) != Z_OK)
        throw IoError("gzip: deflateInit2 failed");
    std::vector<std::uint8_t> out(deflateBound(&zs, bytes.size()));
    zs.next_in = const_cast<Bytef*>(bytes.data());
    zs.avail_in = static_cast<uInt>(bytes.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw IoError("gzip: deflate did not finish");
    out.resize(zs.total_out);
    return out;
}

std::vector<std::uint8_t> gzip_decompress(const std::vector<std::uint8_t>& bytes) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK)
        throw IoError("gzip: inflateInit2 failed");
    std::vector<std::uint8_t> out;
    out.reserve(bytes.size() * 4);
    std::array<std::uint8_t, 1 << 16> chunk;
    zs.next_in = const_cast<Bytef*>(bytes.data());
    zs.avail_in = static_cast<uInt>(bytes.size());
    int rc = Z_OK;
    do {
        zs.next_out = chunk.data();
        zs.avail_out = static_cast<uInt>(chunk.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw TruncationError("gzip: corrupt or truncated stream");
        }
        out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    } while (rc != Z_STREAM_END && zs.avail_in > 0);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw TruncationError("gzip: stream ended early");
    return out;
}

Volume parse(const std::vector<std::uint8_t>& raw) {
    const std::vector<std::uint8_t>& bytes = is_gzip(raw) ? gzip_decompress(raw) : raw;

    if (bytes.size() < kHeaderSize)
        throw TruncationError("nifti: file shorter than the 348-byte header");

    const std::uint8_t* h = bytes.data();

    char magic[4];
    std::memcpy(magic, h + kOffMagic, 4);
    const bool single_file = std::memcmp(magic, "n+1\0", 4) == 0;
    const bool pair_file = std::memcmp(magic, "ni1\0", 4) == 0;
    if (!single_file && !pair_file)
        throw FormatError("nifti: bad magic (expected \"n+1\" or \"ni1\")");
    if (pair_file)
        throw FormatError("nifti: two-file (\"ni1\") images are not supported");

    // sizeof_hdr doubles as the byte-order sentinel: 348 native,
    // 1543503872 (= bswap32(348)) when the file is the other endianness.
    bool swap = false;
    std::int32_t sizeof_hdr = load_swapped<std::int32_t>(h + kOffSizeofHdr, false);
    if (sizeof_hdr != 348) {
        sizeof_hdr = load_swapped<std::int32_t>(h + kOffSizeofHdr, true);
        if (sizeof_hdr != 348)
            throw FormatError("nifti: sizeof_hdr is not 348 in either byte order");
        swap = true;
    }

    Volume vol;
    for (int i = 0; i < 8; ++i)
        vol.dim[i] = load_swapped<std::int16_t>(h + kOffDim + 2 * i, swap);
    if (vol.dim[0] < 2 || vol.dim[0] > 7)
        throw FormatError("nifti: dim[0] out of range 2..7");
    for (int i = 1; i <= vol.dim[0]; ++i)
        if (vol.dim[i] < 1)
            throw FormatError("nifti: non-positive extent in dim[" + std::to_string(i) + "]");

    vol.datatype = load_swapped<std::int16_t>(h + kOffDatatype, swap);
    const int bitpix = bitpix_for(vol.datatype);
    if (bitpix == 0)
        throw UnsupportedDatatypeError("nifti: unsupported datatype code " +
                                       std::to_string(vol.datatype));

    std::array<float, 8> pixdim;
    for (int i = 0; i < 8; ++i)
        pixdim[i] = load_swapped<float>(h + kOffPixdim + 4 * i, swap);
    vol.spacing.dx = pixdim[1] > 0 ? pixdim[1] : 1.0;
    vol.spacing.dy = pixdim[2] > 0 ? pixdim[2] : 1.0;
    vol.spacing.dz = pixdim[3] > 0 ? pixdim[3] : 1.0;
    vol.spacing.dt = vol.dim[0] >= 4 && pixdim[4] > 0 ? pixdim[4] : 0.0;

    float vox_offset = load_swapped<float>(h + kOffVoxOffset, swap);
    if (vox_offset < static_cast<float>(kHeaderSize)) vox_offset = 352.0f;
    float scl_slope = load_swapped<float>(h + kOffSclSlope, swap);
    float scl_inter = load_swapped<float>(h + kOffSclInter, swap);
    if (scl_slope == 0.0f) {
        scl_slope = 1.0f;
        scl_inter = 0.0f;
    }

    const std::size_t n = vol.voxel_count();
    const std::size_t data_start = static_cast<std::size_t>(vox_offset);
    const std::size_t need = data_start + n * (bitpix / 8);
    if (bytes.size() < need)
        throw TruncationError("nifti: payload truncated (need " + std::to_string(need) +
                              " bytes, have " + std::to_string(bytes.size()) + ")");

    vol.data.resize(n);
    const std::uint8_t* d = bytes.data() + data_start;
    switch (vol.datatype) {
        case kDtUint8:
            for (std::size_t i = 0; i < n; ++i)
                vol.data[i] = static_cast<double>(d[i]) * scl_slope + scl_inter;
            break;
        case kDtInt16:
            for (std::size_t i = 0; i < n; ++i)
                vol.data[i] = static_cast<double>(load_swapped<std::int16_t>(d + 2 * i, swap)) *
                                  scl_slope + scl_inter;
            break;
        case kDtFloat32:
            for (std::size_t i = 0; i < n; ++i)
                vol.data[i] = static_cast<double>(load_swapped<float>(d + 4 * i, swap)) *
                                  scl_slope + scl_inter;
            break;
    }
    return vol;
}

std::vector<std::uint8_t> write(const Volume& vol, const WriteOptions& opts) {
    const int bitpix = bitpix_for(opts.datatype);
    if (bitpix == 0)
        throw UnsupportedDatatypeError("nifti: unsupported datatype code " +
                                       std::to_string(opts.datatype));
    if (vol.dim[0] < 2 || vol.dim[0] > 7)
        throw ValidationError("nifti: dim[0] out of range 2..7");
    if (vol.data.size() != vol.voxel_count())
        throw ValidationError("nifti: data size does not match dims");

    const bool swap = opts.big_endian != host_is_big_endian();
    const std::size_t n = vol.data.size();
    // 348-byte header + 4-byte extension flag, data at 352.
    std::vector<std::uint8_t> out(352 + n * (bitpix / 8), 0);
    std::uint8_t* h = out.data();

    store_swapped<std::int32_t>(h + kOffSizeofHdr, 348, swap);
    for (int i = 0; i < 8; ++i)
        store_swapped<std::int16_t>(h + kOffDim + 2 * i, vol.dim[i], swap);
    store_swapped<std::int16_t>(h + kOffDatatype, opts.datatype, swap);
    store_swapped<std::int16_t>(h + kOffBitpix, static_cast<std::int16_t>(bitpix), swap);
    std::array<float, 8> pixdim{};
    pixdim[1] = static_cast<float>(vol.spacing.dx);
    pixdim[2] = static_cast<float>(vol.spacing.dy);
    pixdim[3] = static_cast<float>(vol.spacing.dz);
    pixdim[4] = static_cast<float>(vol.spacing.dt);
    for (int i = 0; i < 8; ++i)
        store_swapped<float>(h + kOffPixdim + 4 * i, pixdim[i], swap);
    store_swapped<float>(h + kOffVoxOffset, 352.0f, swap);
    store_swapped<float>(h + kOffSclSlope, opts.scl_slope, swap);
    store_swapped<float>(h + kOffSclInter, opts.scl_inter, swap);
    std::memcpy(h + kOffMagic, "n+1\0", 4);

    const float slope = opts.scl_slope == 0.0f ? 1.0f : opts.scl_slope;
    const float inter = opts.scl_slope == 0.0f ? 0.0f : opts.scl_inter;
    std::uint8_t* d = out.data() + 352;
    for (std::size_t i = 0; i < n; ++i) {
        const double raw = (vol.data[i] - inter) / slope;
        switch (opts.datatype) {
            case kDtUint8: {
                double q = std::nearbyint(raw);
                if (q < 0 || q > 255)
                    throw ValidationError("nifti: value out of uint8 range after scl inverse");
                d[i] = static_cast<std::uint8_t>(q);
                break;
            }
            case kDtInt16: {
                double q = std::nearbyint(raw);
                if (q < std::numeric_limits<std::int16_t>::min() ||
                    q > std::numeric_limits<std::int16_t>::max())
                    throw ValidationError("nifti: value out of int16 range after scl inverse");
                store_swapped<std::int16_t>(d + 2 * i, static_cast<std::int16_t>(q), swap);
                break;
            }
            case kDtFloat32:
                store_swapped<float>(d + 4 * i, static_cast<float>(raw), swap);
                break;
        }
    }
    if (opts.gzip) return gzip_compress(out);
    return out;
}

Volume read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("nifti: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return parse(bytes);
}

void write_file(const std::filesystem::path& path, const Volume& vol,
                const WriteOptions& opts) {
    auto bytes = write(vol, opts);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("nifti: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("nifti: short write to " + path.string());
}

}  // namespace cardiq::nifti
