#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "pnsamp/windowing.hpp"

namespace pnsamp {

// NKVOL1 container, little-endian:
//   magic "NKVOL1" | u32 d,h,w | f32 sz,sy,sx | f32 voxels[d*h*w], z outermost
// Patches and masks reuse the container with the spacing sentinel [1,1,1].

inline constexpr char kVolumeMagic[6] = {'N', 'K', 'V', 'O', 'L', '1'};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(sizeof(T) == 4);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    static_assert(sizeof(T) == 4);
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError(cat("truncated volume: missing ", what));
    return v;
}

}  // namespace detail

inline void write_volume(const HuVolume& v, std::ostream& os) {
    for (double s : v.spacing_mm) {
        if (!(s > 0)) throw IoError("write_volume: non-positive spacing");
    }
    os.write(kVolumeMagic, sizeof(kVolumeMagic));
    for (std::size_t d : v.dims) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double s : v.spacing_mm) detail::write_le<float>(os, static_cast<float>(s));
    os.write(reinterpret_cast<const char*>(v.voxels.data()),
             static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
    if (!os) throw IoError("write_volume: stream write failed");
}

inline void write_volume(const HuVolume& v, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(detail::cat("write_volume: cannot open '", path, "'"));
    write_volume(v, os);
}

inline HuVolume read_volume(std::istream& is, const std::string& name = "<stream>") {
    char magic[6];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kVolumeMagic, sizeof(magic)) != 0) {
        throw IoError(detail::cat("bad magic in '", name, "': not an NKVOL1 file"));
    }
    HuVolume v;
    for (int a = 0; a < 3; ++a) {
        v.dims[a] = detail::read_le<std::uint32_t>(is, "dims");
        if (v.dims[a] == 0) throw IoError(detail::cat("zero extent in '", name, "'"));
    }
    for (int a = 0; a < 3; ++a) {
        const float s = detail::read_le<float>(is, "spacing");
        if (!(s > 0)) {
            throw IoError(detail::cat("non-positive spacing in '", name, "'"));
        }
        v.spacing_mm[a] = s;
    }
    v.voxels.resize(v.numel());
    is.read(reinterpret_cast<char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
    if (!is) {
        throw IoError(detail::cat("truncated volume payload in '", name, "'"));
    }
    for (float h : v.voxels) {
        if (!std::isfinite(h) || h < kHuMin || h > kHuMax) {
            throw IoError(detail::cat("voxel out of HU range in '", name, "'"));
        }
    }
    return v;
}

inline HuVolume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(detail::cat("read_volume: cannot open '", path, "'"));
    return read_volume(is, path);
}

// Patch channels [c, s, s, s] ride NKVOL1 as [c*s, s, s] with unit spacing.
inline HuVolume patch_as_volume(const Tensor<float>& patch) {
    if (patch.ndim() != 4 || patch.shape[1] != patch.shape[2] ||
        patch.shape[1] != patch.shape[3]) {
        throw ShapeError(detail::cat("patch_as_volume: want [c,s,s,s], got ",
                                     shape_str(patch.shape)));
    }
    HuVolume v;
    v.dims = {patch.shape[0] * patch.shape[1], patch.shape[2], patch.shape[3]};
    v.spacing_mm = {1.0, 1.0, 1.0};
    v.voxels = patch.data;
    return v;
}

inline Tensor<float> volume_as_patch(const HuVolume& v, const std::string& name = "<patch>") {
    const std::size_t s = v.dims[1];
    if (v.dims[2] != s || s == 0 || v.dims[0] % s != 0) {
        throw IoError(detail::cat("'", name, "': dims ", v.dims[0], "x", v.dims[1], "x",
                                  v.dims[2], " do not stack cubic channels"));
    }
    Tensor<float> t({v.dims[0] / s, s, s, s});
    t.data = v.voxels;
    return t;
}

}  // namespace pnsamp
