#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pnsamp/error.hpp"
#include "pnsamp/tensor.hpp"

namespace pnsamp {

// CT scale constants. Air pads everything that falls outside a scan.
inline constexpr double kHuMin = -3024.0;
inline constexpr double kHuMax = 3071.0;
inline constexpr double kAirHu = -1000.0;

/// Radiology display window: width/center pair in Hounsfield units.
struct WindowPreset {
    double width = 0;
    double center = 0;
};

/// Shipped defaults: the lung window 1600/-600 and the narrower 700/-600.
inline std::vector<WindowPreset> default_presets() {
    return {{1600.0, -600.0}, {700.0, -600.0}};
}

/// "1600/-600" -> preset.
inline WindowPreset parse_preset(const std::string& text) {
    const auto slash = text.find('/');
    if (slash == std::string::npos) {
        throw ValueError(detail::cat("window preset '", text, "': expected WW/WC"));
    }
    WindowPreset p;
    try {
        p.width = std::stod(text.substr(0, slash));
        p.center = std::stod(text.substr(slash + 1));
    } catch (const std::exception&) {
        throw ValueError(detail::cat("window preset '", text, "': expected WW/WC"));
    }
    if (!(p.width > 0)) {
        throw ValueError(detail::cat("window preset '", text, "': width must be > 0"));
    }
    return p;
}

/// "1600/-600,700/-600" -> preset list.
inline std::vector<WindowPreset> parse_presets(const std::string& text) {
    std::vector<WindowPreset> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const std::string item =
            comma == std::string::npos ? text.substr(pos) : text.substr(pos, comma - pos);
        out.push_back(parse_preset(item));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw ValueError("empty window preset list");
    return out;
}

/// Linear window transform into [0,1]: the interval
/// [center - width/2, center + width/2] maps linearly, the rest clamps.
inline double window_transform(double hu, const WindowPreset& preset) {
    const double lo = preset.center - preset.width / 2.0;
    const double t = (hu - lo) / preset.width;
    return t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
}

// ---------------------------------------------------------------------------
// HuVolume: a 3-D scalar field of Hounsfield units with physical spacing.
// Voxel (z, y, x) sits at physical position (z*sz, y*sy, x*sx) millimetres,
// i.e. the origin is the first voxel centre.
// ---------------------------------------------------------------------------

struct HuVolume {
    std::array<std::size_t, 3> dims{};    // {d, h, w} = extents along z, y, x
    std::array<double, 3> spacing_mm{};   // {sz, sy, sx}
    std::vector<float> voxels;            // row-major, z outermost

    std::size_t numel() const { return dims[0] * dims[1] * dims[2]; }

    float& at(std::size_t z, std::size_t y, std::size_t x) {
        return voxels[(z * dims[1] + y) * dims[2] + x];
    }
    float at(std::size_t z, std::size_t y, std::size_t x) const {
        return voxels[(z * dims[1] + y) * dims[2] + x];
    }

    bool is_isotropic(double rel_tol = 1e-6) const {
        const double s0 = spacing_mm[0];
        return std::abs(spacing_mm[1] - s0) <= rel_tol * s0 &&
               std::abs(spacing_mm[2] - s0) <= rel_tol * s0;
    }
};

inline HuVolume make_volume(std::array<std::size_t, 3> dims, std::array<double, 3> spacing,
                            float fill = static_cast<float>(kAirHu)) {
    for (double s : spacing) {
        if (!(s > 0)) throw ValueError("volume spacing must be positive");
    }
    for (std::size_t d : dims) {
        if (d == 0) throw ValueError("volume dims must be positive");
    }
    HuVolume v;
    v.dims = dims;
    v.spacing_mm = spacing;
    v.voxels.assign(v.numel(), fill);
    return v;
}

// ---------------------------------------------------------------------------
// Isotropic resampling by trilinear interpolation. Output voxel j along an
// axis samples the source at physical j*target_mm; samples beyond the last
// source voxel clamp to the border.
// ---------------------------------------------------------------------------

inline HuVolume resample_isotropic(const HuVolume& v, double target_mm) {
    if (!(target_mm > 0)) throw ValueError("resample_isotropic: target spacing must be > 0");
    for (int a = 0; a < 3; ++a) {
        if (v.dims[a] < 2) {
            throw ValueError(detail::cat("resample_isotropic: axis ", a, " has extent ",
                                         v.dims[a], ", need >= 2"));
        }
    }
    HuVolume out;
    out.spacing_mm = {target_mm, target_mm, target_mm};
    for (int a = 0; a < 3; ++a) {
        const double scaled =
            std::round(static_cast<double>(v.dims[a]) * v.spacing_mm[a] / target_mm);
        out.dims[a] = static_cast<std::size_t>(std::max(scaled, 1.0));
    }
    out.voxels.resize(out.numel());

    auto src_coord = [&](std::size_t j, int axis, std::size_t& i0, double& frac) {
        double s = static_cast<double>(j) * target_mm / v.spacing_mm[axis];
        // snap rounding noise to the grid so identity resampling is exact
        const double snapped = std::round(s);
        if (std::abs(s - snapped) < 1e-9) s = snapped;
        const double max_i = static_cast<double>(v.dims[axis] - 1);
        const double clamped = s < 0.0 ? 0.0 : (s > max_i ? max_i : s);
        double fl = std::floor(clamped);
        if (fl > max_i - 1.0) fl = max_i - 1.0;  // keep i0+1 in range
        i0 = static_cast<std::size_t>(fl);
        frac = clamped - fl;
    };

    for (std::size_t z = 0; z < out.dims[0]; ++z) {
        std::size_t z0;
        double fz;
        src_coord(z, 0, z0, fz);
        for (std::size_t y = 0; y < out.dims[1]; ++y) {
            std::size_t y0;
            double fy;
            src_coord(y, 1, y0, fy);
            for (std::size_t x = 0; x < out.dims[2]; ++x) {
                std::size_t x0;
                double fx;
                src_coord(x, 2, x0, fx);
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const double wgt = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) *
                                               (dx ? fx : 1.0 - fx);
                            acc += wgt * v.at(z0 + dz, y0 + dy, x0 + dx);
                        }
                out.at(z, y, x) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch extraction.
// ---------------------------------------------------------------------------

/// Cube of size^3 voxels centred on centroid_mm {z,y,x}; out-of-bounds
/// voxels take fill_hu. The centroid itself must lie inside the volume.
inline HuVolume extract_cube(const HuVolume& v, std::array<double, 3> centroid_mm,
                             std::size_t size, float fill_hu) {
    std::array<long, 3> center_idx{};
    for (int a = 0; a < 3; ++a) {
        const double idx = centroid_mm[a] / v.spacing_mm[a];
        if (idx < 0.0 || idx > static_cast<double>(v.dims[a] - 1)) {
            throw ValueError(detail::cat("extract_cube: centroid outside volume on axis ", a,
                                         " (", centroid_mm[a], " mm)"));
        }
        center_idx[a] = static_cast<long>(std::llround(idx));
    }
    HuVolume out;
    out.dims = {size, size, size};
    out.spacing_mm = v.spacing_mm;
    out.voxels.assign(out.numel(), fill_hu);
    const long half = static_cast<long>(size) / 2;
    for (std::size_t z = 0; z < size; ++z) {
        const long sz = center_idx[0] - half + static_cast<long>(z);
        if (sz < 0 || sz >= static_cast<long>(v.dims[0])) continue;
        for (std::size_t y = 0; y < size; ++y) {
            const long sy = center_idx[1] - half + static_cast<long>(y);
            if (sy < 0 || sy >= static_cast<long>(v.dims[1])) continue;
            const long x_lo = center_idx[2] - half;
            for (std::size_t x = 0; x < size; ++x) {
                const long sx = x_lo + static_cast<long>(x);
                if (sx < 0 || sx >= static_cast<long>(v.dims[2])) continue;
                out.at(z, y, x) = v.at(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy),
                                       static_cast<std::size_t>(sx));
            }
        }
    }
    return out;
}

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

/// Multi-window patch: one channel per preset, stacked in preset order.
/// The volume must already be isotropic (resample first, then extract).
inline Tensor<float> extract_patch(const HuVolume& v, std::array<double, 3> centroid_mm,
                                   std::size_t size, const std::vector<WindowPreset>& presets) {
    if (!v.is_isotropic()) {
        throw ValueError("extract_patch: volume must be isotropic; resample first");
    }
    if (!is_power_of_two(size)) {
        throw ValueError(detail::cat("extract_patch: size ", size, " is not a power of two"));
    }
    if (presets.empty()) throw ValueError("extract_patch: no window presets");
    HuVolume cube = extract_cube(v, centroid_mm, size, static_cast<float>(kAirHu));
    Tensor<float> out({presets.size(), size, size, size});
    const std::size_t voxels = cube.numel();
    for (std::size_t p = 0; p < presets.size(); ++p) {
        float* dst = out.data.data() + p * voxels;
        for (std::size_t i = 0; i < voxels; ++i) {
            dst[i] = static_cast<float>(window_transform(cube.voxels[i], presets[p]));
        }
    }
    return out;
}

}  // namespace pnsamp
