#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnsamp/random.hpp"
#include "pnsamp/volume_io.hpp"
#include "pnsamp/windowing.hpp"

namespace pnsamp {

enum class MalignancyClass { benign, malignant };

inline const char* to_string(MalignancyClass c) {
    return c == MalignancyClass::benign ? "benign" : "malignant";
}

// Rating heads, in order: the eight morphology attributes, then malignancy.
inline constexpr std::array<const char*, 9> kRatingNames = {
    "subtlety",   "internal_structure", "calcification", "sphericity", "margin",
    "lobulation", "spiculation",        "solidity",      "malignancy"};

struct LabelRecord {
    std::array<double, 8> attribute_ratings{};  // each in [1,5]
    double malignancy_rating = 0;               // in [1,5], never exactly 3 when admitted
    MalignancyClass malignancy_class = MalignancyClass::benign;
};

/// Mean rating -> 5-way class in 1..5, rounded half-up.
inline int rating_to_class(double rating) {
    const int c = static_cast<int>(std::floor(rating + 0.5));
    return c < 1 ? 1 : (c > 5 ? 5 : c);
}

/// All nine rating classes (eight attributes + malignancy) of a record.
inline std::array<int, 9> rating_classes(const LabelRecord& label) {
    std::array<int, 9> out{};
    for (int a = 0; a < 8; ++a) out[a] = rating_to_class(label.attribute_ratings[a]);
    out[8] = rating_to_class(label.malignancy_rating);
    return out;
}

// ---------------------------------------------------------------------------
// Label derivation for externally rated nodules: one score list per rating
// head (eight attributes, then malignancy), each 1..5 per rater. Ratings are
// mean-of-raters; a mean malignancy of exactly 3 is excluded from training
// (nullopt), otherwise the binary class is malignant iff the mean exceeds 3.
// ---------------------------------------------------------------------------

inline std::optional<LabelRecord> derive_label(
    const std::vector<std::vector<int>>& rater_scores) {
    if (rater_scores.size() != 9) {
        throw ValueError(detail::cat("derive_label: expected 9 score lists, got ",
                                     rater_scores.size()));
    }
    std::array<double, 9> means{};
    for (std::size_t a = 0; a < 9; ++a) {
        const auto& scores = rater_scores[a];
        if (scores.empty()) {
            throw ValueError(detail::cat("derive_label: no raters for '", kRatingNames[a], "'"));
        }
        long sum = 0;
        for (int s : scores) {
            if (s < 1 || s > 5) {
                throw ValueError(detail::cat("derive_label: score ", s, " outside 1..5"));
            }
            sum += s;
        }
        means[a] = static_cast<double>(sum) / static_cast<double>(scores.size());
    }
    if (means[8] == 3.0) return std::nullopt;  // unsure nodule, ignored
    LabelRecord label;
    for (int a = 0; a < 8; ++a) label.attribute_ratings[a] = means[a];
    label.malignancy_rating = means[8];
    label.malignancy_class =
        means[8] > 3.0 ? MalignancyClass::malignant : MalignancyClass::benign;
    return label;
}

// ---------------------------------------------------------------------------
// Phantom nodules: spiculated ellipsoids in noisy lung-density background.
// Geometry lives in millimetres; the dataset pipeline resamples the emitted
// anisotropic volume to 1.0 mm and crops patch_size^3 about the volume
// centre, so everything must fit inside a patch_size * 1 mm cube.
// ---------------------------------------------------------------------------

struct PhantomSpec {
    std::uint64_t seed = 0;
    double radius_mm = 4.0;                  // largest semi-axis scale
    std::array<double, 3> axis_ratios{1, 1, 1};  // per-axis semi-axis factors (z,y,x)
    double margin_blur_mm = 0.0;
    int spike_count = 0;
    double calcification_fraction = 0.0;     // volume fraction of the +300 HU core
    double contrast_hu = 120.0;              // interior sits at -100 + contrast
};

struct PhantomSample {
    HuVolume hu;
    HuVolume mask;  // 0/1 voxels
    LabelRecord label;
};

namespace phantom_detail {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline double hash01(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t s = seed ^ (salt * 0x9e3779b97f4a7c15ULL);
    return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

// Fixed weights of the malignancy score over the four image-visible drivers:
// spiculation, blurred margin, size, non-sphericity. Shipped so the mapping
// from image to rating is auditable and learnable.
inline constexpr double kMalignancyWeights[4] = {0.34, 0.22, 0.28, 0.16};
inline constexpr double kMaxBlurMm = 3.0;
inline constexpr double kMaxSpikes = 6.0;
inline constexpr double kRadiusFraction = 0.30;  // of the patch extent

struct RatingDrivers {
    double spike = 0, blur = 0, size = 0, nonsphere = 0;
};

inline RatingDrivers drivers(const PhantomSpec& spec, std::size_t patch_size) {
    const double rmax = *std::max_element(spec.axis_ratios.begin(), spec.axis_ratios.end());
    const double rmin = *std::min_element(spec.axis_ratios.begin(), spec.axis_ratios.end());
    RatingDrivers d;
    d.spike = clamp01(static_cast<double>(spec.spike_count) / kMaxSpikes);
    d.blur = clamp01(spec.margin_blur_mm / kMaxBlurMm);
    d.size = clamp01(spec.radius_mm / (kRadiusFraction * static_cast<double>(patch_size)));
    d.nonsphere = clamp01((1.0 - rmin / rmax) / 0.4);
    return d;
}

}  // namespace phantom_detail

/// The documented monotone maps from phantom parameters to ratings.
inline LabelRecord compute_ratings(const PhantomSpec& spec, std::size_t patch_size) {
    using namespace phantom_detail;
    const auto d = drivers(spec, patch_size);
    const double rmax = *std::max_element(spec.axis_ratios.begin(), spec.axis_ratios.end());
    const double rmin = *std::min_element(spec.axis_ratios.begin(), spec.axis_ratios.end());
    const double roundness = rmin / rmax;

    LabelRecord label;
    label.attribute_ratings[0] = 1.0 + 4.0 * clamp01((spec.contrast_hu - 40.0) / 160.0);
    label.attribute_ratings[1] = 1.0 + 0.4 * hash01(spec.seed, 1);  // near-constant in LIDC
    label.attribute_ratings[2] = 1.0 + 4.0 * clamp01(spec.calcification_fraction / 0.5);
    label.attribute_ratings[3] = 1.0 + 4.0 * roundness;
    label.attribute_ratings[4] = 5.0 - 4.0 * d.blur;
    label.attribute_ratings[5] = 1.0 + 4.0 * d.nonsphere;
    label.attribute_ratings[6] = 1.0 + 4.0 * d.spike;
    label.attribute_ratings[7] = 4.6 + 0.4 * hash01(spec.seed, 2);  // near-constant in LIDC

    const double score = kMalignancyWeights[0] * d.spike + kMalignancyWeights[1] * d.blur +
                         kMalignancyWeights[2] * d.size + kMalignancyWeights[3] * d.nonsphere;
    double rating = 1.0 + 4.0 * score;
    rating = rating < 1.0 ? 1.0 : (rating > 5.0 ? 5.0 : rating);
    label.malignancy_rating = rating;
    label.malignancy_class =
        rating > 3.0 ? MalignancyClass::malignant : MalignancyClass::benign;
    return label;
}

inline PhantomSample generate_phantom(const PhantomSpec& spec, std::size_t patch_size) {
    using namespace phantom_detail;
    if (spec.radius_mm <= 0 || spec.spike_count < 0 || spec.calcification_fraction < 0 ||
        spec.calcification_fraction > 1 || spec.margin_blur_mm < 0) {
        throw ValueError("generate_phantom: invalid spec");
    }
    for (double a : spec.axis_ratios) {
        if (!(a > 0)) throw ValueError("generate_phantom: axis ratios must be positive");
    }
    const double rmax_ratio = *std::max_element(spec.axis_ratios.begin(), spec.axis_ratios.end());
    const double spike_len = spec.spike_count > 0 ? 0.35 * spec.radius_mm : 0.0;
    const double spike_radius =
        spec.spike_count > 0 ? std::max(0.16 * spec.radius_mm, 0.9) : 0.0;
    // blur smears the HU field, not the mask, so it does not count here
    const double envelope =
        spec.radius_mm * rmax_ratio + spike_len + spike_radius + 1.0 /*jitter*/ + 0.5;
    if (envelope > static_cast<double>(patch_size) / 2.0) {
        throw ValueError(detail::cat("generate_phantom: nodule envelope ", envelope,
                                     " mm exceeds patch half-extent ", patch_size / 2.0, " mm"));
    }

    // Anisotropic source grid, resampled to 1 mm by the pipeline.
    const std::array<double, 3> spacing = {1.25, 0.8, 0.8};
    const double extent = static_cast<double>(patch_size) + 8.0;
    HuVolume hu;
    hu.spacing_mm = spacing;
    for (int a = 0; a < 3; ++a) {
        hu.dims[a] = static_cast<std::size_t>(std::ceil(extent / spacing[a])) + 1;
    }
    hu.voxels.assign(hu.numel(), 0.0f);
    HuVolume mask = hu;

    Rng rng(spec.seed);
    std::array<double, 3> center{};
    for (int a = 0; a < 3; ++a) {
        center[a] = 0.5 * static_cast<double>(hu.dims[a] - 1) * spacing[a] +
                    rng.uniform(-1.0, 1.0);
    }

    const std::array<double, 3> semi = {spec.radius_mm * spec.axis_ratios[0],
                                        spec.radius_mm * spec.axis_ratios[1],
                                        spec.radius_mm * spec.axis_ratios[2]};

    // Spikes: capsules rooted inside the body, pointing outward.
    struct Capsule {
        std::array<double, 3> p0, p1;
        double radius;
    };
    std::vector<Capsule> spikes;
    for (int k = 0; k < spec.spike_count; ++k) {
        std::array<double, 3> u{};
        double norm = 0;
        do {
            for (auto& c : u) c = rng.normal();
            norm = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        } while (norm < 1e-3);
        for (auto& c : u) c /= norm;
        const double boundary =
            1.0 / std::sqrt(u[0] * u[0] / (semi[0] * semi[0]) + u[1] * u[1] / (semi[1] * semi[1]) +
                            u[2] * u[2] / (semi[2] * semi[2]));
        Capsule cap;
        for (int a = 0; a < 3; ++a) {
            cap.p0[a] = 0.70 * boundary * u[a];
            cap.p1[a] = (boundary + spike_len) * u[a];
        }
        cap.radius = spike_radius;
        spikes.push_back(cap);
    }

    auto dist_to_segment = [](const std::array<double, 3>& p, const Capsule& c) {
        std::array<double, 3> d{}, v{};
        double vv = 0, pv = 0;
        for (int a = 0; a < 3; ++a) {
            v[a] = c.p1[a] - c.p0[a];
            d[a] = p[a] - c.p0[a];
            vv += v[a] * v[a];
            pv += d[a] * v[a];
        }
        double t = vv > 0 ? pv / vv : 0.0;
        t = t < 0 ? 0 : (t > 1 ? 1 : t);
        double dist2 = 0;
        for (int a = 0; a < 3; ++a) {
            const double diff = d[a] - t * v[a];
            dist2 += diff * diff;
        }
        return std::sqrt(dist2);
    };

    // Rasterize mask and the unblurred HU field. Scan order fixes the noise
    // stream, so identical specs give identical volumes.
    const double calc_norm = std::cbrt(clamp01(spec.calcification_fraction));
    const double interior_hu = -100.0 + spec.contrast_hu;
    for (std::size_t z = 0; z < hu.dims[0]; ++z) {
        for (std::size_t y = 0; y < hu.dims[1]; ++y) {
            for (std::size_t x = 0; x < hu.dims[2]; ++x) {
                const std::array<double, 3> p = {static_cast<double>(z) * spacing[0] - center[0],
                                                 static_cast<double>(y) * spacing[1] - center[1],
                                                 static_cast<double>(x) * spacing[2] - center[2]};
                const double en = std::sqrt(p[0] * p[0] / (semi[0] * semi[0]) +
                                            p[1] * p[1] / (semi[1] * semi[1]) +
                                            p[2] * p[2] / (semi[2] * semi[2]));
                bool inside = en <= 1.0;
                if (!inside) {
                    for (const auto& cap : spikes) {
                        if (dist_to_segment(p, cap) <= cap.radius) {
                            inside = true;
                            break;
                        }
                    }
                }
                double value;
                const double noise = rng.normal();
                if (inside) {
                    value = (en <= calc_norm ? 300.0 : interior_hu) + 10.0 * noise;
                } else {
                    value = -800.0 + 30.0 * noise;
                }
                value = value < -1000.0 ? -1000.0 : (value > 400.0 ? 400.0 : value);
                hu.at(z, y, x) = static_cast<float>(value);
                mask.at(z, y, x) = inside ? 1.0f : 0.0f;
            }
        }
    }

    // Keep only the component containing the nodule centre: a spike tip that
    // rasterized detached would otherwise break the single-component
    // guarantee.
    {
        std::array<long, 3> c{};
        for (int a = 0; a < 3; ++a) {
            c[a] = std::llround(center[a] / spacing[a]);
            c[a] = std::max(0L, std::min(c[a], static_cast<long>(hu.dims[a]) - 1));
        }
        std::vector<char> keep(mask.numel(), 0);
        std::vector<std::array<long, 3>> stack;
        auto idx = [&](long z, long y, long x) {
            return (static_cast<std::size_t>(z) * mask.dims[1] + static_cast<std::size_t>(y)) *
                       mask.dims[2] +
                   static_cast<std::size_t>(x);
        };
        if (mask.voxels[idx(c[0], c[1], c[2])] > 0) {
            keep[idx(c[0], c[1], c[2])] = 1;
            stack.push_back(c);
        }
        const long dz[6] = {1, -1, 0, 0, 0, 0};
        const long dy[6] = {0, 0, 1, -1, 0, 0};
        const long dx[6] = {0, 0, 0, 0, 1, -1};
        while (!stack.empty()) {
            const auto v = stack.back();
            stack.pop_back();
            for (int k = 0; k < 6; ++k) {
                const long z = v[0] + dz[k], y = v[1] + dy[k], x = v[2] + dx[k];
                if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(mask.dims[0]) ||
                    y >= static_cast<long>(mask.dims[1]) || x >= static_cast<long>(mask.dims[2]))
                    continue;
                const std::size_t i = idx(z, y, x);
                if (mask.voxels[i] > 0 && !keep[i]) {
                    keep[i] = 1;
                    stack.push_back({z, y, x});
                }
            }
        }
        for (std::size_t i = 0; i < mask.numel(); ++i) {
            if (mask.voxels[i] > 0 && !keep[i]) mask.voxels[i] = 0.0f;
        }
    }

    // Margin blur: separable Gaussian on the HU field only.
    if (spec.margin_blur_mm > 0) {
        for (int axis = 0; axis < 3; ++axis) {
            const double sigma = spec.margin_blur_mm / spacing[axis];
            const long radius = static_cast<long>(std::ceil(3.0 * sigma));
            if (radius < 1) continue;
            std::vector<double> kernel(2 * radius + 1);
            double ksum = 0;
            for (long i = -radius; i <= radius; ++i) {
                kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
                ksum += kernel[i + radius];
            }
            for (auto& k : kernel) k /= ksum;
            HuVolume blurred = hu;
            const long D = static_cast<long>(hu.dims[0]), H = static_cast<long>(hu.dims[1]),
                       W = static_cast<long>(hu.dims[2]);
            const long extent_ax = axis == 0 ? D : (axis == 1 ? H : W);
            for (long z = 0; z < D; ++z) {
                for (long y = 0; y < H; ++y) {
                    for (long x = 0; x < W; ++x) {
                        double acc = 0;
                        for (long o = -radius; o <= radius; ++o) {
                            long zz = z, yy = y, xx = x;
                            long& coord = axis == 0 ? zz : (axis == 1 ? yy : xx);
                            coord += o;
                            if (coord < 0) coord = 0;
                            if (coord >= extent_ax) coord = extent_ax - 1;
                            acc += kernel[o + radius] * hu.at(zz, yy, xx);
                        }
                        blurred.at(z, y, x) = static_cast<float>(acc);
                    }
                }
            }
            hu = std::move(blurred);
        }
    }

    PhantomSample sample;
    sample.hu = std::move(hu);
    sample.mask = std::move(mask);
    sample.label = compute_ratings(spec, patch_size);
    return sample;
}

// ---------------------------------------------------------------------------
// Dataset manifest: one JSON object per line,
//   {id, patch, mask, ratings[8], malignancy_rating, class}
// Records are deterministic in (n, seed, class_balance); nodules whose
// malignancy rating would land near 3 are resampled, so excluded ratings
// never reach a manifest.
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string id;
    std::string patch_path;
    std::string mask_path;
    LabelRecord label;
    PhantomSpec spec;  // in-memory only; generation parameters never serialize
};

inline std::vector<ManifestRecord> build_manifest(std::size_t n, std::uint64_t seed,
                                                  double class_balance,
                                                  std::size_t patch_size = 16) {
    if (class_balance < 0 || class_balance > 1) {
        throw ValueError("build_manifest: class_balance must be in [0,1]");
    }
    const std::size_t benign_count =
        static_cast<std::size_t>(std::floor(static_cast<double>(n) * class_balance));
    Rng root(seed);
    std::vector<ManifestRecord> records;
    records.reserve(n);
    const double patch = static_cast<double>(patch_size);
    for (std::size_t i = 0; i < n; ++i) {
        const bool want_benign = i < benign_count;
        Rng rng = root.fork(i);
        PhantomSpec spec;
        LabelRecord label;
        bool found = false;
        for (int attempt = 0; attempt < 200 && !found; ++attempt) {
            spec.seed = rng.next();
            spec.radius_mm = rng.uniform(0.13, 0.24) * patch;
            std::array<double, 3> ratios{};
            for (auto& r : ratios) r = rng.uniform(0.55, 1.0);
            const double top = *std::max_element(ratios.begin(), ratios.end());
            for (auto& r : ratios) r /= top;
            spec.axis_ratios = ratios;
            spec.margin_blur_mm = rng.uniform(0.0, 2.5);
            spec.spike_count = static_cast<int>(rng.below(7));
            spec.calcification_fraction = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, 0.4);
            spec.contrast_hu = rng.uniform(40.0, 200.0);
            label = compute_ratings(spec, patch_size);
            const bool is_benign = label.malignancy_class == MalignancyClass::benign;
            // keep a margin around the excluded rating 3
            if (is_benign == want_benign && std::abs(label.malignancy_rating - 3.0) >= 0.3) {
                found = true;
            }
        }
        if (!found) {
            throw Error(detail::cat("build_manifest: could not sample a ",
                                    want_benign ? "benign" : "malignant", " spec for record ", i));
        }
        ManifestRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "nodule-%05zu", i);
        rec.id = buf;
        rec.patch_path = detail::cat("patches/", rec.id, ".nkvol");
        rec.mask_path = detail::cat("masks/", rec.id, ".nkvol");
        rec.label = label;
        rec.spec = spec;
        records.push_back(std::move(rec));
    }
    return records;
}

inline void write_manifest(const std::vector<ManifestRecord>& records, std::ostream& os) {
    for (const auto& rec : records) {
        nlohmann::ordered_json j;
        j["id"] = rec.id;
        j["patch"] = rec.patch_path;
        j["mask"] = rec.mask_path;
        j["ratings"] = rec.label.attribute_ratings;
        j["malignancy_rating"] = rec.label.malignancy_rating;
        j["class"] = to_string(rec.label.malignancy_class);
        os << j.dump() << "\n";
    }
}

inline void write_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(detail::cat("write_manifest: cannot open '", path, "'"));
    write_manifest(records, os);
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(detail::cat("read_manifest: cannot open '", path, "'"));
    std::vector<ManifestRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(detail::cat("manifest '", path, "' line ", lineno, ": ", e.what()));
        }
        ManifestRecord rec;
        rec.id = j.at("id").get<std::string>();
        rec.patch_path = j.at("patch").get<std::string>();
        rec.mask_path = j.at("mask").get<std::string>();
        const auto ratings = j.at("ratings");
        if (ratings.size() != 8) {
            throw IoError(detail::cat("manifest '", path, "' line ", lineno,
                                      ": expected 8 ratings"));
        }
        for (int a = 0; a < 8; ++a) rec.label.attribute_ratings[a] = ratings[a].get<double>();
        rec.label.malignancy_rating = j.at("malignancy_rating").get<double>();
        const std::string cls = j.at("class").get<std::string>();
        if (cls != "benign" && cls != "malignant") {
            throw IoError(detail::cat("manifest '", path, "' line ", lineno, ": bad class '",
                                      cls, "'"));
        }
        rec.label.malignancy_class =
            cls == "benign" ? MalignancyClass::benign : MalignancyClass::malignant;
        records.push_back(std::move(rec));
    }
    return records;
}

// ---------------------------------------------------------------------------
// Dataset writer: the full preprocessing pipeline per nodule. Phantoms come
// out anisotropic, get resampled to 1 mm isotropic, cropped about the
// physical volume centre and windowed per preset. Masks follow the same
// geometry with trilinear interpolation thresholded at 0.5.
// ---------------------------------------------------------------------------

inline void write_dataset(const std::vector<ManifestRecord>& records, std::size_t patch_size,
                          const std::vector<WindowPreset>& presets, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "patches");
    fs::create_directories(fs::path(out_dir) / "masks");
    for (const auto& rec : records) {
        PhantomSample sample = generate_phantom(rec.spec, patch_size);
        const std::array<double, 3> centroid = {
            0.5 * static_cast<double>(sample.hu.dims[0] - 1) * sample.hu.spacing_mm[0],
            0.5 * static_cast<double>(sample.hu.dims[1] - 1) * sample.hu.spacing_mm[1],
            0.5 * static_cast<double>(sample.hu.dims[2] - 1) * sample.hu.spacing_mm[2]};
        HuVolume iso_hu = resample_isotropic(sample.hu, 1.0);
        HuVolume iso_mask = resample_isotropic(sample.mask, 1.0);
        Tensor<float> patch = extract_patch(iso_hu, centroid, patch_size, presets);
        HuVolume mask_cube = extract_cube(iso_mask, centroid, patch_size, 0.0f);
        for (auto& v : mask_cube.voxels) v = v >= 0.5f ? 1.0f : 0.0f;
        mask_cube.spacing_mm = {1.0, 1.0, 1.0};
        write_volume(patch_as_volume(patch), (fs::path(out_dir) / rec.patch_path).string());
        write_volume(mask_cube, (fs::path(out_dir) / rec.mask_path).string());
    }
    write_manifest(records, (fs::path(out_dir) / "manifest.jsonl").string());
}

}  // namespace pnsamp
