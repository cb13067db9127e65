#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pnsamp/phantom.hpp"

using namespace pnsamp;

// --- derive_label -------------------------------------------------------------

namespace {

std::vector<std::vector<int>> scores_with_malignancy(std::vector<int> malignancy) {
    std::vector<std::vector<int>> s(9, std::vector<int>{3});
    s[8] = std::move(malignancy);
    return s;
}

}  // namespace

TEST(DeriveLabel, MeanMalignancyOfThreeIsExcluded) {
    EXPECT_FALSE(derive_label(scores_with_malignancy({3, 3, 3})).has_value());
    EXPECT_FALSE(derive_label(scores_with_malignancy({2, 4})).has_value());  // mean 3
}

TEST(DeriveLabel, MeanAboveThreeIsMalignant) {
    auto label = derive_label(scores_with_malignancy({5, 5, 4, 4}));
    ASSERT_TRUE(label.has_value());
    EXPECT_DOUBLE_EQ(label->malignancy_rating, 4.5);
    EXPECT_EQ(label->malignancy_class, MalignancyClass::malignant);
}

TEST(DeriveLabel, MeanBelowThreeIsBenign) {
    auto label = derive_label(scores_with_malignancy({1, 2}));
    ASSERT_TRUE(label.has_value());
    EXPECT_DOUBLE_EQ(label->malignancy_rating, 1.5);
    EXPECT_EQ(label->malignancy_class, MalignancyClass::benign);
}

TEST(DeriveLabel, AttributesAreRaterMeans) {
    auto scores = scores_with_malignancy({1});
    scores[0] = {1, 2, 3, 4};  // subtlety mean 2.5
    auto label = derive_label(scores);
    ASSERT_TRUE(label.has_value());
    EXPECT_DOUBLE_EQ(label->attribute_ratings[0], 2.5);
}

TEST(DeriveLabel, EmptyRaterListIsAnError) {
    auto scores = scores_with_malignancy({1});
    scores[4].clear();
    EXPECT_THROW(derive_label(scores), ValueError);
    EXPECT_THROW(derive_label({{1}, {1}}), ValueError);  // wrong list count
    EXPECT_THROW(derive_label(scores_with_malignancy({0})), ValueError);
    EXPECT_THROW(derive_label(scores_with_malignancy({6})), ValueError);
}

TEST(RatingToClass, RoundsHalfUp) {
    EXPECT_EQ(rating_to_class(4.5), 5);
    EXPECT_EQ(rating_to_class(2.49), 2);
    EXPECT_EQ(rating_to_class(1.0), 1);
    EXPECT_EQ(rating_to_class(5.0), 5);
}

// --- generate_phantom -----------------------------------------------------------

TEST(GeneratePhantom, PerfectSphereExtremes) {
    PhantomSpec spec;
    spec.seed = 7;
    spec.radius_mm = 4.0;
    spec.axis_ratios = {1, 1, 1};
    spec.spike_count = 0;
    spec.margin_blur_mm = 0.0;
    const LabelRecord label = compute_ratings(spec, 16);
    EXPECT_DOUBLE_EQ(label.attribute_ratings[3], 5.0);  // sphericity
    EXPECT_DOUBLE_EQ(label.attribute_ratings[6], 1.0);  // spiculation
    EXPECT_DOUBLE_EQ(label.attribute_ratings[4], 5.0);  // margin (no blur)
}

TEST(GeneratePhantom, DeterministicInSeed) {
    PhantomSpec spec;
    spec.seed = 99;
    spec.radius_mm = 3.5;
    spec.axis_ratios = {1.0, 0.8, 0.9};
    spec.spike_count = 3;
    spec.margin_blur_mm = 1.0;
    spec.calcification_fraction = 0.2;
    PhantomSample a = generate_phantom(spec, 16);
    PhantomSample b = generate_phantom(spec, 16);
    ASSERT_EQ(a.hu.numel(), b.hu.numel());
    for (std::size_t i = 0; i < a.hu.numel(); ++i) {
        ASSERT_EQ(a.hu.voxels[i], b.hu.voxels[i]);
        ASSERT_EQ(a.mask.voxels[i], b.mask.voxels[i]);
    }
    EXPECT_EQ(a.label.malignancy_rating, b.label.malignancy_rating);
}

TEST(GeneratePhantom, MaskVolumeMatchesAnalyticEllipsoid) {
    PhantomSpec spec;
    spec.seed = 3;
    spec.radius_mm = 12.0;
    spec.axis_ratios = {1.0, 0.85, 0.7};
    spec.spike_count = 0;
    spec.margin_blur_mm = 0.0;
    PhantomSample s = generate_phantom(spec, 64);
    double voxel_mm3 = s.mask.spacing_mm[0] * s.mask.spacing_mm[1] * s.mask.spacing_mm[2];
    double measured = 0;
    for (float v : s.mask.voxels) measured += v;
    measured *= voxel_mm3;
    const double r = spec.radius_mm;
    const double analytic = 4.0 / 3.0 * M_PI * spec.axis_ratios[0] * spec.axis_ratios[1] *
                            spec.axis_ratios[2] * r * r * r;
    EXPECT_NEAR(measured / analytic, 1.0, 0.05);
}

TEST(GeneratePhantom, MaskIsSingleSixConnectedComponent) {
    for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
        PhantomSpec spec;
        spec.seed = seed;
        spec.radius_mm = 3.2;
        spec.axis_ratios = {1.0, 0.7, 0.85};
        spec.spike_count = 5;
        spec.margin_blur_mm = 1.5;
        PhantomSample s = generate_phantom(spec, 16);

        // flood fill oracle
        const auto& m = s.mask;
        std::vector<char> seen(m.numel(), 0);
        std::size_t first = m.numel();
        std::size_t mask_total = 0;
        for (std::size_t i = 0; i < m.numel(); ++i) {
            if (m.voxels[i] > 0) {
                ++mask_total;
                if (first == m.numel()) first = i;
            }
        }
        ASSERT_GT(mask_total, 0u);
        std::vector<std::size_t> stack = {first};
        seen[first] = 1;
        std::size_t filled = 1;
        const long D = long(m.dims[0]), H = long(m.dims[1]), W = long(m.dims[2]);
        while (!stack.empty()) {
            const long i = long(stack.back());
            stack.pop_back();
            const long z = i / (H * W), y = (i / W) % H, x = i % W;
            const long nz[6] = {z + 1, z - 1, z, z, z, z};
            const long ny[6] = {y, y, y + 1, y - 1, y, y};
            const long nx[6] = {x, x, x, x, x + 1, x - 1};
            for (int k = 0; k < 6; ++k) {
                if (nz[k] < 0 || ny[k] < 0 || nx[k] < 0 || nz[k] >= D || ny[k] >= H || nx[k] >= W)
                    continue;
                const std::size_t j = std::size_t((nz[k] * H + ny[k]) * W + nx[k]);
                if (m.voxels[j] > 0 && !seen[j]) {
                    seen[j] = 1;
                    ++filled;
                    stack.push_back(j);
                }
            }
        }
        EXPECT_EQ(filled, mask_total) << "seed " << seed;
    }
}

TEST(GeneratePhantom, HuWithinLegalRange) {
    PhantomSpec spec;
    spec.seed = 21;
    spec.radius_mm = 3.0;
    spec.spike_count = 2;
    spec.calcification_fraction = 0.3;
    spec.margin_blur_mm = 0.8;
    PhantomSample s = generate_phantom(spec, 16);
    for (float h : s.hu.voxels) {
        EXPECT_GE(h, kHuMin);
        EXPECT_LE(h, kHuMax);
    }
}

TEST(GeneratePhantom, OversizedNoduleIsAnError) {
    PhantomSpec spec;
    spec.seed = 1;
    spec.radius_mm = 10.0;  // patch 16 cannot hold this
    EXPECT_THROW(generate_phantom(spec, 16), ValueError);
}

// --- rating monotonicity ----------------------------------------------------------

TEST(RatingMaps, MonotoneInDrivingParameters) {
    PhantomSpec base;
    base.seed = 5;
    base.radius_mm = 3.0;
    base.axis_ratios = {1.0, 0.8, 0.9};
    base.margin_blur_mm = 1.0;
    base.spike_count = 2;
    base.calcification_fraction = 0.1;
    base.contrast_hu = 100.0;

    // spiculation and malignancy rise with spike count
    double prev_spic = -1, prev_mal = -1;
    for (int k = 0; k <= 6; ++k) {
        PhantomSpec s = base;
        s.spike_count = k;
        const auto label = compute_ratings(s, 16);
        EXPECT_GE(label.attribute_ratings[6], prev_spic);
        EXPECT_GE(label.malignancy_rating, prev_mal);
        prev_spic = label.attribute_ratings[6];
        prev_mal = label.malignancy_rating;
    }
    // margin falls, malignancy rises with blur
    double prev_margin = 6, prev_mal2 = -1;
    for (double b = 0.0; b <= 3.0; b += 0.5) {
        PhantomSpec s = base;
        s.margin_blur_mm = b;
        const auto label = compute_ratings(s, 16);
        EXPECT_LE(label.attribute_ratings[4], prev_margin);
        EXPECT_GE(label.malignancy_rating, prev_mal2);
        prev_margin = label.attribute_ratings[4];
        prev_mal2 = label.malignancy_rating;
    }
    // sphericity rises as ratios approach 1; lobulation falls
    double prev_sph = -1, prev_lob = 6;
    for (double q = 0.5; q <= 1.0; q += 0.1) {
        PhantomSpec s = base;
        s.axis_ratios = {1.0, q, 1.0};
        const auto label = compute_ratings(s, 16);
        EXPECT_GE(label.attribute_ratings[3], prev_sph);
        EXPECT_LE(label.attribute_ratings[5], prev_lob);
        prev_sph = label.attribute_ratings[3];
        prev_lob = label.attribute_ratings[5];
    }
    // calcification and subtlety follow their drivers
    double prev_calc = -1;
    for (double f = 0.0; f <= 0.5; f += 0.1) {
        PhantomSpec s = base;
        s.calcification_fraction = f;
        prev_calc = std::max(prev_calc, -1.0);
        const auto label = compute_ratings(s, 16);
        EXPECT_GE(label.attribute_ratings[2], prev_calc);
        prev_calc = label.attribute_ratings[2];
    }
    double prev_sub = -1;
    for (double c = 40.0; c <= 200.0; c += 20.0) {
        PhantomSpec s = base;
        s.contrast_hu = c;
        const auto label = compute_ratings(s, 16);
        EXPECT_GE(label.attribute_ratings[0], prev_sub);
        prev_sub = label.attribute_ratings[0];
    }
    // malignancy rises with radius
    double prev_mal3 = -1;
    for (double r = 2.0; r <= 4.5; r += 0.5) {
        PhantomSpec s = base;
        s.radius_mm = r;
        const auto label = compute_ratings(s, 16);
        EXPECT_GE(label.malignancy_rating, prev_mal3);
        prev_mal3 = label.malignancy_rating;
    }
}

// --- manifest ----------------------------------------------------------------------

TEST(Manifest, EmptyWhenZeroRequested) {
    EXPECT_TRUE(build_manifest(0, 1, 0.64).empty());
}

TEST(Manifest, FloorRuleForClassBalance) {
    auto records = build_manifest(100, 42, 0.64, 16);
    ASSERT_EQ(records.size(), 100u);
    std::size_t benign = 0;
    for (const auto& r : records) {
        if (r.label.malignancy_class == MalignancyClass::benign) ++benign;
    }
    EXPECT_EQ(benign, 64u);
}

TEST(Manifest, NoExcludedRatingsEverAppear) {
    auto records = build_manifest(200, 7, 0.64, 16);
    for (const auto& r : records) {
        EXPECT_GE(std::abs(r.label.malignancy_rating - 3.0), 0.3);
        const bool is_malignant = r.label.malignancy_class == MalignancyClass::malignant;
        EXPECT_EQ(is_malignant, r.label.malignancy_rating > 3.0);
    }
}

TEST(Manifest, SameSeedGivesIdenticalBytes) {
    auto a = build_manifest(50, 11, 0.64, 16);
    auto b = build_manifest(50, 11, 0.64, 16);
    std::stringstream sa, sb;
    write_manifest(a, sa);
    write_manifest(b, sb);
    EXPECT_EQ(sa.str(), sb.str());
    auto c = build_manifest(50, 12, 0.64, 16);
    std::stringstream sc;
    write_manifest(c, sc);
    EXPECT_NE(sa.str(), sc.str());
}

TEST(Manifest, RoundTripThroughJsonLines) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "pnsamp_manifest_test";
    fs::create_directories(dir);
    const std::string path = (dir / "manifest.jsonl").string();
    auto records = build_manifest(10, 3, 0.5, 16);
    write_manifest(records, path);
    auto back = read_manifest(path);
    ASSERT_EQ(back.size(), records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        EXPECT_EQ(back[i].id, records[i].id);
        EXPECT_EQ(back[i].patch_path, records[i].patch_path);
        EXPECT_EQ(back[i].label.malignancy_rating, records[i].label.malignancy_rating);
        EXPECT_EQ(back[i].label.malignancy_class, records[i].label.malignancy_class);
        for (int a = 0; a < 8; ++a) {
            EXPECT_EQ(back[i].label.attribute_ratings[a], records[i].label.attribute_ratings[a]);
        }
    }
    fs::remove_all(dir);
}

// --- dataset writer -------------------------------------------------------------------

TEST(WriteDataset, ProducesLoadablePatchesAndMasks) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "pnsamp_dataset_test";
    fs::remove_all(dir);
    auto records = build_manifest(4, 19, 0.5, 16);
    write_dataset(records, 16, default_presets(), dir.string());

    auto manifest = read_manifest((dir / "manifest.jsonl").string());
    ASSERT_EQ(manifest.size(), 4u);
    for (const auto& rec : manifest) {
        HuVolume pv = read_volume((dir / rec.patch_path).string());
        Tensor<float> patch = volume_as_patch(pv);
        EXPECT_EQ(patch.shape, (Shape{2, 16, 16, 16}));
        for (float v : patch.data) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
        HuVolume mask = read_volume((dir / rec.mask_path).string());
        EXPECT_EQ(mask.dims, (std::array<std::size_t, 3>{16, 16, 16}));
        std::size_t fg = 0;
        for (float v : mask.voxels) {
            EXPECT_TRUE(v == 0.0f || v == 1.0f);
            fg += v > 0 ? 1 : 0;
        }
        // the nodule is actually inside the crop
        EXPECT_GT(fg, 20u);
        EXPECT_LT(fg, mask.numel() / 2);
    }
    fs::remove_all(dir);
}
