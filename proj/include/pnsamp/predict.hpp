#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "pnsamp/net.hpp"
#include "pnsamp/phantom.hpp"
#include "pnsamp/train.hpp"

namespace pnsamp {

// ---------------------------------------------------------------------------
// Per-nodule evidence report: predicted mask, rating A/B pairs with an
// ok/miss marker (within +-1 counts as ok), the derived malignancy class,
// and optional mid-slice grayscale dumps.
// ---------------------------------------------------------------------------

struct PredictReport {
    Tensor<float> seg_prob;          // [1,1,s,s,s]
    std::array<int, 9> rating_pred{};    // 1..5 per head
    std::array<double, 9> confidence{};  // max softmax probability per head
    bool malignant_pred = false;
    std::optional<double> dice;      // when a ground-truth mask is given
    std::string text;                // byte-stable rendering
};

inline constexpr double kLowConfidence = 0.30;

template <typename T>
PredictReport predict(Model<T>& model, const Tensor<T>& patch, const Tensor<T>* mask,
                      const LabelRecord* truth) {
    if (patch.ndim() != 4) {
        throw ShapeError(detail::cat("predict: want a single patch [c,s,s,s], got ",
                                     shape_str(patch.shape)));
    }
    Tensor<T> batched = patch;
    batched.shape = {1, patch.shape[0], patch.shape[1], patch.shape[2], patch.shape[3]};
    auto out = forward_multitask(model, batched, /*training=*/false);

    PredictReport report;
    report.seg_prob = out.seg_prob.template cast<float>();
    Tensor<T> attr_probs = softmax(out.attribute_logits);
    Tensor<T> mal_probs = softmax(out.malignancy_logits);
    for (int a = 0; a < 9; ++a) {
        const T* row = attr_probs.data.data() + a * 5;
        report.rating_pred[a] = argmax_class(row, 5);
        report.confidence[a] = static_cast<double>(row[report.rating_pred[a] - 1]);
    }
    // the dedicated malignancy head drives the binary decision
    const int mal_class = argmax_class(mal_probs.data.data(), 5);
    report.malignant_pred = mal_class > 3;

    if (mask) {
        if (mask->numel() != report.seg_prob.numel()) {
            throw ShapeError(detail::cat("predict: mask ", shape_str(mask->shape),
                                         " vs segmentation ", shape_str(report.seg_prob.shape)));
        }
        report.dice = dice_coefficient(out.seg_prob, *mask);
    }

    std::array<int, 9> truth_class{};
    if (truth) truth_class = rating_classes(*truth);

    char buf[128];
    std::string text;
    std::snprintf(buf, sizeof(buf), "malignancy: %s (head rating %d, confidence %.4f)\n",
                  report.malignant_pred ? "malignant" : "benign", mal_class,
                  static_cast<double>(mal_probs[mal_class - 1]));
    text += buf;
    if (truth) {
        std::snprintf(buf, sizeof(buf), "malignancy truth: %s\n",
                      to_string(truth->malignancy_class));
        text += buf;
    }
    if (report.dice) {
        std::snprintf(buf, sizeof(buf), "dice vs ground truth: %.4f\n", *report.dice);
        text += buf;
    }
    text += truth ? "ratings (prediction/truth):\n" : "ratings (prediction):\n";
    for (int a = 0; a < 9; ++a) {
        const bool low = report.confidence[a] < kLowConfidence;
        if (truth) {
            const bool ok = std::abs(report.rating_pred[a] - truth_class[a]) <= 1;
            std::snprintf(buf, sizeof(buf), "  %-18s %d/%d %s%s\n", kRatingNames[a],
                          report.rating_pred[a], truth_class[a], ok ? "ok" : "miss",
                          low ? " (low confidence)" : "");
        } else {
            std::snprintf(buf, sizeof(buf), "  %-18s %d%s\n", kRatingNames[a],
                          report.rating_pred[a], low ? " (low confidence)" : "");
        }
        text += buf;
    }
    report.text = std::move(text);
    return report;
}

// ---------------------------------------------------------------------------
// Plain binary PGM (P5), one byte per pixel. Values are clamped to [0,1].
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const float* pixels, std::size_t h,
                      std::size_t w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(detail::cat("write_pgm: cannot open '", path, "'"));
    os << "P5\n" << w << " " << h << "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        const float v = pixels[i] < 0.0f ? 0.0f : (pixels[i] > 1.0f ? 1.0f : pixels[i]);
        os.put(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
    }
}

/// Mid-slice dumps: every input channel, the predicted mask (thresholded
/// probabilities) and, when given, the ground truth mask.
inline void dump_slices(const std::string& dir, const Tensor<float>& patch,
                        const Tensor<float>& seg_prob, const Tensor<float>* mask) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t c = patch.shape[0], s = patch.shape[1];
    const std::size_t mid = s / 2;
    for (std::size_t ch = 0; ch < c; ++ch) {
        write_pgm((fs::path(dir) / detail::cat("input_ch", ch, ".pgm")).string(),
                  patch.data.data() + (ch * s + mid) * s * s, s, s);
    }
    std::vector<float> pred(s * s);
    const float* prob_mid = seg_prob.data.data() + mid * s * s;
    for (std::size_t i = 0; i < s * s; ++i) pred[i] = prob_mid[i] >= 0.5f ? 1.0f : 0.0f;
    write_pgm((fs::path(dir) / "predicted_mask.pgm").string(), pred.data(), s, s);
    if (mask) {
        write_pgm((fs::path(dir) / "truth_mask.pgm").string(),
                  mask->data.data() + mid * s * s, s, s);
    }
}

}  // namespace pnsamp
