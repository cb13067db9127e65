#pragma once

#include <cmath>
#include <vector>

#include "pnsamp/autodiff.hpp"
#include "pnsamp/tensor.hpp"

namespace pnsamp {

struct LossConfig {
    double epsilon = 1e-5;   // Dice smoothing, rescues empty masks
    double lambda = 1.0;     // classification weight
    double seg_weight = 1.0; // 0 switches the segmentation loss off (ablation)
};

// ---------------------------------------------------------------------------
// Soft Dice loss over probabilities p against a binary ground truth g:
//   L = 1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)
// The dice coefficient is 1 - L.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_dice_args(const Tensor<T>& p, const Tensor<T>& g, const std::string& where) {
    if (p.shape != g.shape) {
        throw ShapeError(cat(where, ": p ", shape_str(p.shape), " vs g ", shape_str(g.shape)));
    }
    for (const T v : p.data) {
        if (!(v >= T(0) && v <= T(1))) {
            throw ValueError(cat(where, ": probabilities must lie in [0,1]"));
        }
    }
    for (const T v : g.data) {
        if (v != T(0) && v != T(1)) {
            throw ValueError(cat(where, ": ground truth must be binary"));
        }
    }
}

}  // namespace detail

template <typename T>
T dice_loss(const Tensor<T>& p, const Tensor<T>& g, T epsilon,
            const std::string& where = "dice_loss") {
    detail::check_dice_args(p, g, where);
    T inter = T(0), psq = T(0), gsq = T(0);
    for (std::size_t i = 0; i < p.numel(); ++i) {
        inter += p[i] * g[i];
        psq += p[i] * p[i];
        gsq += g[i] * g[i];
    }
    return T(1) - (T(2) * inter + epsilon) / (psq + gsq + epsilon);
}

/// Evaluation-time dice coefficient of a thresholded prediction.
template <typename T>
double dice_coefficient(const Tensor<T>& prob, const Tensor<T>& truth, double threshold = 0.5,
                        double epsilon = 1e-5) {
    if (prob.shape != truth.shape) {
        throw ShapeError(detail::cat("dice_coefficient: ", shape_str(prob.shape), " vs ",
                                     shape_str(truth.shape)));
    }
    double inter = 0, psum = 0, gsum = 0;
    for (std::size_t i = 0; i < prob.numel(); ++i) {
        const double pv = prob[i] >= threshold ? 1.0 : 0.0;
        const double gv = static_cast<double>(truth[i]);
        inter += pv * gv;
        psum += pv;
        gsum += gv;
    }
    return (2.0 * inter + epsilon) / (psum + gsum + epsilon);
}

/// Inputs: p (probabilities), g (binary mask). Output: scalar.
template <typename T>
class DiceLossOp : public Op<T> {
public:
    explicit DiceLossOp(T epsilon) : epsilon_(epsilon) {}
    const char* kind() const override { return "dice_loss"; }

    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        const Tensor<T>& p = g.value(in[0]);
        const Tensor<T>& gt = g.value(in[1]);
        return Tensor<T>::scalar(dice_loss(p, gt, epsilon_, g.label_of(self)));
    }

    void backward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        const Tensor<T>& p = g.value(in[0]);
        const Tensor<T>& gt = g.value(in[1]);
        const T dy = g.grad_of(self)[0];
        T inter = T(0), psq = T(0), gsq = T(0);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            inter += p[i] * gt[i];
            psq += p[i] * p[i];
            gsq += gt[i] * gt[i];
        }
        const T num = T(2) * inter + epsilon_;
        const T den = psq + gsq + epsilon_;
        if (g.node_needs_grad(in[0])) {
            std::vector<T>& dp = g.grad_of(in[0]);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                dp[i] += dy * T(2) * (p[i] * num - gt[i] * den) / (den * den);
            }
        }
        if (g.node_needs_grad(in[1])) {
            std::vector<T>& dg = g.grad_of(in[1]);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                dg[i] += dy * T(2) * (gt[i] * num - p[i] * den) / (den * den);
            }
        }
    }

private:
    T epsilon_;
};

template <typename T>
NodeId make_dice_loss(Graph<T>& g, NodeId p, NodeId gt, T epsilon) {
    return g.add_node(std::make_unique<DiceLossOp<T>>(epsilon), {p, gt});
}

// ---------------------------------------------------------------------------
// Categorical cross-entropy, batch mean, computed in log-space.
// ---------------------------------------------------------------------------

template <typename T>
T categorical_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                            const std::string& where = "cross_entropy") {
    if (logits.ndim() != 2) {
        throw ShapeError(detail::cat(where, ": logits must be [n,c], got ",
                                     shape_str(logits.shape)));
    }
    const std::size_t n = logits.shape[0], c = logits.shape[1];
    if (targets.size() != n) {
        throw ShapeError(detail::cat(where, ": ", targets.size(), " targets for ", n, " rows"));
    }
    T total = T(0);
    for (std::size_t r = 0; r < n; ++r) {
        const int t = targets[r];
        if (t < 0 || t >= static_cast<int>(c)) {
            throw ValueError(detail::cat(where, ": target ", t, " out of [0,", c, ")"));
        }
        const T* row = logits.data.data() + r * c;
        T mx = row[0];
        for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
        T lse = T(0);
        for (std::size_t i = 0; i < c; ++i) lse += std::exp(row[i] - mx);
        total += mx + std::log(lse) - row[t];
    }
    return total / static_cast<T>(n);
}

/// Inputs: logits [n,c], targets [n] (integer-valued class indices stored as
/// reals so they ride the ordinary input mechanism). Output: scalar mean.
template <typename T>
class CrossEntropyOp : public Op<T> {
public:
    const char* kind() const override { return "cross_entropy"; }

    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        const Tensor<T>& logits = g.value(in[0]);
        targets_ = decode_targets(g.value(in[1]), logits, g.label_of(self));
        return Tensor<T>::scalar(categorical_cross_entropy(logits, targets_, g.label_of(self)));
    }

    void backward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        if (!g.node_needs_grad(in[0])) return;
        const Tensor<T>& logits = g.value(in[0]);
        const T dy = g.grad_of(self)[0];
        std::vector<T>& dx = g.grad_of(in[0]);
        const std::size_t n = logits.shape[0], c = logits.shape[1];
        const T scale = dy / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r) {
            const T* row = logits.data.data() + r * c;
            T mx = row[0];
            for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
            T sum = T(0);
            for (std::size_t i = 0; i < c; ++i) sum += std::exp(row[i] - mx);
            T* dr = dx.data() + r * c;
            for (std::size_t i = 0; i < c; ++i) {
                const T soft = std::exp(row[i] - mx) / sum;
                dr[i] += scale * (soft - (static_cast<int>(i) == targets_[r] ? T(1) : T(0)));
            }
        }
    }

private:
    static std::vector<int> decode_targets(const Tensor<T>& t, const Tensor<T>& logits,
                                           const std::string& where) {
        if (t.numel() != logits.shape[0]) {
            throw ShapeError(detail::cat(where, ": ", t.numel(), " targets for ",
                                         logits.shape[0], " rows"));
        }
        std::vector<int> out(t.numel());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double v = static_cast<double>(t[i]);
            const double r = std::floor(v + 0.5);
            if (std::abs(v - r) > 1e-6) {
                throw ValueError(detail::cat(where, ": non-integral target ", v));
            }
            out[i] = static_cast<int>(r);
        }
        return out;
    }

    std::vector<int> targets_;
};

template <typename T>
NodeId make_cross_entropy(Graph<T>& g, NodeId logits, NodeId targets) {
    return g.add_node(std::make_unique<CrossEntropyOp<T>>(), {logits, targets});
}

// ---------------------------------------------------------------------------
// Multi-task combination:
//   L = seg_weight * dice + lambda * (mean of attribute CE terms + malignancy CE)
// Attribute CE terms are averaged, not summed, so lambda keeps its meaning
// regardless of the attribute count.
// ---------------------------------------------------------------------------

struct MultitaskBreakdown {
    double total = 0;
    double dice = 0;
    double attribute_ce = 0;             // mean over attributes
    std::vector<double> per_attribute;   // one CE per attribute head
    double malignancy_ce = 0;
};

template <typename T>
MultitaskBreakdown multitask_loss(const Tensor<T>& seg_prob, const Tensor<T>& mask,
                                  const Tensor<T>& attribute_logits,
                                  const std::vector<std::vector<int>>& attribute_targets,
                                  const Tensor<T>& malignancy_logits,
                                  const std::vector<int>& malignancy_target,
                                  const LossConfig& cfg) {
    if (attribute_logits.ndim() != 3) {
        throw ShapeError(detail::cat("multitask_loss: attribute logits must be [n,a,c], got ",
                                     shape_str(attribute_logits.shape)));
    }
    const std::size_t n = attribute_logits.shape[0];
    const std::size_t attrs = attribute_logits.shape[1];
    const std::size_t classes = attribute_logits.shape[2];

    MultitaskBreakdown out;
    out.dice = static_cast<double>(dice_loss(seg_prob, mask, static_cast<T>(cfg.epsilon)));
    out.per_attribute.resize(attrs);
    for (std::size_t a = 0; a < attrs; ++a) {
        Tensor<T> slice({n, classes});
        std::vector<int> targets(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t cidx = 0; cidx < classes; ++cidx) {
                slice[r * classes + cidx] = attribute_logits[(r * attrs + a) * classes + cidx];
            }
            targets[r] = attribute_targets[r][a];
        }
        out.per_attribute[a] = static_cast<double>(categorical_cross_entropy(slice, targets));
        out.attribute_ce += out.per_attribute[a];
    }
    out.attribute_ce /= static_cast<double>(attrs);
    out.malignancy_ce =
        static_cast<double>(categorical_cross_entropy(malignancy_logits, malignancy_target));
    out.total = cfg.seg_weight * out.dice + cfg.lambda * (out.attribute_ce + out.malignancy_ce);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation metrics.
// ---------------------------------------------------------------------------

/// Fraction of predictions within +-1 of the true rating class.
inline double off_by_one_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) {
        throw ShapeError(detail::cat("off_by_one_accuracy: ", pred.size(), " vs ", truth.size()));
    }
    if (pred.empty()) throw ValueError("off_by_one_accuracy: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (std::abs(pred[i] - truth[i]) <= 1) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline double exact_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) {
        throw ShapeError(detail::cat("exact_accuracy: ", pred.size(), " vs ", truth.size()));
    }
    if (pred.empty()) throw ValueError("exact_accuracy: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == truth[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Standard error of the mean: sample standard deviation / sqrt(n).
inline double sem(const std::vector<double>& values) {
    const std::size_t n = values.size();
    if (n < 2) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    return sd / std::sqrt(static_cast<double>(n));
}

inline double mean(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    double m = 0.0;
    for (double v : values) m += v;
    return m / static_cast<double>(values.size());
}

}  // namespace pnsamp
