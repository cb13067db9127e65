#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnsamp/losses.hpp"
#include "pnsamp/net.hpp"
#include "pnsamp/optimizer.hpp"
#include "pnsamp/phantom.hpp"
#include "pnsamp/volume_io.hpp"

namespace pnsamp {

// ---------------------------------------------------------------------------
// In-memory dataset.
// ---------------------------------------------------------------------------

struct LoadedSample {
    std::string id;
    Tensor<float> patch;             // [in_channels, s, s, s]
    Tensor<float> mask;              // [1, s, s, s], binary
    std::array<int, 9> target0{};    // 0-based rating classes, malignancy last
    std::array<int, 9> truth_class{};  // 1-based rating classes
    bool malignant = false;
};

inline LoadedSample load_sample(const std::string& dataset_dir, const ManifestRecord& rec) {
    namespace fs = std::filesystem;
    LoadedSample s;
    s.id = rec.id;
    s.patch = volume_as_patch(read_volume((fs::path(dataset_dir) / rec.patch_path).string()),
                              rec.patch_path);
    HuVolume mv = read_volume((fs::path(dataset_dir) / rec.mask_path).string());
    s.mask = Tensor<float>({1, mv.dims[0], mv.dims[1], mv.dims[2]});
    for (std::size_t i = 0; i < mv.numel(); ++i) {
        const float v = mv.voxels[i];
        if (v != 0.0f && v != 1.0f) {
            throw ValueError(detail::cat("mask '", rec.mask_path, "' is not binary"));
        }
        s.mask[i] = v;
    }
    s.truth_class = rating_classes(rec.label);
    for (int a = 0; a < 9; ++a) s.target0[a] = s.truth_class[a] - 1;
    s.malignant = rec.label.malignancy_class == MalignancyClass::malignant;
    return s;
}

inline std::vector<LoadedSample> load_samples(const std::string& dataset_dir,
                                              const std::vector<ManifestRecord>& records) {
    std::vector<LoadedSample> out;
    out.reserve(records.size());
    for (const auto& rec : records) out.push_back(load_sample(dataset_dir, rec));
    return out;
}

// ---------------------------------------------------------------------------
// Fold planning: stratified by malignancy class, deterministic in the seed.
// Benign indices deal round-robin from fold 0; malignant ones continue the
// deal, which keeps fold sizes within one of each other.
// ---------------------------------------------------------------------------

struct FoldPlan {
    std::size_t n_folds = 5;
    std::vector<std::vector<std::size_t>> folds;  // sample indices per fold

    std::vector<std::size_t> train_indices(std::size_t test_fold) const {
        std::vector<std::size_t> out;
        for (std::size_t f = 0; f < folds.size(); ++f) {
            if (f == test_fold) continue;
            out.insert(out.end(), folds[f].begin(), folds[f].end());
        }
        std::sort(out.begin(), out.end());
        return out;
    }
};

template <typename Sample>
FoldPlan make_fold_plan(const std::vector<Sample>& samples, std::size_t n_folds,
                        std::uint64_t seed) {
    if (n_folds < 2) throw ValueError("make_fold_plan: need at least 2 folds");
    if (samples.size() < n_folds) {
        throw ValueError(detail::cat("make_fold_plan: ", samples.size(), " samples for ",
                                     n_folds, " folds"));
    }
    std::vector<std::size_t> benign, malignant;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        (samples[i].malignant ? malignant : benign).push_back(i);
    }
    Rng rng(seed ^ 0xF01D5EEDULL);
    shuffle(benign, rng);
    shuffle(malignant, rng);

    FoldPlan plan;
    plan.n_folds = n_folds;
    plan.folds.assign(n_folds, {});
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < benign.size(); ++i, ++cursor) {
        plan.folds[cursor % n_folds].push_back(benign[i]);
    }
    for (std::size_t i = 0; i < malignant.size(); ++i, ++cursor) {
        plan.folds[cursor % n_folds].push_back(malignant[i]);
    }
    for (auto& fold : plan.folds) std::sort(fold.begin(), fold.end());
    return plan;
}

/// Stratified validation split: ~fraction of each class, at least one sample
/// when the fraction is nonzero. Returns (train, validation) index lists.
template <typename Sample>
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    const std::vector<Sample>& samples, const std::vector<std::size_t>& pool, double fraction,
    std::uint64_t seed) {
    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    if (fraction <= 0.0) {
        out.first = pool;
        return out;
    }
    std::vector<std::size_t> benign, malignant;
    for (std::size_t idx : pool) (samples[idx].malignant ? malignant : benign).push_back(idx);
    Rng rng(seed ^ 0x7a11da7ULL);
    shuffle(benign, rng);
    shuffle(malignant, rng);
    auto take = [&](std::vector<std::size_t>& cls) {
        const std::size_t want =
            static_cast<std::size_t>(std::llround(fraction * static_cast<double>(cls.size())));
        for (std::size_t i = 0; i < cls.size(); ++i) {
            (i < want ? out.second : out.first).push_back(cls[i]);
        }
    };
    take(benign);
    take(malignant);
    if (out.second.empty() && out.first.size() > 1) {
        out.second.push_back(out.first.back());
        out.first.pop_back();
    }
    std::sort(out.first.begin(), out.first.end());
    std::sort(out.second.begin(), out.second.end());
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct EvalMetrics {
    double loss = 0;
    double dice = 0;
    std::array<double, 9> off_by_one{};
    double mean_off_by_one = 0;
    double binary_accuracy = 0;
    double exact_malignancy_accuracy = 0;
    std::size_t count = 0;
};

template <typename T>
EvalMetrics evaluate(Model<T>& model, const std::vector<LoadedSample>& samples,
                     const std::vector<std::size_t>& indices, const LossConfig& loss_cfg) {
    if (indices.empty()) throw ValueError("evaluate: no samples");
    Graph<T> g;
    build_forward_graph(model, g, 1);
    g.set_training(false);

    EvalMetrics m;
    m.count = indices.size();
    std::array<std::vector<int>, 9> pred_classes, true_classes;
    std::vector<int> bin_pred, bin_true;
    std::vector<double> dices, losses;

    const std::size_t s = model.config.patch_size;
    for (std::size_t idx : indices) {
        const LoadedSample& sample = samples[idx];
        Tensor<T> patch({1, model.config.in_channels, s, s, s});
        for (std::size_t i = 0; i < patch.numel(); ++i) {
            patch[i] = static_cast<T>(sample.patch[i]);
        }
        auto out = g.forward({{"patch", patch}});
        const Tensor<T>& seg = out.at("seg_prob");
        const Tensor<T>& attr = out.at("attribute_logits");
        const Tensor<T>& mal = out.at("malignancy_logits");

        Tensor<T> mask({1, 1, s, s, s});
        for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = static_cast<T>(sample.mask[i]);
        dices.push_back(dice_coefficient(seg, mask));

        std::vector<std::vector<int>> attr_targets(1, std::vector<int>(9));
        for (int a = 0; a < 9; ++a) attr_targets[0][a] = sample.target0[a];
        losses.push_back(multitask_loss(seg, mask, attr, attr_targets, mal,
                                        {sample.target0[8]}, loss_cfg)
                             .total);

        for (int a = 0; a < 9; ++a) {
            const int pred = argmax_class(attr.data.data() + a * 5, 5);
            pred_classes[a].push_back(pred);
            true_classes[a].push_back(sample.truth_class[a]);
        }
        const int mal_class = argmax_class(mal.data.data(), 5);
        bin_pred.push_back(mal_class > 3 ? 1 : 0);
        bin_true.push_back(sample.malignant ? 1 : 0);
    }

    m.dice = mean(dices);
    m.loss = mean(losses);
    for (int a = 0; a < 9; ++a) {
        m.off_by_one[a] = off_by_one_accuracy(pred_classes[a], true_classes[a]);
        m.mean_off_by_one += m.off_by_one[a];
    }
    m.mean_off_by_one /= 9.0;
    m.binary_accuracy = exact_accuracy(bin_pred, bin_true);
    m.exact_malignancy_accuracy = exact_accuracy(pred_classes[8], true_classes[8]);
    return m;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::size_t epochs = 30;
    std::size_t batch_size = 8;  // must be >= 2 for batch norm
    double lr = 1e-3;
    std::uint64_t seed = 1;
    std::size_t patience = 10;   // early stop on stale validation loss
    double validation_fraction = 0.1;
    std::string out_dir;         // when set: metrics.jsonl and best.ckpt
};

struct TrainResult {
    NetConfig config;
    std::vector<std::string> log_lines;
    double best_val_loss = 0;
    std::size_t best_epoch = 0;
    std::uint64_t steps = 0;
    bool diverged = false;
    std::optional<EvalMetrics> final_val;

    // best-validation parameters, restorable into a freshly built model
    std::map<std::string, Tensor<float>> best_params;

    Model<float> best_model() const {
        Model<float> m = build_model<float>(config, 0);
        m.visit_params([&](const std::string& name, Tensor<float>& t, bool) {
            t.data = best_params.at(name).data;
        });
        return m;
    }
};

namespace detail {

inline std::map<std::string, Tensor<float>> snapshot_params(Model<float>& model) {
    std::map<std::string, Tensor<float>> out;
    model.visit_params([&](const std::string& name, Tensor<float>& t, bool) {
        Tensor<float> copy(t.shape, t.data);
        out.emplace(name, std::move(copy));
    });
    return out;
}

}  // namespace detail

inline TrainResult train(const NetConfig& config, const LossConfig& loss_cfg,
                         const std::vector<LoadedSample>& samples,
                         const std::vector<std::size_t>& pool, const TrainOptions& opt) {
    if (pool.empty()) throw ValueError("train: empty training pool");
    if (opt.batch_size < 2) throw ValueError("train: batch size must be >= 2 for batch norm");
    config.validate();

    auto [train_ids, val_ids] =
        split_validation(samples, pool, opt.validation_fraction, opt.seed);
    if (train_ids.size() < 2) throw ValueError("train: needs at least 2 training samples");
    const std::size_t bs = std::min(opt.batch_size, train_ids.size());

    Model<float> model = build_model<float>(config, opt.seed);
    Graph<float> graph;
    build_training_graph(model, graph, bs, loss_cfg);
    graph.set_training(true);
    AdamConfig<float> adam_cfg;
    adam_cfg.lr = static_cast<float>(opt.lr);
    Adam<float> adam(model, adam_cfg);

    TrainResult result;
    result.config = config;

    {
        nlohmann::ordered_json header;
        header["seed"] = opt.seed;
        header["train_count"] = train_ids.size();
        header["val_count"] = val_ids.size();
        header["train_ids"] = nlohmann::json::array();
        for (auto i : train_ids) header["train_ids"].push_back(samples[i].id);
        header["val_ids"] = nlohmann::json::array();
        for (auto i : val_ids) header["val_ids"].push_back(samples[i].id);
        result.log_lines.push_back(header.dump());
    }

    const std::size_t s = config.patch_size;
    Tensor<float> patch({bs, config.in_channels, s, s, s});
    Tensor<float> mask({bs, 1, s, s, s});
    Tensor<float> attr_targets({bs * config.attribute_count});
    Tensor<float> mal_target({bs});

    Rng shuffle_rng(opt.seed ^ 0x0DDB17E5ULL);
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    result.best_params = detail::snapshot_params(model);
    bool stop = false;

    for (std::size_t epoch = 1; epoch <= opt.epochs && !stop; ++epoch) {
        std::vector<std::size_t> order = train_ids;
        shuffle(order, shuffle_rng);

        double ep_total = 0, ep_dice = 0, ep_attr = 0, ep_mal = 0;
        std::size_t ep_batches = 0;
        // trailing partial batches are dropped; the per-epoch shuffle rotates
        // which samples sit there
        for (std::size_t start = 0; start + bs <= order.size(); start += bs) {
            for (std::size_t b = 0; b < bs; ++b) {
                const LoadedSample& sample = samples[order[start + b]];
                std::copy(sample.patch.data.begin(), sample.patch.data.end(),
                          patch.data.begin() + b * sample.patch.numel());
                std::copy(sample.mask.data.begin(), sample.mask.data.end(),
                          mask.data.begin() + b * sample.mask.numel());
                for (std::size_t a = 0; a < 9; ++a) {
                    attr_targets[b * 9 + a] = static_cast<float>(sample.target0[a]);
                }
                mal_target[b] = static_cast<float>(sample.target0[8]);
            }
            auto out = graph.forward({{"patch", patch},
                                      {"mask", mask},
                                      {"attr_targets", attr_targets},
                                      {"mal_target", mal_target}});
            const double total = out.at("loss_total")[0];
            if (!std::isfinite(total)) {
                result.diverged = true;
                stop = true;
                break;
            }
            ep_total += total;
            ep_dice += out.at("loss_dice")[0];
            ep_attr += out.at("loss_attr_ce")[0];
            ep_mal += out.at("loss_mal_ce")[0];
            ++ep_batches;

            adam.zero_grad();
            graph.backward({{"loss_total", Tensor<float>::scalar(1.0f)}});
            try {
                adam.step();
            } catch (const ValueError&) {
                result.diverged = true;
                stop = true;
                break;
            }
            ++result.steps;
        }
        if (ep_batches == 0 && !stop) {
            throw ValueError("train: no full batch fits the training set");
        }
        if (stop) break;

        nlohmann::ordered_json line;
        line["epoch"] = epoch;
        line["train"] = {{"total", ep_total / ep_batches},
                         {"dice", ep_dice / ep_batches},
                         {"attr_ce", ep_attr / ep_batches},
                         {"mal_ce", ep_mal / ep_batches}};
        bool improved = false;
        if (!val_ids.empty()) {
            EvalMetrics val = evaluate(model, samples, val_ids, loss_cfg);
            result.final_val = val;
            line["val"] = {{"loss", val.loss},
                           {"dice", val.dice},
                           {"off_by_one", val.off_by_one},
                           {"mean_off_by_one", val.mean_off_by_one},
                           {"binary_accuracy", val.binary_accuracy}};
            if (val.loss < best_val) {
                best_val = val.loss;
                best_epoch = epoch;
                result.best_params = detail::snapshot_params(model);
                improved = true;
            }
            if (opt.patience > 0 && epoch - best_epoch >= opt.patience) stop = true;
        } else {
            // no validation set: the final parameters are the result
            best_epoch = epoch;
            result.best_params = detail::snapshot_params(model);
            improved = true;
        }
        line["best"] = improved;
        result.log_lines.push_back(line.dump());
    }

    result.best_val_loss = best_val;
    result.best_epoch = best_epoch;

    if (!opt.out_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(opt.out_dir);
        std::ofstream log((fs::path(opt.out_dir) / "metrics.jsonl").string(), std::ios::binary);
        for (const auto& l : result.log_lines) log << l << "\n";
        Model<float> best = result.best_model();
        save_checkpoint(best, (fs::path(opt.out_dir) / "best.ckpt").string(), result.steps);
    }
    return result;
}

inline TrainResult train(const NetConfig& config, const LossConfig& loss_cfg,
                         const std::vector<LoadedSample>& samples, const TrainOptions& opt) {
    std::vector<std::size_t> pool(samples.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    return train(config, loss_cfg, samples, pool, opt);
}

// ---------------------------------------------------------------------------
// k-fold cross-validation.
// ---------------------------------------------------------------------------

struct CvFoldResult {
    std::size_t fold = 0;
    EvalMetrics test;
};

struct CvResult {
    FoldPlan plan;
    std::vector<CvFoldResult> folds;
    double dice_mean = 0, dice_sem = 0;
    double binary_accuracy_mean = 0, binary_accuracy_sem = 0;
    double off_by_one_mean = 0, off_by_one_sem = 0;

    nlohmann::ordered_json summary() const {
        nlohmann::ordered_json j;
        j["folds"] = nlohmann::json::array();
        for (const auto& f : folds) {
            j["folds"].push_back({{"fold", f.fold},
                                  {"dice", f.test.dice},
                                  {"binary_accuracy", f.test.binary_accuracy},
                                  {"mean_off_by_one", f.test.mean_off_by_one}});
        }
        j["dice"] = {{"mean", dice_mean}, {"sem", dice_sem}};
        j["binary_accuracy"] = {{"mean", binary_accuracy_mean}, {"sem", binary_accuracy_sem}};
        j["mean_off_by_one"] = {{"mean", off_by_one_mean}, {"sem", off_by_one_sem}};
        return j;
    }
};

inline CvResult crossvalidate(const NetConfig& config, const LossConfig& loss_cfg,
                              const std::vector<LoadedSample>& samples, std::size_t n_folds,
                              const TrainOptions& base_opt) {
    CvResult result;
    result.plan = make_fold_plan(samples, n_folds, base_opt.seed);
    std::vector<double> dices, bins, obos;
    for (std::size_t fold = 0; fold < n_folds; ++fold) {
        TrainOptions opt = base_opt;
        opt.seed = base_opt.seed + fold;
        opt.out_dir = base_opt.out_dir.empty()
                          ? ""
                          : detail::cat(base_opt.out_dir, "/fold-", fold);
        TrainResult tr = train(config, loss_cfg, samples, result.plan.train_indices(fold), opt);
        Model<float> best = tr.best_model();
        CvFoldResult fr;
        fr.fold = fold;
        fr.test = evaluate(best, samples, result.plan.folds[fold], loss_cfg);
        dices.push_back(fr.test.dice);
        bins.push_back(fr.test.binary_accuracy);
        obos.push_back(fr.test.mean_off_by_one);
        result.folds.push_back(std::move(fr));
    }
    result.dice_mean = mean(dices);
    result.dice_sem = sem(dices);
    result.binary_accuracy_mean = mean(bins);
    result.binary_accuracy_sem = sem(bins);
    result.off_by_one_mean = mean(obos);
    result.off_by_one_sem = sem(obos);
    return result;
}

}  // namespace pnsamp
