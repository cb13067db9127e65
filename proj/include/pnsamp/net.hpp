#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnsamp/layers.hpp"
#include "pnsamp/losses.hpp"

namespace pnsamp {

// ---------------------------------------------------------------------------
// Architecture configuration. The encoder ladder is base_filters * [1,2,4,8];
// at the paper scale (patch 64, two windows) base_filters 22 puts the
// trainable parameter count at ~1.5M.
// ---------------------------------------------------------------------------

struct NetConfig {
    std::size_t patch_size = 64;
    std::size_t in_channels = 2;
    std::size_t base_filters = 22;
    std::array<std::size_t, 4> encoder_filters{0, 0, 0, 0};  // derived when zero
    std::array<std::size_t, 4> subnet_filters{8, 16, 32, 64};
    std::size_t fusion_dim = 128;
    std::size_t attribute_count = 9;
    std::size_t rating_classes = 5;
    double trade_off_lambda = 1.0;

    std::array<std::size_t, 4> filters() const {
        if (encoder_filters[0] != 0) return encoder_filters;
        return {base_filters, 2 * base_filters, 4 * base_filters, 8 * base_filters};
    }

    void validate() const {
        if (patch_size == 0 || patch_size % 16 != 0) {
            throw ValueError(detail::cat("NetConfig: patch_size ", patch_size,
                                         " must be divisible by 16"));
        }
        if (in_channels == 0) throw ValueError("NetConfig: in_channels must be >= 1");
        if (base_filters == 0 && encoder_filters[0] == 0) {
            throw ValueError("NetConfig: no encoder filters");
        }
        if (attribute_count != 9) {
            throw ValueError(detail::cat("NetConfig: attribute_count must be 9, got ",
                                         attribute_count));
        }
        if (rating_classes != 5) {
            throw ValueError(detail::cat("NetConfig: rating_classes must be 5, got ",
                                         rating_classes));
        }
        if (!(trade_off_lambda >= 0)) {
            throw ValueError("NetConfig: trade_off_lambda must be >= 0");
        }
    }

    bool operator==(const NetConfig& o) const {
        return patch_size == o.patch_size && in_channels == o.in_channels &&
               base_filters == o.base_filters && filters() == o.filters() &&
               subnet_filters == o.subnet_filters && fusion_dim == o.fusion_dim &&
               attribute_count == o.attribute_count && rating_classes == o.rating_classes &&
               trade_off_lambda == o.trade_off_lambda;
    }
};

inline NetConfig paper_scale_config() {
    NetConfig c;
    c.patch_size = 64;
    c.in_channels = 2;
    c.base_filters = 22;
    return c;
}

inline NetConfig desk_scale_config(std::size_t patch_size = 16, std::size_t base_filters = 8) {
    NetConfig c;
    c.patch_size = patch_size;
    c.in_channels = 2;
    c.base_filters = base_filters;
    return c;
}

inline void to_json(nlohmann::json& j, const NetConfig& c) {
    j = nlohmann::json{{"patch_size", c.patch_size},
                       {"in_channels", c.in_channels},
                       {"base_filters", c.base_filters},
                       {"encoder_filters", c.filters()},
                       {"subnet_filters", c.subnet_filters},
                       {"fusion_dim", c.fusion_dim},
                       {"attribute_count", c.attribute_count},
                       {"rating_classes", c.rating_classes},
                       {"trade_off_lambda", c.trade_off_lambda}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
    j.at("patch_size").get_to(c.patch_size);
    j.at("in_channels").get_to(c.in_channels);
    j.at("base_filters").get_to(c.base_filters);
    j.at("encoder_filters").get_to(c.encoder_filters);
    j.at("subnet_filters").get_to(c.subnet_filters);
    j.at("fusion_dim").get_to(c.fusion_dim);
    j.at("attribute_count").get_to(c.attribute_count);
    j.at("rating_classes").get_to(c.rating_classes);
    j.at("trade_off_lambda").get_to(c.trade_off_lambda);
}

// ---------------------------------------------------------------------------
// Model: named parameter storage. Graphs bind raw pointers into these
// structs, so a model must stay put while any graph built on it is alive.
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBlock {
    BatchNormParams<T> bn;
    Conv3dParams<T> conv;
};

template <typename T>
struct Model {
    NetConfig config;
    std::array<ConvBlock<T>, 4> encoder;
    std::array<ConvBlock<T>, 4> decoder;
    Conv3dParams<T> seg_head;
    std::array<Conv3dParams<T>, 4> subnet;
    DenseParams<T> fuse;
    DenseParams<T> attribute_head;
    DenseParams<T> malignancy_head;

    // Fixed iteration order: it defines checkpoint layout and init order.
    void visit_params(const std::function<void(const std::string&, Tensor<T>&, bool)>& fn) {
        auto block = [&](const std::string& prefix, ConvBlock<T>& b) {
            fn(prefix + ".bn.gamma", b.bn.gamma, true);
            fn(prefix + ".bn.beta", b.bn.beta, true);
            fn(prefix + ".bn.running_mean", b.bn.running_mean, false);
            fn(prefix + ".bn.running_var", b.bn.running_var, false);
            fn(prefix + ".conv.kernel", b.conv.kernel, true);
            fn(prefix + ".conv.bias", b.conv.bias, true);
        };
        for (int i = 0; i < 4; ++i) block(detail::cat("enc", i + 1), encoder[i]);
        for (int i = 0; i < 4; ++i) block(detail::cat("dec", i + 1), decoder[i]);
        fn("seg_head.kernel", seg_head.kernel, true);
        fn("seg_head.bias", seg_head.bias, true);
        for (int i = 0; i < 4; ++i) {
            fn(detail::cat("subnet", i + 1, ".kernel"), subnet[i].kernel, true);
            fn(detail::cat("subnet", i + 1, ".bias"), subnet[i].bias, true);
        }
        fn("fuse.weight", fuse.weight, true);
        fn("fuse.bias", fuse.bias, true);
        fn("attr.weight", attribute_head.weight, true);
        fn("attr.bias", attribute_head.bias, true);
        fn("malignancy.weight", malignancy_head.weight, true);
        fn("malignancy.bias", malignancy_head.bias, true);
    }
};

/// Trainable element count; batch-norm running statistics excluded.
template <typename T>
std::size_t count_parameters(Model<T>& model) {
    std::size_t total = 0;
    model.visit_params([&](const std::string&, Tensor<T>& t, bool trainable) {
        if (trainable) total += t.data.size();
    });
    return total;
}

template <typename T>
Model<T> build_model(const NetConfig& config, std::uint64_t seed) {
    config.validate();
    Model<T> m;
    m.config = config;
    Rng rng(seed);
    const auto f = config.filters();

    std::array<std::size_t, 4> enc_in = {config.in_channels, f[0], f[1], f[2]};
    for (int i = 0; i < 4; ++i) {
        m.encoder[i].bn = make_batchnorm_params<T>(enc_in[i]);
        m.encoder[i].conv = make_conv3d_params<T>(f[i], enc_in[i], 3, rng);
    }
    // decoder consumes the up-pooled features concatenated with the matching
    // encoder pre-pool map (except the first block, straight off the bottleneck)
    const std::array<std::size_t, 4> dec_in = {f[3], f[2] + f[3], f[1] + f[2], f[0] + f[1]};
    const std::array<std::size_t, 4> dec_out = {f[2], f[1], f[0], f[0]};
    for (int i = 0; i < 4; ++i) {
        m.decoder[i].bn = make_batchnorm_params<T>(dec_in[i]);
        m.decoder[i].conv = make_conv3d_params<T>(dec_out[i], dec_in[i], 3, rng);
    }
    m.seg_head = make_conv3d_params<T>(1, f[0] + f[0], 1, rng);

    const auto& sf = config.subnet_filters;
    std::array<std::size_t, 4> sub_in = {1, sf[0], sf[1], sf[2]};
    for (int i = 0; i < 4; ++i) {
        m.subnet[i] = make_conv3d_params<T>(sf[i], sub_in[i], 3, rng);
    }
    const std::size_t fused_in = f[3] + sf[3];
    m.fuse = make_dense_params<T>(config.fusion_dim, fused_in, rng);
    m.attribute_head = make_dense_params<T>(
        config.attribute_count * config.rating_classes, config.fusion_dim, rng);
    m.malignancy_head = make_dense_params<T>(config.rating_classes, config.fusion_dim, rng);
    return m;
}

// ---------------------------------------------------------------------------
// Graph assembly.
// ---------------------------------------------------------------------------

/// Fig.-1 style forward pass: 4-block encoder, 4-block decoder with skip
/// concatenations, sigmoid segmentation head, then the two-way classification
/// pathway (global-average-pooled bottleneck + a 4-conv sub-net reading the
/// predicted segmentation), FC fusion, attribute heads and malignancy head.
/// Declares input "patch" and outputs "seg_prob", "attribute_logits",
/// "malignancy_logits".
template <typename T>
void build_forward_graph(Model<T>& m, Graph<T>& g, std::size_t batch) {
    const NetConfig& cfg = m.config;
    cfg.validate();
    const std::size_t s = cfg.patch_size;
    NodeId x = g.input("patch", {batch, cfg.in_channels, s, s, s});

    // encoder: 4 x [BN -> conv -> ELU -> maxpool], keeping pre-pool maps
    std::array<NodeId, 4> pre_pool{};
    NodeId cur = x;
    for (int i = 0; i < 4; ++i) {
        const std::string name = detail::cat("enc", i + 1);
        NodeId bn = make_batchnorm(g, cur, m.encoder[i].bn, name + ".bn");
        NodeId conv = make_conv3d(g, bn, m.encoder[i].conv, name + ".conv");
        NodeId act = make_elu(g, conv);
        pre_pool[i] = act;
        cur = make_maxpool3d(g, act);
    }
    const NodeId bottleneck = cur;

    // decoder: 4 x [BN -> conv -> ELU -> uppool], concatenating the matching
    // encoder map after each up-pooling
    for (int i = 0; i < 4; ++i) {
        const std::string name = detail::cat("dec", i + 1);
        NodeId bn = make_batchnorm(g, cur, m.decoder[i].bn, name + ".bn");
        NodeId conv = make_conv3d(g, bn, m.decoder[i].conv, name + ".conv");
        NodeId act = make_elu(g, conv);
        NodeId up = make_uppool3d(g, act);
        cur = make_concat_channels<T>(g, {up, pre_pool[3 - i]});
    }
    NodeId seg_logits = make_conv3d(g, cur, m.seg_head, "seg_head");
    NodeId seg_prob = make_sigmoid(g, seg_logits);
    g.mark_output("seg_prob", seg_prob);

    // pathway A: semantic features off the bottleneck
    NodeId feat_a = make_global_avg_pool(g, bottleneck);

    // pathway B: sub-net over the predicted segmentation
    NodeId sub = seg_prob;
    for (int i = 0; i < 4; ++i) {
        NodeId conv = make_conv3d(g, sub, m.subnet[i], detail::cat("subnet", i + 1));
        sub = make_maxpool3d(g, make_elu(g, conv));
    }
    NodeId feat_b = make_global_avg_pool(g, sub);

    NodeId fused = make_concat_channels<T>(g, {feat_a, feat_b});
    NodeId feat = make_elu(g, make_dense(g, fused, m.fuse, "fuse"));

    NodeId attr_flat = make_dense(g, feat, m.attribute_head, "attr");
    NodeId attr_logits =
        make_reshape(g, attr_flat, {batch, cfg.attribute_count, cfg.rating_classes});
    g.mark_output("attribute_logits", attr_logits);

    NodeId mal_logits = make_dense(g, feat, m.malignancy_head, "malignancy");
    g.mark_output("malignancy_logits", mal_logits);
}

/// Forward graph plus loss heads. Extra inputs: "mask" (binary, same spatial
/// dims), "attr_targets" [batch * attribute_count] and "mal_target" [batch]
/// as 0-based class indices. Outputs the loss breakdown as scalars.
template <typename T>
void build_training_graph(Model<T>& m, Graph<T>& g, std::size_t batch, const LossConfig& loss) {
    build_forward_graph(m, g, batch);
    const NetConfig& cfg = m.config;
    const std::size_t s = cfg.patch_size;

    NodeId mask = g.input("mask", {batch, 1, s, s, s});
    NodeId dice = make_dice_loss(g, g.output_id("seg_prob"), mask, static_cast<T>(loss.epsilon));
    g.mark_output("loss_dice", dice);

    NodeId attr_targets = g.input("attr_targets", {batch * cfg.attribute_count});
    NodeId attr_rows = make_reshape(g, g.output_id("attribute_logits"),
                                    {batch * cfg.attribute_count, cfg.rating_classes});
    NodeId attr_ce = make_cross_entropy(g, attr_rows, attr_targets);
    g.mark_output("loss_attr_ce", attr_ce);

    NodeId mal_target = g.input("mal_target", {batch});
    NodeId mal_ce = make_cross_entropy(g, g.output_id("malignancy_logits"), mal_target);
    g.mark_output("loss_mal_ce", mal_ce);

    NodeId cls = make_add(g, attr_ce, mal_ce);
    NodeId total = make_add(g, make_scale(g, dice, static_cast<T>(loss.seg_weight)),
                            make_scale(g, cls, static_cast<T>(loss.lambda)));
    g.mark_output("loss_total", total);
}

template <typename T>
struct MultitaskOutput {
    Tensor<T> seg_prob;           // [n, 1, s, s, s]
    Tensor<T> attribute_logits;   // [n, attribute_count, rating_classes]
    Tensor<T> malignancy_logits;  // [n, rating_classes]
};

/// One-shot inference convenience; training keeps its own persistent graph.
template <typename T>
MultitaskOutput<T> forward_multitask(Model<T>& m, const Tensor<T>& patch, bool training = false) {
    if (patch.ndim() != 5 || patch.shape[1] != m.config.in_channels ||
        patch.shape[2] != m.config.patch_size || patch.shape[3] != m.config.patch_size ||
        patch.shape[4] != m.config.patch_size) {
        throw ShapeError(detail::cat("forward_multitask: patch ", shape_str(patch.shape),
                                     " does not fit config (in_ch ", m.config.in_channels,
                                     ", patch ", m.config.patch_size, ")"));
    }
    Graph<T> g;
    build_forward_graph(m, g, patch.shape[0]);
    g.set_training(training);
    auto out = g.forward({{"patch", patch}});
    MultitaskOutput<T> result;
    result.seg_prob = std::move(out.at("seg_prob"));
    result.attribute_logits = std::move(out.at("attribute_logits"));
    result.malignancy_logits = std::move(out.at("malignancy_logits"));
    return result;
}

/// Derived binary decision: malignant iff the arg-max rating class exceeds 3.
/// Ties resolve to the lowest class index.
template <typename T>
inline int argmax_class(const T* row, std::size_t classes) {
    int best = 0;
    for (std::size_t i = 1; i < classes; ++i) {
        if (row[i] > row[best]) best = static_cast<int>(i);
    }
    return best + 1;  // classes are 1-based ratings
}

// ---------------------------------------------------------------------------
// NKCKPT1 checkpoint container, little-endian:
//   magic "NKCKPT1" | u32 version | u64 step | u64 json_len | config JSON
//   | u32 tensor_count | per tensor: u32 name_len | name | u32 ndim
//   | u32 dims[ndim] | f32 data
// Model tensors come first in visit order; extra tensors (optimizer moments,
// "opt." prefix) follow in sorted order. Bit-exact round trip.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[7] = {'N', 'K', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kExtraPrefix = "opt.";

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError(cat("truncated checkpoint: missing ", what));
    return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError(cat("truncated checkpoint: missing ", what));
    return v;
}

inline void write_named_tensor(std::ostream& os, const std::string& name,
                               const Tensor<float>& t) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

}  // namespace detail

inline void save_checkpoint(Model<float>& model, std::ostream& os, std::uint64_t step = 0,
                            const std::map<std::string, Tensor<float>>& extras = {}) {
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_u32(os, kCheckpointVersion);
    detail::write_u64(os, step);
    const std::string config_json = nlohmann::json(model.config).dump();
    detail::write_u64(os, config_json.size());
    os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));

    std::uint32_t count = 0;
    model.visit_params([&](const std::string&, Tensor<float>&, bool) { ++count; });
    count += static_cast<std::uint32_t>(extras.size());
    detail::write_u32(os, count);
    model.visit_params([&](const std::string& name, Tensor<float>& t, bool) {
        detail::write_named_tensor(os, name, t);
    });
    for (const auto& [name, t] : extras) {
        if (name.rfind(kExtraPrefix, 0) != 0) {
            throw ValueError(detail::cat("save_checkpoint: extra tensor '", name,
                                         "' must carry the '", kExtraPrefix, "' prefix"));
        }
        detail::write_named_tensor(os, name, t);
    }
    if (!os) throw IoError("save_checkpoint: stream write failed");
}

inline void save_checkpoint(Model<float>& model, const std::string& path, std::uint64_t step = 0,
                            const std::map<std::string, Tensor<float>>& extras = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(detail::cat("save_checkpoint: cannot open '", path, "'"));
    save_checkpoint(model, os, step, extras);
}

struct LoadedCheckpoint {
    Model<float> model;
    std::uint64_t step = 0;
    std::map<std::string, Tensor<float>> extras;
};

/// Reads a checkpoint. When `into` is given, the file's config must match
/// its config exactly and parameters load in place.
inline LoadedCheckpoint load_checkpoint(std::istream& is, const std::string& name = "<stream>",
                                        Model<float>* into = nullptr) {
    char magic[7];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw IoError(detail::cat("bad magic in '", name, "': not an NKCKPT1 file"));
    }
    const std::uint32_t version = detail::read_u32(is, "version");
    if (version != kCheckpointVersion) {
        throw IoError(detail::cat("unsupported checkpoint version ", version, " in '", name, "'"));
    }
    LoadedCheckpoint out;
    out.step = detail::read_u64(is, "step");
    const std::uint64_t json_len = detail::read_u64(is, "config length");
    std::string config_json(json_len, '\0');
    is.read(config_json.data(), static_cast<std::streamsize>(json_len));
    if (!is) throw IoError(detail::cat("truncated checkpoint config in '", name, "'"));
    NetConfig config;
    try {
        config = nlohmann::json::parse(config_json).get<NetConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(detail::cat("bad checkpoint config in '", name, "': ", e.what()));
    }
    if (into && !(into->config == config)) {
        throw Error(detail::cat("checkpoint config mismatch loading '", name, "'"));
    }

    Model<float> local;
    Model<float>& model = into ? *into : local;
    if (!into) model = build_model<float>(config, /*seed=*/0);

    std::map<std::string, Tensor<float>*> slots;
    model.visit_params(
        [&](const std::string& pname, Tensor<float>& t, bool) { slots[pname] = &t; });
    std::map<std::string, bool> filled;
    for (const auto& [pname, _] : slots) filled[pname] = false;

    const std::uint32_t count = detail::read_u32(is, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(is, "tensor name length");
        std::string tname(name_len, '\0');
        is.read(tname.data(), name_len);
        if (!is) throw IoError(detail::cat("truncated checkpoint in '", name, "'"));
        const std::uint32_t ndim = detail::read_u32(is, "tensor rank");
        Shape shape(ndim);
        for (auto& d : shape) d = detail::read_u32(is, "tensor dims");
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!is) throw IoError(detail::cat("truncated tensor payload in '", name, "'"));
        if (tname.rfind(kExtraPrefix, 0) == 0) {
            out.extras.emplace(std::move(tname), std::move(t));
            continue;
        }
        auto it = slots.find(tname);
        if (it == slots.end()) {
            throw IoError(detail::cat("unknown parameter '", tname, "' in '", name, "'"));
        }
        if (it->second->shape != t.shape) {
            throw IoError(detail::cat("parameter '", tname, "' has shape ", shape_str(t.shape),
                                      ", expected ", shape_str(it->second->shape)));
        }
        it->second->data = std::move(t.data);
        filled[tname] = true;
    }
    for (const auto& [pname, ok] : filled) {
        if (!ok) throw IoError(detail::cat("checkpoint '", name, "' missing parameter '", pname, "'"));
    }
    if (!into) out.model = std::move(local);
    return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path, Model<float>* into = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(detail::cat("load_checkpoint: cannot open '", path, "'"));
    return load_checkpoint(is, path, into);
}

}  // namespace pnsamp
