#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "pnsamp/gradcheck.hpp"
#include "pnsamp/net.hpp"

using namespace pnsamp;

TEST(NetConfig, ValidatesPatchSize) {
    NetConfig c = desk_scale_config(16, 4);
    EXPECT_NO_THROW(c.validate());
    c.patch_size = 24;  // not divisible by 16
    EXPECT_THROW(c.validate(), ValueError);
    c.patch_size = 0;
    EXPECT_THROW(c.validate(), ValueError);
}

TEST(NetConfig, JsonRoundTrip) {
    NetConfig c = paper_scale_config();
    nlohmann::json j = c;
    NetConfig back = j.get<NetConfig>();
    EXPECT_TRUE(back == c);
    EXPECT_EQ(j.dump(), nlohmann::json(back).dump());
}

TEST(BuildModel, ForwardShapesAtDeskScale) {
    NetConfig cfg = desk_scale_config(16, 4);
    auto model = build_model<float>(cfg, 1);
    Rng rng(2);
    TensorF patch = TensorF::uniform({3, 2, 16, 16, 16}, rng, 0.0, 1.0);
    auto out = forward_multitask(model, patch, /*training=*/true);
    EXPECT_EQ(out.seg_prob.shape, (Shape{3, 1, 16, 16, 16}));
    EXPECT_EQ(out.attribute_logits.shape, (Shape{3, 9, 5}));
    EXPECT_EQ(out.malignancy_logits.shape, (Shape{3, 5}));
}

TEST(BuildModel, SegProbStrictlyInsideUnitInterval) {
    auto model = build_model<float>(desk_scale_config(16, 4), 3);
    Rng rng(4);
    TensorF patch = TensorF::uniform({2, 2, 16, 16, 16}, rng, 0.0, 1.0);
    auto out = forward_multitask(model, patch, true);
    for (float v : out.seg_prob.data) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
    EXPECT_TRUE(out.seg_prob.all_finite());
    EXPECT_TRUE(out.attribute_logits.all_finite());
}

TEST(BuildModel, ZeroedHeadsGiveUniformSoftmax) {
    auto model = build_model<float>(desk_scale_config(16, 4), 5);
    for (auto* p : {&model.attribute_head, &model.malignancy_head}) {
        for (auto& v : p->weight.data) v = 0.0f;
        for (auto& v : p->bias.data) v = 0.0f;
    }
    Rng rng(6);
    TensorF patch = TensorF::uniform({2, 2, 16, 16, 16}, rng, 0.0, 1.0);
    auto out = forward_multitask(model, patch, true);
    TensorF attr_probs = softmax(out.attribute_logits);
    for (float v : attr_probs.data) EXPECT_NEAR(v, 0.2f, 1e-6f);
    TensorF mal_probs = softmax(out.malignancy_logits);
    for (float v : mal_probs.data) EXPECT_NEAR(v, 0.2f, 1e-6f);
}

TEST(BuildModel, PaperScaleParameterCountBracketsTableValue) {
    auto model = build_model<float>(paper_scale_config(), 7);
    const std::size_t count = count_parameters(model);
    EXPECT_GE(count, 1'200'000u);
    EXPECT_LE(count, 1'800'000u);
    // printed by the paramcount CLI; keep the exact value visible here too
    std::printf("paper-scale trainable parameters: %zu\n", count);
}

TEST(BuildModel, DoublingBaseFiltersRoughlyQuadruplesConvParameters) {
    auto count_convs = [](Model<float>& m) {
        std::size_t n = 0;
        for (auto& b : m.encoder) n += b.conv.kernel.numel() + b.conv.bias.numel();
        for (auto& b : m.decoder) n += b.conv.kernel.numel() + b.conv.bias.numel();
        return n;
    };
    auto small = build_model<float>(desk_scale_config(16, 8), 1);
    auto big = build_model<float>(desk_scale_config(16, 16), 1);
    const double ratio = static_cast<double>(count_convs(big)) / count_convs(small);
    EXPECT_GT(ratio, 3.5);
    EXPECT_LT(ratio, 4.5);
}

TEST(BuildModel, ClosedFormCountForSingleConv) {
    // 3^3 conv, 2 -> 4 channels, plus bias: 2*4*27 + 4 = 220
    Rng rng(8);
    auto p = make_conv3d_params<float>(4, 2, 3, rng);
    EXPECT_EQ(p.kernel.numel() + p.bias.numel(), 220u);
    // a default-constructed model owns no tensors at all
    Model<float> empty;
    EXPECT_EQ(count_parameters(empty), 0u);
}

TEST(BuildModel, RunningStatsExcludedFromCount) {
    auto model = build_model<float>(desk_scale_config(16, 4), 9);
    std::size_t trainable = 0, buffers = 0;
    model.visit_params([&](const std::string&, TensorF& t, bool is_trainable) {
        (is_trainable ? trainable : buffers) += t.numel();
    });
    EXPECT_GT(buffers, 0u);
    EXPECT_EQ(count_parameters(model), trainable);
}

TEST(BuildModel, DeterministicInSeed) {
    auto a = build_model<float>(desk_scale_config(16, 4), 42);
    auto b = build_model<float>(desk_scale_config(16, 4), 42);
    bool all_equal = true;
    a.visit_params([&](const std::string& name, TensorF& t, bool) {
        b.visit_params([&](const std::string& name2, TensorF& t2, bool) {
            if (name == name2 && t.data != t2.data) all_equal = false;
        });
    });
    EXPECT_TRUE(all_equal);
}

// Gradients from the classification losses reach the encoder and the
// segmentation head through the two-way connection.
TEST(TrainingGraph, MalignancyGradientReachesEncoderAndSegHead) {
    auto model = build_model<double>(desk_scale_config(16, 4), 10);
    Graph<double> g;
    build_training_graph(model, g, 2, LossConfig{});
    Rng rng(11);
    TensorD patch = TensorD::uniform({2, 2, 16, 16, 16}, rng, 0.0, 1.0);
    TensorD mask({2, 1, 16, 16, 16}, 0.0);
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.2 ? 1.0 : 0.0;
    TensorD attr_targets({2 * 9}, 1.0);
    TensorD mal_target({2}, std::vector<double>{0.0, 4.0});

    g.forward({{"patch", patch},
               {"mask", mask},
               {"attr_targets", attr_targets},
               {"mal_target", mal_target}});
    model.visit_params([](const std::string&, TensorD& t, bool trainable) {
        if (trainable) {
            t.ensure_grad();
            t.zero_grad();
        }
    });
    // seed only the malignancy loss
    g.backward({{"loss_mal_ce", TensorD::scalar(1.0)}});

    auto grad_linf = [](const TensorD& t) {
        double m = 0;
        for (double v : t.grad) m = std::max(m, std::abs(v));
        return m;
    };
    EXPECT_GT(grad_linf(model.encoder[0].conv.kernel), 0.0);
    EXPECT_GT(grad_linf(model.seg_head.kernel), 0.0);
    EXPECT_GT(grad_linf(model.subnet[0].kernel), 0.0);
    EXPECT_GT(grad_linf(model.malignancy_head.weight), 0.0);
    // the attribute head is downstream of nothing the malignancy loss touches
    EXPECT_EQ(grad_linf(model.attribute_head.weight), 0.0);
}

TEST(TrainingGraph, LossBreakdownMatchesDirectComputation) {
    auto model = build_model<double>(desk_scale_config(16, 4), 12);
    LossConfig loss;
    loss.lambda = 0.7;
    Graph<double> g;
    build_training_graph(model, g, 2, loss);
    g.set_training(false);
    Rng rng(13);
    TensorD patch = TensorD::uniform({2, 2, 16, 16, 16}, rng, 0.0, 1.0);
    TensorD mask({2, 1, 16, 16, 16}, 0.0);
    for (auto& v : mask.data) v = rng.uniform() < 0.25 ? 1.0 : 0.0;
    std::vector<std::vector<int>> attr_targets = {{0, 1, 2, 3, 4, 0, 1, 2, 3},
                                                  {4, 3, 2, 1, 0, 4, 3, 2, 1}};
    std::vector<int> mal_target = {2, 4};
    TensorD attr_flat({18});
    for (int r = 0; r < 2; ++r)
        for (int a = 0; a < 9; ++a) attr_flat[r * 9 + a] = attr_targets[r][a];
    TensorD mal_t({2}, std::vector<double>{2.0, 4.0});

    auto out = g.forward(
        {{"patch", patch}, {"mask", mask}, {"attr_targets", attr_flat}, {"mal_target", mal_t}});

    auto fwd = forward_multitask(model, patch, false);
    auto breakdown = multitask_loss(fwd.seg_prob, mask, fwd.attribute_logits, attr_targets,
                                    fwd.malignancy_logits, mal_target, loss);
    EXPECT_NEAR(out.at("loss_dice")[0], breakdown.dice, 1e-12);
    EXPECT_NEAR(out.at("loss_attr_ce")[0], breakdown.attribute_ce, 1e-9);
    EXPECT_NEAR(out.at("loss_mal_ce")[0], breakdown.malignancy_ce, 1e-12);
    EXPECT_NEAR(out.at("loss_total")[0], breakdown.total, 1e-9);
}

// --- checkpoints -------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitIdenticalAndReproducesOutputs) {
    auto model = build_model<float>(desk_scale_config(16, 4), 20);
    std::map<std::string, TensorF> extras;
    extras["opt.m.fuse.weight"] = TensorF({model.config.fusion_dim, 4 * 8 + 64}, 0.25f);

    std::stringstream ss;
    save_checkpoint(model, ss, /*step=*/123, extras);
    const std::string bytes = ss.str();

    auto loaded = load_checkpoint(ss);
    EXPECT_EQ(loaded.step, 123u);
    ASSERT_EQ(loaded.extras.size(), 1u);
    EXPECT_EQ(loaded.extras.begin()->first, "opt.m.fuse.weight");

    std::stringstream ss2;
    save_checkpoint(loaded.model, ss2, 123, loaded.extras);
    EXPECT_EQ(ss2.str(), bytes);

    Rng rng(21);
    TensorF patch = TensorF::uniform({2, 2, 16, 16, 16}, rng, 0.0, 1.0);
    auto a = forward_multitask(model, patch, false);
    auto b = forward_multitask(loaded.model, patch, false);
    for (std::size_t i = 0; i < a.seg_prob.numel(); ++i) {
        ASSERT_EQ(a.seg_prob[i], b.seg_prob[i]);
    }
    for (std::size_t i = 0; i < a.malignancy_logits.numel(); ++i) {
        ASSERT_EQ(a.malignancy_logits[i], b.malignancy_logits[i]);
    }
}

TEST(Checkpoint, TruncatedFileIsAnError) {
    auto model = build_model<float>(desk_scale_config(16, 4), 22);
    std::stringstream ss;
    save_checkpoint(model, ss);
    const std::string bytes = ss.str();
    std::stringstream cut(bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint(cut), IoError);
}

TEST(Checkpoint, BadMagicIsAnError) {
    std::stringstream ss("not a checkpoint at all");
    EXPECT_THROW(load_checkpoint(ss), IoError);
}

TEST(Checkpoint, UnknownParameterNameIsAnError) {
    auto model = build_model<float>(desk_scale_config(16, 4), 23);
    std::stringstream ss;
    save_checkpoint(model, ss);
    std::string bytes = ss.str();
    // rename the first tensor: "enc1.bn.gamma" -> "enc9.bn.gamma"
    const auto pos = bytes.find("enc1.bn.gamma");
    ASSERT_NE(pos, std::string::npos);
    bytes[pos + 3] = '9';
    std::stringstream corrupted(bytes);
    try {
        load_checkpoint(corrupted);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("unknown parameter"), std::string::npos);
    }
}

TEST(Checkpoint, ConfigMismatchOnLoadIntoExistingIsAnError) {
    auto small = build_model<float>(desk_scale_config(16, 4), 24);
    auto big = build_model<float>(desk_scale_config(16, 8), 25);
    std::stringstream ss;
    save_checkpoint(small, ss);
    EXPECT_THROW(load_checkpoint(ss, "<stream>", &big), Error);
}

TEST(Checkpoint, LoadIntoMatchingModelReplacesParameters) {
    auto a = build_model<float>(desk_scale_config(16, 4), 26);
    auto b = build_model<float>(desk_scale_config(16, 4), 27);
    std::stringstream ss;
    save_checkpoint(a, ss);
    load_checkpoint(ss, "<stream>", &b);
    EXPECT_EQ(a.fuse.weight.data, b.fuse.weight.data);
    EXPECT_EQ(a.encoder[2].conv.kernel.data, b.encoder[2].conv.kernel.data);
}
