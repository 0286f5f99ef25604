#include <gtest/gtest.h>

#include <random>

#include "gbtsam/encoder.hpp"
#include "gbtsam/error.hpp"
#include "gbtsam/head.hpp"
#include "gbtsam/model.hpp"
#include "support.hpp"

using namespace gbtsam;
using gbtsam::test::check_gradients;
using gbtsam::test::random_group;
using gbtsam::test::randomize;
using gbtsam::test::tiny_config;

namespace {

ag::Var random_tokens(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(rows * cols);
    for (auto& x : v) {
        x = n(rng);
    }
    return ag::Var::constant(rows, cols, std::move(v));
}

std::vector<std::pair<std::string, ag::Var>> parameters_in(ParameterStore const& store, std::string const& group) {
    std::vector<std::pair<std::string, ag::Var>> out;
    for (auto const& [name, v] : store.entries()) {
        if (parameter_group(name) == group) {
            out.emplace_back(name, v);
        }
    }
    return out;
}

} // namespace

TEST(PatchCount, Examples) {
    EXPECT_EQ(patch_count(32, 32, 8), 16u);
    EXPECT_EQ(patch_count(64, 64, 16), 16u);
    EXPECT_EQ(patch_count(240, 240, 16), 225u);
}

TEST(PatchCount, IndivisibleSizeRejected) {
    EXPECT_THROW(patch_count(30, 32, 8), ConfigError);
    EncoderConfig c;
    c.image_height = 30;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ExtractPatches, FeatureOrder) {
    // 4 modalities of a 4x4 image, p = 2: value encodes (m, y, x).
    std::vector<float> slice(4 * 16);
    for (std::size_t m = 0; m < 4; ++m) {
        for (std::size_t i = 0; i < 16; ++i) {
            slice[m * 16 + i] = static_cast<float>(100 * m + i);
        }
    }
    auto p = extract_patches(slice, 4, 4, 2);
    ASSERT_EQ(p.size(), 4u * 16u);
    // Patch 1 is the top-right 2x2 block: pixels 2, 3, 6, 7.
    std::vector<double> const want{2, 3, 6, 7, 102, 103, 106, 107, 202, 203, 206, 207, 302, 303, 306, 307};
    for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_EQ(p[16 + k], want[k]) << k;
    }
}

TEST(PatchEmbed, ZeroInputWithZeroPositionAndBiasGivesZeroTokens) {
    auto c = tiny_config();
    ParameterStore store;
    std::mt19937_64 rng(3);
    Encoder enc(c, rng, store);
    for (auto& x : ag::Var(store.at("patch_embed.pos")).mutable_value()) {
        x = 0.0;
    }
    SliceGroup g;
    g.height = 8;
    g.width = 8;
    g.slices.assign(kGroupSize * kModalityCount * 64, 0.0f);
    auto t = enc.patch_embed(g);
    EXPECT_EQ(t.rows(), kGroupSize * c.patch_count());
    EXPECT_EQ(t.cols(), c.embed_dim);
    for (double v : t.value()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(PatchEmbed, RejectsWrongChannelsAndSize) {
    auto c = tiny_config();
    ParameterStore store;
    std::mt19937_64 rng(3);
    Encoder enc(c, rng, store);
    auto g = random_group(8, 8, rng);
    g.channels = 3;
    g.slices.resize(kGroupSize * 3 * 64);
    EXPECT_THROW(enc.patch_embed(g), ConfigError);
    auto wrong = random_group(16, 8, rng);
    EXPECT_THROW(enc.patch_embed(wrong), ConfigError);
}

TEST(Lora, HandExampleScalar) {
    // theta = 2, A = 1, B = 3, x = 1: y = 2 + 3 = 5.
    auto x = ag::Var::constant(1, 1, {1.0});
    auto theta = ag::Var::constant(1, 1, {2.0});
    auto a = ag::Var::constant(1, 1, {1.0});
    auto b = ag::Var::constant(1, 1, {3.0});
    auto y = ag::add(ag::matmul(x, theta), ag::matmul(ag::matmul(x, a), b));
    EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(Lora, HandExampleThroughAdapter) {
    // The scalar example embedded in a 2x2 weight with a rank-1 adapter.
    ParameterStore store;
    std::mt19937_64 rng(0);
    LoraAdapter ad("lora.t", 2, 2, 1, 0.01, rng, store);
    auto a = ad.a();
    auto b = ad.b();
    a.mutable_value()[0] = 1.0;
    a.mutable_value()[1] = 0.0;
    b.mutable_value()[0] = 3.0;
    b.mutable_value()[1] = 0.0;
    auto theta = ag::Var::constant(2, 2, {2.0, 0.0, 0.0, 0.0});
    auto y = lora_forward(ag::Var::constant(1, 2, {1.0, 0.0}), theta, ad);
    EXPECT_DOUBLE_EQ(y.at(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(y.at(0, 1), 0.0);
}

TEST(Lora, TrainableCountAndInit) {
    ParameterStore store;
    std::mt19937_64 rng(0);
    LoraAdapter ad("lora.t", 8, 8, 2, 0.01, rng, store);
    EXPECT_EQ(ad.trainable_count(), 32u);
    EXPECT_EQ(ad.a().rows(), 8u);
    EXPECT_EQ(ad.a().cols(), 2u);
    EXPECT_EQ(ad.b().rows(), 2u);
    EXPECT_EQ(ad.b().cols(), 8u);
    for (double v : ad.b().value()) {
        EXPECT_EQ(v, 0.0);
    }
    std::size_t nonzero = 0;
    for (double v : ad.a().value()) {
        nonzero += v != 0.0;
    }
    EXPECT_EQ(nonzero, 16u);
}

TEST(Lora, RankBounds) {
    ParameterStore store;
    std::mt19937_64 rng(0);
    EXPECT_THROW(LoraAdapter("lora.a", 8, 8, 0, 0.01, rng, store), ConfigError);
    EXPECT_THROW(LoraAdapter("lora.b", 8, 8, 8, 0.01, rng, store), ConfigError);
    EXPECT_THROW(LoraAdapter("lora.c", 8, 4, 4, 0.01, rng, store), ConfigError);
    EXPECT_NO_THROW(LoraAdapter("lora.d", 8, 4, 3, 0.01, rng, store));
}

TEST(Lora, ZeroBLeavesBaseOutput) {
    ParameterStore store;
    std::mt19937_64 rng(5);
    LoraAdapter ad("lora.t", 6, 5, 2, 0.5, rng, store);
    auto x = random_tokens(7, 6, rng);
    auto theta = random_tokens(6, 5, rng);
    auto y = lora_forward(x, theta, ad);
    auto base = ag::matmul(x, theta);
    for (std::size_t i = 0; i < y.size(); ++i) {
        EXPECT_EQ(y.value()[i], base.value()[i]);
    }
}

TEST(DepthCondition, ZeroInitIsIdentity) {
    ParameterStore store;
    std::mt19937_64 rng(9);
    DepthConditionBlock blk("depth.t", 16, kGroupSize, 8, rng, store);
    EXPECT_EQ(blk.parameter_count(), 2u * 16 + 4 * 8 + 8 + 8 * 4 + 4);
    auto x = random_tokens(kGroupSize * 4, 16, rng);
    auto y = blk.forward(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(y.value()[i], x.value()[i]);
    }
}

TEST(DepthCondition, MixesOnlyAcrossSlicesOfTheSameToken) {
    ParameterStore store;
    std::mt19937_64 rng(11);
    std::size_t const n = 4;
    std::size_t const d = 8;
    DepthConditionBlock blk("depth.t", d, kGroupSize, 8, rng, store);
    randomize(store.at("depth.t.mlp.fc2.weight"), rng, 0.5);
    randomize(store.at("depth.t.mlp.fc2.bias"), rng, 0.5);
    auto x = random_tokens(kGroupSize * n, d, rng);
    auto y0 = blk.forward(x);

    // Perturb spatial token 2 of slice 1.
    std::size_t const target = 2;
    std::vector<double> moved(x.value().begin(), x.value().end());
    for (std::size_t c = 0; c < d; ++c) {
        moved[(1 * n + target) * d + c] += 0.7 * static_cast<double>(c + 1);
    }
    auto y1 = blk.forward(ag::Var::constant(kGroupSize * n, d, moved));
    bool some_other_slice_changed = false;
    for (std::size_t g = 0; g < kGroupSize; ++g) {
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t c = 0; c < d; ++c) {
                std::size_t const i = (g * n + t) * d + c;
                if (t != target) {
                    EXPECT_EQ(y0.value()[i], y1.value()[i]) << "slice " << g << " token " << t;
                } else if (g != 1 && y0.value()[i] != y1.value()[i]) {
                    some_other_slice_changed = true;
                }
            }
        }
    }
    EXPECT_TRUE(some_other_slice_changed);
}

TEST(DepthCondition, GroupSizeMismatch) {
    auto c = tiny_config();
    ParameterStore store;
    std::mt19937_64 rng(3);
    Encoder enc(c, rng, store);
    auto three = random_tokens(3 * c.patch_count(), c.embed_dim, rng);
    EXPECT_THROW(enc.depth_condition(three, 0), Error);
    auto five = random_tokens(5 * c.patch_count(), c.embed_dim, rng);
    EXPECT_THROW(enc.depth_condition(five, 0), Error);

    ParameterStore s2;
    DepthConditionBlock blk("depth.t", 8, kGroupSize, 8, rng, s2);
    EXPECT_THROW(blk.forward(random_tokens(6, 8, rng)), Error);
}

TEST(Encoder, DeterministicForSeed) {
    auto c = tiny_config(21);
    SamModel m1(c);
    SamModel m2(c);
    std::mt19937_64 rng(4);
    auto g = random_group(8, 8, rng);
    auto a = m1.encoder().encode(g);
    auto b = m2.encoder().encode(g);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.value()[i], b.value()[i]);
    }
}

TEST(Encoder, ZeroInitAdaptersAreTransparent) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        SamModel m(tiny_config(seed));
        std::mt19937_64 rng(seed + 100);
        for (int k = 0; k < 5; ++k) {
            auto g = random_group(8, 8, rng);
            auto adapted = m.encoder().encode(g, true);
            auto plain = m.encoder().encode(g, false);
            for (std::size_t i = 0; i < adapted.size(); ++i) {
                EXPECT_NEAR(adapted.value()[i], plain.value()[i], 1e-12);
            }
        }
    }
}

TEST(Encoder, NonzeroAdaptersChangeOutput) {
    SamModel m(tiny_config(2));
    std::mt19937_64 rng(8);
    for (auto const& [name, v] : m.parameters().entries()) {
        if (name.ends_with(".B")) {
            randomize(v, rng, 0.1);
        }
    }
    auto g = random_group(8, 8, rng);
    auto adapted = m.encoder().encode(g, true);
    auto plain = m.encoder().encode(g, false);
    double diff = 0.0;
    for (std::size_t i = 0; i < adapted.size(); ++i) {
        diff = std::max(diff, std::abs(adapted.value()[i] - plain.value()[i]));
    }
    EXPECT_GT(diff, 1e-6);
}

TEST(Encoder, DepthConditionCanBeRemoved) {
    auto c = tiny_config();
    c.depth_condition = false;
    SamModel m(c);
    EXPECT_TRUE(parameters_in(m.parameters(), "depth").empty());
    EXPECT_TRUE(m.encoder().depth_blocks().empty());
    c.depth_condition = true;
    SamModel with(c);
    EXPECT_EQ(with.encoder().depth_blocks().size(), c.blocks);
}

TEST(Encoder, GradientsOfAdaptersMatchFiniteDifferences) {
    auto c = tiny_config(5);
    SamModel m(c);
    std::mt19937_64 rng(17);
    for (auto const& [name, v] : m.parameters().entries()) {
        if (name.ends_with(".B") || name.find(".mlp.fc2.") != std::string::npos) {
            if (parameter_group(name) != "base") {
                randomize(v, rng, 0.2);
            }
        }
    }
    auto g = random_group(8, 8, rng);
    std::vector<double> targets(kGroupSize * 64);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        targets[i] = (i % 7) < 3 ? 1.0 : 0.0;
    }
    Prompt const prompt = PromptBox{1, 1, 2, 6, 7, 1.0};
    auto leaves = parameters_in(m.parameters(), "lora");
    auto depth = parameters_in(m.parameters(), "depth");
    leaves.insert(leaves.end(), depth.begin(), depth.end());
    double worst = 0.0;
    auto bad = check_gradients([&] { return bce_loss(targets, m.forward(g, prompt)); }, leaves, 1e-4, &worst);
    for (auto const& b : bad) {
        ADD_FAILURE() << b.name << "[" << b.index << "] analytic " << b.analytic << " numeric " << b.numeric;
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(DepthCondition, ConstantInputStaysFinite) {
    ParameterStore store;
    std::mt19937_64 rng(13);
    DepthConditionBlock blk("depth.t", 8, kGroupSize, 8, rng, store);
    randomize(store.at("depth.t.mlp.fc2.weight"), rng, 0.5);
    // Every token is the same constant vector: zero variance under the norm.
    auto x = ag::Var::constant(kGroupSize * 4, 8, std::vector<double>(kGroupSize * 4 * 8, 3.0));
    auto branch = blk.branch(x);
    for (double v : blk.forward(x).value()) {
        EXPECT_TRUE(std::isfinite(v));
    }
    // (x - mu) / sqrt(var + eps) = 0, so the norm yields beta = 0 and the
    // branch reduces to the MLP of a zero vector.
    ParameterStore s2;
    std::mt19937_64 rng2(13);
    DepthConditionBlock same("depth.t", 8, kGroupSize, 8, rng2, s2);
    randomize(s2.at("depth.t.mlp.fc2.weight"), rng2, 0.5);
    auto zero_branch = same.branch(ag::Var::zeros(kGroupSize * 4, 8));
    for (std::size_t i = 0; i < branch.size(); ++i) {
        EXPECT_NEAR(branch.value()[i], zero_branch.value()[i], 1e-12);
    }
}
