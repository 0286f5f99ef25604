#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>

#include <json.hpp>

#include "gbtsam/error.hpp"
#include "gbtsam/model.hpp"
#include "gbtsam/training.hpp"
#include "support.hpp"

using namespace gbtsam;
using gbtsam::test::small_image_config;
using gbtsam::test::small_training_set;
using gbtsam::test::TempDir;
using gbtsam::test::tiny_config;

namespace {

std::size_t closed_form_step1(EncoderConfig const& c) {
    std::size_t const in = kModalityCount * c.patch_size * c.patch_size;
    return in * c.embed_dim + c.embed_dim + c.patch_count() * c.embed_dim;
}

// LoRA on q and v (d x d each) plus one depth block per encoder block.
std::size_t closed_form_step2_extra(EncoderConfig const& c) {
    std::size_t const d = c.embed_dim;
    std::size_t const r = c.lora_rank;
    std::size_t const g = c.group_size;
    std::size_t const h = c.depth_hidden;
    std::size_t const lora = 2 * r * (d + d);
    std::size_t const depth = c.depth_condition ? 2 * d + g * h + h + h * g + g : 0;
    return c.blocks * (lora + depth);
}

void zero_grads(ParameterStore const& params) {
    for (auto const& [name, v] : params.entries()) {
        if (v.requires_grad()) {
            ag::Var(v).zero_grad();
        }
    }
}

TrainConfig quick_config(std::uint64_t seed = 0) {
    TrainConfig tc;
    tc.batch_size = 2;
    tc.learning_rate = 1e-3;
    tc.seed = seed;
    tc.regime = PromptRegime::parse("BB-100-100");
    return tc;
}

// Loss per step when repeatedly fitting one fixed slice group.
std::vector<double> overfit_curve(std::size_t steps) {
    SamModel m(small_image_config(3));
    auto data = small_training_set(1, 200);
    auto tc = quick_config();
    Rng rng(5);
    auto ex = draw_example(data[0], tc, 1.0, rng);
    if (!ex) {
        throw std::runtime_error("no example");
    }
    auto const& params = m.parameters();
    apply_freeze_plan(params, FreezePlan::for_phase(Phase::step2));
    Adam adam(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
    std::vector<double> curve;
    for (std::size_t s = 0; s < steps; ++s) {
        zero_grads(params);
        auto loss = bce_loss(ex->targets, m.forward(ex->group, ex->prompt));
        curve.push_back(loss.item());
        ag::backward(loss);
        clip_grad_norm(params, tc.clip_norm);
        adam.step(params);
    }
    freeze_all(params);
    return curve;
}

std::filesystem::path const kFixtureDir = GBTSAM_FIXTURE_DIR;

} // namespace

TEST(PromptRegime, Parse) {
    auto p = PromptRegime::parse("1p");
    EXPECT_EQ(p.kind, PromptRegime::Kind::point);
    auto b = PromptRegime::parse("BB-75-50");
    EXPECT_EQ(b.kind, PromptRegime::Kind::box);
    EXPECT_DOUBLE_EQ(b.train_coverage, 0.75);
    EXPECT_DOUBLE_EQ(b.test_coverage, 0.50);
    EXPECT_EQ(b.to_string(), "BB-75-50");
    EXPECT_EQ(PromptRegime::parse("BB-100-100").to_string(), "BB-100-100");
    for (auto const* bad : {"BB-0-50", "BB-75", "BB-120-50", "2p", "", "BB-a-b"}) {
        EXPECT_THROW(PromptRegime::parse(bad), ConfigError) << bad;
    }
}

TEST(Phase, RoundTrip) {
    EXPECT_EQ(phase_from_string("step1"), Phase::step1);
    EXPECT_EQ(phase_from_string(to_string(Phase::step2)), Phase::step2);
    EXPECT_THROW(phase_from_string("step3"), ConfigError);
    EXPECT_EQ(strategy_from_string("one_step"), Strategy::one_step);
    EXPECT_THROW(strategy_from_string("three_step"), ConfigError);
}

TEST(FreezePlan, Step1TrainsOnlyPatchEmbedding) {
    SamModel m(tiny_config());
    auto plan = build_freeze_plan(Phase::step1, m.parameters());
    for (auto const& [name, v] : m.parameters().entries()) {
        EXPECT_EQ(plan.is_trainable(name), parameter_group(name) == "patch_embed") << name;
    }
}

TEST(FreezePlan, Step2TrainsPatchEmbeddingLoraAndDepth) {
    SamModel m(tiny_config());
    auto plan = build_freeze_plan(Phase::step2, m.parameters());
    for (auto const& [name, v] : m.parameters().entries()) {
        EXPECT_EQ(plan.is_trainable(name), parameter_group(name) != "base") << name;
    }
}

TEST(FreezePlan, BaseWeightsFrozenInBothPhases) {
    for (auto phase : {Phase::step1, Phase::step2}) {
        auto plan = FreezePlan::for_phase(phase);
        EXPECT_FALSE(plan.is_trainable("base.encoder.blocks.0.attn.q.weight"));
        EXPECT_FALSE(plan.is_trainable("base.decoder.upsample.weight"));
        EXPECT_FALSE(plan.is_trainable("base.prompt.type_embed"));
    }
}

TEST(FreezePlan, DecoderOverrideOnlyInStep2) {
    auto plan = FreezePlan::for_phase(Phase::step2, true);
    EXPECT_TRUE(plan.is_trainable("base.decoder.upsample.weight"));
    EXPECT_TRUE(plan.is_trainable("base.prompt.type_embed"));
    EXPECT_FALSE(plan.is_trainable("base.encoder.neck.gamma"));
    EXPECT_FALSE(FreezePlan::for_phase(Phase::step1, true).is_trainable("base.decoder.upsample.weight"));
}

TEST(FreezePlan, UnknownParameterGroupIsAnError) {
    auto plan = FreezePlan::for_phase(Phase::step1);
    EXPECT_THROW(plan.is_trainable("adapter.x"), Error);
    ParameterStore store;
    store.add_constant("mystery.weight", 1, 1, 0.0);
    EXPECT_THROW(build_freeze_plan(Phase::step1, store), Error);
}

TEST(ParameterCount, EmptyPlanIsZero) {
    SamModel m(tiny_config());
    EXPECT_EQ(count_trainable_params(m.parameters(), FreezePlan::empty()), 0u);
}

TEST(ParameterCount, Step1HandCountForToyConfig) {
    EncoderConfig c; // 32x32, p = 8, d = 32
    SamModel m(c);
    EXPECT_EQ(count_trainable_params(m.parameters(), Phase::step1), 4u * 8 * 8 * 32 + 16 * 32 + 32);
    EXPECT_EQ(count_trainable_params(m.parameters(), Phase::step1), closed_form_step1(c));
}

TEST(ParameterCount, Step2MinusStep1MatchesClosedForm) {
    std::mt19937_64 rng(77);
    for (int t = 0; t < 5; ++t) {
        EncoderConfig c;
        c.patch_size = std::uniform_int_distribution<std::size_t>(0, 1)(rng) == 0 ? 4 : 8;
        c.embed_dim = 8 * std::uniform_int_distribution<std::size_t>(1, 4)(rng);
        c.heads = 2;
        c.blocks = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
        c.mlp_dim = 2 * c.embed_dim;
        c.lora_rank = std::uniform_int_distribution<std::size_t>(1, c.embed_dim - 1)(rng);
        c.depth_hidden = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
        c.depth_condition = t != 2;
        SamModel m(c);
        auto const s1 = count_trainable_params(m.parameters(), Phase::step1);
        auto const s2 = count_trainable_params(m.parameters(), Phase::step2);
        EXPECT_EQ(s1, closed_form_step1(c));
        EXPECT_EQ(s2 - s1, closed_form_step2_extra(c)) << "config " << t;
    }
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
    ParameterStore store;
    auto w = store.add("patch_embed.w", 1, 3, {1.0, 2.0, 3.0});
    auto frozen = store.add("base.w", 1, 1, {5.0});
    w.set_requires_grad(true);
    auto loss = ag::dot_const(w, std::vector<double>{0.5, -2.0, 0.0});
    ag::backward(loss);
    Adam adam(0.1, 0.9, 0.999, 1e-8);
    adam.step(store);
    EXPECT_NEAR(w.value()[0], 1.0 - 0.1, 1e-8);
    EXPECT_NEAR(w.value()[1], 2.0 + 0.1, 1e-8);
    EXPECT_EQ(w.value()[2], 3.0);
    EXPECT_EQ(frozen.value()[0], 5.0);
}

TEST(ClipGradNorm, RescalesToMaximum) {
    ParameterStore store;
    auto w = store.add("patch_embed.w", 1, 2, {0.0, 0.0});
    w.set_requires_grad(true);
    ag::backward(ag::dot_const(w, std::vector<double>{3.0, 4.0}));
    EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
    EXPECT_NEAR(w.grad()[0], 0.6, 1e-12);
    EXPECT_NEAR(w.grad()[1], 0.8, 1e-12);
    EXPECT_NEAR(clip_grad_norm(store, 10.0), 1.0, 1e-12);
    EXPECT_NEAR(w.grad()[0], 0.6, 1e-12);
}

TEST(DrawExample, ShapesAndShallowVolumes) {
    auto data = small_training_set(1);
    auto tc = quick_config();
    Rng rng(1);
    bool shallow = true;
    auto ex = draw_example(data[0], tc, 1.0, rng, &shallow);
    ASSERT_TRUE(ex.has_value());
    EXPECT_FALSE(shallow);
    EXPECT_EQ(ex->targets.size(), kGroupSize * 16 * 16);
    EXPECT_EQ(ex->group.slices.size(), kGroupSize * kModalityCount * 16 * 16);
    auto const& box = std::get<PromptBox>(ex->prompt);
    EXPECT_TRUE(std::find(ex->group.depth_indices.begin(), ex->group.depth_indices.end(), box.slice_index) !=
                ex->group.depth_indices.end());

    tc.delta = 6; // needs depth >= 19
    EXPECT_FALSE(draw_example(data[0], tc, 1.0, rng, &shallow).has_value());
    EXPECT_TRUE(shallow);
}

TEST(RunPhase, FreezeAuditStep1) {
    SamModel m(small_image_config(2));
    auto data = small_training_set(3);
    auto before = snapshot(m.parameters());
    auto summary = run_phase(m, Phase::step1, quick_config(), data, 10);
    auto after = snapshot(m.parameters());
    EXPECT_EQ(summary.records.size(), 10u);
    for (auto const& [name, values] : before) {
        if (parameter_group(name) == "patch_embed") {
            EXPECT_NE(values, after.at(name)) << name;
        } else {
            EXPECT_EQ(values, after.at(name)) << name;
        }
    }
    for (auto const& [name, v] : m.parameters().entries()) {
        EXPECT_FALSE(v.requires_grad()) << name;
    }
}

TEST(RunPhase, FreezeAuditStep2) {
    SamModel m(small_image_config(2));
    auto data = small_training_set(3);
    auto before = snapshot(m.parameters());
    run_phase(m, Phase::step2, quick_config(), data, 10);
    auto after = snapshot(m.parameters());
    for (auto const& [name, values] : before) {
        if (parameter_group(name) == "base") {
            EXPECT_EQ(values, after.at(name)) << name;
        } else {
            EXPECT_NE(values, after.at(name)) << name;
        }
    }
}

TEST(RunPhase, MetricsRecordTrainableCount) {
    SamModel m(small_image_config(2));
    auto data = small_training_set(2);
    std::vector<MetricRecord> seen;
    run_phase(m, Phase::step1, quick_config(), data, 3, [&](MetricRecord const& r) { seen.push_back(r); });
    ASSERT_EQ(seen.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(seen[i].step, i);
        EXPECT_EQ(seen[i].phase, "step1");
        EXPECT_EQ(seen[i].trainable_param_count, count_trainable_params(m.parameters(), Phase::step1));
        EXPECT_TRUE(std::isfinite(seen[i].loss));
    }
    auto j = seen[0].to_json();
    for (auto const* key : {"step", "phase", "loss", "lr", "trainable_param_count"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
}

TEST(RunPhase, DeterministicForSeed) {
    auto data = small_training_set(3);
    SamModel a(small_image_config(2));
    SamModel b(small_image_config(2));
    auto ra = run_phase(a, Phase::step2, quick_config(9), data, 5);
    auto rb = run_phase(b, Phase::step2, quick_config(9), data, 5);
    EXPECT_EQ(snapshot(a.parameters()), snapshot(b.parameters()));
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(ra.records[i].loss, rb.records[i].loss);
    }
    SamModel c(small_image_config(2));
    run_phase(c, Phase::step2, quick_config(10), data, 5);
    EXPECT_NE(snapshot(a.parameters()), snapshot(c.parameters()));
}

TEST(RunPhase, ShallowVolumesAreSkippedAndCounted) {
    auto data = small_training_set(2);
    PhantomSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.depth = 3;
    spec.tumor_count = 0;
    auto shallow = generate_phantom(spec);
    data.push_back({normalize(shallow.volume), shallow.mask});
    SamModel m(small_image_config(2));
    auto summary = run_phase(m, Phase::step1, quick_config(), data, 6);
    EXPECT_EQ(summary.records.size(), 6u);
    EXPECT_GT(summary.skipped_shallow, 0u);

    std::vector<TrainingSample> only_shallow{data.back()};
    EXPECT_THROW(run_phase(m, Phase::step1, quick_config(), only_shallow, 1), Error);
}

TEST(RunPhase, NonFiniteLossAborts) {
    SamModel m(small_image_config(2));
    auto data = small_training_set(2);
    auto const n = m.parameters().at("base.decoder.upsample.bias").size();
    m.assign("base.decoder.upsample.bias", std::vector<double>(n, std::nan("")));
    try {
        run_phase(m, Phase::step1, quick_config(), data, 3);
        FAIL() << "expected TrainingAborted";
    } catch (TrainingAborted const& e) {
        std::string const msg = e.what();
        EXPECT_NE(msg.find("non-finite loss"), std::string::npos);
        EXPECT_NE(msg.find("step1 step 0"), std::string::npos);
        EXPECT_NE(msg.find("(volumes: "), std::string::npos);
    }
    for (auto const& [name, v] : m.parameters().entries()) {
        EXPECT_FALSE(v.requires_grad()) << name;
    }
}

TEST(RunPhase, EmptyDatasetRejected) {
    SamModel m(small_image_config(2));
    std::vector<TrainingSample> none;
    EXPECT_THROW(run_phase(m, Phase::step1, quick_config(), none, 1), Error);
}

TEST(Overfit, LossStrictlyDecreasesOverFiftySteps) {
    auto const curve = overfit_curve(50);
    for (std::size_t i = 1; i < curve.size(); ++i) {
        EXPECT_LT(curve[i], curve[i - 1]) << "step " << i;
    }
    auto const path = kFixtureDir / "overfit_loss.json";
    if (std::getenv("GBTSAM_RECORD_FIXTURES") != nullptr) {
        std::ofstream(path) << nlohmann::json(curve).dump(1) << "\n";
        GTEST_SKIP() << "recorded " << path;
    }
    std::ifstream in(path);
    ASSERT_TRUE(in) << "missing fixture " << path;
    auto const fixture = nlohmann::json::parse(in).get<std::vector<double>>();
    ASSERT_EQ(fixture.size(), curve.size());
    for (std::size_t i = 0; i < curve.size(); ++i) {
        EXPECT_NEAR(curve[i], fixture[i], 1e-9 * std::max(1.0, fixture[i])) << "step " << i;
    }
}

TEST(Train, TwoStepWritesCheckpointsAndMetrics) {
    TempDir dir;
    auto data = small_training_set(3);
    TrainRequest req;
    req.model = small_image_config(2);
    req.train = quick_config();
    req.train.steps_step1 = 3;
    req.train.steps_step2 = 4;
    req.run_dir = dir.path();
    auto out = train(req, data);
    ASSERT_EQ(out.checkpoints.size(), 2u);
    EXPECT_EQ(out.checkpoints[0].filename(), "step1.ckpt");
    EXPECT_EQ(out.checkpoints[1].filename(), "step2.ckpt");
    EXPECT_EQ(out.total_steps, 7u);
    std::ifstream log(dir / "metrics.ndjson");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["phase"], lines < 3 ? "step1" : "step2");
        ++lines;
    }
    EXPECT_EQ(lines, 7u);
    auto ck = load_checkpoint(out.checkpoints[1]);
    EXPECT_EQ(ck.meta["phase"], "step2");
    EXPECT_EQ(ck.model.config(), req.model);
}

TEST(Train, SameSeedGivesIdenticalCheckpoint) {
    TempDir a;
    TempDir b;
    auto data = small_training_set(2);
    TrainRequest req;
    req.model = small_image_config(4);
    req.train = quick_config(3);
    req.train.steps_step1 = 2;
    req.train.steps_step2 = 2;
    req.run_dir = a.path();
    auto oa = train(req, data);
    req.run_dir = b.path();
    auto ob = train(req, data);
    EXPECT_EQ(file_hash(oa.checkpoints.back()), file_hash(ob.checkpoints.back()));
}

TEST(Train, Step2StartsFromPersistedStep1PatchEmbedding) {
    TempDir dir;
    auto data = small_training_set(2);
    TrainRequest req;
    req.model = small_image_config(2);
    req.train = quick_config();
    req.train.steps_step1 = 3;
    req.train.steps_step2 = 0;
    req.run_dir = dir.path();
    req.phase = "step1";
    auto s1 = train(req, data);
    ASSERT_EQ(s1.checkpoints.size(), 1u);

    req.phase = "step2";
    req.step1_checkpoint = s1.checkpoints[0];
    auto s2 = train(req, data);
    auto c1 = load_checkpoint(s1.checkpoints[0]);
    auto c2 = load_checkpoint(s2.checkpoints[0]);
    for (auto const& name : {"patch_embed.weight", "patch_embed.bias", "patch_embed.pos"}) {
        auto x = c1.model.parameters().at(name).value();
        auto y = c2.model.parameters().at(name).value();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << name;
    }
}

TEST(Train, Step2WithoutStep1CheckpointFails) {
    TempDir dir;
    auto data = small_training_set(1);
    TrainRequest req;
    req.model = small_image_config(2);
    req.train = quick_config();
    req.run_dir = dir.path();
    req.phase = "step2";
    EXPECT_THROW(train(req, data), ConfigError);
    req.step1_checkpoint = dir / "nope.ckpt";
    EXPECT_THROW(train(req, data), ConfigError);
}

TEST(Train, AlternativeStrategies) {
    TempDir dir;
    auto data = small_training_set(2);
    TrainRequest req;
    req.model = small_image_config(2);
    req.train = quick_config();
    req.train.steps_step1 = 2;
    req.train.steps_step2 = 2;
    req.run_dir = dir.path();
    req.train.strategy = Strategy::one_step;
    auto one = train(req, data);
    ASSERT_EQ(one.checkpoints.size(), 1u);
    EXPECT_EQ(one.checkpoints[0].filename(), "one_step.ckpt");
    req.train.strategy = Strategy::patch_embed_only;
    auto pe = train(req, data);
    ASSERT_EQ(pe.checkpoints.size(), 1u);
    EXPECT_EQ(pe.checkpoints[0].filename(), "patch_embed_only.ckpt");
}

TEST(Train, BaseCheckpointConfigMustMatch) {
    TempDir dir;
    SamModel other(tiny_config());
    save_checkpoint(other, dir / "base.ckpt");
    TrainRequest req;
    req.model = small_image_config(2);
    req.train = quick_config();
    req.run_dir = dir.path();
    req.base_checkpoint = dir / "base.ckpt";
    auto data = small_training_set(1);
    EXPECT_THROW(train(req, data), ConfigError);
}
