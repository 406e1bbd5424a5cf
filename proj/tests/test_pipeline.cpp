#include <gtest/gtest.h>

#include <thread>

#include "support.hpp"

using namespace zepo;
using zepo::testing::CountingNet;
using zepo::testing::PerfectOracle;
using zepo::testing::random_latent;

namespace {

const DiffusionSchedule& schedule() {
    static const DiffusionSchedule s = build_schedule();
    return s;
}

NoisePredictorPtr net() {
    static const NoisePredictorPtr n = toy_backbone(4, 16, 0);
    return n;
}

const LatentCodec& codec() {
    static const auto c = identity_codec(4);
    return *c;
}

ImageBuffer content() { return synthetic_portrait(16, 1); }
ImageBuffer style() { return synthetic_portrait(16, 2); }

} // namespace

TEST(PredictX0, IdentityAtTimestepZero) {
    const auto zt = random_latent(1, 4, 8, 8, 1);
    const auto eps = random_latent(1, 4, 8, 8, 2);
    const X0Prediction p = predict_x0(zt, 0, eps, schedule());
    EXPECT_EQ(p.consistent, zt);
}

TEST(PredictX0, FormulaAgainstIndependentEvaluation) {
    const auto zt = random_latent(1, 4, 8, 8, 3);
    const auto eps = random_latent(1, 4, 8, 8, 4);
    for (int t : {1, 10, 99, 500, 999}) {
        const X0Prediction p = predict_x0(zt, t, eps, schedule());
        const double abar = schedule().alpha_bar[t];
        const double st = 10.0 * t;
        const double c_skip = 0.25 / (st * st + 0.25);
        const double c_out = st / std::sqrt(st * st + 0.25);
        for (std::size_t i = 0; i < zt.size(); ++i) {
            const double raw = (zt[i] - std::sqrt(1.0 - abar) * eps[i]) / std::sqrt(abar);
            EXPECT_NEAR(p.raw[i], raw, 1e-12);
            EXPECT_NEAR(p.consistent[i], c_skip * zt[i] + c_out * raw, 1e-12);
        }
    }
}

TEST(PredictX0, RecoversCleanLatentFromInjectedNoise) {
    const auto z0 = random_latent(1, 4, 8, 8, 5);
    const auto eps = random_latent(1, 4, 8, 8, 6);
    for (int steps : {1, 2, 4, 8}) {
        for (int t : plan_timesteps(steps, 1.0, schedule()).steps) {
            const X0Prediction p = predict_x0(forward_noise(z0, t, eps, schedule()), t, eps, schedule());
            EXPECT_LT(max_abs_diff(p.raw, z0), 1e-9) << t;
            EXPECT_LT(max_abs_diff(p.consistent, z0), 1e-5) << t;
        }
    }
}

TEST(PredictX0, Errors) {
    const auto z = random_latent(1, 4, 8, 8, 7);
    EXPECT_THROW(predict_x0(z, -1, z, schedule()), std::out_of_range);
    EXPECT_THROW(predict_x0(z, 1000, z, schedule()), std::out_of_range);
    EXPECT_THROW(predict_x0(z, 10, random_latent(1, 4, 4, 4, 1), schedule()), std::invalid_argument);
}

TEST(Stylize, PerfectOracleOneStepReproducesSource) {
    const ImageBuffer img = content();
    const LatentTensor z0 = codec().encode(img);
    auto oracle = std::make_shared<PerfectOracle>(net(), z0, schedule());
    PipelineConfig cfg;
    cfg.steps = 1;
    cfg.seac.lambda = 1.0;
    const StylizeResult r = stylize(oracle, codec(), img, img, cfg, schedule());
    EXPECT_LT(max_abs_diff(r.latent, z0), 1e-5);
    ASSERT_TRUE(r.record.extraction.has_value());
}

TEST(Stylize, RecordStructure) {
    PipelineConfig cfg;
    const StylizeResult r = stylize(net(), codec(), content(), style(), cfg, schedule());
    const RunRecord& rec = r.record;
    EXPECT_TRUE(rec.complete);
    EXPECT_EQ(rec.timesteps, (std::vector<int>{999, 749, 499, 249}));
    ASSERT_EQ(rec.steps.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(rec.steps[i].index, static_cast<int>(i));
        EXPECT_EQ(rec.steps[i].timestep, rec.timesteps[i]);
        EXPECT_EQ(rec.steps[i].evaluations, 2);
        EXPECT_EQ(rec.steps[i].attention_macs, rec.steps[0].attention_macs);
    }
    ASSERT_TRUE(rec.extraction);
    EXPECT_EQ(rec.extraction->evaluations, 2);
    EXPECT_EQ(rec.extraction->bank_hash, rec.bank_hash_after);
    EXPECT_EQ(rec.total_attention_macs, rec.extraction->attention_macs + rec.loop_attention_macs());
    EXPECT_EQ(rec.output_latent_hash, sha256_hex(r.latent.values()));
    EXPECT_EQ(rec.output_image_hash, sha256_hex(r.image.pixels));
    const auto j = rec.to_json();
    EXPECT_EQ(j["format"], "zepo.run_record/1");
    EXPECT_EQ(j["steps"].size(), 4u);
    EXPECT_EQ(j["record_hash"], rec.record_hash());
    EXPECT_FALSE(rec.to_json(false).contains("record_hash"));
    EXPECT_TRUE(r.image.height == 16 && r.image.width == 16);
}

TEST(Stylize, DeterministicForSameSeed) {
    PipelineConfig cfg;
    cfg.steps = 2;
    const auto a = stylize(net(), codec(), content(), style(), cfg, schedule());
    const auto b = stylize(net(), codec(), content(), style(), cfg, schedule());
    EXPECT_EQ(a.latent, b.latent);
    EXPECT_EQ(a.record.record_hash(), b.record.record_hash());
    cfg.seed = 1;
    EXPECT_NE(stylize(net(), codec(), content(), style(), cfg, schedule()).record.record_hash(), a.record.record_hash());
}

TEST(Stylize, EvaluationCounts) {
    for (int steps : {1, 2, 4}) {
        for (double guidance : {1.0, 2.0}) {
            auto counting = std::make_shared<CountingNet>(net());
            PipelineConfig cfg;
            cfg.steps = steps;
            cfg.cond.guidance_scale = guidance;
            stylize(counting, codec(), content(), style(), cfg, schedule());
            EXPECT_EQ(counting->calls.load(), 2 + steps * (guidance == 1.0 ? 1 : 2));
        }
    }
    auto counting = std::make_shared<CountingNet>(net());
    PipelineConfig cfg;
    cfg.seac_enabled = false;
    const auto r = stylize(counting, codec(), content(), style(), cfg, schedule());
    EXPECT_EQ(counting->calls.load(), 8);
    EXPECT_FALSE(r.record.extraction);
}

TEST(Stylize, SingleStepReplayMatchesLoop) {
    PipelineConfig cfg;
    cfg.steps = 2;
    cfg.seed = 9;
    const auto r = stylize(net(), codec(), content(), style(), cfg, schedule());

    const LatentTensor z_src = codec().encode(content());
    const LatentTensor z_ref = codec().encode(style());
    const FeatureBank bank = extract_consistency_features(*net(), z_src, z_ref, cfg.tau, cfg.cond, schedule(), cfg.seed);
    SeacConfig seac = cfg.seac;
    seac.merge_seed = cfg.seed;
    const auto view = register_processor(net(), seac.layer_selector, make_seac_processor(bank, seac));
    const int index = 1;
    const int t = r.record.timesteps[index];
    const LatentTensor zt = forward_noise(z_src, t, sampling_noise(cfg.seed, index, z_src), schedule());
    const LatentTensor replay = predict_x0(zt, t, predict_with_cfg(*view, zt, t, cfg.cond), schedule()).consistent;
    EXPECT_EQ(replay, r.latent);
}

TEST(Stylize, LambdaMovesOutputAwayFromReconstruction) {
    PipelineConfig cfg;
    cfg.seac_enabled = false;
    const LatentTensor plain = stylize(net(), codec(), content(), style(), cfg, schedule()).latent;
    cfg.seac_enabled = true;
    double previous = -1.0;
    for (double lambda : {0.5, 1.0, 1.2, 1.5}) {
        cfg.seac.lambda = lambda;
        const double d = l2_distance(stylize(net(), codec(), content(), style(), cfg, schedule()).latent, plain);
        std::cout << "[ info ] lambda " << lambda << " distance from plain run " << d << '\n';
        EXPECT_GE(d, previous) << lambda;
        previous = d;
    }
}

TEST(Stylize, TargetRenoiseModeDiffersAfterFirstStep) {
    PipelineConfig cfg;
    cfg.steps = 1;
    const auto src1 = stylize(net(), codec(), content(), style(), cfg, schedule()).latent;
    cfg.renoise_mode = RenoiseMode::target;
    EXPECT_EQ(stylize(net(), codec(), content(), style(), cfg, schedule()).latent, src1);
    cfg.steps = 3;
    const auto target = stylize(net(), codec(), content(), style(), cfg, schedule()).latent;
    cfg.renoise_mode = RenoiseMode::source;
    EXPECT_NE(stylize(net(), codec(), content(), style(), cfg, schedule()).latent, target);
}

TEST(Stylize, StrengthShortensPlan) {
    PipelineConfig cfg;
    cfg.strength = 0.5;
    const auto r = stylize(net(), codec(), content(), style(), cfg, schedule());
    EXPECT_LE(r.record.timesteps.front(), 500);
    EXPECT_EQ(r.record.steps.size(), 4u);
}

TEST(Stylize, FailuresCarryPartialRecord) {
    PipelineConfig cfg;
    cfg.tau = 0;
    try {
        stylize(net(), codec(), content(), style(), cfg, schedule());
        FAIL() << "tau = 0 accepted";
    } catch (const PipelineError& e) {
        EXPECT_FALSE(e.record().complete);
        EXPECT_NE(e.record().error.find("tau = 0"), std::string::npos);
        EXPECT_EQ(e.record().timesteps.size(), 4u);
        EXPECT_TRUE(e.record().steps.empty());
        EXPECT_FALSE(e.record().content_hash.empty());
    }
    cfg = PipelineConfig{};
    cfg.steps = 0;
    EXPECT_THROW(stylize(net(), codec(), content(), style(), cfg, schedule()), PipelineError);
    cfg = PipelineConfig{};
    cfg.strength = 1.5;
    EXPECT_THROW(stylize(net(), codec(), content(), style(), cfg, schedule()), PipelineError);
    cfg = PipelineConfig{};
    cfg.seac.lambda = -1.0;
    EXPECT_THROW(stylize(net(), codec(), content(), style(), cfg, schedule()), PipelineError);
    EXPECT_THROW(stylize(net(), codec(), content(), synthetic_portrait(8, 2), PipelineConfig{}, schedule()), PipelineError);
    EXPECT_THROW(stylize(nullptr, codec(), content(), style(), PipelineConfig{}, schedule()), std::invalid_argument);
}

TEST(Stylize, ConcurrentRunsMatchSequential) {
    PipelineConfig cfg;
    cfg.steps = 2;
    const auto expected = stylize(net(), codec(), content(), style(), cfg, schedule()).record.record_hash();
    std::vector<std::string> hashes(3);
    std::vector<std::thread> threads;
    for (int i = 0; i < 3; ++i)
        threads.emplace_back([&, i] { hashes[i] = stylize(net(), codec(), content(), style(), cfg, schedule()).record.record_hash(); });
    for (auto& t : threads) t.join();
    for (const auto& h : hashes) EXPECT_EQ(h, expected);
}

TEST(Stylize, UnsafeNetworksAreSerialised) {
    auto counting = std::make_shared<CountingNet>(net(), false);
    PipelineConfig cfg;
    cfg.steps = 1;
    std::vector<std::thread> threads;
    for (int i = 0; i < 3; ++i) threads.emplace_back([&] { stylize(counting, codec(), content(), style(), cfg, schedule()); });
    for (auto& t : threads) t.join();
    EXPECT_EQ(counting->peak.load(), 1);
    EXPECT_EQ(counting->calls.load(), 3 * 4);
}
