#include <gtest/gtest.h>

#include "support.hpp"

using namespace zepo;
using zepo::testing::PerfectOracle;
using zepo::testing::random_latent;
using zepo::testing::TempDir;

namespace {

const DiffusionSchedule& schedule() {
    static const DiffusionSchedule s = build_schedule();
    return s;
}

NoisePredictorPtr net() {
    static const NoisePredictorPtr n = toy_backbone(4, 16, 0);
    return n;
}

} // namespace

TEST(Extraction, BankCoversEverySiteWithMatchingShapes) {
    const auto z_src = random_latent(1, 4, 16, 16, 1);
    const auto z_ref = random_latent(1, 4, 16, 16, 2);
    const FeatureBank bank = extract_consistency_features(*net(), z_src, z_ref, 99, {}, schedule(), 0);
    ASSERT_EQ(bank.layers().size(), net()->sites().size());
    EXPECT_EQ(bank.tau(), 99);
    for (const auto& l : bank.layers()) {
        const int r = l.site.resolution(16);
        EXPECT_EQ(l.grid_height, r);
        EXPECT_EQ(l.grid_width, r);
        EXPECT_EQ(l.source.tokens(), r * r);
        EXPECT_EQ(l.source.dim(), l.site.feature_dim);
        EXPECT_EQ(l.reference.tokens(), l.source.tokens());
        EXPECT_TRUE(l.source.all_finite());
        EXPECT_EQ(bank.find(l.site.layer_id), &l);
    }
    EXPECT_EQ(bank.find("nope"), nullptr);
    EXPECT_EQ(bank.source_hash(), sha256_hex(z_src.values()));
}

TEST(Extraction, TapsNormalisedHiddenState) {
    const auto z = random_latent(1, 4, 16, 16, 3);
    const FeatureBank bank = extract_consistency_features(*net(), z, z, 99, {}, schedule(), 0);
    for (const auto& l : bank.layers())
        for (int n = 0; n < l.source.tokens(); ++n) {
            double mean = 0.0;
            for (double v : l.source.token(0, n)) mean += v;
            EXPECT_NEAR(mean / l.source.dim(), 0.0, 1e-9);
        }
}

TEST(Extraction, SharedNoiseOnIdenticalInputsGivesIdenticalFeatures) {
    const auto z = random_latent(1, 4, 16, 16, 4);
    const FeatureBank shared = extract_consistency_features(*net(), z, z, 99, {}, schedule(), 5, NoiseSharing::shared);
    for (const auto& l : shared.layers()) EXPECT_EQ(zepo::testing::max_abs_diff(l.source, l.reference), 0.0);
    const FeatureBank indep = extract_consistency_features(*net(), z, z, 99, {}, schedule(), 5);
    for (const auto& l : indep.layers()) EXPECT_GT(zepo::testing::max_abs_diff(l.source, l.reference), 0.0);
}

TEST(Extraction, DeterministicPerSeed) {
    const auto a = random_latent(1, 4, 16, 16, 5);
    const auto b = random_latent(1, 4, 16, 16, 6);
    const auto h1 = extract_consistency_features(*net(), a, b, 99, {}, schedule(), 7).content_hash();
    EXPECT_EQ(h1, extract_consistency_features(*net(), a, b, 99, {}, schedule(), 7).content_hash());
    EXPECT_NE(h1, extract_consistency_features(*net(), a, b, 99, {}, schedule(), 8).content_hash());
    EXPECT_NE(h1, extract_consistency_features(*net(), a, b, 199, {}, schedule(), 7).content_hash());
}

TEST(Extraction, SingleConditionalPassPerImage) {
    auto counting = std::make_shared<zepo::testing::CountingNet>(net());
    AttentionMeter meter;
    const auto z = random_latent(1, 4, 16, 16, 8);
    extract_consistency_features(*counting, z, z, 99, {}, schedule(), 0, NoiseSharing::independent, &meter);
    EXPECT_EQ(counting->calls.load(), 2);
    EXPECT_EQ(meter.calls().size(), 2 * net()->sites().size());
}

TEST(Extraction, DegenerateTauIsRejectedWithDiagnostic) {
    const auto z = random_latent(1, 4, 8, 8, 9);
    try {
        extract_consistency_features(*net(), z, z, 0, {}, schedule(), 0);
        FAIL() << "tau = 0 accepted";
    } catch (const ExtractionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("tau = 0"), std::string::npos);
        EXPECT_NE(msg.find("identity"), std::string::npos);
        EXPECT_NE(msg.find("tau >= 1"), std::string::npos);
    }
}

TEST(Extraction, OtherErrors) {
    const auto z = random_latent(1, 4, 8, 8, 10);
    EXPECT_THROW(extract_consistency_features(*net(), z, z, -1, {}, schedule(), 0), ExtractionError);
    EXPECT_THROW(extract_consistency_features(*net(), z, z, 1000, {}, schedule(), 0), ExtractionError);
    EXPECT_THROW(extract_consistency_features(*net(), z, random_latent(1, 4, 16, 16, 1), 99, {}, schedule(), 0),
                 std::invalid_argument);
    BankLayer bad{net()->sites()[0], 2, 2, zepo::testing::random_seq(1, 4, 8, 1),
                  zepo::testing::random_seq(1, 3, 8, 2)};
    EXPECT_THROW(FeatureBank({bad}, 99, "", ""), std::invalid_argument);
}

TEST(Extraction, BankIsUnchangedBySampling) {
    const auto z_src = random_latent(1, 4, 16, 16, 11);
    const auto z_ref = random_latent(1, 4, 16, 16, 12);
    const FeatureBank bank = extract_consistency_features(*net(), z_src, z_ref, 99, {}, schedule(), 0);
    const std::string before = bank.content_hash();
    const auto view = register_processor(net(), parse_selector("mid,up"), make_seac_processor(bank, SeacConfig{}));
    for (int t : {999, 749, 499, 249}) predict_with_cfg(*view, random_latent(1, 4, 16, 16, t), t, ConditionSpec{});
    EXPECT_EQ(bank.content_hash(), before);
}

TEST(Probe, MatchesIndependentEstimate) {
    const auto z0 = random_latent(1, 4, 16, 16, 13, 0.5);
    const int t = 299;
    const ProbeResult r = probe_x0_prediction(*net(), z0, t, schedule(), ProbeMode::forward, 4);
    const auto eps = NoiseStream(4).normal_like(z0, NoiseStream::Purpose::sampling, t);
    const double a = std::sqrt(schedule().alpha_bar[t]);
    const double b = std::sqrt(1.0 - schedule().alpha_bar[t]);
    LatentTensor zt = z0;
    for (std::size_t i = 0; i < zt.size(); ++i) zt[i] = a * z0[i] + b * eps[i];
    EXPECT_LT(max_abs_diff(r.noised, zt), 1e-12);
    const auto e = net()->predict(zt, t, ConditionSpec{});
    for (std::size_t i = 0; i < zt.size(); ++i) EXPECT_NEAR(r.x0_hat[i], (zt[i] - b * e[i]) / a, 1e-9);
}

TEST(Probe, PerfectOracleRecoversCleanLatent) {
    const auto z0 = random_latent(1, 4, 16, 16, 14, 0.5);
    const PerfectOracle oracle(net(), z0, schedule());
    for (int t : {1, 99, 499, 999}) {
        const ProbeResult r = probe_x0_prediction(oracle, z0, t, schedule());
        EXPECT_LT(max_abs_diff(r.x0_hat, z0), 1e-8) << t;
    }
}

TEST(Probe, ErrorGrowsWithTimestep) {
    const auto z0 = random_latent(1, 4, 16, 16, 15, 0.5);
    std::vector<double> err;
    for (int t : {99, 299, 599, 899}) err.push_back(l2_distance(probe_x0_prediction(*net(), z0, t, schedule()).x0_hat, z0));
    std::cout << "[ info ] probe l2 error t=99,299,599,899: " << err[0] << ' ' << err[1] << ' ' << err[2] << ' '
              << err[3] << '\n';
    EXPECT_LT(err.front(), err.back());
}

TEST(Probe, InversionStubNeedsProvider) {
    const auto z0 = random_latent(1, 4, 8, 8, 16);
    EXPECT_THROW(probe_x0_prediction(*net(), z0, 99, schedule(), ProbeMode::inversion_stub), std::invalid_argument);
    int calls = 0;
    const InversionProvider provider = [&](const LatentTensor& z, int t) {
        ++calls;
        EXPECT_EQ(t, 99);
        return forward_noise(z, t, LatentTensor(1, 4, 8, 8), schedule());
    };
    const ProbeResult r = probe_x0_prediction(*net(), z0, 99, schedule(), ProbeMode::inversion_stub, 0, {}, provider);
    EXPECT_EQ(calls, 1);
    EXPECT_LT(max_abs_diff(r.noised, forward_noise(z0, 99, LatentTensor(1, 4, 8, 8), schedule())), 1e-15);
    const InversionProvider bad = [](const LatentTensor&, int) { return LatentTensor(1, 4, 4, 4); };
    EXPECT_THROW(probe_x0_prediction(*net(), z0, 99, schedule(), ProbeMode::inversion_stub, 0, {}, bad),
                 std::invalid_argument);
}

TEST(Probe, Errors) {
    const auto z0 = random_latent(1, 4, 8, 8, 17);
    EXPECT_THROW(probe_x0_prediction(*net(), z0, 0, schedule()), std::invalid_argument);
    EXPECT_THROW(probe_x0_prediction(*net(), z0, 1000, schedule()), std::out_of_range);
}

TEST(FeatureDump, WritesNpyFilesAndIndex) {
    TempDir dir("dump");
    const auto z = random_latent(1, 4, 16, 16, 18);
    const FeatureBank bank = extract_consistency_features(*net(), z, z, 99, {}, schedule(), 0);
    dump_feature_bank(bank, dir.path() / "bank");
    std::ifstream in(dir.path() / "bank" / "index.json");
    const auto index = nlohmann::json::parse(in);
    EXPECT_EQ(index["tau"], 99);
    EXPECT_EQ(index["bank_hash"], bank.content_hash());
    ASSERT_EQ(index["layers"].size(), bank.layers().size());
    for (const auto& l : bank.layers()) {
        const auto bytes = zepo::testing::read_bytes((dir.path() / "bank" / (l.site.layer_id + ".src.npy")).string());
        ASSERT_GT(bytes.size(), 10u);
        EXPECT_EQ(bytes[0], 0x93);
        EXPECT_EQ(std::string(bytes.begin() + 1, bytes.begin() + 6), "NUMPY");
        const std::size_t header = bytes[8] | (bytes[9] << 8);
        EXPECT_EQ((10 + header) % 64, 0u);
        ASSERT_EQ(bytes.size(), 10 + header + l.source.size() * sizeof(double));
        double first = 0.0;
        std::memcpy(&first, bytes.data() + 10 + header, sizeof(double));
        EXPECT_EQ(first, l.source.values()[0]);
        const std::string text(bytes.begin() + 10, bytes.begin() + 10 + static_cast<std::ptrdiff_t>(header));
        EXPECT_NE(text.find("'shape': (1, " + std::to_string(l.source.tokens()) + ", " + std::to_string(l.source.dim())),
                  std::string::npos);
    }
}
