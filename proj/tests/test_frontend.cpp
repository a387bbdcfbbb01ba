// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "flowcsi/frontend.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace flowcsi {
namespace {

std::vector<ChannelVector> toy_channels(Index n, Index antennas, std::uint64_t seed) {
    ArrayGeometry geom{2, antennas / 2, 0.5};
    ClusterModelConfig cfg;
    cfg.seed = seed;
    std::vector<ChannelVector> out;
    for (Index i = 0; i < n; ++i) {
        const ChannelVector h = generate_channel_at(geom, cfg, static_cast<std::uint64_t>(i));
        out.emplace_back(h.coeffs() * std::sqrt(static_cast<double>(antennas)) / h.norm());
    }
    return out;
}

TEST(Quantizer, OneBitUniformMidpointsAndTie) {
    const QuantizerSpec q = QuantizerSpec::uniform(1);
    const RVec lv = q.levels_for(0);
    ASSERT_EQ(lv.size(), 2);
    EXPECT_DOUBLE_EQ(lv[0], -0.5);
    EXPECT_DOUBLE_EQ(lv[1], 0.5);
    const LatentCode c = quantize(q, RVec::Zero(1));
    EXPECT_EQ(c.indices[0], 0);
    EXPECT_DOUBLE_EQ(c.values[0], -0.5);
}

TEST(Quantizer, UniformIndexMatchesNearestLevelScan) {
    Rng rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int q = 1; q <= 6; ++q) {
        const RVec lv = uniform_levels(q);
        for (int i = 0; i < 2000; ++i) {
            const double z = u(rng);
            EXPECT_EQ(uniform_index(z, q), nearest_level(z, lv));
        }
    }
}

TEST(Quantizer, MuLawZeroMapsToNegativeSmallestLevel) {
    const QuantizerSpec q = QuantizerSpec::mulaw(4, 255.0);
    const LatentCode c = quantize(q, RVec::Zero(1));
    // Uniform level just below zero in the companded domain is -1/16; expand it by hand.
    const double expected = -(std::pow(256.0, 1.0 / 16.0) - 1.0) / 255.0;
    EXPECT_NEAR(c.values[0], expected, 1e-15);
    const RVec lv = q.levels_for(0);
    EXPECT_NEAR(c.values[0], -lv.cwiseAbs().minCoeff(), 1e-15);
}

TEST(Quantizer, MuLawCompandExpandAreInverse) {
    Rng rng(2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 10000; ++i) {
        const double z = u(rng);
        EXPECT_NEAR(mulaw_expand(mulaw_compand(z, 255.0), 255.0), z, 1e-12);
        EXPECT_NEAR(mulaw_compand(mulaw_expand(z, 255.0), 255.0), z, 1e-12);
    }
    EXPECT_DOUBLE_EQ(mulaw_compand(1.0, 255.0), 1.0);
    EXPECT_DOUBLE_EQ(mulaw_compand(-1.0, 255.0), -1.0);
}

TEST(Quantizer, NearestLearnedLevel) {
    RVec lv(3);
    lv << -1.0, 0.0, 1.0;
    EXPECT_EQ(nearest_level(0.4, lv), 1);
    EXPECT_EQ(nearest_level(0.5, lv), 1);  // tie goes low
    EXPECT_EQ(nearest_level(-0.5, lv), 0);
}

TEST(Quantizer, RequantisingALevelIsIdempotent) {
    Rng rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (QuantizerSpec spec : {QuantizerSpec::uniform(3), QuantizerSpec::mulaw(4), QuantizerSpec::learned(2, 5)}) {
        if (spec.kind == QuantizerKind::per_latent_learned) {
            for (Index r = 0; r < 5; ++r)
                for (Index c = 0; c < 4; ++c) spec.levels(r, c) = u(rng);
            tidy_learned_levels(spec);
        }
        for (int i = 0; i < 500; ++i) {
            RVec z(5);
            for (Index l = 0; l < 5; ++l) z[l] = u(rng);
            const LatentCode a = quantize(spec, z);
            const LatentCode b = quantize(spec, a.values);
            EXPECT_EQ(a.indices, b.indices) << to_string(spec.kind);
            EXPECT_EQ(a.values, b.values);
            EXPECT_EQ(dequantize(spec, a.indices), a.values);
        }
    }
}

TEST(Quantizer, ClippingIsSilentButCounted) {
    QuantStats st;
    RVec z(3);
    z << -3.0, 0.2, 1.5;
    const LatentCode c = quantize(QuantizerSpec::uniform(2), z, &st);
    EXPECT_EQ(st.clipped, 2u);
    EXPECT_EQ(c.indices[0], 0);
    EXPECT_EQ(c.indices[2], 3);
}

TEST(Bits, LayoutIsLatentMajorMsbFirst) {
    const FeedbackBits b = bits_from_indices({5, 12}, 4);
    EXPECT_EQ(b.str(), "01011100");
    EXPECT_EQ(indices_from_bits(b, 2, 4), (std::vector<int>{5, 12}));
    EXPECT_THROW(indices_from_bits(b, 3, 4), FormatError);
}

TEST(Bits, PackRoundTrip) {
    Rng rng(4);
    FeedbackBits b;
    for (int i = 0; i < 45; ++i) b.bits.push_back(static_cast<std::uint8_t>(rng() & 1u));
    const auto bytes = pack_bits(b);
    EXPECT_EQ(bytes.size(), 6u);
    EXPECT_EQ(unpack_bits(bytes, 45), b);
    EXPECT_EQ(pack_bits(bits_from_indices({0xA}, 4))[0], 0xA0);
}

TEST(Frontend, EightLatentsAtFourBitsGiveThirtyTwoBits) {
    Rng rng(5);
    const FrontendModel m = make_frontend(16, 8, QuantizerSpec::uniform(4), Objective::mse, rng);
    const auto hs = toy_channels(3, 16, 1);
    const FeedbackBits b = encode(m, hs[0]);
    EXPECT_EQ(b.size(), 32u);
    EXPECT_EQ(encode(m, hs[0]), b);
    EXPECT_EQ(encode_batch(m, hs)[0], b);
}

TEST(Frontend, WrongDimensionsAreRejected) {
    Rng rng(6);
    const FrontendModel m = make_frontend(16, 8, QuantizerSpec::uniform(4), Objective::mse, rng);
    EXPECT_THROW(encode(m, ChannelVector(CVec::Ones(8))), DimensionMismatch);
    FeedbackBits short_bits;
    short_bits.bits.assign(31, 0);
    EXPECT_THROW(decode_frontend(m, short_bits), FormatError);
}

TEST(Frontend, PerturbationInsideEveryCellKeepsBits) {
    Rng rng(7);
    const FrontendModel m = make_frontend(16, 8, QuantizerSpec::uniform(4), Objective::mse, rng);
    const auto hs = toy_channels(20, 16, 2);
    const double width = 2.0 / 16.0;
    for (const auto& h : hs) {
        const RVec z = encode_latents(m, {h}).col(0);
        // Distance of each latent to its nearest cell boundary.
        double margin = 1.0;
        for (Index l = 0; l < z.size(); ++l) {
            const double pos = (z[l] + 1.0) / width;
            margin = std::min(margin, std::abs(pos - std::round(pos)) * width);
        }
        const CVec d = crandn(rng, 16);
        double s = 1.0;
        ChannelVector hp(h.coeffs() + s * d);
        while ((encode_latents(m, {hp}).col(0) - z).cwiseAbs().maxCoeff() >= margin) {
            s *= 0.5;
            hp = ChannelVector(h.coeffs() + s * d);
        }
        EXPECT_EQ(encode(m, hp), encode(m, h));
    }
}

TEST(Frontend, EncoderOutputBoundedForHugeInputs) {
    Rng rng(8);
    const FrontendModel m = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    for (double scale : {1.0, 1e3, 1e8}) {
        const RVec z = encode_latents(m, {ChannelVector(crandn(rng, 8) * scale)}).col(0);
        EXPECT_LE(z.cwiseAbs().maxCoeff(), 1.0);
    }
}

TEST(Frontend, AllZeroBitsDecodeToLowestLevelImage) {
    Rng rng(9);
    const FrontendModel m = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    FeedbackBits zero;
    zero.bits.assign(8, 0);
    const ChannelVector a = decode_frontend(m, zero);
    EXPECT_TRUE(a.coeffs().allFinite());
    EXPECT_EQ(decode_frontend(m, zero), a);
    const RMat lowest = RMat::Constant(4, 1, -0.75);
    EXPECT_EQ(a.stacked(), RVec(decode_values(m, lowest).col(0)));
    EXPECT_EQ(decode_frontend(m, unpack_bits(pack_bits(zero), 8)), a);
}

TEST(Frontend, StraightThroughGradientEqualsIdentityQuantiser) {
    Rng rng(10);
    const FrontendModel m = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    const RMat x = stack_channels(toy_channels(5, 8, 3));

    // STE network.
    nn::Tape t;
    nn::Var xv = t.input(x, 5, 1);
    nn::Var z = encoder_graph(t, m.params, xv);
    nn::Var q = quantize_graph(t, m, m.params, z);
    nn::Var loss = nn::mse_loss(decoder_graph(t, m.params, q), xv);
    t.backward(loss);
    nn::Gradients g_ste = nn::zero_gradients(m.params);
    t.collect_param_grads(g_ste);

    // Same network with the quantiser replaced by the identity and the
    // quantised values fed in as a constant offset: q = z + (q0 - z0).
    nn::Tape u;
    nn::Var xu = u.input(x, 5, 1);
    nn::Var zu = encoder_graph(u, m.params, xu);
    nn::Var qu = nn::add(zu, u.input(q.value() - z.value(), 5, 1));
    nn::Var loss_u = nn::mse_loss(decoder_graph(u, m.params, qu), xu);
    u.backward(loss_u);
    nn::Gradients g_id = nn::zero_gradients(m.params);
    u.collect_param_grads(g_id);

    EXPECT_DOUBLE_EQ(loss.value()(0, 0), loss_u.value()(0, 0));
    for (std::size_t i = 0; i < g_ste.size(); ++i)
        EXPECT_LT((g_ste[i] - g_id[i]).cwiseAbs().maxCoeff(), 1e-14) << m.params.name(static_cast<Index>(i));
}

double dataset_loss(const FrontendModel& m, const std::vector<ChannelVector>& hs) {
    nn::Tape t(false);
    return frontend_loss(t, m, m.params, stack_channels(hs)).value()(0, 0);
}

class FrontendTraining : public ::testing::TestWithParam<std::tuple<QuantizerKind, Objective>> {};

TEST_P(FrontendTraining, TwoHundredStepsReduceLoss) {
    const auto [kind, objective] = GetParam();
    Rng rng(11);
    QuantizerSpec spec = kind == QuantizerKind::uniform ? QuantizerSpec::uniform(4)
                         : kind == QuantizerKind::mulaw ? QuantizerSpec::mulaw(4)
                                                        : QuantizerSpec::learned(4, 8);
    FrontendModel m = make_frontend(16, 8, spec, objective, rng);
    const auto data = toy_channels(100, 16, 4);
    const double before = dataset_loss(m, data);
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.batch_size = 32;
    const FrontendModel trained = train_frontend(data, m, objective, cfg, rng);
    EXPECT_EQ(trained.loss_curve.size(), 200u);
    EXPECT_LT(dataset_loss(trained, data), before);
    if (kind == QuantizerKind::per_latent_learned) {
        EXPECT_NO_THROW(trained.quantizer.validate(8));
        EXPECT_LE(trained.quantizer.levels.cwiseAbs().maxCoeff(), 1.0);
        EXPECT_NE(trained.quantizer.levels, QuantizerSpec::learned(4, 8).levels);
    }
}

INSTANTIATE_TEST_SUITE_P(Kinds, FrontendTraining,
                         ::testing::Values(std::tuple{QuantizerKind::uniform, Objective::mse},
                                           std::tuple{QuantizerKind::uniform, Objective::chordal},
                                           std::tuple{QuantizerKind::mulaw, Objective::mse},
                                           std::tuple{QuantizerKind::per_latent_learned, Objective::mse}));

TEST(FrontendTraining, SameSeedSameModel) {
    const auto data = toy_channels(50, 8, 5);
    auto run = [&] {
        Rng rng(12);
        FrontendModel m = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
        return train_frontend(data, m, Objective::mse, TrainConfig{30, 16, {}}, rng);
    };
    const FrontendModel a = run(), b = run();
    EXPECT_TRUE(a.params == b.params);
    EXPECT_EQ(a.loss_curve, b.loss_curve);
}

}  // namespace
}  // namespace flowcsi
