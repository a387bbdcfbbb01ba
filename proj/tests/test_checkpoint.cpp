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

#include "flowcsi/checkpoint.hpp"
#include "flowcsi/channel_model.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace flowcsi;

namespace {

std::vector<ChannelVector> small_data(int n) {
    const ArrayGeometry geom{2, 4, 0.5};
    std::vector<ChannelVector> out;
    for (int i = 0; i < n; ++i) out.push_back(generate_channel_at(geom, ClusterModelConfig{}, static_cast<std::uint64_t>(i)));
    return out;
}

nn::UNetConfig tiny_unet() {
    nn::UNetConfig u;
    u.levels = 2;
    u.base_width = 8;
    u.channel_mult = {1, 2};
    u.time_dim = 16;
    u.time_frequencies = 4;
    return u;
}

std::string bytes_of_frontend(const FrontendModel& m) {
    std::ostringstream os;
    save_frontend(os, m);
    return os.str();
}

std::string bytes_of_flow(const FlowModel& m) {
    std::ostringstream os;
    save_flow(os, m);
    return os.str();
}

}  // namespace

TEST(Checkpoint, FrontendRoundTrip) {
    Rng rng(1);
    const auto data = small_data(64);
    TrainConfig tc;
    tc.steps = 20;
    tc.batch_size = 16;
    for (const QuantizerSpec& q : {QuantizerSpec::uniform(2), QuantizerSpec::mulaw(3), QuantizerSpec::learned(2, 4)}) {
        FrontendModel fe = train_frontend(data, make_frontend(8, 4, q, Objective::chordal, rng), Objective::chordal, tc, rng);
        std::istringstream is(bytes_of_frontend(fe));
        const FrontendModel back = load_frontend(is);
        EXPECT_EQ(back.params, fe.params);
        EXPECT_EQ(back.quantizer, fe.quantizer);
        EXPECT_EQ(back.objective, Objective::chordal);
        EXPECT_EQ(back.hidden, fe.hidden);
        const auto bits = encode_batch(fe, data);
        EXPECT_EQ(encode_batch(back, data), bits);
        EXPECT_EQ(decode_frontend_batch(back, bits), decode_frontend_batch(fe, bits));
        EXPECT_EQ(bytes_of_frontend(back), bytes_of_frontend(fe));
    }
}

TEST(Checkpoint, FlowRoundTripKeepsEmaAndSettings) {
    Rng rng(2);
    const auto data = small_data(64);
    const FrontendModel fe = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    FlowConfig cfg;
    cfg.mode = FlowMode::refiner;
    cfg.sigma0 = 0.2;
    cfg.n_step = 3;
    cfg.ema_decay = 0.9;
    cfg.solver = Solver::euler;
    FlowTrainConfig tc;
    tc.steps = 5;
    tc.batch_size = 8;
    const FlowModel m = train_flow(data, fe, make_flow_model(cfg, tiny_unet(), 8, 4, "uniform_mse_B8", rng), tc, rng);
    ASSERT_FALSE(m.ema.shadow == m.field.params());
    std::istringstream is(bytes_of_flow(m));
    const FlowModel back = load_flow(is);
    EXPECT_EQ(back.config.mode, FlowMode::refiner);
    EXPECT_EQ(back.config.sigma0, 0.2);
    EXPECT_EQ(back.config.n_step, 3);
    EXPECT_EQ(back.config.ema_decay, 0.9);
    EXPECT_EQ(back.config.solver, Solver::euler);
    EXPECT_EQ(back.frontend_ref, "uniform_mse_B8");
    EXPECT_EQ(back.field.params(), m.field.params());
    EXPECT_EQ(back.ema.shadow, m.ema.shadow);
    EXPECT_EQ(back.field.time_embedding().frequencies, m.field.time_embedding().frequencies);
    const auto bits = encode_batch(fe, data);
    EXPECT_EQ(refine_batch(bits, fe, back), refine_batch(bits, fe, m));
    EXPECT_EQ(bytes_of_flow(back), bytes_of_flow(m));
}

TEST(Checkpoint, DirectModeRoundTrip) {
    Rng rng(3);
    const FrontendModel fe = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    FlowConfig cfg;
    cfg.mode = FlowMode::direct;
    cfg.cond = CondKind::bit_planes;
    const FlowModel m = make_flow_model(cfg, tiny_unet(), 8, 8, "x", rng);
    std::istringstream is(bytes_of_flow(m));
    const FlowModel back = load_flow(is);
    EXPECT_EQ(back.config.mode, FlowMode::direct);
    EXPECT_EQ(back.config.cond, CondKind::bit_planes);
    EXPECT_EQ(back.field.config().cond_channels, 8);
}

TEST(Checkpoint, WrongModuleTagRejected) {
    Rng rng(4);
    const FrontendModel fe = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    std::istringstream is(bytes_of_frontend(fe));
    EXPECT_THROW(load_flow(is), FormatError);
    std::istringstream peek(bytes_of_frontend(fe));
    EXPECT_EQ(peek_module(peek), ModuleTag::frontend);
}

TEST(Checkpoint, CorruptionRejected) {
    Rng rng(5);
    const FrontendModel fe = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    std::string bytes = bytes_of_frontend(fe);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream a(bad_magic);
    EXPECT_THROW(load_frontend(a), FormatError);
    std::string bad_version = bytes;
    bad_version[4] = 9;
    std::istringstream b(bad_version);
    EXPECT_THROW(load_frontend(b), FormatError);
    std::istringstream c(bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_frontend(c), FormatError);
}

TEST(Checkpoint, MissingFileReported) {
    EXPECT_THROW(load_frontend(std::string("/nonexistent/dir/none.mgcf")), Error);
}

TEST(Checkpoint, SameSeedSameBytes) {
    const auto data = small_data(64);
    auto run = [&] {
        Rng rng(6);
        TrainConfig tc;
        tc.steps = 15;
        tc.batch_size = 16;
        return bytes_of_frontend(
            train_frontend(data, make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng), Objective::mse, tc, rng));
    };
    EXPECT_EQ(run(), run());
}
