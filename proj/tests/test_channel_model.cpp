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

#include "flowcsi/channel_model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

namespace flowcsi {
namespace {

TEST(Steering, BoresightIsAllOnes) {
    const ArrayGeometry g{4, 8, 0.5};
    const ChannelVector a = steering_vector(g, 0.0, 0.0);
    EXPECT_EQ(a.coeffs(), CVec::Ones(32));
    EXPECT_NEAR(a.norm(), std::sqrt(32.0), 1e-12);
}

TEST(Steering, ConstantModulus) {
    Rng rng(1);
    std::uniform_real_distribution<double> ang(-1.5, 1.5);
    for (int i = 0; i < 200; ++i) {
        const ChannelVector a = steering_vector(ArrayGeometry{2, 8, 0.5}, ang(rng), ang(rng));
        for (Index n = 0; n < a.size(); ++n) EXPECT_NEAR(std::abs(a.coeffs()[n]), 1.0, 1e-12);
    }
}

TEST(Steering, DftGridAnglesAreOrthogonal) {
    const ArrayGeometry g{1, 8, 0.5};
    std::vector<ChannelVector> a;
    for (int k = -3; k <= 4; ++k) a.push_back(steering_vector(g, std::asin(k / 4.0 * 1.0 / (2.0 * 0.5)), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j)
            EXPECT_LT(std::abs(a[i].coeffs().dot(a[j].coeffs())), 1e-10) << i << "," << j;
}

TEST(ChannelVectorViews, StackedAndComplexAgree) {
    Rng rng(2);
    const ChannelVector h(crandn(rng, 5));
    const RVec x = h.stacked();
    for (Index i = 0; i < 5; ++i) {
        EXPECT_EQ(x[i], h.coeffs()[i].real());
        EXPECT_EQ(x[5 + i], h.coeffs()[i].imag());
    }
    EXPECT_EQ(ChannelVector::from_stacked_real(x), h);
    EXPECT_NEAR(h.direction().norm(), 1.0, 1e-15);
    EXPECT_EQ(ChannelVector(CVec::Zero(3)).direction(), CVec::Zero(3));
}

TEST(ChannelSetShape, UserCountBounds) {
    Rng rng(3);
    EXPECT_THROW(ChannelSet(std::vector<ChannelVector>{}), InvalidConfig);
    std::vector<ChannelVector> many;
    for (int i = 0; i < 5; ++i) many.emplace_back(crandn(rng, 4));
    EXPECT_THROW(ChannelSet{many}, InvalidConfig);
    EXPECT_THROW(ChannelSet({ChannelVector(crandn(rng, 4)), ChannelVector(crandn(rng, 3))}), DimensionMismatch);
    const ChannelSet s({many[0], many[1]});
    EXPECT_EQ(s.matrix().row(1), many[1].coeffs().adjoint());
}

TEST(Generator, SingleRayIsScaledSteeringVector) {
    ClusterModelConfig cfg;
    cfg.num_paths = 1;
    cfg.angle_spread = 0.0;
    cfg.power_decay = 1.0;
    const ArrayGeometry g{2, 8, 0.5};
    for (std::uint64_t idx = 0; idx < 20; ++idx) {
        const CVec h = generate_channel_at(g, cfg, idx).coeffs();
        // Recover the angles from the phase steps along each axis.
        const double step_col = std::arg(h[1] / h[0]) / std::numbers::pi;  // sin(az) cos(el)
        const double step_row = std::arg(h[8] / h[0]) / std::numbers::pi;  // sin(el)
        const double el = std::asin(step_row);
        const double az = std::asin(step_col / std::cos(el));
        const CVec a = steering_vector(g, az, el).coeffs();
        const cplx alpha = h[0];
        EXPECT_LT((h - alpha * a).cwiseAbs().maxCoeff(), 1e-10 * std::abs(alpha));
    }
}

TEST(Generator, DeterministicPerIndex) {
    ClusterModelConfig cfg;
    cfg.seed = 99;
    const ArrayGeometry g;
    EXPECT_EQ(generate_channel_at(g, cfg, 7), generate_channel_at(g, cfg, 7));
    EXPECT_FALSE(generate_channel_at(g, cfg, 7) == generate_channel_at(g, cfg, 8));
}

TEST(Dataset, NormalisationOnLargeDraw) {
    ClusterModelConfig cfg;
    const ArrayGeometry g{4, 8, 0.5};
    const Dataset ds = build_dataset(g, cfg, 10000, 10, 1, 2);
    double mean = 0.0;
    for (const auto& h : ds.train) mean += h.coeffs().squaredNorm() / 32.0;
    mean /= 10000.0;
    EXPECT_GE(mean, 0.95);
    EXPECT_LE(mean, 1.05);
}

TEST(Dataset, Bookkeeping) {
    const Dataset ds = build_dataset(ArrayGeometry{}, ClusterModelConfig{}, 100, 50, 10, 4);
    EXPECT_EQ(ds.train.size(), 100u);
    EXPECT_EQ(ds.test.size(), 50u);
    ASSERT_EQ(ds.multiuser_sets.size(), 10u);
    for (std::size_t s = 0; s < 10; ++s) {
        const auto& m = ds.multiuser_sets[s];
        ASSERT_EQ(m.size(), 4u);
        EXPECT_EQ(std::set<std::uint32_t>(m.begin(), m.end()).size(), 4u);
        for (auto i : m) EXPECT_LT(i, 50u);
        EXPECT_LT(condition_number(ds.channel_set(s).matrix()), kMaxConditionNumber);
    }
    const Dataset single = build_dataset(ArrayGeometry{}, ClusterModelConfig{}, 10, 5, 3, 1);
    for (const auto& m : single.multiuser_sets) EXPECT_EQ(m.size(), 1u);
}

TEST(Dataset, TooManyUsersRejected) {
    EXPECT_THROW(build_dataset(ArrayGeometry{}, ClusterModelConfig{}, 10, 3, 2, 4), InvalidConfig);
}

TEST(Dataset, TrainAndTestDisjoint) {
    const Dataset ds = build_dataset(ArrayGeometry{}, ClusterModelConfig{}, 500, 200, 5, 2);
    std::set<std::vector<double>> train;
    for (const auto& h : ds.train) {
        const RVec x = h.stacked();
        train.insert(std::vector<double>(x.data(), x.data() + x.size()));
    }
    for (const auto& h : ds.test) {
        const RVec x = h.stacked();
        EXPECT_EQ(train.count(std::vector<double>(x.data(), x.data() + x.size())), 0u);
    }
}

TEST(Dataset, ByteIdenticalRebuildAndRoundTrip) {
    ClusterModelConfig cfg;
    cfg.seed = 5;
    auto bytes = [&] {
        std::ostringstream os;
        save_dataset(os, build_dataset(ArrayGeometry{}, cfg, 40, 20, 6, 3));
        return os.str();
    };
    const std::string a = bytes();
    EXPECT_EQ(a, bytes());
    EXPECT_EQ(a.substr(0, 4), "MCSD");
    std::istringstream is(a);
    const Dataset ds = load_dataset(is);
    const Dataset ref = build_dataset(ArrayGeometry{}, cfg, 40, 20, 6, 3);
    EXPECT_EQ(ds.train, ref.train);
    EXPECT_EQ(ds.test, ref.test);
    EXPECT_EQ(ds.multiuser_sets, ref.multiuser_sets);
    EXPECT_EQ(ds.config.seed, 5u);

    std::istringstream bad("MCSX....");
    EXPECT_THROW(load_dataset(bad), FormatError);
    std::istringstream truncated(a.substr(0, a.size() / 2));
    EXPECT_THROW(load_dataset(truncated), FormatError);
}

TEST(Dataset, CsvHasTwoNColumns) {
    const Dataset ds = build_dataset(ArrayGeometry{}, ClusterModelConfig{}, 3, 2, 1, 1);
    std::ostringstream os;
    export_csv(os, ds.train);
    std::istringstream is(os.str());
    std::string line;
    int rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 31);
    }
    EXPECT_EQ(rows, 3);
}

}  // namespace
}  // namespace flowcsi
