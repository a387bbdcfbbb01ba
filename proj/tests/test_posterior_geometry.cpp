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

#include "flowcsi/posterior_geometry.hpp"
#include "flowcsi/channel_model.hpp"
#include "flowcsi/theory_checks.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace flowcsi;

namespace {

CVec unit(Index n, Index i) {
    CVec v = CVec::Zero(n);
    v[i] = 1.0;
    return v;
}

CVec planar(double deg) {
    CVec v(2);
    const double a = deg * std::numbers::pi / 180.0;
    v << std::cos(a), std::sin(a);
    return v;
}

// Hand-rolled ZF leakage of a tuple, no projector helpers.
double leakage_oracle(const MixturePosterior& mix, const std::vector<Index>& m) {
    const Index users = mix.num_users();
    const Index dim = mix.dim();
    CMat h(dim, users);
    for (Index k = 0; k < users; ++k) h.col(k) = mix.mode(k, m[static_cast<std::size_t>(k)]);
    const CMat f = h * (h.adjoint() * h).inverse();
    double total = 0.0;
    for (Index n = 0; n < users; ++n) {
        const CVec beam = f.col(n).normalized();
        for (Index k = 0; k < users; ++k) {
            if (k == n) continue;
            for (Index l = 0; l < mix.num_modes(k); ++l)
                if (l != m[static_cast<std::size_t>(k)]) total += mix.weight(k, l) * std::norm(mix.mode(k, l).dot(beam));
        }
    }
    return total;
}

}  // namespace

TEST(SecondMoment, SingleMemberIsRankOne) {
    Rng rng(1);
    const CVec u = random_unit(rng, 5);
    const SecondMoment r = second_moment(std::vector<CVec>{3.0 * u});
    EXPECT_LT((r.R - u * u.adjoint()).norm(), 1e-12);
    const PrincipalDirection pd = optimal_direction(r);
    EXPECT_NEAR(pd.lambda_max, 1.0, 1e-12);
    EXPECT_NEAR(pd.min_distortion, 0.0, 1e-12);
    EXPECT_NEAR(std::norm(pd.u_star.dot(u)), 1.0, 1e-12);
}

TEST(SecondMoment, OrthonormalPairSplitsEvenly) {
    const SecondMoment r = second_moment(std::vector<CVec>{unit(3, 0), unit(3, 2)});
    Eigen::SelfAdjointEigenSolver<CMat> es(r.R);
    EXPECT_NEAR(es.eigenvalues()[0], 0.0, 1e-12);
    EXPECT_NEAR(es.eigenvalues()[1], 0.5, 1e-12);
    EXPECT_NEAR(es.eigenvalues()[2], 0.5, 1e-12);
    // Tie broken towards the lowest index with a real positive leading entry.
    const PrincipalDirection pd = optimal_direction(r);
    EXPECT_NEAR(std::abs(pd.u_star[0]), 1.0, 1e-12);
    EXPECT_NEAR(pd.u_star[0].imag(), 0.0, 1e-12);
    EXPECT_GT(pd.u_star[0].real(), 0.0);
}

TEST(SecondMoment, EmptyAndMixedLengthsRejected) {
    EXPECT_THROW(second_moment(std::vector<CVec>{}), InvalidConfig);
    EXPECT_THROW(second_moment(std::vector<CVec>{unit(2, 0), unit(3, 0)}), DimensionMismatch);
}

TEST(SecondMoment, ScaleInvariant) {
    Rng rng(2);
    std::vector<CVec> a, b;
    std::uniform_real_distribution<double> scale(0.1, 10.0);
    for (int i = 0; i < 20; ++i) {
        a.push_back(crandn(rng, 4));
        b.push_back(a.back() * cplx(scale(rng), scale(rng)));
    }
    EXPECT_LT((second_moment(a).R - second_moment(b).R).norm(), 1e-12);
}

TEST(SecondMoment, ValidPsdUnitTrace) {
    Rng rng(3);
    std::vector<CVec> a;
    for (int i = 0; i < 30; ++i) a.push_back(crandn(rng, 6));
    EXPECT_NO_THROW(second_moment(a).validate());
}

TEST(PrincipalDirection, BruteForceDirectionsNeverBeatEigenvector) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const SecondMoment r = theory::random_second_moment(rng, 4);
        const PrincipalDirection pd = optimal_direction(r);
        Eigen::SelfAdjointEigenSolver<CMat> es(r.R);
        EXPECT_NEAR(pd.lambda_max, es.eigenvalues().maxCoeff(), 1e-12);
        EXPECT_NEAR(rayleigh(pd.u_star, r), pd.lambda_max, 1e-9);
        double best = 0.0;
        for (int d = 0; d < 10000; ++d) best = std::max(best, rayleigh(random_unit(rng, 4), r));
        EXPECT_LE(best, pd.lambda_max + 1e-9);
    }
}

TEST(PrincipalDirection, IsotropicCellHasNoGap) {
    const Index n = 5;
    SecondMoment r{CMat::Identity(n, n) / static_cast<double>(n), 1};
    Rng rng(5);
    for (int i = 0; i < 10; ++i) {
        const CVec u = random_unit(rng, n);
        EXPECT_NEAR(chordal_distortion(u, r), 1.0 - 1.0 / n, 1e-12);
        EXPECT_NEAR(alignment_gap(u, r), 0.0, 1e-12);
    }
}

TEST(PrincipalDirection, ChordalIdentityMatchesPairwiseAverage) {
    Rng rng(6);
    for (int c = 0; c < 50; ++c) {
        const Index n = 2 + static_cast<Index>(rng() % 7);
        std::vector<CVec> members;
        const std::size_t count = 1 + rng() % 100;
        for (std::size_t i = 0; i < count; ++i) members.push_back(random_unit(rng, n));
        const CVec u_hat = random_unit(rng, n);
        double direct = 0.0;
        for (const auto& u : members) direct += 1.0 - std::norm(u_hat.dot(u));
        direct /= static_cast<double>(count);
        EXPECT_NEAR(chordal_distortion(u_hat, second_moment(members)), direct, 1e-10);
    }
}

TEST(PrincipalDirection, NonUnitCandidateRejected) {
    const SecondMoment r = second_moment(std::vector<CVec>{unit(2, 0)});
    EXPECT_THROW(chordal_distortion(2.0 * unit(2, 0), r), InvalidConfig);
}

TEST(ToyMixture, ObjectivesMatchReportedValues) {
    Rng rng(7);
    const theory::ToyResult r = theory::toy_objectives(theory::ToyMixture{}, 200000, rng);
    EXPECT_NEAR(r.lambda_max, 0.824, 0.01);
    EXPECT_NEAR(r.objective_v1, 0.760, 0.01);
    EXPECT_NEAR(r.objective_cm, 0.337, 0.01);
    // Weighted sum 0.6 v1 + 0.4 v2 normalised, computed by hand.
    const double a = 130.0 * std::numbers::pi / 180.0;
    const double x = 0.6 + 0.4 * std::cos(a), y = 0.4 * std::sin(a);
    const double nrm = std::hypot(x, y);
    EXPECT_NEAR(r.u_cm[0].real(), x / nrm, 1e-12);
    EXPECT_NEAR(r.u_cm[1].real(), y / nrm, 1e-12);
}

TEST(ConditionalMean, AntipodalModesAreDegenerate) {
    RVec w(2);
    w << 0.5, 0.5;
    EXPECT_THROW(conditional_mean_direction({planar(0.0), planar(180.0)}, w), DegenerateMean);
}

TEST(ConditionalMean, UnequalWeightsPickDominantSide) {
    RVec w(2);
    w << 0.7, 0.3;
    const CVec u = conditional_mean_direction({planar(0.0), planar(180.0)}, w);
    EXPECT_NEAR(u[0].real(), 1.0, 1e-12);
}

TEST(Projector, Algebra) {
    const Index n = 4;
    EXPECT_LT((projector_complement({}, n) - CMat::Identity(n, n)).norm(), 1e-12);
    CMat expect = CMat::Identity(n, n);
    expect(0, 0) = 0.0;
    EXPECT_LT((projector_complement({unit(n, 0)}, n) - expect).norm(), 1e-12);
    std::vector<CVec> full;
    for (Index i = 0; i < n; ++i) full.push_back(unit(n, i));
    EXPECT_LT(projector_complement(full, n).norm(), 1e-12);
    Rng rng(8);
    const std::vector<CVec> span{crandn(rng, n), crandn(rng, n)};
    const CMat p = projector_complement(span, n);
    EXPECT_LT((p * p - p).norm(), 1e-12);
    EXPECT_LT((p - p.adjoint()).norm(), 1e-12);
    EXPECT_LT((p * span[0]).norm(), 1e-12);
    EXPECT_NEAR(p.trace().real(), 2.0, 1e-12);
}

TEST(Interference, SingleModePosteriorHasNoPsLeakage) {
    Rng rng(9);
    MixturePosterior mix;
    for (int k = 0; k < 3; ++k) {
        mix.modes.push_back({random_unit(rng, 4)});
        mix.weights.push_back(RVec::Ones(1));
    }
    const InterferenceEstimate e = interference_ps_exact(mix);
    EXPECT_NEAR(e.value, 0.0, 1e-15);
    EXPECT_EQ(e.tuples, 1u);
    const std::vector<Index> m{0, 0, 0};
    const LocalTermReport t = local_terms(mix, m, 1, 0);
    EXPECT_NEAR(t.c_n, 1.0, 1e-12);
    EXPECT_LT(t.d_n.norm(), 1e-15);
    EXPECT_NEAR(t.c_cm, 0.0, 1e-15);
    EXPECT_NEAR(t.i_ps_local, 0.0, 1e-15);
}

TEST(Interference, OrthogonalSingleModesGiveZeroCm) {
    MixturePosterior mix;
    mix.modes = {{unit(3, 0)}, {unit(3, 1)}};
    mix.weights = {RVec::Ones(1), RVec::Ones(1)};
    EXPECT_NEAR(interference_cm(mix), 0.0, 1e-15);
}

TEST(Interference, ExactMatchesHandEnumeration) {
    Rng rng(10);
    MixturePosterior mix;
    for (int k = 0; k < 2; ++k) {
        mix.modes.push_back({random_unit(rng, 4), random_unit(rng, 4)});
        RVec w(2);
        w << 0.3 + 0.2 * k, 0.7 - 0.2 * k;
        mix.weights.push_back(w);
    }
    double oracle = 0.0;
    for (Index a = 0; a < 2; ++a)
        for (Index b = 0; b < 2; ++b) oracle += mix.weight(0, a) * mix.weight(1, b) * leakage_oracle(mix, {a, b});
    const InterferenceEstimate e = interference_ps_exact(mix);
    EXPECT_NEAR(e.value, oracle, 1e-12);
    EXPECT_EQ(e.tuples, 4u);
    EXPECT_EQ(e.excluded, 0u);
}

TEST(Interference, MonteCarloWithinThreeStandardErrors) {
    Rng rng(11);
    MixturePosterior mix;
    for (int k = 0; k < 3; ++k) {
        std::vector<CVec> modes;
        for (int m = 0; m < 3; ++m) modes.push_back(random_unit(rng, 6));
        mix.modes.push_back(modes);
        RVec w(3);
        w << 0.5, 0.3, 0.2;
        mix.weights.push_back(w);
    }
    const double exact = interference_ps_exact(mix).value;
    const InterferenceEstimate mc = interference_ps_monte_carlo(mix, 20000, rng);
    EXPECT_GT(mc.standard_error, 0.0);
    EXPECT_LE(std::abs(mc.value - exact), 3.0 * mc.standard_error);
}

TEST(Interference, CmMatchesHandComputation) {
    Rng rng(12);
    MixturePosterior mix;
    for (int k = 0; k < 2; ++k) {
        mix.modes.push_back({random_unit(rng, 3), random_unit(rng, 3)});
        RVec w(2);
        w << 0.6, 0.4;
        mix.weights.push_back(w);
    }
    CMat h(3, 2);
    for (Index k = 0; k < 2; ++k) h.col(k) = (0.6 * mix.mode(k, 0) + 0.4 * mix.mode(k, 1)).normalized();
    const CMat f = h * (h.adjoint() * h).inverse();
    double oracle = 0.0;
    for (Index n = 0; n < 2; ++n) {
        const CVec beam = f.col(n).normalized();
        const Index k = 1 - n;
        for (Index l = 0; l < 2; ++l) oracle += mix.weight(k, l) * std::norm(mix.mode(k, l).dot(beam));
    }
    EXPECT_NEAR(interference_cm(mix), oracle, 1e-12);
}

TEST(Interference, InvalidWeightsRejected) {
    MixturePosterior mix;
    mix.modes = {{unit(2, 0)}, {unit(2, 1)}};
    RVec bad(1);
    bad << 0.5;
    mix.weights = {RVec::Ones(1), bad};
    EXPECT_THROW(interference_cm(mix), InvalidConfig);
}

TEST(LocalTerms, DecompositionIdentities) {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        MixturePosterior mix;
        const Index users = 2 + static_cast<Index>(rng() % 2);
        for (Index k = 0; k < users; ++k) {
            const Index modes = 1 + static_cast<Index>(rng() % 3);
            std::vector<CVec> v;
            RVec w(modes);
            for (Index m = 0; m < modes; ++m) {
                v.push_back(random_unit(rng, 5));
                w[m] = 0.1 + static_cast<double>(rng() % 100) / 100.0;
            }
            mix.modes.push_back(v);
            mix.weights.push_back(w / w.sum());
        }
        std::vector<Index> m;
        for (Index k = 0; k < users; ++k) m.push_back(static_cast<Index>(rng() % static_cast<std::uint64_t>(mix.num_modes(k))));
        const LocalTermReport t = local_terms(mix, m, 1, 0);
        EXPECT_NEAR(t.i_cm_local, t.i_cm_direct, 1e-12);
        const CVec recon = t.c_n * mix.mode(0, m[0]) + t.d_n;
        EXPECT_LT((recon - mix.cm_direction(0)).norm(), 1e-12);
    }
}

TEST(MeanLeakage, GeneratorGivesSameProjector) {
    Rng rng(14);
    for (int i = 0; i < 50; ++i) {
        const theory::SameProjectorInstance inst = theory::make_same_projector_instance(rng, 6, 3, 3);
        for (Index j = 0; j < 3; ++j) {
            if (j == inst.n) continue;
            // mu_j parallel to the selected mode.
            const CVec mu = inst.mix.mean(j);
            EXPECT_NEAR(std::norm(mu.normalized().dot(inst.mix.mode(j, 0))), 1.0, 1e-12);
        }
    }
}

TEST(MeanLeakage, NoCounterexampleAcrossSweep) {
    std::vector<LeakageCertificate> reports;
    const theory::LeakageSweep s = theory::sweep_leakage_certificates(15, 500, &reports);
    EXPECT_EQ(s.instances, 500u);
    EXPECT_EQ(s.same_projector, s.pairs);
    EXPECT_GT(s.hypotheses_hold, 0u);
    EXPECT_EQ(s.counterexamples, 0u);
    EXPECT_LT(s.max_residual, 1e-12);
    for (const auto& r : reports) {
        if (!r.hypotheses_hold) continue;
        // The bound itself, recomputed from the reported terms.
        const auto& t = r.terms;
        const double lower = (t.c_n * t.c_n * t.r_ps + t.c_cm) / t.eta_cm;
        EXPECT_GE(t.i_cm_local + 1e-12, lower);
        EXPECT_GT(lower, t.r_ps / t.eta_ps);
    }
}

TEST(MeanLeakage, DifferentProjectorNotCertified) {
    Rng rng(16);
    MixturePosterior mix;
    for (int k = 0; k < 2; ++k) {
        mix.modes.push_back({random_unit(rng, 3), random_unit(rng, 3)});
        RVec w(2);
        w << 0.5, 0.5;
        mix.weights.push_back(w);
    }
    const LeakageCertificate r = certify_mean_leakage(mix, {0, 0}, 1, 0);
    EXPECT_FALSE(r.same_projector);
    EXPECT_FALSE(r.hypotheses_hold);
    EXPECT_FALSE(r.counterexample());
}

TEST(Mds, TwoPointsKeepDistance) {
    Rng rng(17);
    const CVec a = random_unit(rng, 4), b = random_unit(rng, 4);
    const MdsEmbedding e = mds_embed({a, b});
    EXPECT_NEAR((e.coords.row(0) - e.coords.row(1)).squaredNorm(), chordal_distance_sq(a, b), 1e-12);
    EXPECT_NEAR(e.eigenvalues[1], 0.0, 1e-12);
}

TEST(Mds, EquilateralTriangle) {
    const std::vector<CVec> pts{unit(3, 0), unit(3, 1), unit(3, 2)};
    const MdsEmbedding e = mds_embed(pts);
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) EXPECT_NEAR((e.coords.row(i) - e.coords.row(j)).squaredNorm(), 1.0, 1e-12);
}

TEST(Mds, DuplicatesCollapse) {
    Rng rng(18);
    const CVec a = random_unit(rng, 3);
    const MdsEmbedding e = mds_embed({a, a * cplx(0.0, 1.0), a});
    EXPECT_LT(e.coords.norm(), 1e-6);
    EXPECT_THROW(mds_embed({a}), InvalidConfig);
}

TEST(Cells, PartitionAndReencode) {
    Rng rng(19);
    const ArrayGeometry geom{2, 4, 0.5};
    std::vector<ChannelVector> data;
    for (int i = 0; i < 300; ++i) data.push_back(generate_channel_at(geom, ClusterModelConfig{}, static_cast<std::uint64_t>(i)));
    const FrontendModel fe = make_frontend(8, 3, QuantizerSpec::uniform(1), Objective::mse, rng);
    const CellCollection cells = collect_cells(data, fe, 5);
    std::size_t total = 0;
    for (const auto& [bits, cell] : cells.cells) {
        total += cell.count();
        EXPECT_EQ(cell.bits, bits);
    }
    EXPECT_EQ(total, data.size());
    EXPECT_EQ(cells.total, data.size());
    EXPECT_LE(cells.cells.size(), 8u);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const FeedbackBits b = encode(fe, data[i]);
        const auto& members = cells.cells.at(b).members;
        bool found = false;
        for (const auto& u : members) found = found || (u - data[i].direction()).norm() < 1e-15;
        EXPECT_TRUE(found);
    }
    EXPECT_EQ(cells.eligible().size() + cells.below_min(), cells.cells.size());
}

TEST(Modes, RecoversPlantedClusters) {
    Rng rng(20);
    const CVec a = unit(4, 0), b = unit(4, 3);
    std::vector<CVec> members;
    for (int i = 0; i < 60; ++i) {
        const CVec base = i < 40 ? a : b;
        members.push_back((base + 0.05 * crandn(rng, 4)).normalized());
    }
    const ModeExtraction ex = extract_modes(members, 2, rng);
    ASSERT_EQ(ex.modes.size(), 2u);
    EXPECT_NEAR(ex.weights.sum(), 1.0, 1e-12);
    const Index ia = std::norm(ex.modes[0].dot(a)) > 0.5 ? 0 : 1;
    EXPECT_GT(std::norm(ex.modes[static_cast<std::size_t>(ia)].dot(a)), 0.98);
    EXPECT_GT(std::norm(ex.modes[static_cast<std::size_t>(1 - ia)].dot(b)), 0.98);
    EXPECT_NEAR(ex.weights[ia], 40.0 / 60.0, 1e-12);
}
