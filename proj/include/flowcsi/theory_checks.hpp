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

// Self-contained synthetic checks of the analytic results, used by verify-theory.

#ifndef FLOWCSI_THEORY_CHECKS_HPP
#define FLOWCSI_THEORY_CHECKS_HPP

#include "flowcsi/flow.hpp"
#include "flowcsi/posterior_geometry.hpp"
#include "flowcsi/precoding.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace flowcsi::theory {

// ---- two-mode planar toy ----

struct ToyMixture {
    double w1 = 0.6;
    double w2 = 0.4;
    double angle2_deg = 130.0;
    double variance = 0.01;
};

// Samples x ~ w1 N(v1, s I) + w2 N(v2, s I) in R^2 and returns x / ||x||.
inline std::vector<CVec> sample_toy_directions(const ToyMixture& t, std::size_t count, Rng& rng) {
    const double a = t.angle2_deg * std::numbers::pi / 180.0;
    RVec v1(2), v2(2);
    v1 << 1.0, 0.0;
    v2 << std::cos(a), std::sin(a);
    std::bernoulli_distribution first(t.w1 / (t.w1 + t.w2));
    std::normal_distribution<double> noise(0.0, std::sqrt(t.variance));
    std::vector<CVec> out;
    out.reserve(count);
    while (out.size() < count) {
        RVec x = first(rng) ? v1 : v2;
        x[0] += noise(rng);
        x[1] += noise(rng);
        const double nrm = x.norm();
        if (nrm == 0.0) continue;
        out.push_back((x / nrm).cast<cplx>());
    }
    return out;
}

struct ToyResult {
    double lambda_max = 0.0;
    double objective_v1 = 0.0;
    double objective_cm = 0.0;
    CVec u_cm;
};

inline ToyResult toy_objectives(const ToyMixture& t, std::size_t count, Rng& rng) {
    const SecondMoment r = second_moment(sample_toy_directions(t, count, rng));
    const double a = t.angle2_deg * std::numbers::pi / 180.0;
    CVec v1(2), v2(2);
    v1 << 1.0, 0.0;
    v2 << std::cos(a), std::sin(a);
    RVec w(2);
    w << t.w1, t.w2;
    ToyResult out;
    out.lambda_max = optimal_direction(r).lambda_max;
    out.objective_v1 = rayleigh(v1, r);
    out.u_cm = conditional_mean_direction({v1, v2}, w);
    out.objective_cm = rayleigh(out.u_cm, r);
    return out;
}

// ---- random inputs ----

// Hermitian PSD with unit trace.
inline SecondMoment random_second_moment(Rng& rng, Index n) {
    const Index rank = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(n));
    CMat g(n, rank);
    for (Index c = 0; c < rank; ++c) g.col(c) = crandn(rng, n);
    CMat r = g * g.adjoint();
    r /= r.trace().real();
    return {0.5 * (r + r.adjoint()), static_cast<std::size_t>(rank)};
}

// Mixture in which user j != n has a selected mode x_j flanked by two modes
// symmetric about it, so that mu_j is parallel to x_j. With the tuple
// selecting x_j for every j != n, the conditional-mean projector of user n
// equals the posterior-sampling one. User n carries arbitrary modes.
struct SameProjectorInstance {
    MixturePosterior mix;
    std::vector<Index> tuple;
    Index n = 0;
};

inline SameProjectorInstance make_same_projector_instance(Rng& rng, Index dim, Index users, Index modes_n) {
    require(users >= 2 && dim >= users, "need 2 <= K <= N");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    SameProjectorInstance inst;
    inst.n = static_cast<Index>(rng() % static_cast<std::uint64_t>(users));
    inst.mix.modes.resize(static_cast<std::size_t>(users));
    inst.mix.weights.resize(static_cast<std::size_t>(users));
    inst.tuple.assign(static_cast<std::size_t>(users), 0);
    for (Index j = 0; j < users; ++j) {
        auto& modes = inst.mix.modes[static_cast<std::size_t>(j)];
        RVec& w = inst.mix.weights[static_cast<std::size_t>(j)];
        if (j == inst.n) {
            for (Index m = 0; m < modes_n; ++m) modes.push_back(random_unit(rng, dim));
            w = RVec(modes_n);
            for (Index m = 0; m < modes_n; ++m) w[m] = 0.05 + unif(rng);
            w /= w.sum();
            inst.tuple[static_cast<std::size_t>(j)] = static_cast<Index>(rng() % static_cast<std::uint64_t>(modes_n));
        } else {
            const CVec x = random_unit(rng, dim);
            CVec y = random_unit(rng, dim);
            y -= x * x.dot(y);
            y.normalize();
            const double alpha = unif(rng) * std::numbers::pi * 0.45;
            const double p0 = 0.1 + 0.8 * unif(rng);
            const double side = 0.5 * (1.0 - p0);
            modes.push_back(x);
            modes.push_back((std::cos(alpha) * x + std::sin(alpha) * y).normalized());
            modes.push_back((std::cos(alpha) * x - std::sin(alpha) * y).normalized());
            w = RVec(3);
            w << p0, side, 1.0 - p0 - side;
            inst.tuple[static_cast<std::size_t>(j)] = 0;
        }
    }
    return inst;
}

// ---- individual checks ----

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline CheckResult check_toy(std::uint64_t seed) {
    Rng rng = make_stream(seed, 1);
    const ToyResult r = toy_objectives(ToyMixture{}, 200000, rng);
    const bool ok = std::abs(r.lambda_max - 0.824) <= 0.01 && std::abs(r.objective_v1 - 0.760) <= 0.01 &&
                    std::abs(r.objective_cm - 0.337) <= 0.01;
    return {"toy_mixture", ok,
            "lambda_max=" + fmt(r.lambda_max) + " v1=" + fmt(r.objective_v1) + " u_cm=" + fmt(r.objective_cm)};
}

inline CheckResult check_principal_direction(std::uint64_t seed) {
    Rng rng = make_stream(seed, 2);
    double worst_excess = -1.0, worst_attain = 0.0;
    for (int i = 0; i < 100; ++i) {
        const SecondMoment r = random_second_moment(rng, 4);
        const PrincipalDirection pd = optimal_direction(r);
        worst_attain = std::max(worst_attain, std::abs(rayleigh(pd.u_star, r) - pd.lambda_max));
        for (int d = 0; d < 10000; ++d) worst_excess = std::max(worst_excess, rayleigh(random_unit(rng, 4), r) - pd.lambda_max);
    }
    return {"principal_direction", worst_excess <= 1e-9 && worst_attain <= 1e-9,
            "max_excess=" + fmt(worst_excess) + " attain_err=" + fmt(worst_attain)};
}

inline CheckResult check_zf(std::uint64_t seed) {
    Rng rng = make_stream(seed, 3);
    double worst_intf = 0.0, worst_pow = 0.0;
    const double p = 100.0;
    for (int s = 0; s < 100; ++s) {
        std::vector<ChannelVector> users;
        for (int k = 0; k < 4; ++k) users.emplace_back(crandn(rng, 8));
        const ChannelSet h(users);
        const Precoder f = zf_precoder(h, p);
        worst_intf = std::max(worst_intf, aggregate_interference(h, f) / p);
        for (Index k = 0; k < 4; ++k) worst_pow = std::max(worst_pow, std::abs(f.beam(k).squaredNorm() - p / 4.0));
    }
    return {"zf_exactness", worst_intf < 1e-10 && worst_pow < 1e-12,
            "interference/P=" + fmt(worst_intf) + " power_err=" + fmt(worst_pow)};
}

struct LeakageSweep {
    std::size_t instances = 0;
    std::size_t pairs = 0;
    std::size_t same_projector = 0;
    std::size_t hypotheses_hold = 0;
    std::size_t counterexamples = 0;
    double max_residual = 0.0;
};

inline LeakageSweep sweep_leakage_certificates(std::uint64_t seed, std::size_t instances,
                                            std::vector<LeakageCertificate>* reports = nullptr) {
    Rng rng = make_stream(seed, 4);
    LeakageSweep s;
    while (s.instances < instances) {
        const Index dim = 3 + static_cast<Index>(rng() % 6);
        const Index users = 2 + static_cast<Index>(rng() % static_cast<std::uint64_t>(std::min<Index>(3, dim - 1)));
        const Index modes_n = 2 + static_cast<Index>(rng() % 3);
        const SameProjectorInstance inst = make_same_projector_instance(rng, dim, users, modes_n);
        ++s.instances;
        for (Index k = 0; k < users; ++k) {
            if (k == inst.n) continue;
            const LeakageCertificate rep = certify_mean_leakage(inst.mix, inst.tuple, k, inst.n);
            ++s.pairs;
            if (rep.same_projector) {
                ++s.same_projector;
                s.max_residual = std::max(s.max_residual, rep.expansion_residual);
            }
            if (rep.hypotheses_hold) ++s.hypotheses_hold;
            if (rep.counterexample()) ++s.counterexamples;
            if (reports) reports->push_back(rep);
        }
    }
    return s;
}

inline CheckResult check_mean_leakage(std::uint64_t seed) {
    const LeakageSweep s = sweep_leakage_certificates(seed, 500);
    const bool ok = s.same_projector == s.pairs && s.hypotheses_hold > 0 && s.counterexamples == 0 && s.max_residual < 1e-12;
    return {"mean_leakage", ok,
            "instances=" + std::to_string(s.instances) + " pairs=" + std::to_string(s.pairs) +
                " hypotheses=" + std::to_string(s.hypotheses_hold) + " counterexamples=" + std::to_string(s.counterexamples) +
                " max_residual=" + fmt(s.max_residual)};
}

inline CheckResult check_midpoint_order() {
    auto lin = [](const RMat& x, double) { return x; };
    const RMat one = RMat::Ones(1, 1);
    double err[3];
    const Index steps[3] = {4, 8, 16};
    for (int i = 0; i < 3; ++i) err[i] = std::abs(integrate_midpoint(lin, one, steps[i])(0, 0) - std::exp(1.0));
    const double r1 = err[0] / err[1], r2 = err[1] / err[2];
    return {"midpoint_order", r1 >= 3.2 && r1 <= 4.8 && r2 >= 3.2 && r2 <= 4.8,
            "ratio_4_8=" + fmt(r1) + " ratio_8_16=" + fmt(r2)};
}

inline CheckResult check_zero_field(std::uint64_t seed) {
    Rng rng = make_stream(seed, 6);
    ArrayGeometry geom{2, 4, 0.5};
    std::vector<ChannelVector> data;
    for (int i = 0; i < 16; ++i) data.push_back(generate_channel_at(geom, ClusterModelConfig{}, static_cast<std::uint64_t>(i)));
    const FrontendModel fe = make_frontend(8, 4, QuantizerSpec::uniform(2), Objective::mse, rng);
    nn::UNetConfig u;
    u.levels = 2;
    u.base_width = 8;
    u.channel_mult = {1, 2};
    u.time_dim = 16;
    u.time_frequencies = 4;
    FlowConfig rc;
    rc.mode = FlowMode::refiner;
    const FlowModel refiner = make_flow_model(rc, u, 8, 4, "fe", rng);
    FlowConfig dc;
    dc.mode = FlowMode::direct;
    const FlowModel direct = make_flow_model(dc, u, 8, 4, "fe", rng);
    const auto bits = encode_batch(fe, data);
    const auto d0 = decode_frontend_batch(fe, bits);
    const auto out = refine_batch(bits, fe, refiner);
    bool ok = true;
    for (std::size_t i = 0; i < bits.size(); ++i) ok = ok && out[i] == d0[i];
    Rng a(seed), b(seed);
    const auto dd = decode_direct_batch(bits, fe, direct, a);
    for (std::size_t i = 0; i < bits.size(); ++i) ok = ok && dd[i] == ChannelVector::from_stacked_real(randn(b, 16));
    return {"zero_field_identity", ok, ok ? "bit-exact" : "mismatch"};
}

inline CheckResult check_nmse_scale() {
    Rng rng(7);
    std::vector<ChannelVector> h, half;
    for (int i = 0; i < 8; ++i) {
        h.emplace_back(crandn(rng, 8));
        half.emplace_back(0.5 * h.back().coeffs());
    }
    const double v = nmse_db(h, half);
    return {"nmse_scale", std::abs(v + 6.0206) <= 1e-4 && std::abs(v - 10.0 * std::log10(0.25)) <= 1e-6,
            "nmse_db(h,0.5h)=" + fmt(v)};
}

inline CheckResult check_chordal_identity(std::uint64_t seed) {
    Rng rng = make_stream(seed, 10);
    double worst = 0.0;
    for (int c = 0; c < 50; ++c) {
        const Index n = 2 + static_cast<Index>(rng() % 7);
        const std::size_t count = 1 + rng() % 200;
        std::vector<CVec> members;
        for (std::size_t i = 0; i < count; ++i) members.push_back(random_unit(rng, n));
        const CVec u_hat = random_unit(rng, n);
        double direct = 0.0;
        for (const auto& u : members) direct += chordal_distance_sq(u, u_hat);
        direct /= static_cast<double>(count);
        worst = std::max(worst, std::abs(direct - chordal_distortion(u_hat, second_moment(members))));
    }
    return {"chordal_identity", worst <= 1e-10, "max_abs_diff=" + fmt(worst)};
}

inline CheckResult check_unet_gradient(std::uint64_t seed) {
    using namespace nn;
    Rng rng = make_stream(seed, 5);
    UNetConfig cfg;
    cfg.levels = 2;
    cfg.base_width = 8;
    cfg.channel_mult = {1, 2};
    cfg.n_up = 1;
    cfg.cond_channels = 3;
    cfg.time_frequencies = 4;
    cfg.time_dim = 8;
    cfg.max_groups = 4;
    cfg.zero_init_output = false;
    const Index len = 8, nb = 2;
    UNet net(cfg, len, rng);
    auto gauss = [&](Index r, Index c) {
        RMat m(r, c);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = randn(rng, 1)[0];
        return m;
    };
    const RMat state0 = gauss(2, nb * len), cond = gauss(3, nb * len), weights = gauss(2, nb * len);
    RVec times(nb);
    times << 0.3, 0.8;
    const RMat tf = fourier_time_features(net.time_embedding(), times);
    auto loss_of = [&](Tape& t, const ParamStore& ps, Var state) {
        return sum(mul(net.forward(t, ps, state, t.input(cond, nb, len), tf), t.input(weights, nb, len)));
    };
    Tape tape;
    Var sv = tape.input(state0, nb, len, true);
    tape.backward(loss_of(tape, net.params(), sv));
    Gradients g = zero_gradients(net.params());
    tape.collect_param_grads(g);

    constexpr double h = 1e-5;
    double worst = 0.0;
    auto compare = [&](double analytic, double up, double down) {
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-5}));
    };
    const RMat gs = tape.grad(sv);
    RMat s = state0;
    for (Index i = 0; i < s.size(); ++i) {
        const double keep = s.data()[i];
        s.data()[i] = keep + h;
        Tape a(false);
        const double up = loss_of(a, net.params(), a.input(s, nb, len)).value()(0, 0);
        s.data()[i] = keep - h;
        Tape b(false);
        const double down = loss_of(b, net.params(), b.input(s, nb, len)).value()(0, 0);
        s.data()[i] = keep;
        compare(gs.data()[i], up, down);
    }
    ParamStore work = net.params();
    for (std::size_t p = 0; p < work.size(); ++p) {
        const Index idx = static_cast<Index>(p);
        RMat v = work.value(idx);
        for (Index i = 0; i < v.size(); ++i) {
            const double keep = v.data()[i];
            v.data()[i] = keep + h;
            work.assign(idx, v);
            Tape a(false);
            const double up = loss_of(a, work, a.input(state0, nb, len)).value()(0, 0);
            v.data()[i] = keep - h;
            work.assign(idx, v);
            Tape b(false);
            const double down = loss_of(b, work, b.input(state0, nb, len)).value()(0, 0);
            v.data()[i] = keep;
            work.assign(idx, v);
            compare(g[p].data()[i], up, down);
        }
    }
    return {"unet_gradient", worst < 1e-5, "max_relative_error=" + fmt(worst)};
}

inline std::vector<CheckResult> run_all(std::uint64_t seed) {
    return {check_toy(seed),           check_principal_direction(seed),   check_zf(seed),         check_mean_leakage(seed),
            check_midpoint_order(),    check_unet_gradient(seed), check_zero_field(seed), check_nmse_scale(),     check_chordal_identity(seed)};
}

}  // namespace flowcsi::theory

#endif  // FLOWCSI_THEORY_CHECKS_HPP
