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

// Conditional flow-matching decoders: front-end-anchored refiner and direct decoder.

#ifndef FLOWCSI_FLOW_HPP
#define FLOWCSI_FLOW_HPP

#include "flowcsi/frontend.hpp"
#include "flowcsi/neural/optim.hpp"
#include "flowcsi/neural/unet.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace flowcsi {

// refiner: transport from the front-end estimate. direct: transport from noise.
// unet_decoder: a single regression pass of the same network (no flow), the
// U-Net decoder baseline.
enum class FlowMode { refiner, direct, unet_decoder };

inline std::string to_string(FlowMode m) {
    switch (m) {
        case FlowMode::refiner: return "refiner";
        case FlowMode::direct: return "direct";
        case FlowMode::unet_decoder: return "unet_decoder";
    }
    return "?";
}

inline FlowMode flow_mode_from_string(const std::string& s) {
    if (s == "refiner") return FlowMode::refiner;
    if (s == "direct") return FlowMode::direct;
    if (s == "unet_decoder") return FlowMode::unet_decoder;
    throw InvalidConfig("unknown flow mode: " + s);
}

enum class Solver { midpoint, euler };

inline std::string to_string(Solver s) { return s == Solver::midpoint ? "midpoint" : "euler"; }

inline Solver solver_from_string(const std::string& s) {
    if (s == "midpoint") return Solver::midpoint;
    if (s == "euler") return Solver::euler;
    throw InvalidConfig("unknown solver: " + s);
}

// How feedback enters the network: dequantised latents (one channel per
// latent) or +-1 bit planes (one channel per bit), broadcast along antennas.
enum class CondKind { latents, bit_planes };

inline std::string to_string(CondKind c) { return c == CondKind::latents ? "latents" : "bit_planes"; }

inline CondKind cond_kind_from_string(const std::string& s) {
    if (s == "latents") return CondKind::latents;
    if (s == "bit_planes") return CondKind::bit_planes;
    throw InvalidConfig("unknown conditioning kind: " + s);
}

struct FlowConfig {
    FlowMode mode = FlowMode::refiner;
    double sigma0 = 0.1;
    Index n_step = 4;
    bool use_ema_for_inference = true;
    double ema_decay = 0.999;
    Solver solver = Solver::midpoint;
    CondKind cond = CondKind::latents;

    void validate() const {
        require(n_step >= 1, "n_step must be at least 1");
        require(sigma0 >= 0.0 && std::isfinite(sigma0), "sigma0 must be a nonnegative real");
        require(ema_decay >= 0.0 && ema_decay <= 1.0, "EMA decay must lie in [0, 1]");
    }
};

// Stacked channels (2N) and U-Net state maps (2 x N, row 0 real, row 1 imaginary).
inline RMat stacked_to_state(const RVec& x) {
    const Index n = x.size() / 2;
    RMat s(2, n);
    s.row(0) = x.head(n).transpose();
    s.row(1) = x.tail(n).transpose();
    return s;
}

inline RVec state_to_stacked(const RMat& s) {
    const Index n = s.cols();
    RVec x(2 * n);
    x.head(n) = s.row(0).transpose();
    x.tail(n) = s.row(1).transpose();
    return x;
}

// Columns of `xs` (2N x B) -> batched state (2 x B*N).
inline RMat batch_state(const RMat& xs) {
    const Index n = xs.rows() / 2;
    RMat s(2, xs.cols() * n);
    for (Index b = 0; b < xs.cols(); ++b) s.middleCols(b * n, n) = stacked_to_state(xs.col(b));
    return s;
}

inline RMat unbatch_state(const RMat& s, Index n) {
    const Index nb = s.cols() / n;
    RMat xs(2 * n, nb);
    for (Index b = 0; b < nb; ++b) xs.col(b) = state_to_stacked(s.middleCols(b * n, n));
    return xs;
}

inline RVec conditioning_vector(const FrontendModel& fe, const FeedbackBits& bits, CondKind kind) {
    if (kind == CondKind::latents) return feedback_values(fe, bits);
    RVec v(static_cast<Index>(bits.size()));
    for (std::size_t i = 0; i < bits.size(); ++i) v[static_cast<Index>(i)] = bits.bits[i] ? 1.0 : -1.0;
    return v;
}

inline Index conditioning_channels(const FrontendModel& fe, CondKind kind) {
    return kind == CondKind::latents ? fe.latent_dim : fe.feedback_bits();
}

// (C, B) conditioning vectors -> (C, B*N) maps constant along antennas.
inline RMat broadcast_conditioning(const RMat& values, Index n) {
    RMat c(values.rows(), values.cols() * n);
    for (Index b = 0; b < values.cols(); ++b) c.middleCols(b * n, n) = values.col(b).replicate(1, n);
    return c;
}

struct FlowTrainingSample {
    RVec h_t;  // 2N
    double t = 0.0;
    RVec w;     // 2N
    RVec cond;  // conditioning vector
};

// Straight-line path from the source to h.
inline FlowTrainingSample path_sample(const RVec& h, const RVec& source, double t, RVec cond) {
    if (h.size() != source.size()) throw DimensionMismatch("path endpoints differ in length");
    return {(1.0 - t) * source + t * h, t, h - source, std::move(cond)};
}

// Refiner source: D0(b) + sigma0 * eps. Direct source: eps.
inline RVec flow_source(FlowMode mode, const RVec* frontend_estimate, double sigma0, const RVec& eps) {
    switch (mode) {
        case FlowMode::refiner:
            if (!frontend_estimate) throw InvalidConfig("refiner mode requires a front-end estimate");
            return *frontend_estimate + sigma0 * eps;
        case FlowMode::direct: return eps;
        case FlowMode::unet_decoder: return RVec::Zero(eps.size());
    }
    return eps;
}

inline FlowTrainingSample make_training_sample(const ChannelVector& h, const FeedbackBits& bits,
                                               const FrontendModel* frontend, const FlowConfig& cfg, Rng& rng) {
    if (!frontend) throw InvalidConfig("a front end is required to interpret feedback bits");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double t = unif(rng);
    const RVec eps = randn(rng, 2 * h.size());
    std::optional<RVec> tilde;
    if (cfg.mode == FlowMode::refiner) tilde = decode_frontend(*frontend, bits).stacked();
    return path_sample(h.stacked(), flow_source(cfg.mode, tilde ? &*tilde : nullptr, cfg.sigma0, eps), t,
                       conditioning_vector(*frontend, bits, cfg.cond));
}

// Batched vector field on states (2N x B) at a common time.
using VectorField = std::function<RMat(const RMat& x, double t)>;

// Fixed-step integration from t = 0 to t = 1.
inline RMat integrate(const VectorField& field, RMat x, Index n_step, Solver solver = Solver::midpoint) {
    require(n_step >= 1, "n_step must be at least 1");
    const double dt = 1.0 / static_cast<double>(n_step);
    for (Index n = 0; n < n_step; ++n) {
        const double t = static_cast<double>(n) * dt;
        const RMat k1 = field(x, t);
        if (solver == Solver::euler) {
            x += dt * k1;
        } else {
            const RMat k2 = field(x + 0.5 * dt * k1, t + 0.5 * dt);
            x += dt * k2;
        }
        if (!x.allFinite()) throw NonFiniteError("ODE state became non-finite at step " + std::to_string(n));
    }
    return x;
}

inline RMat integrate_midpoint(const VectorField& field, RMat x0, Index n_step) {
    return integrate(field, std::move(x0), n_step, Solver::midpoint);
}

struct FlowModel {
    FlowConfig config;
    nn::UNet field;
    nn::EmaState ema;
    std::string frontend_ref;
    std::vector<double> loss_curve;

    Index num_antennas() const { return field.length(); }

    const nn::ParamStore& inference_params() const {
        return config.use_ema_for_inference ? ema.shadow : field.params();
    }
};

inline FlowModel make_flow_model(const FlowConfig& cfg, nn::UNetConfig unet, Index num_antennas, Index cond_channels,
                                 std::string frontend_ref, Rng& rng) {
    cfg.validate();
    unet.cond_channels = cond_channels;
    unet.state_channels = 2;
    nn::UNet field(unet, num_antennas, rng);
    nn::EmaState ema = nn::make_ema(field.params(), cfg.ema_decay);
    return FlowModel{cfg, std::move(field), std::move(ema), std::move(frontend_ref), {}};
}

// phi(x, cond, t) on stacked columns, using the given parameter set.
inline RMat field_value(const FlowModel& m, const nn::ParamStore& ps, const RMat& xs, const RMat& cond_maps, double t) {
    const Index n = m.num_antennas();
    const RMat out = m.field.evaluate(ps, batch_state(xs), cond_maps, RVec::Constant(xs.cols(), t));
    return unbatch_state(out, n);
}

// Integrates the learned field from x0 (2N x B) under conditioning values (C x B).
inline RMat transport(const FlowModel& m, const RMat& x0, const RMat& cond_values) {
    if (x0.rows() != 2 * m.num_antennas()) throw DimensionMismatch("initial state length mismatch");
    const RMat maps = broadcast_conditioning(cond_values, m.num_antennas());
    const nn::ParamStore& ps = m.inference_params();
    if (m.config.mode == FlowMode::unet_decoder) return field_value(m, ps, RMat::Zero(x0.rows(), x0.cols()), maps, 0.0);
    VectorField f = [&](const RMat& x, double t) { return field_value(m, ps, x, maps, t); };
    return integrate(f, x0, m.config.n_step, m.config.solver);
}

inline RMat conditioning_batch(const FrontendModel& fe, const std::vector<FeedbackBits>& bits, CondKind kind) {
    RMat c(conditioning_channels(fe, kind), static_cast<Index>(bits.size()));
    for (std::size_t i = 0; i < bits.size(); ++i) c.col(static_cast<Index>(i)) = conditioning_vector(fe, bits[i], kind);
    return c;
}

inline std::vector<ChannelVector> columns_to_channels(const RMat& xs) {
    std::vector<ChannelVector> out;
    out.reserve(static_cast<std::size_t>(xs.cols()));
    for (Index c = 0; c < xs.cols(); ++c) out.push_back(ChannelVector::from_stacked_real(xs.col(c)));
    return out;
}

inline std::vector<ChannelVector> refine_batch(const std::vector<FeedbackBits>& bits, const FrontendModel& fe,
                                               const FlowModel& m) {
    if (m.config.mode != FlowMode::refiner) throw ModeMismatch("refine called on a " + to_string(m.config.mode) + " model");
    const RMat x0 = stack_channels(decode_frontend_batch(fe, bits));
    return columns_to_channels(transport(m, x0, conditioning_batch(fe, bits, m.config.cond)));
}

inline ChannelVector refine(const FeedbackBits& bits, const FrontendModel& fe, const FlowModel& m) {
    return refine_batch({bits}, fe, m).front();
}

// One Gaussian draw per reconstruction, column by column from `rng`.
inline std::vector<ChannelVector> decode_direct_batch(const std::vector<FeedbackBits>& bits, const FrontendModel& fe,
                                                      const FlowModel& m, Rng& rng) {
    if (m.config.mode != FlowMode::direct)
        throw ModeMismatch("decode_direct called on a " + to_string(m.config.mode) + " model");
    RMat x0(2 * m.num_antennas(), static_cast<Index>(bits.size()));
    for (Index c = 0; c < x0.cols(); ++c) x0.col(c) = randn(rng, x0.rows());
    return columns_to_channels(transport(m, x0, conditioning_batch(fe, bits, m.config.cond)));
}

inline ChannelVector decode_direct(const FeedbackBits& bits, const FrontendModel& fe, const FlowModel& m, Rng& rng) {
    return decode_direct_batch({bits}, fe, m, rng).front();
}

inline std::vector<ChannelVector> decode_unet_batch(const std::vector<FeedbackBits>& bits, const FrontendModel& fe,
                                                    const FlowModel& m) {
    if (m.config.mode != FlowMode::unet_decoder)
        throw ModeMismatch("U-Net decoding called on a " + to_string(m.config.mode) + " model");
    const RMat x0 = RMat::Zero(2 * m.num_antennas(), static_cast<Index>(bits.size()));
    return columns_to_channels(transport(m, x0, conditioning_batch(fe, bits, m.config.cond)));
}

// Mean over the batch of ||phi(h_t, cond, t) - w||^2 as a graph node.
inline nn::Var flow_loss_graph(nn::Tape& tape, const FlowModel& m, const nn::ParamStore& ps,
                               const std::vector<FlowTrainingSample>& batch) {
    require(!batch.empty(), "flow loss needs a nonempty batch");
    const Index n = m.num_antennas();
    const Index nb = static_cast<Index>(batch.size());
    RMat xs(2 * n, nb), ws(2 * n, nb), cv(batch.front().cond.size(), nb);
    RVec times(nb);
    for (Index b = 0; b < nb; ++b) {
        const auto& s = batch[static_cast<std::size_t>(b)];
        if (s.h_t.size() != 2 * n || s.w.size() != 2 * n) throw DimensionMismatch("flow sample length mismatch");
        xs.col(b) = s.h_t;
        ws.col(b) = s.w;
        cv.col(b) = s.cond;
        times[b] = s.t;
    }
    nn::Var state = tape.input(batch_state(xs), nb, n);
    nn::Var cond = tape.input(broadcast_conditioning(cv, n), nb, n);
    nn::Var out = m.field.forward(tape, ps, state, cond, nn::fourier_time_features(m.field.time_embedding(), times));
    return nn::mse_loss(out, tape.input(batch_state(ws), nb, n));
}

inline double flow_loss(const std::vector<FlowTrainingSample>& batch, const FlowModel& m) {
    nn::Tape tape(false);
    return flow_loss_graph(tape, m, m.field.params(), batch).value()(0, 0);
}

struct FlowTrainConfig {
    Index steps = 3000;
    Index batch_size = 64;
    nn::AdamConfig adam{};
    double divergence_factor = 1e3;
};

// Per-step callback, e.g. to record the parameter trajectory.
using FlowStepHook = std::function<void(Index step, const FlowModel&)>;

// Mini-batch flow matching with an EMA update after every optimiser step.
// Refiner mode needs the trained front end; the other modes use it only to
// turn bits into conditioning.
inline FlowModel train_flow(const std::vector<ChannelVector>& data, const FrontendModel& fe, FlowModel model,
                            const FlowTrainConfig& tcfg, Rng& rng, const FlowStepHook& hook = {}) {
    require(!data.empty(), "training set is empty");
    model.config.validate();
    const FlowConfig& cfg = model.config;
    const std::vector<FeedbackBits> bits = encode_batch(fe, data);
    const RMat targets = stack_channels(data);
    const RMat tilde = cfg.mode == FlowMode::refiner ? stack_channels(decode_frontend_batch(fe, bits)) : RMat();
    const RMat conds = conditioning_batch(fe, bits, cfg.cond);

    nn::Adam opt(model.field.params(), tcfg.adam);
    BatchSampler sampler(data.size(), std::min<Index>(tcfg.batch_size, static_cast<Index>(data.size())), rng);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double initial = -1.0;
    for (Index step = 0; step < tcfg.steps; ++step) {
        const auto idx = sampler.next();
        std::vector<FlowTrainingSample> batch;
        batch.reserve(idx.size());
        for (std::size_t i : idx) {
            const Index c = static_cast<Index>(i);
            const double t = cfg.mode == FlowMode::unet_decoder ? 0.0 : unif(rng);
            const RVec eps = randn(rng, targets.rows());
            const RVec est = cfg.mode == FlowMode::refiner ? RVec(tilde.col(c)) : RVec();
            batch.push_back(path_sample(targets.col(c), flow_source(cfg.mode, cfg.mode == FlowMode::refiner ? &est : nullptr,
                                                                    cfg.sigma0, eps),
                                        t, conds.col(c)));
        }
        nn::Tape tape;
        nn::Var loss = flow_loss_graph(tape, model, model.field.params(), batch);
        const double lv = loss.value()(0, 0);
        if (!std::isfinite(lv)) throw NonFiniteError("flow loss is not finite at step " + std::to_string(step));
        if (initial < 0.0) initial = std::max(lv, 1e-12);
        if (lv > tcfg.divergence_factor * initial)
            throw Error("flow training diverged at step " + std::to_string(step) + ": loss " + std::to_string(lv));
        model.loss_curve.push_back(lv);
        tape.backward(loss);
        nn::Gradients g = nn::zero_gradients(model.field.params());
        tape.collect_param_grads(g);
        opt.step(model.field.params(), g);
        nn::ema_update(model.ema, model.field.params());
        if (hook) hook(step, model);
    }
    return model;
}

}  // namespace flowcsi

#endif  // FLOWCSI_FLOW_HPP
