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

// UE-side encoder, scalar quantisation and the BS-side initial decoder.

#ifndef FLOWCSI_FRONTEND_HPP
#define FLOWCSI_FRONTEND_HPP

#include "flowcsi/channel_model.hpp"
#include "flowcsi/neural/autodiff.hpp"
#include "flowcsi/neural/optim.hpp"
#include "flowcsi/quantizer.hpp"

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace flowcsi {

enum class Objective { mse, chordal };

inline std::string to_string(Objective o) { return o == Objective::mse ? "mse" : "chordal"; }

inline Objective objective_from_string(const std::string& s) {
    if (s == "mse") return Objective::mse;
    if (s == "chordal") return Objective::chordal;
    throw InvalidConfig("unknown objective: " + s);
}

// One bit per entry (0 or 1).
struct FeedbackBits {
    std::vector<std::uint8_t> bits;

    std::size_t size() const { return bits.size(); }
    bool operator==(const FeedbackBits& o) const { return bits == o.bits; }
    bool operator<(const FeedbackBits& o) const { return bits < o.bits; }
    std::string str() const {
        std::string s;
        for (auto b : bits) s.push_back(b ? '1' : '0');
        return s;
    }
};

// Latent 0 first, most significant bit first within each latent.
inline FeedbackBits bits_from_indices(const std::vector<int>& indices, int q) {
    FeedbackBits out;
    out.bits.reserve(indices.size() * static_cast<std::size_t>(q));
    for (int idx : indices)
        for (int j = q - 1; j >= 0; --j) out.bits.push_back(static_cast<std::uint8_t>((idx >> j) & 1));
    return out;
}

inline std::vector<int> indices_from_bits(const FeedbackBits& b, Index latent_dim, int q) {
    if (b.size() != static_cast<std::size_t>(latent_dim * q))
        throw FormatError("feedback length " + std::to_string(b.size()) + " != " + std::to_string(latent_dim * q));
    std::vector<int> idx(static_cast<std::size_t>(latent_dim), 0);
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.bits[i] > 1) throw FormatError("feedback bit values must be 0 or 1");
        auto& v = idx[i / static_cast<std::size_t>(q)];
        v = (v << 1) | b.bits[i];
    }
    return idx;
}

// Packed byte form, MSB-first; the final byte is zero-padded.
inline std::vector<std::uint8_t> pack_bits(const FeedbackBits& b) {
    std::vector<std::uint8_t> out((b.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b.bits[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
    return out;
}

inline FeedbackBits unpack_bits(const std::vector<std::uint8_t>& bytes, std::size_t count) {
    if (bytes.size() != (count + 7) / 8) throw FormatError("packed feedback has the wrong byte count");
    FeedbackBits b;
    b.bits.resize(count);
    for (std::size_t i = 0; i < count; ++i) b.bits[i] = (bytes[i / 8] >> (7 - i % 8)) & 1u;
    return b;
}

// Encoder 2N -> 4N -> 4N -> L (SiLU, SiLU, tanh), decoder L -> 4N -> 4N -> 2N.
struct FrontendModel {
    Index num_antennas = 0;
    Index latent_dim = 8;
    Index hidden = 0;
    QuantizerSpec quantizer;
    Objective objective = Objective::mse;
    nn::ParamStore params;
    std::vector<double> loss_curve;

    Index feedback_bits() const { return latent_dim * quantizer.bits_per_latent; }
};

namespace detail {

inline void add_dense(nn::ParamStore& ps, const std::string& name, Index out, Index in, Rng& rng) {
    std::normal_distribution<double> d(0.0, std::sqrt(1.0 / static_cast<double>(in)));
    RMat w(out, in);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
    ps.add(name + ".w", w);
    ps.add(name + ".b", RMat::Zero(out, 1));
}

inline nn::Var dense(nn::Tape& t, const nn::ParamStore& ps, const std::string& name, nn::Var x) {
    return nn::linear(x, t.param(ps, name + ".w"), t.param(ps, name + ".b"));
}

}  // namespace detail

inline FrontendModel make_frontend(Index num_antennas, Index latent_dim, QuantizerSpec quantizer, Objective objective,
                                   Rng& rng) {
    require(num_antennas >= 1 && latent_dim >= 1, "frontend dimensions must be positive");
    FrontendModel m;
    m.num_antennas = num_antennas;
    m.latent_dim = latent_dim;
    m.hidden = 4 * num_antennas;
    if (quantizer.kind == QuantizerKind::per_latent_learned && quantizer.levels.size() == 0)
        quantizer = QuantizerSpec::learned(quantizer.bits_per_latent, latent_dim);
    quantizer.validate(latent_dim);
    m.quantizer = std::move(quantizer);
    m.objective = objective;
    const Index in = 2 * num_antennas;
    detail::add_dense(m.params, "enc.l1", m.hidden, in, rng);
    detail::add_dense(m.params, "enc.l2", m.hidden, m.hidden, rng);
    detail::add_dense(m.params, "enc.l3", latent_dim, m.hidden, rng);
    detail::add_dense(m.params, "dec.l1", m.hidden, latent_dim, rng);
    detail::add_dense(m.params, "dec.l2", m.hidden, m.hidden, rng);
    detail::add_dense(m.params, "dec.l3", in, m.hidden, rng);
    return m;
}

// x: (2N, batch) stacked channels -> latents in (-1, 1).
inline nn::Var encoder_graph(nn::Tape& t, const nn::ParamStore& ps, nn::Var x) {
    nn::Var h = nn::silu(detail::dense(t, ps, "enc.l1", x));
    h = nn::silu(detail::dense(t, ps, "enc.l2", h));
    return nn::tanh(detail::dense(t, ps, "enc.l3", h));
}

inline nn::Var decoder_graph(nn::Tape& t, const nn::ParamStore& ps, nn::Var z) {
    nn::Var h = nn::silu(detail::dense(t, ps, "dec.l1", z));
    h = nn::silu(detail::dense(t, ps, "dec.l2", h));
    return detail::dense(t, ps, "dec.l3", h);
}

inline RMat stack_channels(const std::vector<ChannelVector>& hs) {
    if (hs.empty()) return {};
    RMat x(2 * hs.front().size(), static_cast<Index>(hs.size()));
    for (std::size_t i = 0; i < hs.size(); ++i) {
        if (hs[i].size() != hs.front().size()) throw DimensionMismatch("channels of differing length");
        x.col(static_cast<Index>(i)) = hs[i].stacked();
    }
    return x;
}

// Unquantised latents for a batch of channels, (L, batch).
inline RMat encode_latents(const FrontendModel& m, const std::vector<ChannelVector>& hs) {
    for (const auto& h : hs)
        if (h.size() != m.num_antennas)
            throw DimensionMismatch("channel has " + std::to_string(h.size()) + " antennas, model expects " +
                                    std::to_string(m.num_antennas));
    nn::Tape t(false);
    const RMat x = stack_channels(hs);
    return encoder_graph(t, m.params, t.input(x, x.cols(), 1)).value();
}

inline LatentCode encode_code(const FrontendModel& m, const ChannelVector& h, QuantStats* stats = nullptr) {
    return quantize(m.quantizer, encode_latents(m, {h}).col(0), stats);
}

inline FeedbackBits encode(const FrontendModel& m, const ChannelVector& h) {
    return bits_from_indices(encode_code(m, h).indices, m.quantizer.bits_per_latent);
}

inline std::vector<FeedbackBits> encode_batch(const FrontendModel& m, const std::vector<ChannelVector>& hs) {
    const RMat z = encode_latents(m, hs);
    std::vector<FeedbackBits> out;
    out.reserve(hs.size());
    for (Index c = 0; c < z.cols(); ++c)
        out.push_back(bits_from_indices(quantize(m.quantizer, z.col(c)).indices, m.quantizer.bits_per_latent));
    return out;
}

// Dequantised latent values carried by a bit string.
inline RVec feedback_values(const FrontendModel& m, const FeedbackBits& b) {
    return dequantize(m.quantizer, indices_from_bits(b, m.latent_dim, m.quantizer.bits_per_latent));
}

// Decoder image of dequantised latents, (L, batch) -> (2N, batch).
inline RMat decode_values(const FrontendModel& m, const RMat& values) {
    if (values.rows() != m.latent_dim) throw DimensionMismatch("latent count mismatch");
    nn::Tape t(false);
    return decoder_graph(t, m.params, t.input(values, values.cols(), 1)).value();
}

inline ChannelVector decode_frontend(const FrontendModel& m, const FeedbackBits& b) {
    const RMat v = feedback_values(m, b);
    return ChannelVector::from_stacked_real(decode_values(m, v).col(0));
}

inline std::vector<ChannelVector> decode_frontend_batch(const FrontendModel& m, const std::vector<FeedbackBits>& bs) {
    RMat v(m.latent_dim, static_cast<Index>(bs.size()));
    for (std::size_t i = 0; i < bs.size(); ++i) v.col(static_cast<Index>(i)) = feedback_values(m, bs[i]);
    const RMat x = decode_values(m, v);
    std::vector<ChannelVector> out;
    out.reserve(bs.size());
    for (Index c = 0; c < x.cols(); ++c) out.push_back(ChannelVector::from_stacked_real(x.col(c)));
    return out;
}

// Training graph: quantisation in the forward pass, straight-through on the way back.
inline nn::Var quantize_graph(nn::Tape& t, const FrontendModel& m, const nn::ParamStore& ps, nn::Var z) {
    const RMat& zv = z.value();
    Eigen::MatrixXi idx(zv.rows(), zv.cols());
    RMat q(zv.rows(), zv.cols());
    for (Index c = 0; c < zv.cols(); ++c)
        for (Index l = 0; l < zv.rows(); ++l) {
            const double v = std::clamp(zv(l, c), -1.0, 1.0);
            idx(l, c) = quantize_index(m.quantizer, l, v);
            q(l, c) = dequantize_index(m.quantizer, l, idx(l, c));
        }
    if (m.quantizer.kind == QuantizerKind::per_latent_learned && ps.contains("quant.levels"))
        return nn::select_levels(z, t.param(ps, "quant.levels"), idx);
    return nn::straight_through(z, std::move(q));
}

inline nn::Var frontend_loss(nn::Tape& t, const FrontendModel& m, const nn::ParamStore& ps, const RMat& x) {
    nn::Var xv = t.input(x, x.cols(), 1);
    nn::Var z = encoder_graph(t, ps, xv);
    nn::Var out = decoder_graph(t, ps, quantize_graph(t, m, ps, z));
    return m.objective == Objective::mse ? nn::mse_loss(out, xv) : nn::chordal_loss(out, xv);
}

struct TrainConfig {
    Index steps = 2000;
    Index batch_size = 64;
    nn::AdamConfig adam{};
};

// Shuffled mini-batches drawn epoch by epoch from `rng`.
class BatchSampler {
public:
    BatchSampler(std::size_t n, Index batch, Rng& rng) : n_(n), batch_(static_cast<std::size_t>(batch)), rng_(rng) {
        require(n > 0 && batch > 0, "empty dataset or batch");
        order_.resize(n);
        reshuffle();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        while (out.size() < batch_) {
            if (pos_ == n_) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }

    std::size_t n_;
    std::size_t batch_;
    Rng& rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

// Trains encoder, decoder and (for learned quantisation) the level tables.
// The loss of every step is appended to the model's loss curve.
inline FrontendModel train_frontend(const std::vector<ChannelVector>& data, FrontendModel model, Objective objective,
                                    const TrainConfig& cfg, Rng& rng) {
    require(!data.empty(), "training set is empty");
    model.objective = objective;
    const bool learned = model.quantizer.kind == QuantizerKind::per_latent_learned;
    nn::ParamStore ps = model.params;
    if (learned) ps.add("quant.levels", model.quantizer.levels);
    nn::Adam opt(ps, cfg.adam);
    BatchSampler sampler(data.size(), std::min<Index>(cfg.batch_size, static_cast<Index>(data.size())), rng);
    const RMat all = stack_channels(data);
    for (Index step = 0; step < cfg.steps; ++step) {
        const auto batch = sampler.next();
        RMat x(all.rows(), static_cast<Index>(batch.size()));
        for (std::size_t i = 0; i < batch.size(); ++i) x.col(static_cast<Index>(i)) = all.col(static_cast<Index>(batch[i]));
        nn::Tape t;
        nn::Var loss = frontend_loss(t, model, ps, x);
        const double lv = loss.value()(0, 0);
        if (!std::isfinite(lv)) throw NonFiniteError("frontend loss is not finite at step " + std::to_string(step));
        model.loss_curve.push_back(lv);
        t.backward(loss);
        nn::Gradients g = nn::zero_gradients(ps);
        t.collect_param_grads(g);
        opt.step(ps, g);
        if (learned) {
            model.quantizer.levels = ps.value("quant.levels");
            tidy_learned_levels(model.quantizer);
            ps.value("quant.levels") = model.quantizer.levels;
        }
    }
    for (std::size_t i = 0; i < model.params.size(); ++i)
        model.params.assign(static_cast<Index>(i), ps.value(model.params.name(static_cast<Index>(i))));
    return model;
}

}  // namespace flowcsi

#endif  // FLOWCSI_FRONTEND_HPP
