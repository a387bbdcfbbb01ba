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

#ifndef FLOWCSI_NEURAL_UNET_HPP
#define FLOWCSI_NEURAL_UNET_HPP

#include "flowcsi/neural/autodiff.hpp"

#include <numbers>
#include <string>
#include <vector>

namespace flowcsi::nn {

// Gaussian Fourier features of the flow time:
// gamma(t) = [sin(2 pi t W), cos(2 pi t W)], W ~ N(0, sigma_f^2) frozen at construction.
struct TimeEmbedding {
    RVec frequencies;
    double sigma_f = 16.0;

    static TimeEmbedding make(Index num_frequencies, double sigma_f, Rng& rng) {
        if (num_frequencies < 1) throw InvalidConfig("time embedding needs at least one frequency");
        return TimeEmbedding{randn(rng, num_frequencies, sigma_f), sigma_f};
    }

    Index feature_dim() const { return 2 * frequencies.size(); }
};

inline RVec fourier_time_embedding(const TimeEmbedding& emb, double t) {
    if (!std::isfinite(t)) throw NonFiniteError("flow time must be finite");
    const Index f = emb.frequencies.size();
    RVec out(2 * f);
    for (Index i = 0; i < f; ++i) {
        const double arg = 2.0 * std::numbers::pi * t * emb.frequencies[i];
        out[i] = std::sin(arg);
        out[f + i] = std::cos(arg);
    }
    return out;
}

// Features for a batch of flow times, one column per sample.
inline RMat fourier_time_features(const TimeEmbedding& emb, const RVec& times) {
    RMat out(emb.feature_dim(), times.size());
    for (Index b = 0; b < times.size(); ++b) out.col(b) = fourier_time_embedding(emb, times[b]);
    return out;
}

struct UNetConfig {
    Index levels = 3;
    Index base_width = 32;
    std::vector<Index> channel_mult = {1, 2, 2};
    Index n_down = 1;
    Index n_up = 2;
    Index cond_channels = 8;
    Index state_channels = 2;
    Index time_frequencies = 16;
    double sigma_f = 16.0;
    Index time_dim = 64;
    Index max_groups = 8;
    bool zero_init_output = true;

    Index width(Index level) const {
        const auto i = static_cast<std::size_t>(level);
        const Index mult = i < channel_mult.size() ? channel_mult[i] : channel_mult.back();
        return base_width * mult;
    }

    void validate(Index length) const {
        require(levels >= 1, "U-Net needs at least one level");
        require(base_width > 0 && !channel_mult.empty(), "U-Net widths must be positive");
        for (Index m : channel_mult) require(m > 0, "channel multipliers must be positive");
        require(n_down >= 1 && n_up >= 1, "U-Net stages need at least one residual block");
        require(cond_channels >= 0 && state_channels >= 1, "bad channel counts");
        require(time_frequencies >= 1 && time_dim >= 1, "bad time-embedding size");
        const Index div = Index{1} << (levels - 1);
        if (length % div != 0)
            throw DimensionMismatch("input length " + std::to_string(length) + " not divisible by 2^(levels-1)");
    }
};

// Largest group count <= max_groups that divides the channel count.
inline Index group_count(Index channels, Index max_groups) {
    Index g = std::min(max_groups, channels);
    while (channels % g != 0) --g;
    return g;
}

// Multi-scale 1D U-Net vector field phi(state, cond, t).
//
// The state (state_channels x length) is concatenated with the conditioning
// map at the input. Each downsampling stage after the first halves the length
// with a stride-2 convolution and concatenates the conditioning map, average
// pooled to the same resolution. Residual blocks are
// GroupNorm -> SiLU -> conv -> (+ time projection) -> GroupNorm -> SiLU -> conv,
// plus a 1x1 skip when widths differ. Upsampling is nearest-neighbour followed
// by a convolution, and decoder stages concatenate the matching encoder output.
class UNet {
public:
    UNet(UNetConfig cfg, Index length, Rng& rng) : cfg_(std::move(cfg)), length_(length) {
        cfg_.validate(length_);
        time_ = TimeEmbedding::make(cfg_.time_frequencies, cfg_.sigma_f, rng);
        build(rng);
    }

    UNet(UNetConfig cfg, Index length, TimeEmbedding time, ParamStore params)
        : cfg_(std::move(cfg)), length_(length), time_(std::move(time)) {
        cfg_.validate(length_);
        Rng scratch(0);
        build(scratch);
        if (!params_.same_layout(params)) throw FormatError("U-Net parameter layout does not match its config");
        params_.load_values(params);
    }

    const UNetConfig& config() const { return cfg_; }
    Index length() const { return length_; }
    const TimeEmbedding& time_embedding() const { return time_; }
    const ParamStore& params() const { return params_; }
    ParamStore& params() { return params_; }

    // state: (state_channels, B * length); cond: (cond_channels, B * length);
    // time_features: (2F, B). Returns a tensor shaped like state.
    Var forward(Tape& tape, const ParamStore& ps, Var state, Var cond, const RMat& time_features) const {
        if (state.value().rows() != cfg_.state_channels || state.length() != length_)
            throw DimensionMismatch("U-Net state shape mismatch");
        if (cond.value().rows() != cfg_.cond_channels || cond.value().cols() != state.value().cols())
            throw DimensionMismatch("U-Net conditioning shape mismatch");
        if (time_features.rows() != time_.feature_dim() || time_features.cols() != state.batch())
            throw DimensionMismatch("U-Net time features shape mismatch");

        Var tf = tape.input(time_features, state.batch(), 1);
        Var temb = linear(tf, tape.param(ps, "time.l1.w"), tape.param(ps, "time.l1.b"));
        temb = silu(temb);
        temb = linear(temb, tape.param(ps, "time.l2.w"), tape.param(ps, "time.l2.b"));

        Var h = conv(tape, ps, "in", cfg_.cond_channels > 0 ? concat({state, cond}) : state, 1);
        Var c = cond;
        std::vector<Var> skips;
        for (Index i = 0; i < cfg_.levels; ++i) {
            const std::string lv = "down" + std::to_string(i);
            if (i > 0) {
                h = conv(tape, ps, lv + ".down", h, 2);
                if (cfg_.cond_channels > 0) {
                    c = avg_pool2(c);
                    h = concat({h, c});
                }
            }
            for (Index r = 0; r < cfg_.n_down; ++r) h = res_block(tape, ps, lv + ".res" + std::to_string(r), h, temb);
            skips.push_back(h);
        }
        h = res_block(tape, ps, "mid", h, temb);
        for (Index i = cfg_.levels - 1; i >= 0; --i) {
            const std::string lv = "up" + std::to_string(i);
            h = concat({h, skips[static_cast<std::size_t>(i)]});
            for (Index r = 0; r < cfg_.n_up; ++r) h = res_block(tape, ps, lv + ".res" + std::to_string(r), h, temb);
            if (i > 0) h = conv(tape, ps, lv + ".up", upsample2(h), 1);
        }
        h = norm(tape, ps, "out.norm", h);
        h = silu(h);
        return conv(tape, ps, "out.conv", h, 1);
    }

    // Convenience evaluation without gradient bookkeeping.
    RMat evaluate(const ParamStore& ps, const RMat& state, const RMat& cond, const RVec& times) const {
        const Index nb = times.size();
        Tape tape(false);
        Var s = tape.input(state, nb, length_);
        Var c = tape.input(cond, nb, length_);
        return forward(tape, ps, s, c, fourier_time_features(time_, times)).value();
    }

private:
    void add_conv(Rng& rng, const std::string& name, Index cin, Index cout, Index kernel, bool zero = false) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel));
        params_.add(name + ".w", zero ? RMat::Zero(cout, cin * kernel) : uniform(rng, cout, cin * kernel, bound));
        params_.add(name + ".b", zero ? RMat::Zero(cout, 1) : uniform(rng, cout, 1, bound));
    }

    void add_norm(const std::string& name, Index ch) {
        params_.add(name + ".g", RMat::Ones(ch, 1));
        params_.add(name + ".b", RMat::Zero(ch, 1));
    }

    void add_res_block(Rng& rng, const std::string& name, Index cin, Index cout) {
        add_norm(name + ".n1", cin);
        add_conv(rng, name + ".c1", cin, cout, 3);
        add_conv(rng, name + ".t", cfg_.time_dim, cout, 1);
        add_norm(name + ".n2", cout);
        add_conv(rng, name + ".c2", cout, cout, 3);
        if (cin != cout) add_conv(rng, name + ".skip", cin, cout, 1);
    }

    static RMat uniform(Rng& rng, Index rows, Index cols, double bound) {
        std::uniform_real_distribution<double> d(-bound, bound);
        RMat m(rows, cols);
        for (Index c = 0; c < cols; ++c)
            for (Index r = 0; r < rows; ++r) m(r, c) = d(rng);
        return m;
    }

    void build(Rng& rng) {
        const Index cond = cfg_.cond_channels;
        add_conv(rng, "time.l1", time_.feature_dim(), cfg_.time_dim, 1);
        add_conv(rng, "time.l2", cfg_.time_dim, cfg_.time_dim, 1);
        add_conv(rng, "in", cfg_.state_channels + cond, cfg_.width(0), 3);
        Index ch = cfg_.width(0);
        std::vector<Index> skip_ch;
        for (Index i = 0; i < cfg_.levels; ++i) {
            const std::string lv = "down" + std::to_string(i);
            if (i > 0) {
                add_conv(rng, lv + ".down", ch, ch, 3);
                ch += cond;
            }
            for (Index r = 0; r < cfg_.n_down; ++r) {
                add_res_block(rng, lv + ".res" + std::to_string(r), ch, cfg_.width(i));
                ch = cfg_.width(i);
            }
            skip_ch.push_back(ch);
        }
        add_res_block(rng, "mid", ch, ch);
        for (Index i = cfg_.levels - 1; i >= 0; --i) {
            const std::string lv = "up" + std::to_string(i);
            ch += skip_ch[static_cast<std::size_t>(i)];
            for (Index r = 0; r < cfg_.n_up; ++r) {
                add_res_block(rng, lv + ".res" + std::to_string(r), ch, cfg_.width(i));
                ch = cfg_.width(i);
            }
            if (i > 0) {
                add_conv(rng, lv + ".up", ch, cfg_.width(i - 1), 3);
                ch = cfg_.width(i - 1);
            }
        }
        add_norm("out.norm", ch);
        add_conv(rng, "out.conv", ch, cfg_.state_channels, 3, cfg_.zero_init_output);
    }

    Var conv(Tape& tape, const ParamStore& ps, const std::string& name, Var x, Index stride) const {
        const Index kernel = ps.value(name + ".w").cols() / x.value().rows();
        ConvGeometry geo{kernel, stride, kernel / 2};
        return conv1d(x, tape.param(ps, name + ".w"), tape.param(ps, name + ".b"), geo);
    }

    Var norm(Tape& tape, const ParamStore& ps, const std::string& name, Var x) const {
        return group_norm(x, tape.param(ps, name + ".g"), tape.param(ps, name + ".b"),
                          group_count(x.value().rows(), cfg_.max_groups));
    }

    Var res_block(Tape& tape, const ParamStore& ps, const std::string& name, Var x, Var temb) const {
        Var h = conv(tape, ps, name + ".c1", silu(norm(tape, ps, name + ".n1", x)), 1);
        Var t = linear(temb, tape.param(ps, name + ".t.w"), tape.param(ps, name + ".t.b"));
        h = add_per_sample(h, t);
        h = conv(tape, ps, name + ".c2", silu(norm(tape, ps, name + ".n2", h)), 1);
        Var skip = ps.contains(name + ".skip.w")
                       ? linear(x, tape.param(ps, name + ".skip.w"), tape.param(ps, name + ".skip.b"))
                       : x;
        return add(skip, h);
    }

    UNetConfig cfg_;
    Index length_;
    TimeEmbedding time_;
    ParamStore params_;
};

}  // namespace flowcsi::nn

#endif  // FLOWCSI_NEURAL_UNET_HPP
