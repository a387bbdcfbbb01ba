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

// Scalar latent quantisers: uniform, mu-law companded and per-latent learned levels.

#ifndef FLOWCSI_QUANTIZER_HPP
#define FLOWCSI_QUANTIZER_HPP

#include "flowcsi/binary_io.hpp"
#include "flowcsi/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace flowcsi {

enum class QuantizerKind { uniform, mulaw, per_latent_learned };

inline std::string to_string(QuantizerKind k) {
    switch (k) {
        case QuantizerKind::uniform: return "uniform";
        case QuantizerKind::mulaw: return "mulaw";
        case QuantizerKind::per_latent_learned: return "per_latent_learned";
    }
    return "?";
}

inline QuantizerKind quantizer_kind_from_string(const std::string& s) {
    if (s == "uniform") return QuantizerKind::uniform;
    if (s == "mulaw") return QuantizerKind::mulaw;
    if (s == "per_latent_learned") return QuantizerKind::per_latent_learned;
    throw InvalidConfig("unknown quantizer kind: " + s);
}

// mu-law compander on [-1, 1] and its exact inverse.
inline double mulaw_compand(double z, double mu) {
    return std::copysign(std::log1p(mu * std::abs(z)) / std::log1p(mu), z);
}

inline double mulaw_expand(double y, double mu) {
    return std::copysign(std::expm1(std::abs(y) * std::log1p(mu)) / mu, y);
}

// Reconstruction levels of the 2^q-level uniform quantiser: cell midpoints of [-1, 1].
inline RVec uniform_levels(int bits) {
    const Index n = Index{1} << bits;
    RVec lv(n);
    for (Index i = 0; i < n; ++i) lv[i] = -1.0 + (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
    return lv;
}

// Cell index of z in the uniform quantiser. Cell boundaries belong to the
// lower cell, so exact ties resolve toward the lower index.
inline int uniform_index(double z, int bits) {
    const Index n = Index{1} << bits;
    const double width = 2.0 / static_cast<double>(n);
    const auto idx = static_cast<Index>(std::ceil((z + 1.0) / width)) - 1;
    return static_cast<int>(std::clamp<Index>(idx, 0, n - 1));
}

// Nearest entry of a sorted level list; equal distances go to the lower index.
inline int nearest_level(double z, const RVec& levels) {
    int best = 0;
    double best_d = std::abs(z - levels[0]);
    for (Index i = 1; i < levels.size(); ++i) {
        const double d = std::abs(z - levels[i]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

struct QuantizerSpec {
    QuantizerKind kind = QuantizerKind::uniform;
    int bits_per_latent = 4;
    double mu = 255.0;
    RMat levels;  // learned only: (L, 2^q), each row sorted

    Index num_levels() const { return Index{1} << bits_per_latent; }

    static QuantizerSpec uniform(int q) { return {QuantizerKind::uniform, q, 255.0, {}}; }
    static QuantizerSpec mulaw(int q, double mu = 255.0) { return {QuantizerKind::mulaw, q, mu, {}}; }
    // Learned levels start at the uniform midpoints.
    static QuantizerSpec learned(int q, Index latent_dim) {
        QuantizerSpec s{QuantizerKind::per_latent_learned, q, 255.0, {}};
        s.levels = uniform_levels(q).transpose().replicate(latent_dim, 1);
        return s;
    }

    void validate(Index latent_dim) const {
        require(bits_per_latent >= 1 && bits_per_latent <= 16, "bits per latent must lie in [1, 16]");
        if (kind == QuantizerKind::mulaw) require(mu > 0.0 && std::isfinite(mu), "mu must be positive");
        if (kind == QuantizerKind::per_latent_learned) {
            require(levels.rows() == latent_dim && levels.cols() == num_levels(),
                    "learned levels must be (L, 2^q)");
            for (Index r = 0; r < levels.rows(); ++r)
                for (Index c = 1; c < levels.cols(); ++c)
                    require(levels(r, c - 1) <= levels(r, c), "learned levels must be sorted");
        }
    }

    // Reconstruction levels seen by latent `l`, in index order.
    RVec levels_for(Index l) const {
        switch (kind) {
            case QuantizerKind::uniform: return uniform_levels(bits_per_latent);
            case QuantizerKind::mulaw: {
                RVec lv = uniform_levels(bits_per_latent);
                for (Index i = 0; i < lv.size(); ++i) lv[i] = mulaw_expand(lv[i], mu);
                return lv;
            }
            case QuantizerKind::per_latent_learned: return levels.row(l).transpose();
        }
        return {};
    }

    bool operator==(const QuantizerSpec& o) const {
        return kind == o.kind && bits_per_latent == o.bits_per_latent && mu == o.mu && levels == o.levels;
    }
};

struct QuantStats {
    std::uint64_t clipped = 0;
};

struct LatentCode {
    RVec values;
    std::vector<int> indices;
    int bits_per_latent = 0;
};

inline int quantize_index(const QuantizerSpec& spec, Index latent, double z) {
    switch (spec.kind) {
        case QuantizerKind::uniform: return uniform_index(z, spec.bits_per_latent);
        case QuantizerKind::mulaw: return uniform_index(mulaw_compand(z, spec.mu), spec.bits_per_latent);
        case QuantizerKind::per_latent_learned: return nearest_level(z, spec.levels.row(latent).transpose());
    }
    return 0;
}

inline double dequantize_index(const QuantizerSpec& spec, Index latent, int idx) {
    if (idx < 0 || idx >= spec.num_levels()) throw FormatError("quantiser index out of range");
    switch (spec.kind) {
        case QuantizerKind::uniform:
            return -1.0 + (2.0 * idx + 1.0) / static_cast<double>(spec.num_levels());
        case QuantizerKind::mulaw:
            return mulaw_expand(-1.0 + (2.0 * idx + 1.0) / static_cast<double>(spec.num_levels()), spec.mu);
        case QuantizerKind::per_latent_learned: return spec.levels(latent, idx);
    }
    return 0.0;
}

// Inputs outside [-1, 1] are clipped and counted.
inline LatentCode quantize(const QuantizerSpec& spec, const RVec& z, QuantStats* stats = nullptr) {
    LatentCode code;
    code.bits_per_latent = spec.bits_per_latent;
    code.values.resize(z.size());
    code.indices.resize(static_cast<std::size_t>(z.size()));
    for (Index l = 0; l < z.size(); ++l) {
        if (!std::isfinite(z[l])) throw NonFiniteError("non-finite latent at position " + std::to_string(l));
        double v = z[l];
        if (v < -1.0 || v > 1.0) {
            v = std::clamp(v, -1.0, 1.0);
            if (stats) ++stats->clipped;
        }
        const int idx = quantize_index(spec, l, v);
        code.indices[static_cast<std::size_t>(l)] = idx;
        code.values[l] = dequantize_index(spec, l, idx);
    }
    return code;
}

inline RVec dequantize(const QuantizerSpec& spec, const std::vector<int>& indices) {
    RVec out(static_cast<Index>(indices.size()));
    for (Index l = 0; l < out.size(); ++l) out[l] = dequantize_index(spec, l, indices[static_cast<std::size_t>(l)]);
    return out;
}

// Learned levels are kept sorted and inside [-1, 1] after every update.
inline void tidy_learned_levels(QuantizerSpec& spec) {
    if (spec.kind != QuantizerKind::per_latent_learned) return;
    for (Index r = 0; r < spec.levels.rows(); ++r) {
        RVec row = spec.levels.row(r).transpose().cwiseMax(-1.0).cwiseMin(1.0);
        std::sort(row.data(), row.data() + row.size());
        spec.levels.row(r) = row.transpose();
    }
}

namespace io {

inline void put_quantizer(std::ostream& os, const QuantizerSpec& s) {
    put_string(os, to_string(s.kind));
    put_u32(os, static_cast<std::uint32_t>(s.bits_per_latent));
    put_f64(os, s.mu);
    put_matrix(os, s.levels);
}

inline QuantizerSpec get_quantizer(std::istream& is) {
    QuantizerSpec s;
    s.kind = quantizer_kind_from_string(get_string(is));
    s.bits_per_latent = static_cast<int>(get_u32(is));
    s.mu = get_f64(is);
    s.levels = get_matrix(is);
    return s;
}

}  // namespace io

}  // namespace flowcsi

#endif  // FLOWCSI_QUANTIZER_HPP
