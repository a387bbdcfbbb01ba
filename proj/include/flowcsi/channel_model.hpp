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

#ifndef FLOWCSI_CHANNEL_MODEL_HPP
#define FLOWCSI_CHANNEL_MODEL_HPP

#include "flowcsi/binary_io.hpp"
#include "flowcsi/common.hpp"

#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

namespace flowcsi {

// Uniform planar array. Element (r, c) sits at flat index r * cols + c.
struct ArrayGeometry {
    Index rows = 2;
    Index cols = 8;
    double element_spacing = 0.5;  // wavelengths

    Index num_antennas() const { return rows * cols; }

    void validate() const {
        require(rows > 0 && cols > 0, "array geometry needs rows, cols > 0");
        require(element_spacing > 0.0, "element spacing must be positive");
    }
};

// A single user's channel with its polar decomposition h = rho * u.
class ChannelVector {
public:
    ChannelVector() = default;
    explicit ChannelVector(CVec coeffs) : coeffs_(std::move(coeffs)) {}

    const CVec& coeffs() const { return coeffs_; }
    Index size() const { return coeffs_.size(); }
    double norm() const { return coeffs_.norm(); }

    // Unit direction; the zero channel maps to the zero vector.
    CVec direction() const {
        const double rho = norm();
        return rho > 0.0 ? CVec(coeffs_ / rho) : CVec(CVec::Zero(coeffs_.size()));
    }

    RVec stacked() const { return to_stacked(coeffs_); }
    static ChannelVector from_stacked_real(const RVec& x) { return ChannelVector(from_stacked(x)); }

    bool operator==(const ChannelVector& o) const { return coeffs_ == o.coeffs_; }

private:
    CVec coeffs_;
};

// K users' channels sharing N antennas; row k of matrix() is h_k^H.
class ChannelSet {
public:
    ChannelSet() = default;
    explicit ChannelSet(std::vector<ChannelVector> users) : users_(std::move(users)) {
        if (users_.empty()) throw InvalidConfig("channel set needs at least one user");
        const Index n = users_.front().size();
        for (const auto& u : users_)
            if (u.size() != n) throw DimensionMismatch("all users in a set must share N");
        if (static_cast<Index>(users_.size()) > n) throw InvalidConfig("channel set requires K <= N");
    }

    Index num_users() const { return static_cast<Index>(users_.size()); }
    Index num_antennas() const { return users_.front().size(); }
    const ChannelVector& user(Index k) const { return users_[static_cast<std::size_t>(k)]; }
    const std::vector<ChannelVector>& users() const { return users_; }

    // H = [h_1, ..., h_K]^H, K x N.
    CMat matrix() const {
        CMat h(num_users(), num_antennas());
        for (Index k = 0; k < num_users(); ++k) h.row(k) = user(k).coeffs().adjoint();
        return h;
    }

private:
    std::vector<ChannelVector> users_;
};

struct ClusterModelConfig {
    Index num_paths = 6;
    double angle_spread = 0.12;  // radians, std of per-path offsets around the cluster centre
    double power_decay = 0.7;    // path p carries power proportional to power_decay^p
    std::uint64_t seed = 1;
    double azimuth_min = -std::numbers::pi / 3.0;
    double azimuth_max = std::numbers::pi / 3.0;
    double elevation_min = -std::numbers::pi / 6.0;
    double elevation_max = std::numbers::pi / 6.0;

    void validate() const {
        require(num_paths >= 1, "num_paths must be >= 1");
        require(angle_spread >= 0.0, "angle_spread must be >= 0");
        require(power_decay > 0.0, "power_decay must be > 0");
        require(azimuth_min <= azimuth_max && elevation_min <= elevation_max, "empty angular sector");
    }
};

inline ChannelVector steering_vector(const ArrayGeometry& geom, double azimuth, double elevation) {
    geom.validate();
    CVec a(geom.num_antennas());
    const double two_pi_d = 2.0 * std::numbers::pi * geom.element_spacing;
    const double u_row = std::sin(elevation);
    const double u_col = std::sin(azimuth) * std::cos(elevation);
    for (Index r = 0; r < geom.rows; ++r)
        for (Index c = 0; c < geom.cols; ++c) {
            const double phase = two_pi_d * (static_cast<double>(r) * u_row + static_cast<double>(c) * u_col);
            a[r * geom.cols + c] = std::polar(1.0, phase);
        }
    return ChannelVector(std::move(a));
}

// Clustered multipath draw: one cluster centre uniform over the sector,
// num_paths rays with Gaussian angular offsets and exponentially decaying
// complex Gaussian gains. Gains are scaled so that E||h||^2 = N.
inline ChannelVector generate_channel(const ArrayGeometry& geom, const ClusterModelConfig& cfg, Rng& rng) {
    cfg.validate();
    std::uniform_real_distribution<double> az_dist(cfg.azimuth_min, cfg.azimuth_max);
    std::uniform_real_distribution<double> el_dist(cfg.elevation_min, cfg.elevation_max);
    std::normal_distribution<double> offset(0.0, 1.0);
    const double az0 = az_dist(rng);
    const double el0 = el_dist(rng);

    double total = 0.0;
    for (Index p = 0; p < cfg.num_paths; ++p) total += std::pow(cfg.power_decay, static_cast<double>(p));

    CVec h = CVec::Zero(geom.num_antennas());
    for (Index p = 0; p < cfg.num_paths; ++p) {
        const double az = az0 + cfg.angle_spread * offset(rng);
        const double el = el0 + cfg.angle_spread * offset(rng);
        const double power = std::pow(cfg.power_decay, static_cast<double>(p)) / total;
        const cplx gain = crandn(rng, 1, power)[0];
        h += gain * steering_vector(geom, az, el).coeffs();
    }
    return ChannelVector(std::move(h));
}

// Draw number `index` of the stream identified by cfg.seed.
inline ChannelVector generate_channel_at(const ArrayGeometry& geom, const ClusterModelConfig& cfg,
                                         std::uint64_t index) {
    Rng rng = make_stream(cfg.seed, index);
    return generate_channel(geom, cfg, rng);
}

inline double condition_number(const CMat& h) {
    Eigen::JacobiSVD<CMat> svd(h);
    const RVec& s = svd.singularValues();
    if (s.size() == 0 || s[s.size() - 1] <= 0.0) return std::numeric_limits<double>::infinity();
    return s[0] / s[s.size() - 1];
}

struct Dataset {
    ArrayGeometry geometry;
    ClusterModelConfig config;
    Index users_per_set = 1;
    std::vector<ChannelVector> train;
    std::vector<ChannelVector> test;
    std::vector<std::vector<std::uint32_t>> multiuser_sets;  // indices into test

    ChannelSet channel_set(std::size_t s) const {
        std::vector<ChannelVector> users;
        for (auto idx : multiuser_sets.at(s)) users.push_back(test.at(idx));
        return ChannelSet(std::move(users));
    }
};

inline constexpr double kMaxConditionNumber = 1e8;

// Train draws use stream indices [0, n_train), test draws [n_train, n_train + n_test),
// so the splits never share a realization. Power is normalised on the train
// split so that its mean ||h||^2 equals N; the same factor is applied to test.
inline Dataset build_dataset(const ArrayGeometry& geom, const ClusterModelConfig& cfg, Index n_train, Index n_test,
                             Index n_sets, Index users_per_set) {
    geom.validate();
    cfg.validate();
    if (users_per_set < 1) throw InvalidConfig("K must be >= 1");
    if (users_per_set > n_test) throw InvalidConfig("K exceeds the number of test channels");
    if (users_per_set > geom.num_antennas()) throw InvalidConfig("K exceeds the number of antennas");
    if (n_train < 1) throw InvalidConfig("n_train must be >= 1");

    Dataset ds;
    ds.geometry = geom;
    ds.config = cfg;
    ds.users_per_set = users_per_set;
    ds.train.reserve(static_cast<std::size_t>(n_train));
    ds.test.reserve(static_cast<std::size_t>(n_test));
    for (Index i = 0; i < n_train; ++i) ds.train.push_back(generate_channel_at(geom, cfg, static_cast<std::uint64_t>(i)));
    for (Index i = 0; i < n_test; ++i)
        ds.test.push_back(generate_channel_at(geom, cfg, static_cast<std::uint64_t>(n_train + i)));

    double mean_power = 0.0;
    for (const auto& h : ds.train) mean_power += h.coeffs().squaredNorm();
    mean_power /= static_cast<double>(n_train);
    const double scale = std::sqrt(static_cast<double>(geom.num_antennas()) / mean_power);
    for (auto& h : ds.train) h = ChannelVector(h.coeffs() * scale);
    for (auto& h : ds.test) h = ChannelVector(h.coeffs() * scale);

    constexpr std::uint64_t kSetStream = 1ull << 40;
    constexpr int kMaxTries = 1000;
    for (Index s = 0; s < n_sets; ++s) {
        Rng rng = make_stream(cfg.seed, kSetStream + static_cast<std::uint64_t>(s));
        std::vector<std::uint32_t> pick;
        for (int attempt = 0;; ++attempt) {
            if (attempt == kMaxTries) throw InvalidConfig("could not draw a well-conditioned multiuser set");
            std::vector<std::uint32_t> pool(static_cast<std::size_t>(n_test));
            for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::uint32_t>(i);
            for (Index k = 0; k < users_per_set; ++k) {
                std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(k), pool.size() - 1);
                std::swap(pool[static_cast<std::size_t>(k)], pool[d(rng)]);
            }
            pick.assign(pool.begin(), pool.begin() + users_per_set);
            CMat h(users_per_set, geom.num_antennas());
            for (Index k = 0; k < users_per_set; ++k)
                h.row(k) = ds.test[pick[static_cast<std::size_t>(k)]].coeffs().adjoint();
            if (condition_number(h) < kMaxConditionNumber) break;
        }
        ds.multiuser_sets.push_back(std::move(pick));
    }
    return ds;
}

// ---- persistence: "MCSD" binary and CSV export ----

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_channels(std::ostream& os, const std::vector<ChannelVector>& hs) {
    for (const auto& h : hs)
        for (Index i = 0; i < h.size(); ++i) {
            io::put_f64(os, h.coeffs()[i].real());
            io::put_f64(os, h.coeffs()[i].imag());
        }
}

inline void save_dataset(std::ostream& os, const Dataset& ds) {
    io::put_magic(os, "MCSD");
    io::put_u32(os, kDatasetVersion);
    io::put_u32(os, static_cast<std::uint32_t>(ds.geometry.rows));
    io::put_u32(os, static_cast<std::uint32_t>(ds.geometry.cols));
    io::put_f64(os, ds.geometry.element_spacing);
    io::put_u32(os, static_cast<std::uint32_t>(ds.config.num_paths));
    io::put_f64(os, ds.config.angle_spread);
    io::put_f64(os, ds.config.power_decay);
    io::put_u64(os, ds.config.seed);
    io::put_f64(os, ds.config.azimuth_min);
    io::put_f64(os, ds.config.azimuth_max);
    io::put_f64(os, ds.config.elevation_min);
    io::put_f64(os, ds.config.elevation_max);
    io::put_u32(os, static_cast<std::uint32_t>(ds.train.size()));
    io::put_u32(os, static_cast<std::uint32_t>(ds.test.size()));
    io::put_u32(os, static_cast<std::uint32_t>(ds.multiuser_sets.size()));
    io::put_u32(os, static_cast<std::uint32_t>(ds.users_per_set));
    write_channels(os, ds.train);
    write_channels(os, ds.test);
    for (const auto& set : ds.multiuser_sets)
        for (auto idx : set) io::put_u32(os, idx);
}

inline Dataset load_dataset(std::istream& is) {
    io::expect_magic(is, "MCSD");
    const std::uint32_t version = io::get_u32(is);
    if (version != kDatasetVersion) throw FormatError("unsupported MCSD version " + std::to_string(version));
    Dataset ds;
    ds.geometry.rows = io::get_u32(is);
    ds.geometry.cols = io::get_u32(is);
    ds.geometry.element_spacing = io::get_f64(is);
    ds.config.num_paths = io::get_u32(is);
    ds.config.angle_spread = io::get_f64(is);
    ds.config.power_decay = io::get_f64(is);
    ds.config.seed = io::get_u64(is);
    ds.config.azimuth_min = io::get_f64(is);
    ds.config.azimuth_max = io::get_f64(is);
    ds.config.elevation_min = io::get_f64(is);
    ds.config.elevation_max = io::get_f64(is);
    const std::uint32_t n_train = io::get_u32(is);
    const std::uint32_t n_test = io::get_u32(is);
    const std::uint32_t n_sets = io::get_u32(is);
    ds.users_per_set = io::get_u32(is);
    ds.geometry.validate();
    const Index n = ds.geometry.num_antennas();
    auto read_block = [&](std::uint32_t count, std::vector<ChannelVector>& out) {
        out.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            CVec h(n);
            for (Index j = 0; j < n; ++j) {
                const double re = io::get_f64(is);
                const double im = io::get_f64(is);
                h[j] = cplx(re, im);
            }
            out.emplace_back(std::move(h));
        }
    };
    read_block(n_train, ds.train);
    read_block(n_test, ds.test);
    for (std::uint32_t s = 0; s < n_sets; ++s) {
        std::vector<std::uint32_t> set(static_cast<std::size_t>(ds.users_per_set));
        for (auto& idx : set) {
            idx = io::get_u32(is);
            if (idx >= n_test) throw FormatError("multiuser set index out of range");
        }
        ds.multiuser_sets.push_back(std::move(set));
    }
    return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    save_dataset(os, ds);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    return load_dataset(is);
}

// One row per channel: re_0..re_{N-1}, im_0..im_{N-1}.
inline void export_csv(std::ostream& os, const std::vector<ChannelVector>& hs) {
    os.precision(17);
    for (const auto& h : hs) {
        const RVec x = h.stacked();
        for (Index i = 0; i < x.size(); ++i) os << (i ? "," : "") << x[i];
        os << '\n';
    }
}

}  // namespace flowcsi

#endif  // FLOWCSI_CHANNEL_MODEL_HPP
