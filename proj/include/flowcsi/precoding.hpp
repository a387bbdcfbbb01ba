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

// Zero-forcing precoding, achievable rates and reconstruction diagnostics.

#ifndef FLOWCSI_PRECODING_HPP
#define FLOWCSI_PRECODING_HPP

#include "flowcsi/channel_model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace flowcsi {

struct Precoder {
    CMat columns;  // N x K, column k is f_k
    double power = 1.0;
    double noise_var = 1.0;

    Index num_users() const { return columns.cols(); }
    CVec beam(Index k) const { return columns.col(k); }
};

inline double snr_db_to_power(double snr_db) { return std::pow(10.0, snr_db / 10.0); }

// Zero-forcing on the reconstructed channels with equal per-beam power P/K.
inline Precoder zf_precoder(const ChannelSet& h_hat, double power, double noise_var = 1.0,
                            double max_condition = kMaxConditionNumber) {
    require(power > 0.0 && noise_var > 0.0, "power and noise variance must be positive");
    const CMat h = h_hat.matrix();  // K x N, rows h_k^H
    const double cond = condition_number(h);
    if (!(cond < max_condition))
        throw SingularChannel("reconstructed channel matrix is ill-conditioned (cond " + std::to_string(cond) + ")");
    const CMat gram = h * h.adjoint();
    const CMat f_tilde = h.adjoint() * gram.ldlt().solve(CMat::Identity(gram.rows(), gram.cols()));
    Precoder p;
    p.power = power;
    p.noise_var = noise_var;
    p.columns = f_tilde;
    const double amp = std::sqrt(power / static_cast<double>(h.rows()));
    for (Index k = 0; k < f_tilde.cols(); ++k) {
        const double nrm = f_tilde.col(k).norm();
        if (!(nrm > 0.0) || !std::isfinite(nrm)) throw SingularChannel("zero-forcing beam has no energy");
        p.columns.col(k) = amp * f_tilde.col(k) / nrm;
    }
    return p;
}

// log2(1 + |h^H f_k|^2 / (sigma^2 + sum_{n != k} |h^H f_n|^2)).
inline double user_rate(const ChannelVector& h, const Precoder& f, Index k) {
    if (h.size() != f.columns.rows()) throw DimensionMismatch("channel / precoder length mismatch");
    const CVec g = f.columns.adjoint() * h.coeffs();  // conj(h^H f_n)
    const double signal = std::norm(g[k]);
    const double interference = g.squaredNorm() - signal;
    return std::log2(1.0 + signal / (f.noise_var + interference));
}

inline std::vector<double> user_rates(const ChannelSet& h, const Precoder& f) {
    if (h.num_users() != f.num_users()) throw DimensionMismatch("user count mismatch");
    std::vector<double> r;
    for (Index k = 0; k < h.num_users(); ++k) r.push_back(user_rate(h.user(k), f, k));
    return r;
}

inline double sum_rate(const ChannelSet& h, const Precoder& f) {
    double s = 0.0;
    for (double r : user_rates(h, f)) s += r;
    return s;
}

inline constexpr double kNmseFloorDb = -200.0;

// 10 log10 of the per-sample normalised error averaged over samples.
inline double nmse_db(const std::vector<ChannelVector>& h, const std::vector<ChannelVector>& h_hat) {
    if (h.empty()) throw InvalidConfig("NMSE of an empty list");
    if (h.size() != h_hat.size()) throw DimensionMismatch("NMSE lists differ in length");
    double acc = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (h[i].size() != h_hat[i].size()) throw DimensionMismatch("NMSE channel length mismatch");
        const double p = h[i].coeffs().squaredNorm();
        if (p == 0.0) continue;
        acc += (h[i].coeffs() - h_hat[i].coeffs()).squaredNorm() / p;
        ++used;
    }
    if (used == 0) throw InvalidConfig("NMSE needs at least one nonzero channel");
    const double ratio = acc / static_cast<double>(used);
    return ratio > 0.0 ? std::max(kNmseFloorDb, 10.0 * std::log10(ratio)) : kNmseFloorDb;
}

// sum_k |u_k^H f_k|^2 over true unit directions; zero channels are skipped.
inline double aggregate_desired(const ChannelSet& h, const Precoder& f, Index* skipped = nullptr) {
    double s = 0.0;
    for (Index k = 0; k < h.num_users(); ++k) {
        if (h.user(k).norm() == 0.0) {
            if (skipped) ++*skipped;
            continue;
        }
        s += std::norm(h.user(k).direction().dot(f.columns.col(k)));
    }
    return s;
}

// sum_k sum_{n != k} |u_k^H f_n|^2.
inline double aggregate_interference(const ChannelSet& h, const Precoder& f) {
    double s = 0.0;
    for (Index k = 0; k < h.num_users(); ++k) {
        if (h.user(k).norm() == 0.0) continue;
        const CVec u = h.user(k).direction();
        for (Index n = 0; n < f.num_users(); ++n)
            if (n != k) s += std::norm(u.dot(f.columns.col(n)));
    }
    return s;
}

// Magnitudes of the unitary length-N DFT.
inline RVec dft_profile(const ChannelVector& h) {
    const Index n = h.size();
    RVec out(n);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (Index k = 0; k < n; ++k) {
        cplx acc(0.0, 0.0);
        for (Index i = 0; i < n; ++i)
            acc += h.coeffs()[i] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * i) / static_cast<double>(n));
        out[k] = std::abs(acc) * scale;
    }
    return out;
}

}  // namespace flowcsi

#endif  // FLOWCSI_PRECODING_HPP
