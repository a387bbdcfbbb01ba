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

#ifndef FLOWCSI_COMMON_HPP
#define FLOWCSI_COMMON_HPP

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcsi {

using cplx = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using RVec = Eigen::VectorXd;
using RMat = Eigen::MatrixXd;
using Index = Eigen::Index;

// Error hierarchy. Every failure the library reports derives from Error so
// callers (the CLI in particular) can map them onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidConfig : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class SingularChannel : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class DegenerateMean : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class ModeMismatch : public Error {
public:
    using Error::Error;
};

using Rng = std::mt19937_64;

// Independent stream for (seed, index); used wherever a draw must be
// reproducible without replaying earlier draws.
inline Rng make_stream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

inline RVec randn(Rng& rng, Index n, double std_dev = 1.0) {
    std::normal_distribution<double> dist(0.0, std_dev);
    RVec v(n);
    for (Index i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

// Circularly-symmetric complex normal with E|z|^2 = variance.
inline CVec crandn(Rng& rng, Index n, double variance = 1.0) {
    std::normal_distribution<double> dist(0.0, std::sqrt(variance / 2.0));
    CVec v(n);
    for (Index i = 0; i < n; ++i) {
        const double re = dist(rng);
        const double im = dist(rng);
        v[i] = cplx(re, im);
    }
    return v;
}

inline CVec random_unit(Rng& rng, Index n) {
    CVec v = crandn(rng, n);
    return v / v.norm();
}

// Stacked-real view: [Re(h); Im(h)], length 2N.
inline RVec to_stacked(const CVec& h) {
    const Index n = h.size();
    RVec out(2 * n);
    out.head(n) = h.real();
    out.tail(n) = h.imag();
    return out;
}

inline CVec from_stacked(const RVec& x) {
    if (x.size() % 2 != 0) throw DimensionMismatch("stacked-real vector must have even length");
    const Index n = x.size() / 2;
    CVec h(n);
    for (Index i = 0; i < n; ++i) h[i] = cplx(x[i], x[n + i]);
    return h;
}

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidConfig(what);
}

}  // namespace flowcsi

#endif  // FLOWCSI_COMMON_HPP
