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

// Directional geometry of feedback cells: second moments, principal directions,
// finite-mixture ZF interference and the local PS/CM comparison.

#ifndef FLOWCSI_POSTERIOR_GEOMETRY_HPP
#define FLOWCSI_POSTERIOR_GEOMETRY_HPP

#include "flowcsi/frontend.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace flowcsi {

inline constexpr double kUnitTolerance = 1e-9;
inline constexpr double kProjectedUnderflow = 1e-9;

inline void require_unit(const CVec& u, const char* what) {
    if (std::abs(u.norm() - 1.0) > kUnitTolerance) throw InvalidConfig(std::string(what) + " must have unit norm");
}

// d_c^2(u, v) = 1 - |u^H v|^2 for unit vectors.
inline double chordal_distance_sq(const CVec& u, const CVec& v) { return 1.0 - std::norm(u.dot(v)); }

// Makes the first entry of largest magnitude real and positive.
inline CVec fix_phase(const CVec& v) {
    Index best = 0;
    double mag = -1.0;
    for (Index i = 0; i < v.size(); ++i)
        if (std::abs(v[i]) > mag * (1.0 + 1e-12)) {
            mag = std::abs(v[i]);
            best = i;
        }
    if (mag <= 0.0) return v;
    return v * (std::conj(v[best]) / std::abs(v[best]));
}

// ---- feedback cells ----

struct FeedbackCell {
    FeedbackBits bits;
    std::vector<CVec> members;  // unit directions

    std::size_t count() const { return members.size(); }
};

struct CellCollection {
    std::map<FeedbackBits, FeedbackCell> cells;
    std::size_t total = 0;
    std::size_t min_count = 1;

    std::vector<const FeedbackCell*> eligible() const {
        std::vector<const FeedbackCell*> out;
        for (const auto& [k, c] : cells)
            if (c.count() >= min_count) out.push_back(&c);
        return out;
    }
    std::size_t below_min() const { return cells.size() - eligible().size(); }
};

// Groups channels by their feedback bits. Zero channels have no direction and are skipped.
inline CellCollection collect_cells(const std::vector<ChannelVector>& channels, const FrontendModel& fe,
                                    std::size_t min_count = 1) {
    CellCollection out;
    out.min_count = min_count;
    const auto bits = encode_batch(fe, channels);
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i].norm() == 0.0) continue;
        auto& cell = out.cells[bits[i]];
        cell.bits = bits[i];
        cell.members.push_back(channels[i].direction());
        ++out.total;
    }
    return out;
}

// ---- second moment and principal direction ----

struct SecondMoment {
    CMat R;
    std::size_t sample_count = 0;

    Index dim() const { return R.rows(); }

    void validate(double tol = 1e-9) const {
        require((R - R.adjoint()).cwiseAbs().maxCoeff() <= 1e-12, "second moment must be Hermitian");
        require(std::abs(R.trace().real() - 1.0) <= tol, "second moment must have unit trace");
        Eigen::SelfAdjointEigenSolver<CMat> es(R, Eigen::EigenvaluesOnly);
        require(es.eigenvalues().minCoeff() >= -1e-12, "second moment must be positive semidefinite");
    }
};

// R = (1/n) sum u u^H over normalised inputs.
inline SecondMoment second_moment(const std::vector<CVec>& directions) {
    if (directions.empty()) throw InvalidConfig("second moment of an empty cell");
    const Index n = directions.front().size();
    CMat r = CMat::Zero(n, n);
    std::size_t used = 0;
    for (const auto& d : directions) {
        if (d.size() != n) throw DimensionMismatch("cell members differ in length");
        const double nrm = d.norm();
        if (nrm == 0.0) continue;
        const CVec u = d / nrm;
        r.noalias() += u * u.adjoint();
        ++used;
    }
    if (used == 0) throw InvalidConfig("second moment of a cell with only zero vectors");
    r /= static_cast<double>(used);
    r = 0.5 * (r + r.adjoint()).eval();
    return {r, used};
}

inline SecondMoment second_moment(const FeedbackCell& cell) { return second_moment(cell.members); }

struct PrincipalDirection {
    CVec u_star;
    double lambda_max = 0.0;
    double min_distortion = 0.0;  // 1 - lambda_max
};

// Principal eigenvector. With a repeated top eigenvalue the eigenvector with
// the lowest index among the tied ones (ascending eigen order) is returned.
inline PrincipalDirection optimal_direction(const SecondMoment& r) {
    Eigen::SelfAdjointEigenSolver<CMat> es(r.R);
    const RVec& ev = es.eigenvalues();
    const Index n = ev.size();
    const double top = ev[n - 1];
    const double tol = 1e-12 * std::max(1.0, std::abs(top));
    Index pick = n - 1;
    while (pick > 0 && top - ev[pick - 1] <= tol) --pick;
    PrincipalDirection out;
    out.u_star = fix_phase(es.eigenvectors().col(pick).normalized());
    out.lambda_max = top;
    out.min_distortion = 1.0 - top;
    return out;
}

inline double rayleigh(const CVec& u, const SecondMoment& r) { return u.dot(r.R * u).real(); }

// E[d_c^2(u, u_hat) | cell] = 1 - u_hat^H R u_hat.
inline double chordal_distortion(const CVec& u_hat, const SecondMoment& r) {
    require_unit(u_hat, "u_hat");
    return 1.0 - rayleigh(u_hat, r);
}

// lambda_max - u_hat^H R u_hat.
inline double alignment_gap(const CVec& u_hat, const SecondMoment& r) {
    require_unit(u_hat, "u_hat");
    return optimal_direction(r).lambda_max - rayleigh(u_hat, r);
}

// ---- conditional mean ----

inline constexpr double kDegenerateMean = 1e-12;

inline CVec conditional_mean_direction(const std::vector<CVec>& modes, const RVec& weights) {
    if (modes.empty() || static_cast<Index>(modes.size()) != weights.size())
        throw DimensionMismatch("modes and weights differ in count");
    CVec mu = CVec::Zero(modes.front().size());
    for (std::size_t m = 0; m < modes.size(); ++m) mu += weights[static_cast<Index>(m)] * modes[m];
    const double nrm = mu.norm();
    if (!(nrm > kDegenerateMean)) throw DegenerateMean("conditional mean vanishes");
    return mu / nrm;
}

// Empirical cell mean of the member directions.
inline CVec conditional_mean_direction(const FeedbackCell& cell) {
    if (cell.members.empty()) throw InvalidConfig("empty cell");
    return conditional_mean_direction(
        cell.members, RVec::Constant(static_cast<Index>(cell.members.size()), 1.0 / static_cast<double>(cell.count())));
}

// ---- projectors ----

// Orthogonal projector onto span(vectors)^perp; identity for an empty list.
inline CMat projector_complement(const std::vector<CVec>& vectors, Index dim) {
    CMat pi = CMat::Identity(dim, dim);
    if (vectors.empty()) return pi;
    CMat v(dim, static_cast<Index>(vectors.size()));
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (vectors[i].size() != dim) throw DimensionMismatch("projector inputs differ in length");
        v.col(static_cast<Index>(i)) = vectors[i];
    }
    Eigen::JacobiSVD<CMat> svd(v, Eigen::ComputeThinU);
    const RVec& s = svd.singularValues();
    const double cut = std::max(1e-300, s.size() ? s[0] * 1e-10 : 0.0);
    Index rank = 0;
    while (rank < s.size() && s[rank] > cut) ++rank;
    const CMat u = svd.matrixU().leftCols(rank);
    pi -= u * u.adjoint();
    return pi;
}

inline CMat projector_complement(const std::vector<CVec>& vectors) {
    if (vectors.empty()) throw InvalidConfig("dimension needed for an empty projector list");
    return projector_complement(vectors, vectors.front().size());
}

// ---- finite-mixture posterior ----

struct MixturePosterior {
    std::vector<std::vector<CVec>> modes;  // modes[k][m]
    std::vector<RVec> weights;             // weights[k][m]

    Index num_users() const { return static_cast<Index>(modes.size()); }
    Index num_modes(Index k) const { return static_cast<Index>(modes[static_cast<std::size_t>(k)].size()); }
    Index dim() const { return modes.front().front().size(); }
    const CVec& mode(Index k, Index m) const { return modes[static_cast<std::size_t>(k)][static_cast<std::size_t>(m)]; }
    double weight(Index k, Index m) const { return weights[static_cast<std::size_t>(k)][m]; }

    void validate() const {
        require(!modes.empty() && modes.size() == weights.size(), "mixture needs one weight vector per user");
        for (std::size_t k = 0; k < modes.size(); ++k) {
            require(!modes[k].empty() && static_cast<Index>(modes[k].size()) == weights[k].size(),
                    "mode and weight counts differ");
            require(weights[k].minCoeff() >= 0.0, "mixture weights must be nonnegative");
            require(std::abs(weights[k].sum() - 1.0) <= 1e-12, "mixture weights must sum to one");
            for (const auto& v : modes[k]) {
                if (v.size() != dim()) throw DimensionMismatch("mixture modes differ in length");
                require(std::abs(v.norm() - 1.0) <= 1e-12, "mixture modes must have unit norm");
            }
        }
    }

    CVec mean(Index k) const {
        CVec mu = CVec::Zero(dim());
        for (Index m = 0; m < num_modes(k); ++m) mu += weight(k, m) * mode(k, m);
        return mu;
    }

    CVec cm_direction(Index k) const {
        return conditional_mean_direction(modes[static_cast<std::size_t>(k)], weights[static_cast<std::size_t>(k)]);
    }

    double tuple_probability(const std::vector<Index>& m) const {
        double p = 1.0;
        for (Index k = 0; k < num_users(); ++k) p *= weight(k, m[static_cast<std::size_t>(k)]);
        return p;
    }
};

// Projector onto span{v_j(m_j) : j != n}^perp.
inline CMat ps_projector(const MixturePosterior& mix, const std::vector<Index>& m, Index n) {
    std::vector<CVec> others;
    for (Index j = 0; j < mix.num_users(); ++j)
        if (j != n) others.push_back(mix.mode(j, m[static_cast<std::size_t>(j)]));
    return projector_complement(others, mix.dim());
}

inline CMat cm_projector(const MixturePosterior& mix, Index n) {
    std::vector<CVec> others;
    for (Index j = 0; j < mix.num_users(); ++j)
        if (j != n) others.push_back(mix.cm_direction(j));
    return projector_complement(others, mix.dim());
}

struct TupleInterference {
    double value = 0.0;
    bool underflow = false;
};

// J_m: leakage of the non-selected modes into the ZF beams built on tuple m.
inline TupleInterference tuple_interference(const MixturePosterior& mix, const std::vector<Index>& m) {
    TupleInterference out;
    for (Index n = 0; n < mix.num_users(); ++n) {
        const CVec beam = ps_projector(mix, m, n) * mix.mode(n, m[static_cast<std::size_t>(n)]);
        const double eta = beam.squaredNorm();
        if (std::sqrt(eta) < kProjectedUnderflow) {
            out.underflow = true;
            return out;
        }
        for (Index k = 0; k < mix.num_users(); ++k) {
            if (k == n) continue;
            for (Index l = 0; l < mix.num_modes(k); ++l)
                if (l != m[static_cast<std::size_t>(k)]) out.value += mix.weight(k, l) * std::norm(mix.mode(k, l).dot(beam)) / eta;
        }
    }
    return out;
}

struct InterferenceEstimate {
    double value = 0.0;
    double standard_error = 0.0;  // zero for exact enumeration
    std::size_t tuples = 0;        // enumerated tuples or Monte Carlo draws
    std::size_t excluded = 0;      // tuples dropped for projected-norm underflow
    double excluded_mass = 0.0;
};

inline constexpr std::size_t kMaxEnumeration = 1000000;

// I_PS by enumerating every mode tuple.
inline InterferenceEstimate interference_ps_exact(const MixturePosterior& mix) {
    mix.validate();
    double count = 1.0;
    for (Index k = 0; k < mix.num_users(); ++k) count *= static_cast<double>(mix.num_modes(k));
    if (count > static_cast<double>(kMaxEnumeration))
        throw InvalidConfig("too many mode tuples for exact enumeration; use Monte Carlo");
    InterferenceEstimate est;
    std::vector<Index> m(static_cast<std::size_t>(mix.num_users()), 0);
    for (;;) {
        const double p = mix.tuple_probability(m);
        const TupleInterference j = tuple_interference(mix, m);
        ++est.tuples;
        if (j.underflow) {
            ++est.excluded;
            est.excluded_mass += p;
        } else {
            est.value += p * j.value;
        }
        Index k = 0;
        while (k < mix.num_users() && ++m[static_cast<std::size_t>(k)] == mix.num_modes(k)) m[static_cast<std::size_t>(k++)] = 0;
        if (k == mix.num_users()) break;
    }
    return est;
}

// I_PS by sampling tuples from prod_k p_k; reports the standard error.
inline InterferenceEstimate interference_ps_monte_carlo(const MixturePosterior& mix, std::size_t draws, Rng& rng) {
    mix.validate();
    require(draws >= 2, "Monte Carlo needs at least two draws");
    std::vector<std::discrete_distribution<Index>> pick;
    for (Index k = 0; k < mix.num_users(); ++k) {
        const RVec& w = mix.weights[static_cast<std::size_t>(k)];
        pick.emplace_back(w.data(), w.data() + w.size());
    }
    InterferenceEstimate est;
    double sum = 0.0, sum_sq = 0.0;
    std::size_t used = 0;
    std::vector<Index> m(static_cast<std::size_t>(mix.num_users()));
    for (std::size_t d = 0; d < draws; ++d) {
        for (Index k = 0; k < mix.num_users(); ++k) m[static_cast<std::size_t>(k)] = pick[static_cast<std::size_t>(k)](rng);
        const TupleInterference j = tuple_interference(mix, m);
        ++est.tuples;
        if (j.underflow) {
            ++est.excluded;
            continue;
        }
        sum += j.value;
        sum_sq += j.value * j.value;
        ++used;
    }
    if (used == 0) return est;
    const double n = static_cast<double>(used);
    est.value = sum / n;
    const double var = used > 1 ? std::max(0.0, (sum_sq - n * est.value * est.value) / (n - 1.0)) : 0.0;
    est.standard_error = std::sqrt(var / n);
    est.excluded_mass = static_cast<double>(est.excluded) / static_cast<double>(draws);
    return est;
}

// I_CM: leakage of every posterior mode into the ZF beams built on the
// conditional-mean directions.
inline double interference_cm(const MixturePosterior& mix) {
    mix.validate();
    double total = 0.0;
    for (Index n = 0; n < mix.num_users(); ++n) {
        const CVec beam = cm_projector(mix, n) * mix.cm_direction(n);
        const double eta = beam.squaredNorm();
        if (std::sqrt(eta) < kProjectedUnderflow) throw SingularChannel("conditional-mean beam has no projected energy");
        for (Index k = 0; k < mix.num_users(); ++k) {
            if (k == n) continue;
            for (Index m = 0; m < mix.num_modes(k); ++m) total += mix.weight(k, m) * std::norm(mix.mode(k, m).dot(beam)) / eta;
        }
    }
    return total;
}

// ---- local terms and mean-precoder leakage ----

struct LocalTermReport {
    std::vector<Index> m;
    Index k = 0;
    Index n = 0;
    double i_ps_local = 0.0;
    double i_cm_local = 0.0;
    double i_cm_direct = 0.0;  // (k, n) summand of I_CM evaluated directly
    double s_cm = 0.0;
    double c_cm = 0.0;
    double r_ps = 0.0;
    double eta_ps = 0.0;
    double eta_cm = 0.0;
    double c_n = 0.0;
    CVec d_n;
    CVec a_coeffs;  // indexed by l, entry m_k left at zero
    CVec b_coeffs;
    double cross_term = 0.0;
    double projector_gap = 0.0;  // ||Pi_CM - Pi_n(m)||_F
};

inline LocalTermReport local_terms(const MixturePosterior& mix, const std::vector<Index>& m, Index k, Index n) {
    mix.validate();
    require(k != n, "local terms need k != n");
    require(static_cast<Index>(m.size()) == mix.num_users(), "tuple length must equal the user count");
    require(k >= 0 && n >= 0 && k < mix.num_users() && n < mix.num_users(), "user index out of range");
    LocalTermReport r;
    r.m = m;
    r.k = k;
    r.n = n;
    const Index mk = m[static_cast<std::size_t>(k)], mn = m[static_cast<std::size_t>(n)];
    const CVec& vn = mix.mode(n, mn);

    const CMat pi_ps = ps_projector(mix, m, n);
    const CVec beam_ps = pi_ps * vn;
    r.eta_ps = beam_ps.squaredNorm();
    if (std::sqrt(r.eta_ps) < kProjectedUnderflow) throw SingularChannel("posterior-sampling beam underflows");
    for (Index l = 0; l < mix.num_modes(k); ++l)
        if (l != mk) r.r_ps += mix.weight(k, l) * std::norm(mix.mode(k, l).dot(beam_ps));
    r.i_ps_local = r.r_ps / r.eta_ps;

    const CVec mu = mix.mean(n);
    const double mu_norm = mu.norm();
    if (!(mu_norm > kDegenerateMean)) throw DegenerateMean("conditional mean of user " + std::to_string(n) + " vanishes");
    const CVec u_cm = mu / mu_norm;
    r.c_n = mix.weight(n, mn) / mu_norm;
    r.d_n = CVec::Zero(mix.dim());
    for (Index q = 0; q < mix.num_modes(n); ++q)
        if (q != mn) r.d_n += mix.weight(n, q) / mu_norm * mix.mode(n, q);

    const CMat pi_cm = cm_projector(mix, n);
    r.projector_gap = (pi_cm - pi_ps).norm();
    const CVec beam_cm = pi_cm * u_cm;
    r.eta_cm = beam_cm.squaredNorm();
    if (std::sqrt(r.eta_cm) < kProjectedUnderflow) throw SingularChannel("conditional-mean beam underflows");
    r.s_cm = mix.weight(k, mk) * std::norm(mix.mode(k, mk).dot(beam_cm));

    const CVec pv = pi_cm * vn, pd = pi_cm * r.d_n;
    r.a_coeffs = CVec::Zero(mix.num_modes(k));
    r.b_coeffs = CVec::Zero(mix.num_modes(k));
    double branch = 0.0;
    for (Index l = 0; l < mix.num_modes(k); ++l) {
        if (l == mk) continue;
        const cplx a = mix.mode(k, l).dot(pv);
        const cplx b = mix.mode(k, l).dot(pd);
        r.a_coeffs[l] = a;
        r.b_coeffs[l] = b;
        const double p = mix.weight(k, l);
        r.c_cm += p * std::norm(b);
        r.cross_term += p * (std::conj(a) * b).real();
        branch += p * std::norm(r.c_n * a + b);
    }
    r.i_cm_local = (r.s_cm + branch) / r.eta_cm;

    for (Index l = 0; l < mix.num_modes(k); ++l) r.i_cm_direct += mix.weight(k, l) * std::norm(mix.mode(k, l).dot(beam_cm));
    r.i_cm_direct /= r.eta_cm;
    return r;
}

struct LeakageCertificate {
    LocalTermReport terms;
    bool same_projector = false;
    bool cross_nonnegative = false;
    bool threshold = false;
    bool hypotheses_hold = false;
    bool conclusion_holds = false;    // I_CM_local > I_PS_local
    double expansion_residual = 0.0;  // Appendix A identity, absolute
    double threshold_rhs = 0.0;

    // A counterexample: every hypothesis holds but the conclusion fails.
    bool counterexample() const { return hypotheses_hold && !conclusion_holds; }
};

inline LeakageCertificate certify_mean_leakage(const MixturePosterior& mix, const std::vector<Index>& m, Index k, Index n,
                                               double projector_tol = 1e-9) {
    LeakageCertificate rep;
    rep.terms = local_terms(mix, m, k, n);
    const LocalTermReport& t = rep.terms;
    rep.same_projector = t.projector_gap < projector_tol;
    rep.cross_nonnegative = t.cross_term >= 0.0;
    rep.threshold_rhs = (t.eta_cm / t.eta_ps - t.c_n * t.c_n) * t.r_ps;
    rep.threshold = t.c_cm > rep.threshold_rhs;
    rep.hypotheses_hold = rep.same_projector && rep.cross_nonnegative && rep.threshold;
    rep.conclusion_holds = t.i_cm_local > t.i_ps_local;
    // Under the same projector, S_CM = 0 and sum_l p |a|^2 = R_PS, so the CM
    // local term expands to (c^2 R_PS + C_CM + 2 c cross) / eta_CM.
    if (rep.same_projector) {
        const double expanded = (t.c_n * t.c_n * t.r_ps + t.c_cm + 2.0 * t.c_n * t.cross_term) / t.eta_cm;
        rep.expansion_residual = std::abs(expanded - t.i_cm_local);
    }
    return rep;
}

// ---- diagnostics ----

struct MdsEmbedding {
    RMat coords;  // (count, 2)
    RVec eigenvalues;  // top two of the double-centred matrix
};

// Classical MDS of the chordal distances, D_ij = d_c^2(u_i, u_j).
inline MdsEmbedding mds_embed(const std::vector<CVec>& directions) {
    const Index n = static_cast<Index>(directions.size());
    if (n < 2) throw InvalidConfig("MDS needs at least two directions");
    RMat d(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            d(i, j) = i == j ? 0.0
                             : std::max(0.0, chordal_distance_sq(directions[static_cast<std::size_t>(i)].normalized(),
                                                                 directions[static_cast<std::size_t>(j)].normalized()));
    const RMat jc = RMat::Identity(n, n) - RMat::Constant(n, n, 1.0 / static_cast<double>(n));
    const RMat b = -0.5 * jc * d * jc;
    Eigen::SelfAdjointEigenSolver<RMat> es(0.5 * (b + b.transpose()));
    MdsEmbedding out;
    out.coords = RMat::Zero(n, 2);
    out.eigenvalues = RVec::Zero(2);
    for (Index c = 0; c < std::min<Index>(2, n); ++c) {
        const Index col = n - 1 - c;
        const double lam = std::max(0.0, es.eigenvalues()[col]);
        RVec v = es.eigenvectors().col(col);
        Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0.0) v = -v;
        out.coords.col(c) = v * std::sqrt(lam);
        out.eigenvalues[c] = lam;
    }
    return out;
}

struct ModeExtraction {
    std::vector<CVec> modes;
    RVec weights;
    std::vector<Index> assignment;
};

// Spherical k-means under the chordal metric: assign each member to the
// centre with the largest |c^H u|^2, then move each centre to the principal
// eigenvector of its members' second moment. Centre phases are aligned with
// the cluster mean so that weighted sums of modes stay meaningful.
inline ModeExtraction extract_modes(const std::vector<CVec>& members, Index num_modes, Rng& rng, int iterations = 50) {
    require(num_modes >= 1, "at least one mode is needed");
    require(!members.empty(), "cannot extract modes from an empty cell");
    const Index n = static_cast<Index>(members.size());
    const Index m = std::min(num_modes, n);
    std::vector<CVec> centres;
    // k-means++ seeding on chordal distance.
    std::uniform_int_distribution<Index> first(0, n - 1);
    centres.push_back(members[static_cast<std::size_t>(first(rng))].normalized());
    while (static_cast<Index>(centres.size()) < m) {
        std::vector<double> dist(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            double best = 1.0;
            for (const auto& c : centres) best = std::min(best, chordal_distance_sq(c, members[static_cast<std::size_t>(i)].normalized()));
            dist[static_cast<std::size_t>(i)] = std::max(0.0, best);
        }
        double total = 0.0;
        for (double v : dist) total += v;
        Index pick = 0;
        if (total > 0.0) {
            std::discrete_distribution<Index> dd(dist.begin(), dist.end());
            pick = dd(rng);
        }
        centres.push_back(members[static_cast<std::size_t>(pick)].normalized());
    }
    ModeExtraction out;
    out.assignment.assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < iterations; ++it) {
        bool changed = it == 0;
        for (Index i = 0; i < n; ++i) {
            Index best = 0;
            double gain = -1.0;
            for (Index c = 0; c < m; ++c) {
                const double g = std::norm(centres[static_cast<std::size_t>(c)].dot(members[static_cast<std::size_t>(i)].normalized()));
                if (g > gain) {
                    gain = g;
                    best = c;
                }
            }
            if (out.assignment[static_cast<std::size_t>(i)] != best) changed = true;
            out.assignment[static_cast<std::size_t>(i)] = best;
        }
        for (Index c = 0; c < m; ++c) {
            std::vector<CVec> group;
            for (Index i = 0; i < n; ++i)
                if (out.assignment[static_cast<std::size_t>(i)] == c) group.push_back(members[static_cast<std::size_t>(i)]);
            if (group.empty()) continue;
            CVec centre = optimal_direction(second_moment(group)).u_star;
            CVec mean = CVec::Zero(centre.size());
            for (const auto& g : group) mean += g.normalized();
            const cplx overlap = centre.dot(mean);
            if (std::abs(overlap) > 0.0) centre *= overlap / std::abs(overlap);
            centres[static_cast<std::size_t>(c)] = centre;
        }
        if (!changed) break;
    }
    out.weights = RVec::Zero(m);
    for (Index a : out.assignment) out.weights[a] += 1.0 / static_cast<double>(n);
    // Drop empty clusters.
    std::vector<CVec> modes;
    std::vector<double> w;
    std::vector<Index> remap(static_cast<std::size_t>(m), -1);
    for (Index c = 0; c < m; ++c)
        if (out.weights[c] > 0.0) {
            remap[static_cast<std::size_t>(c)] = static_cast<Index>(modes.size());
            modes.push_back(centres[static_cast<std::size_t>(c)]);
            w.push_back(out.weights[c]);
        }
    for (auto& a : out.assignment) a = remap[static_cast<std::size_t>(a)];
    out.modes = std::move(modes);
    out.weights = Eigen::Map<RVec>(w.data(), static_cast<Index>(w.size()));
    out.weights /= out.weights.sum();
    return out;
}

}  // namespace flowcsi

#endif  // FLOWCSI_POSTERIOR_GEOMETRY_HPP
