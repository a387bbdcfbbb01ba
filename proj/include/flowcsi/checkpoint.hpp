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

// MGCF checkpoints for front ends and flow decoders.

#ifndef FLOWCSI_CHECKPOINT_HPP
#define FLOWCSI_CHECKPOINT_HPP

#include "flowcsi/binary_io.hpp"
#include "flowcsi/flow.hpp"
#include "flowcsi/frontend.hpp"

#include <fstream>
#include <sstream>
#include <string>

namespace flowcsi {

// "MGCF" layout: magic, u32 version, module tag string, then the payload.
// Loss curves are written separately as CSV so that the file depends only on
// the trained state.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModuleTag { frontend, flow };

inline std::string to_string(ModuleTag t) { return t == ModuleTag::frontend ? "frontend" : "flow"; }

namespace detail {

inline void put_header(std::ostream& os, ModuleTag tag) {
    io::put_magic(os, "MGCF");
    io::put_u32(os, kCheckpointVersion);
    io::put_string(os, to_string(tag));
}

inline void expect_header(std::istream& is, ModuleTag tag) {
    io::expect_magic(is, "MGCF");
    const std::uint32_t v = io::get_u32(is);
    if (v != kCheckpointVersion) throw FormatError("unsupported MGCF version " + std::to_string(v));
    const std::string got = io::get_string(is);
    if (got != to_string(tag)) throw FormatError("checkpoint holds a " + got + " payload, expected " + to_string(tag));
}

inline void put_index_list(std::ostream& os, const std::vector<Index>& v) {
    io::put_u32(os, static_cast<std::uint32_t>(v.size()));
    for (Index x : v) io::put_u64(os, static_cast<std::uint64_t>(x));
}

inline std::vector<Index> get_index_list(std::istream& is) {
    const std::uint32_t n = io::get_u32(is);
    if (n > 64) throw FormatError("implausible list length in checkpoint");
    std::vector<Index> v(n);
    for (auto& x : v) x = static_cast<Index>(io::get_u64(is));
    return v;
}

inline void put_unet_config(std::ostream& os, const nn::UNetConfig& c) {
    for (Index v : {c.levels, c.base_width, c.n_down, c.n_up, c.cond_channels, c.state_channels, c.time_frequencies,
                    c.time_dim, c.max_groups})
        io::put_u64(os, static_cast<std::uint64_t>(v));
    put_index_list(os, c.channel_mult);
    io::put_f64(os, c.sigma_f);
    io::put_u32(os, c.zero_init_output ? 1u : 0u);
}

inline nn::UNetConfig get_unet_config(std::istream& is) {
    nn::UNetConfig c;
    for (Index* v : {&c.levels, &c.base_width, &c.n_down, &c.n_up, &c.cond_channels, &c.state_channels,
                     &c.time_frequencies, &c.time_dim, &c.max_groups})
        *v = static_cast<Index>(io::get_u64(is));
    c.channel_mult = get_index_list(is);
    c.sigma_f = io::get_f64(is);
    c.zero_init_output = io::get_u32(is) != 0;
    return c;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    return is;
}

}  // namespace detail

// ---- frontend ----

inline void save_frontend(std::ostream& os, const FrontendModel& m) {
    detail::put_header(os, ModuleTag::frontend);
    io::put_string(os, to_string(m.objective));
    io::put_u64(os, static_cast<std::uint64_t>(m.num_antennas));
    io::put_u64(os, static_cast<std::uint64_t>(m.latent_dim));
    io::put_u64(os, static_cast<std::uint64_t>(m.hidden));
    io::put_quantizer(os, m.quantizer);
    m.params.write(os);
}

inline FrontendModel load_frontend(std::istream& is) {
    detail::expect_header(is, ModuleTag::frontend);
    FrontendModel m;
    m.objective = objective_from_string(io::get_string(is));
    m.num_antennas = static_cast<Index>(io::get_u64(is));
    m.latent_dim = static_cast<Index>(io::get_u64(is));
    m.hidden = static_cast<Index>(io::get_u64(is));
    m.quantizer = io::get_quantizer(is);
    m.quantizer.validate(m.latent_dim);
    m.params = nn::ParamStore::read(is);
    for (const char* name : {"enc.l1.w", "enc.l3.w", "dec.l1.w", "dec.l3.w"})
        if (!m.params.contains(name)) throw FormatError(std::string("frontend checkpoint lacks ") + name);
    if (m.params.value("enc.l1.w").cols() != 2 * m.num_antennas || m.params.value("enc.l3.w").rows() != m.latent_dim)
        throw FormatError("frontend weights disagree with the stored dimensions");
    return m;
}

inline void save_frontend(const std::string& path, const FrontendModel& m) {
    auto os = detail::open_out(path);
    save_frontend(os, m);
}

inline FrontendModel load_frontend(const std::string& path) {
    auto is = detail::open_in(path);
    return load_frontend(is);
}

// ---- flow ----

inline void save_flow(std::ostream& os, const FlowModel& m) {
    detail::put_header(os, ModuleTag::flow);
    const FlowConfig& c = m.config;
    io::put_string(os, to_string(c.mode));
    io::put_f64(os, c.sigma0);
    io::put_u64(os, static_cast<std::uint64_t>(c.n_step));
    io::put_u32(os, c.use_ema_for_inference ? 1u : 0u);
    io::put_f64(os, c.ema_decay);
    io::put_string(os, to_string(c.solver));
    io::put_string(os, to_string(c.cond));
    io::put_string(os, m.frontend_ref);
    io::put_u64(os, static_cast<std::uint64_t>(m.field.length()));
    detail::put_unet_config(os, m.field.config());
    io::put_matrix(os, m.field.time_embedding().frequencies);
    io::put_f64(os, m.field.time_embedding().sigma_f);
    m.field.params().write(os);
    m.ema.shadow.write(os);
}

inline FlowModel load_flow(std::istream& is) {
    detail::expect_header(is, ModuleTag::flow);
    FlowConfig c;
    c.mode = flow_mode_from_string(io::get_string(is));
    c.sigma0 = io::get_f64(is);
    c.n_step = static_cast<Index>(io::get_u64(is));
    c.use_ema_for_inference = io::get_u32(is) != 0;
    c.ema_decay = io::get_f64(is);
    c.solver = solver_from_string(io::get_string(is));
    c.cond = cond_kind_from_string(io::get_string(is));
    c.validate();
    std::string ref = io::get_string(is);
    const Index length = static_cast<Index>(io::get_u64(is));
    const nn::UNetConfig ucfg = detail::get_unet_config(is);
    nn::TimeEmbedding time;
    const RMat w = io::get_matrix(is);
    if (w.cols() != 1) throw FormatError("time-embedding frequencies must be a column");
    time.frequencies = w.col(0);
    time.sigma_f = io::get_f64(is);
    nn::ParamStore live = nn::ParamStore::read(is);
    nn::ParamStore shadow = nn::ParamStore::read(is);
    if (!shadow.same_layout(live)) throw FormatError("EMA shadow layout differs from the live parameters");
    return FlowModel{c, nn::UNet(ucfg, length, std::move(time), std::move(live)), nn::EmaState{std::move(shadow), c.ema_decay},
                     std::move(ref), {}};
}

inline void save_flow(const std::string& path, const FlowModel& m) {
    auto os = detail::open_out(path);
    save_flow(os, m);
}

inline FlowModel load_flow(const std::string& path) {
    auto is = detail::open_in(path);
    return load_flow(is);
}

// Module tag of a checkpoint file without loading the payload.
inline ModuleTag peek_module(std::istream& is) {
    io::expect_magic(is, "MGCF");
    const std::uint32_t v = io::get_u32(is);
    if (v != kCheckpointVersion) throw FormatError("unsupported MGCF version " + std::to_string(v));
    const std::string tag = io::get_string(is);
    if (tag == "frontend") return ModuleTag::frontend;
    if (tag == "flow") return ModuleTag::flow;
    throw FormatError("unknown module tag " + tag);
}

inline std::string file_hash(const std::string& path) {
    auto is = detail::open_in(path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return io::hex64(io::fnv1a(buf.str()));
}

}  // namespace flowcsi

#endif  // FLOWCSI_CHECKPOINT_HPP
