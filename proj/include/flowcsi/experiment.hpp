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

// Experiment configuration, run manifests and the gen-data / train / eval /
// analyze-cells / verify-theory stages.

#ifndef FLOWCSI_EXPERIMENT_HPP
#define FLOWCSI_EXPERIMENT_HPP

#include "flowcsi/channel_model.hpp"
#include "flowcsi/checkpoint.hpp"
#include "flowcsi/posterior_geometry.hpp"
#include "flowcsi/precoding.hpp"
#include "flowcsi/theory_checks.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace flowcsi::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "flowcsi 0.1.0";

// A required artifact of an earlier stage is missing.
class DependencyError : public InvalidConfig {
public:
    using InvalidConfig::InvalidConfig;
};

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"uniform_mse", "uniform_chordal", "mulaw_mse",    "perlat_mse",
                                            "unet_dec_mse", "flow_refiner",   "flow_direct", "full_csi"};
    return m;
}

inline bool is_frontend_method(const std::string& m) {
    return m == "uniform_mse" || m == "uniform_chordal" || m == "mulaw_mse" || m == "perlat_mse";
}

inline bool is_flow_method(const std::string& m) {
    return m == "flow_refiner" || m == "flow_direct" || m == "unet_dec_mse";
}

inline void require_method(const std::string& m) {
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
        throw InvalidConfig("unknown method: " + m);
}

inline FlowMode flow_mode_of(const std::string& m) {
    if (m == "flow_refiner") return FlowMode::refiner;
    if (m == "flow_direct") return FlowMode::direct;
    if (m == "unet_dec_mse") return FlowMode::unet_decoder;
    throw InvalidConfig(m + " is not a flow method");
}

// ---- configuration ----

struct FrontendBudget {
    Index steps = 20000;
    Index batch_size = 64;
    double learning_rate = 1e-3;
};

struct FlowBudget {
    Index steps = 2000;
    // Steps for the direct decoder; 0 means `steps`.
    Index direct_steps = 0;
    Index batch_size = 64;
    double learning_rate = 1e-3;
    Index base_width = 32;
    Index levels = 3;
    double sigma0 = 0.1;
    Index n_step = 4;
    double ema_decay = 0.999;
    CondKind cond = CondKind::latents;
    Solver solver = Solver::midpoint;
};

struct CellBudget {
    std::size_t min_count = 5;
    std::size_t max_records = 50;
    std::size_t max_mds_points = 400;
};

struct ExperimentConfig {
    ArrayGeometry geometry;
    ClusterModelConfig channel;
    Index n_train = 4000;
    Index n_test = 1000;
    Index n_sets = 200;
    std::vector<Index> k_list{2, 4};
    std::vector<double> snr_db{0.0, 10.0, 20.0, 30.0};
    std::vector<Index> bits{16, 32, 48};
    Index latent_dim = 8;
    std::vector<std::string> methods = known_methods();
    FrontendBudget frontend;
    FlowBudget flow;
    CellBudget cells;
    std::uint64_t seed = 1;
    std::string out_dir = "runs";

    Index num_antennas() const { return geometry.num_antennas(); }

    int bits_per_latent(Index b) const { return static_cast<int>(b / latent_dim); }

    void validate() const {
        geometry.validate();
        channel.validate();
        require(n_train >= 1 && n_test >= 1 && n_sets >= 1, "dataset sizes must be positive");
        require(!k_list.empty() && !snr_db.empty() && !bits.empty() && !methods.empty(), "sweep lists must be nonempty");
        for (Index k : k_list) require(k >= 1 && k <= num_antennas() && k <= n_test, "K out of range: " + std::to_string(k));
        require(latent_dim >= 1, "latent_dim must be positive");
        for (Index b : bits) {
            require(b > 0 && b % latent_dim == 0, "bits " + std::to_string(b) + " is not a multiple of L");
            require(b / latent_dim <= 16, "at most 16 bits per latent are supported");
        }
        for (double s : snr_db) require(std::isfinite(s), "SNR must be finite");
        for (const auto& m : methods) require_method(m);
        require(frontend.steps >= 1 && frontend.batch_size >= 1 && frontend.learning_rate > 0.0, "bad front-end budget");
        require(flow.steps >= 1 && flow.direct_steps >= 0 && flow.batch_size >= 1 && flow.learning_rate > 0.0,
                "bad flow budget");
        FlowConfig fc;
        fc.sigma0 = flow.sigma0;
        fc.n_step = flow.n_step;
        fc.ema_decay = flow.ema_decay;
        fc.validate();
        unet_config().validate(num_antennas());
        require(cells.min_count >= 1, "cells.min_count must be positive");
    }

    nn::UNetConfig unet_config() const {
        nn::UNetConfig u;
        u.levels = flow.levels;
        u.base_width = flow.base_width;
        u.channel_mult.assign(static_cast<std::size_t>(flow.levels), 2);
        u.channel_mult.front() = 1;
        return u;
    }

    FlowConfig flow_config(FlowMode mode) const {
        FlowConfig c;
        c.mode = mode;
        c.sigma0 = flow.sigma0;
        c.n_step = flow.n_step;
        c.ema_decay = flow.ema_decay;
        c.cond = flow.cond;
        c.solver = flow.solver;
        return c;
    }
};

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["geometry"] = {{"rows", c.geometry.rows}, {"cols", c.geometry.cols}, {"element_spacing", c.geometry.element_spacing}};
    j["channel"] = {{"num_paths", c.channel.num_paths},       {"angle_spread", c.channel.angle_spread},
                    {"power_decay", c.channel.power_decay},   {"seed", c.channel.seed},
                    {"azimuth_min", c.channel.azimuth_min},   {"azimuth_max", c.channel.azimuth_max},
                    {"elevation_min", c.channel.elevation_min}, {"elevation_max", c.channel.elevation_max}};
    j["n_train"] = c.n_train;
    j["n_test"] = c.n_test;
    j["n_sets"] = c.n_sets;
    j["k_list"] = c.k_list;
    j["snr_db"] = c.snr_db;
    j["bits"] = c.bits;
    j["latent_dim"] = c.latent_dim;
    j["methods"] = c.methods;
    j["frontend"] = {{"steps", c.frontend.steps}, {"batch_size", c.frontend.batch_size},
                     {"learning_rate", c.frontend.learning_rate}};
    j["flow"] = {{"steps", c.flow.steps},         {"direct_steps", c.flow.direct_steps},
                 {"batch_size", c.flow.batch_size}, {"learning_rate", c.flow.learning_rate},
                 {"base_width", c.flow.base_width}, {"levels", c.flow.levels},        {"sigma0", c.flow.sigma0},
                 {"n_step", c.flow.n_step},         {"ema_decay", c.flow.ema_decay},  {"cond", to_string(c.flow.cond)},
                 {"solver", to_string(c.flow.solver)}};
    j["cells"] = {{"min_count", c.cells.min_count}, {"max_records", c.cells.max_records},
                  {"max_mds_points", c.cells.max_mds_points}};
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    return j;
}

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw InvalidConfig(where + " must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw InvalidConfig("unknown key '" + k + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        detail::check_keys(j,
                           {"geometry", "channel", "n_train", "n_test", "n_sets", "k_list", "snr_db", "bits", "latent_dim",
                            "methods", "frontend", "flow", "cells", "seed", "out_dir"},
                           "config");
        if (j.contains("geometry")) {
            const json& g = j["geometry"];
            detail::check_keys(g, {"rows", "cols", "element_spacing"}, "geometry");
            detail::read(g, "rows", c.geometry.rows);
            detail::read(g, "cols", c.geometry.cols);
            detail::read(g, "element_spacing", c.geometry.element_spacing);
        }
        if (j.contains("channel")) {
            const json& h = j["channel"];
            detail::check_keys(h,
                               {"num_paths", "angle_spread", "power_decay", "seed", "azimuth_min", "azimuth_max",
                                "elevation_min", "elevation_max"},
                               "channel");
            detail::read(h, "num_paths", c.channel.num_paths);
            detail::read(h, "angle_spread", c.channel.angle_spread);
            detail::read(h, "power_decay", c.channel.power_decay);
            detail::read(h, "seed", c.channel.seed);
            detail::read(h, "azimuth_min", c.channel.azimuth_min);
            detail::read(h, "azimuth_max", c.channel.azimuth_max);
            detail::read(h, "elevation_min", c.channel.elevation_min);
            detail::read(h, "elevation_max", c.channel.elevation_max);
        }
        detail::read(j, "n_train", c.n_train);
        detail::read(j, "n_test", c.n_test);
        detail::read(j, "n_sets", c.n_sets);
        detail::read(j, "k_list", c.k_list);
        detail::read(j, "snr_db", c.snr_db);
        detail::read(j, "bits", c.bits);
        detail::read(j, "latent_dim", c.latent_dim);
        detail::read(j, "methods", c.methods);
        if (j.contains("frontend")) {
            const json& f = j["frontend"];
            detail::check_keys(f, {"steps", "batch_size", "learning_rate"}, "frontend");
            detail::read(f, "steps", c.frontend.steps);
            detail::read(f, "batch_size", c.frontend.batch_size);
            detail::read(f, "learning_rate", c.frontend.learning_rate);
        }
        if (j.contains("flow")) {
            const json& f = j["flow"];
            detail::check_keys(f,
                               {"steps", "direct_steps", "batch_size", "learning_rate", "base_width", "levels",
                                "sigma0", "n_step", "ema_decay", "cond", "solver"},
                               "flow");
            detail::read(f, "steps", c.flow.steps);
            detail::read(f, "direct_steps", c.flow.direct_steps);
            detail::read(f, "batch_size", c.flow.batch_size);
            detail::read(f, "learning_rate", c.flow.learning_rate);
            detail::read(f, "base_width", c.flow.base_width);
            detail::read(f, "levels", c.flow.levels);
            detail::read(f, "sigma0", c.flow.sigma0);
            detail::read(f, "n_step", c.flow.n_step);
            detail::read(f, "ema_decay", c.flow.ema_decay);
            if (f.contains("cond")) c.flow.cond = cond_kind_from_string(f["cond"].get<std::string>());
            if (f.contains("solver")) c.flow.solver = solver_from_string(f["solver"].get<std::string>());
        }
        if (j.contains("cells")) {
            const json& f = j["cells"];
            detail::check_keys(f, {"min_count", "max_records", "max_mds_points"}, "cells");
            detail::read(f, "min_count", c.cells.min_count);
            detail::read(f, "max_records", c.cells.max_records);
            detail::read(f, "max_mds_points", c.cells.max_mds_points);
        }
        detail::read(j, "seed", c.seed);
        detail::read(j, "out_dir", c.out_dir);
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("malformed config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidConfig("cannot open config " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw InvalidConfig("config " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

// FNV-1a over the canonical dump (object keys sorted). The output directory
// is excluded so that the same experiment hashes equally wherever it runs.
inline std::string config_hash(const ExperimentConfig& c) {
    json j = to_json(c);
    j.erase("out_dir");
    return io::hex64(io::fnv1a(j.dump()));
}

inline std::uint64_t stage_seed(const ExperimentConfig& c, const std::string& stage) {
    return io::fnv1a(stage.data(), stage.size(), c.seed * 0x9e3779b97f4a7c15ull + 0xcbf29ce484222325ull);
}

// ---- manifest ----

struct RunManifest {
    std::string config_hash;
    std::string version = kVersion;
    std::map<std::string, std::string> artifacts;  // name -> path
    std::map<std::string, std::string> hashes;     // name -> file hash
    std::map<std::string, std::uint64_t> seeds;    // stage -> seed

    json to_json() const {
        return {{"config_hash", config_hash}, {"version", version}, {"artifacts", artifacts}, {"hashes", hashes}, {"seeds", seeds}};
    }

    static RunManifest from_json(const json& j) {
        RunManifest m;
        m.config_hash = j.at("config_hash").get<std::string>();
        m.version = j.at("version").get<std::string>();
        m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
        m.hashes = j.at("hashes").get<std::map<std::string, std::string>>();
        m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
        return m;
    }

    void record(const std::string& name, const std::string& path) {
        artifacts[name] = path;
        hashes[name] = file_hash(path);
    }
};

inline std::string manifest_path(const ExperimentConfig& c) { return (fs::path(c.out_dir) / "manifest.json").string(); }

// Existing manifest of the same configuration, or a fresh one.
inline RunManifest open_manifest(const ExperimentConfig& c) {
    RunManifest m;
    m.config_hash = config_hash(c);
    std::ifstream is(manifest_path(c));
    if (is) {
        try {
            RunManifest old = RunManifest::from_json(json::parse(is));
            if (old.config_hash == m.config_hash) return old;
        } catch (const std::exception&) {
        }
    }
    return m;
}

inline void save_manifest(const ExperimentConfig& c, const RunManifest& m) {
    std::ofstream os(manifest_path(c));
    if (!os) throw Error("cannot write " + manifest_path(c));
    os << std::setw(2) << m.to_json() << "\n";
}

// ---- paths ----

inline std::string dataset_path(const ExperimentConfig& c, Index k) {
    return (fs::path(c.out_dir) / ("dataset_K" + std::to_string(k) + ".mcsd")).string();
}

inline std::string artifact_stem(const std::string& method, Index bits) { return method + "_B" + std::to_string(bits); }

inline std::string checkpoint_path(const ExperimentConfig& c, const std::string& method, Index bits) {
    return (fs::path(c.out_dir) / (artifact_stem(method, bits) + ".mgcf")).string();
}

inline std::string loss_path(const ExperimentConfig& c, const std::string& method, Index bits) {
    return (fs::path(c.out_dir) / (artifact_stem(method, bits) + "_loss.csv")).string();
}

inline void ensure_out_dir(const ExperimentConfig& c) {
    std::error_code ec;
    fs::create_directories(c.out_dir, ec);
    if (ec) throw Error("cannot create output directory " + c.out_dir + ": " + ec.message());
}

inline Dataset load_dataset_for(const ExperimentConfig& c, Index k) {
    const std::string p = dataset_path(c, k);
    if (!fs::exists(p)) throw DependencyError("dataset " + p + " is missing; run gen-data first");
    return load_dataset(p);
}

// ---- gen-data ----

inline std::vector<std::string> cmd_gen_data(const ExperimentConfig& c, std::ostream& log) {
    c.validate();
    ensure_out_dir(c);
    RunManifest man = open_manifest(c);
    std::vector<std::string> out;
    for (Index k : c.k_list) {
        const Dataset ds = build_dataset(c.geometry, c.channel, c.n_train, c.n_test, c.n_sets, k);
        const std::string p = dataset_path(c, k);
        save_dataset(p, ds);
        man.record("dataset_K" + std::to_string(k), p);
        log << "wrote " << p << " (" << ds.train.size() << " train, " << ds.test.size() << " test, "
            << ds.multiuser_sets.size() << " sets of " << k << ")\n";
        out.push_back(p);
    }
    man.seeds["channel"] = c.channel.seed;
    save_manifest(c, man);
    return out;
}

// ---- train ----

inline QuantizerSpec quantizer_for(const std::string& method, int q, Index latent_dim) {
    if (method == "mulaw_mse") return QuantizerSpec::mulaw(q);
    if (method == "perlat_mse") return QuantizerSpec::learned(q, latent_dim);
    return QuantizerSpec::uniform(q);
}

inline Objective objective_for(const std::string& method) {
    return method == "uniform_chordal" ? Objective::chordal : Objective::mse;
}

inline void write_loss_curve(const std::string& path, const std::vector<double>& curve) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os << "step,loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < curve.size(); ++i) os << i << "," << curve[i] << "\n";
}

inline FrontendModel load_base_frontend(const ExperimentConfig& c, const std::string& method, Index bits) {
    const std::string p = checkpoint_path(c, "uniform_mse", bits);
    if (!fs::exists(p))
        throw DependencyError(method + " at B=" + std::to_string(bits) + " needs the uniform_mse front end (" + p +
                              "); train uniform_mse first");
    return load_frontend(p);
}

// Trains `method` at every bit budget. Returns the checkpoint paths.
inline std::vector<std::string> cmd_train(const ExperimentConfig& c, const std::string& method, std::ostream& log) {
    c.validate();
    require_method(method);
    if (method == "full_csi") {
        log << "full_csi uses the true channels; nothing to train\n";
        return {};
    }
    ensure_out_dir(c);
    const Dataset ds = load_dataset_for(c, c.k_list.front());
    RunManifest man = open_manifest(c);
    std::vector<std::string> out;
    for (Index b : c.bits) {
        const std::string stem = artifact_stem(method, b);
        const std::uint64_t seed = stage_seed(c, "train/" + stem);
        man.seeds["train/" + stem] = seed;
        Rng rng(seed);
        const std::string ckpt = checkpoint_path(c, method, b);
        std::vector<double> curve;
        if (is_frontend_method(method)) {
            const Objective obj = objective_for(method);
            FrontendModel fe =
                make_frontend(c.num_antennas(), c.latent_dim, quantizer_for(method, c.bits_per_latent(b), c.latent_dim), obj, rng);
            TrainConfig tc;
            tc.steps = c.frontend.steps;
            tc.batch_size = c.frontend.batch_size;
            tc.adam.learning_rate = c.frontend.learning_rate;
            fe = train_frontend(ds.train, std::move(fe), obj, tc, rng);
            save_frontend(ckpt, fe);
            curve = fe.loss_curve;
        } else {
            const FrontendModel fe = load_base_frontend(c, method, b);
            const FlowConfig fc = c.flow_config(flow_mode_of(method));
            FlowModel fm = make_flow_model(fc, c.unet_config(), c.num_antennas(), conditioning_channels(fe, fc.cond),
                                           artifact_stem("uniform_mse", b), rng);
            FlowTrainConfig tc;
            tc.steps = fc.mode == FlowMode::direct && c.flow.direct_steps > 0 ? c.flow.direct_steps : c.flow.steps;
            tc.batch_size = c.flow.batch_size;
            tc.adam.learning_rate = c.flow.learning_rate;
            fm = train_flow(ds.train, fe, std::move(fm), tc, rng);
            save_flow(ckpt, fm);
            curve = fm.loss_curve;
        }
        write_loss_curve(loss_path(c, method, b), curve);
        man.record(stem, ckpt);
        man.artifacts[stem + "_loss"] = loss_path(c, method, b);
        log << "trained " << stem << ": final loss " << curve.back() << " -> " << ckpt << "\n";
        out.push_back(ckpt);
    }
    save_manifest(c, man);
    return out;
}

// ---- eval ----

struct EvalOptions {
    std::optional<Index> n_step;  // overrides the stored flow step count
};

struct MetricsRow {
    std::uint64_t seed = 0;
    Index k = 0;
    Index n = 0;
    Index bits = 0;
    double snr_db = 0.0;
    std::string method;
    double sum_rate = 0.0;
    double nmse_db = 0.0;
    double agg_desired = 0.0;
    double agg_interference = 0.0;
    std::size_t set = 0;
    bool zf_failed = false;
    std::string config_hash;
};

inline constexpr const char* kMetricsHeader =
    "seed,K,N,B,snr_db,method,sum_rate,nmse_db,agg_desired,agg_interference,set,zf_failed,config_hash";

inline std::string csv_row(const MetricsRow& r) {
    std::ostringstream os;
    os << std::setprecision(17) << r.seed << "," << r.k << "," << r.n << "," << r.bits << "," << r.snr_db << "," << r.method
       << "," << r.sum_rate << "," << r.nmse_db << "," << r.agg_desired << "," << r.agg_interference << "," << r.set << ","
       << (r.zf_failed ? 1 : 0) << "," << r.config_hash;
    return os.str();
}

struct SummaryRow {
    std::string method;
    Index k = 0;
    Index bits = 0;
    double snr_db = 0.0;
    double mean_sum_rate = 0.0;
    double mean_agg_desired = 0.0;
    double mean_agg_interference = 0.0;  // over sets where zero forcing succeeded
    double nmse_db = 0.0;                // whole test split
    std::size_t sets = 0;
    std::size_t zf_failed = 0;
};

struct EvalResult {
    std::vector<MetricsRow> rows;
    std::vector<SummaryRow> summary;
};

// Reconstructions of the whole test split for one method and bit budget.
inline std::vector<ChannelVector> reconstruct(const ExperimentConfig& c, const std::string& method, Index bits,
                                              const std::vector<ChannelVector>& test, const EvalOptions& opt) {
    if (method == "full_csi") return test;
    if (is_frontend_method(method)) {
        const std::string p = checkpoint_path(c, method, bits);
        if (!fs::exists(p)) throw DependencyError("missing checkpoint " + p + "; train " + method + " first");
        const FrontendModel fe = load_frontend(p);
        return decode_frontend_batch(fe, encode_batch(fe, test));
    }
    const FrontendModel fe = load_base_frontend(c, method, bits);
    const std::string p = checkpoint_path(c, method, bits);
    if (!fs::exists(p)) throw DependencyError("missing checkpoint " + p + "; train " + method + " first");
    FlowModel fm = load_flow(p);
    if (opt.n_step) fm.config.n_step = *opt.n_step;
    fm.config.validate();
    const auto bits_all = encode_batch(fe, test);
    Rng rng(stage_seed(c, "eval/" + artifact_stem(method, bits)));
    constexpr std::size_t kChunk = 250;
    std::vector<ChannelVector> out;
    out.reserve(test.size());
    for (std::size_t start = 0; start < bits_all.size(); start += kChunk) {
        const std::vector<FeedbackBits> chunk(bits_all.begin() + static_cast<std::ptrdiff_t>(start),
                                              bits_all.begin() + static_cast<std::ptrdiff_t>(std::min(bits_all.size(), start + kChunk)));
        std::vector<ChannelVector> part;
        switch (fm.config.mode) {
            case FlowMode::refiner: part = refine_batch(chunk, fe, fm); break;
            case FlowMode::direct: part = decode_direct_batch(chunk, fe, fm, rng); break;
            case FlowMode::unet_decoder: part = decode_unet_batch(chunk, fe, fm); break;
        }
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

inline std::vector<MetricsRow> evaluate_sets(const Dataset& ds, const std::vector<ChannelVector>& hat, const std::string& method,
                                             Index bits, const std::vector<double>& snrs, std::uint64_t seed,
                                             const std::string& hash) {
    std::vector<MetricsRow> rows;
    for (double snr : snrs) {
        const double p = snr_db_to_power(snr);
        for (std::size_t s = 0; s < ds.multiuser_sets.size(); ++s) {
            const ChannelSet h = ds.channel_set(s);
            std::vector<ChannelVector> users_hat, users_true;
            for (auto idx : ds.multiuser_sets[s]) {
                users_hat.push_back(hat.at(idx));
                users_true.push_back(ds.test.at(idx));
            }
            MetricsRow r;
            r.seed = seed;
            r.k = h.num_users();
            r.n = h.num_antennas();
            r.bits = bits;
            r.snr_db = snr;
            r.method = method;
            r.set = s;
            r.config_hash = hash;
            r.nmse_db = nmse_db(users_true, users_hat);
            try {
                const Precoder f = zf_precoder(ChannelSet(users_hat), p);
                r.sum_rate = sum_rate(h, f);
                r.agg_desired = aggregate_desired(h, f);
                r.agg_interference = aggregate_interference(h, f);
            } catch (const SingularChannel&) {
                // No zero-forcing solution for this reconstruction: nobody is served.
                r.zf_failed = true;
            }
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

inline std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows,
                                         const std::map<std::pair<std::string, Index>, double>& test_nmse) {
    std::map<std::tuple<std::string, Index, Index, double>, SummaryRow> acc;
    std::vector<std::tuple<std::string, Index, Index, double>> order;
    for (const auto& r : rows) {
        const auto key = std::make_tuple(r.method, r.k, r.bits, r.snr_db);
        auto [it, fresh] = acc.try_emplace(key);
        if (fresh) order.push_back(key);
        SummaryRow& s = it->second;
        s.method = r.method;
        s.k = r.k;
        s.bits = r.bits;
        s.snr_db = r.snr_db;
        ++s.sets;
        s.mean_sum_rate += r.sum_rate;
        s.mean_agg_desired += r.agg_desired;
        if (r.zf_failed)
            ++s.zf_failed;
        else
            s.mean_agg_interference += r.agg_interference;
    }
    std::vector<SummaryRow> out;
    for (const auto& key : order) {
        SummaryRow s = acc.at(key);
        s.mean_sum_rate /= static_cast<double>(s.sets);
        s.mean_agg_desired /= static_cast<double>(s.sets);
        const std::size_t ok = s.sets - s.zf_failed;
        s.mean_agg_interference = ok > 0 ? s.mean_agg_interference / static_cast<double>(ok) : 0.0;
        s.nmse_db = test_nmse.at({s.method, s.bits});
        out.push_back(s);
    }
    return out;
}

inline void write_summary(std::ostream& os, const std::vector<SummaryRow>& rows, const std::string& hash) {
    os << "method,K,B,snr_db,mean_sum_rate,nmse_db,mean_agg_desired,mean_agg_interference,sets,zf_failed,config_hash\n"
       << std::setprecision(17);
    for (const auto& s : rows)
        os << s.method << "," << s.k << "," << s.bits << "," << s.snr_db << "," << s.mean_sum_rate << "," << s.nmse_db << ","
           << s.mean_agg_desired << "," << s.mean_agg_interference << "," << s.sets << "," << s.zf_failed << "," << hash << "\n";
}

// Joint NMSE / sum-rate table, one line per (method, K, B, SNR).
inline void print_table(std::ostream& os, const std::vector<SummaryRow>& rows) {
    os << std::left << std::setw(16) << "method" << std::right << std::setw(4) << "K" << std::setw(5) << "B" << std::setw(8)
       << "SNR" << std::setw(11) << "NMSE(dB)" << std::setw(11) << "sum-rate" << std::setw(13) << "interference" << "\n";
    for (const auto& s : rows)
        os << std::left << std::setw(16) << s.method << std::right << std::setw(4) << s.k << std::setw(5) << s.bits
           << std::setw(8) << std::fixed << std::setprecision(1) << s.snr_db << std::setw(11) << std::setprecision(3)
           << s.nmse_db << std::setw(11) << s.mean_sum_rate << std::setw(13) << std::setprecision(4)
           << s.mean_agg_interference << std::defaultfloat << "\n";
}

inline EvalResult cmd_eval(const ExperimentConfig& c, const std::vector<std::string>& methods, std::ostream& log,
                           const EvalOptions& opt = {}) {
    c.validate();
    for (const auto& m : methods) require_method(m);
    ensure_out_dir(c);
    const std::string hash = config_hash(c);
    EvalResult res;
    std::map<std::pair<std::string, Index>, std::vector<ChannelVector>> cache;
    std::map<std::pair<std::string, Index>, double> test_nmse;
    for (Index k : c.k_list) {
        const Dataset ds = load_dataset_for(c, k);
        for (Index b : c.bits) {
            for (const auto& m : methods) {
                const auto key = std::make_pair(m, b);
                if (!cache.count(key)) {
                    cache[key] = reconstruct(c, m, b, ds.test, opt);
                    test_nmse[key] = nmse_db(ds.test, cache[key]);
                }
                auto rows = evaluate_sets(ds, cache[key], m, b, c.snr_db, c.seed, hash);
                res.rows.insert(res.rows.end(), rows.begin(), rows.end());
            }
        }
    }
    res.summary = summarize(res.rows, test_nmse);

    const std::string metrics = (fs::path(c.out_dir) / "metrics.csv").string();
    const std::string summary = (fs::path(c.out_dir) / "summary.csv").string();
    {
        std::ofstream os(metrics);
        if (!os) throw Error("cannot write " + metrics);
        os << kMetricsHeader << "\n";
        for (const auto& r : res.rows) os << csv_row(r) << "\n";
    }
    {
        std::ofstream os(summary);
        if (!os) throw Error("cannot write " + summary);
        write_summary(os, res.summary, hash);
    }
    RunManifest man = open_manifest(c);
    man.record("metrics", metrics);
    man.record("summary", summary);
    save_manifest(c, man);
    print_table(log, res.summary);
    log << "wrote " << res.rows.size() << " rows to " << metrics << "\n";
    return res;
}

// ---- analyze-cells ----

inline json stacked_json(const CVec& v) {
    const RVec s = to_stacked(v);
    return std::vector<double>(s.data(), s.data() + s.size());
}

inline CVec cvec_from_json(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return from_stacked(Eigen::Map<const RVec>(v.data(), static_cast<Index>(v.size())));
}

// Delta clamped at zero when the negative part is pure round-off.
inline double gap_of(const CVec& u_hat, const SecondMoment& r, const PrincipalDirection& pd) {
    const double d = pd.lambda_max - rayleigh(u_hat, r);
    return d < 0.0 && d > -1e-12 ? 0.0 : d;
}

// One record per eligible cell: the members, R, the principal direction and
// the alignment gaps of the available decoders.
inline json cell_record(const FeedbackCell& cell, const std::map<std::string, CVec>& decoded, std::size_t max_mds_points) {
    const SecondMoment r = second_moment(cell);
    const PrincipalDirection pd = optimal_direction(r);
    Eigen::SelfAdjointEigenSolver<CMat> es(r.R, Eigen::EigenvaluesOnly);
    json rec;
    rec["type"] = "cell";
    rec["bits"] = cell.bits.str();
    rec["count"] = cell.count();
    json members = json::array();
    for (const auto& u : cell.members) members.push_back(stacked_json(u));
    rec["members"] = members;
    std::vector<double> re, im;
    for (Index i = 0; i < r.R.rows(); ++i)
        for (Index j = 0; j < r.R.cols(); ++j) {
            re.push_back(r.R(i, j).real());
            im.push_back(r.R(i, j).imag());
        }
    rec["R_re"] = re;
    rec["R_im"] = im;
    rec["eigenvalues"] = std::vector<double>(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
    rec["lambda_max"] = pd.lambda_max;
    rec["min_distortion"] = pd.min_distortion;
    rec["u_star"] = stacked_json(pd.u_star);
    json deltas = json::object();
    try {
        const CVec u_cm = conditional_mean_direction(cell);
        rec["u_cm"] = stacked_json(u_cm);
        deltas["cm"] = gap_of(u_cm, r, pd);
    } catch (const DegenerateMean&) {
        rec["u_cm"] = nullptr;
        deltas["cm"] = nullptr;
    }
    for (const auto& [name, v] : decoded) {
        const double nrm = v.norm();
        deltas[name] = nrm > 0.0 ? json(gap_of(v / nrm, r, pd)) : json(nullptr);
    }
    rec["delta"] = deltas;
    if (cell.count() >= 2 && cell.count() <= max_mds_points) {
        const MdsEmbedding e = mds_embed(cell.members);
        json coords = json::array();
        for (Index i = 0; i < e.coords.rows(); ++i) coords.push_back({e.coords(i, 0), e.coords(i, 1)});
        rec["mds"] = coords;
    } else {
        rec["mds"] = nullptr;
    }
    return rec;
}

inline std::string cells_path(const ExperimentConfig& c, const std::string& method, Index bits) {
    return (fs::path(c.out_dir) / ("cells_" + artifact_stem(method, bits) + ".jsonl")).string();
}

// Cells of the method's encoder over the training split. Flow methods share
// the uniform_mse encoder. Returns the record files.
inline std::vector<std::string> cmd_analyze_cells(const ExperimentConfig& c, const std::string& method, std::ostream& log) {
    c.validate();
    require_method(method);
    if (method == "full_csi") throw InvalidConfig("full_csi has no encoder and hence no feedback cells");
    ensure_out_dir(c);
    const Dataset ds = load_dataset_for(c, c.k_list.front());
    RunManifest man = open_manifest(c);
    std::vector<std::string> out;
    for (Index b : c.bits) {
        const std::string enc_method = is_flow_method(method) ? "uniform_mse" : method;
        const std::string enc_path = checkpoint_path(c, enc_method, b);
        if (!fs::exists(enc_path)) throw DependencyError("missing encoder checkpoint " + enc_path);
        const FrontendModel fe = load_frontend(enc_path);
        const CellCollection cells = collect_cells(ds.train, fe, c.cells.min_count);
        std::vector<const FeedbackCell*> chosen = cells.eligible();
        std::stable_sort(chosen.begin(), chosen.end(), [](const FeedbackCell* a, const FeedbackCell* b) { return a->count() > b->count(); });
        if (chosen.size() > c.cells.max_records) chosen.resize(c.cells.max_records);

        std::vector<FeedbackBits> keys;
        for (const auto* cell : chosen) keys.push_back(cell->bits);
        std::map<std::string, std::vector<ChannelVector>> decoders;
        if (!keys.empty()) {
            decoders["frontend"] = decode_frontend_batch(fe, keys);
            const std::string ref = checkpoint_path(c, "flow_refiner", b);
            if (fs::exists(ref)) decoders["refiner"] = refine_batch(keys, fe, load_flow(ref));
            const std::string unet = checkpoint_path(c, "unet_dec_mse", b);
            if (fs::exists(unet)) decoders["unet_decoder"] = decode_unet_batch(keys, fe, load_flow(unet));
        }

        const std::string p = cells_path(c, method, b);
        std::ofstream os(p);
        if (!os) throw Error("cannot write " + p);
        json head;
        head["type"] = "summary";
        head["method"] = method;
        head["bits"] = b;
        head["channels"] = cells.total;
        head["cells"] = cells.cells.size();
        head["eligible"] = cells.eligible().size();
        head["below_min_count"] = cells.below_min();
        head["min_count"] = c.cells.min_count;
        head["records"] = chosen.size();
        head["config_hash"] = config_hash(c);
        os << head.dump() << "\n";
        for (std::size_t i = 0; i < chosen.size(); ++i) {
            std::map<std::string, CVec> decoded;
            for (const auto& [name, hs] : decoders) decoded[name] = hs[i].coeffs();
            os << cell_record(*chosen[i], decoded, c.cells.max_mds_points).dump() << "\n";
        }
        man.record("cells_" + artifact_stem(method, b), p);
        log << "B=" << b << ": " << cells.cells.size() << " cells, " << cells.eligible().size() << " with >= "
            << c.cells.min_count << " members, " << cells.below_min() << " excluded; wrote " << chosen.size() << " records to "
            << p << "\n";
        out.push_back(p);
    }
    save_manifest(c, man);
    return out;
}

// ---- verify-theory ----

inline bool cmd_verify_theory(std::uint64_t seed, std::ostream& log) {
    bool all = true;
    for (const auto& r : theory::run_all(seed)) {
        log << (r.pass ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
        all = all && r.pass;
    }
    log << (all ? "all checks passed" : "some checks failed") << "\n";
    return all;
}

}  // namespace flowcsi::experiment

#endif  // FLOWCSI_EXPERIMENT_HPP
