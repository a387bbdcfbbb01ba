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

// Command-line front end: gen-data, train, eval, analyze-cells, verify-theory.
// Exit codes: 0 success, 1 check or runtime failure, 2 configuration error.

#include "flowcsi/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>

namespace {

using namespace flowcsi;
using namespace flowcsi::experiment;

struct Options {
    std::string config_path;
    std::optional<std::string> method;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> mode;
    std::optional<Index> n_step;
    std::optional<double> sigma0;
    std::optional<double> ema_decay;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

ExperimentConfig resolve_config(const Options& o) {
    ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
    if (o.seed) c.seed = *o.seed;
    if (o.out) c.out_dir = *o.out;
    if (o.sigma0) c.flow.sigma0 = *o.sigma0;
    if (o.ema_decay) c.flow.ema_decay = *o.ema_decay;
    if (o.n_step) c.flow.n_step = *o.n_step;
    c.validate();
    return c;
}

// `--method flow --mode direct` is shorthand for flow_direct.
std::string resolve_method(const Options& o) {
    if (!o.method) throw InvalidConfig("--method is required");
    std::string m = *o.method;
    if (m == "flow") {
        if (!o.mode) throw InvalidConfig("--method flow needs --mode refiner|direct");
        m = "flow_" + *o.mode;
    } else if (o.mode && m != "flow_" + *o.mode) {
        throw InvalidConfig("--mode " + *o.mode + " contradicts --method " + m);
    }
    require_method(m);
    return m;
}

int run(const std::string& cmd, const Options& o) {
    if (cmd == "verify-theory") {
        const std::uint64_t seed = o.seed.value_or(o.config_path.empty() ? 1 : load_config(o.config_path).seed);
        return cmd_verify_theory(seed, std::cout) ? 0 : 1;
    }
    const ExperimentConfig c = resolve_config(o);
    if (cmd == "gen-data") {
        cmd_gen_data(c, std::cout);
    } else if (cmd == "train") {
        cmd_train(c, resolve_method(o), std::cout);
    } else if (cmd == "eval") {
        std::vector<std::string> methods = c.methods;
        if (o.method) methods = *o.method == "flow" ? std::vector<std::string>{resolve_method(o)} : split_list(*o.method);
        EvalOptions eo;
        eo.n_step = o.n_step;
        cmd_eval(c, methods, std::cout, eo);
    } else if (cmd == "analyze-cells") {
        cmd_analyze_cells(c, resolve_method(o), std::cout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flow-matching CSI feedback experiments"};
    app.require_subcommand(1, 1);
    Options o;
    std::uint64_t seed = 0;
    std::string method, out, mode;
    Index n_step = 0;
    double sigma0 = 0.0, ema = 0.0;
    std::vector<std::pair<std::string, CLI::App*>> subs;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "build the synthetic channel datasets"},
        {"train", "train one method at every bit budget"},
        {"eval", "sum-rate / NMSE evaluation over the multiuser sets"},
        {"analyze-cells", "per-cell directional statistics of an encoder"},
        {"verify-theory", "run the synthetic checks of the analytic results"}};
    for (const auto& [name, description] : commands) {
        CLI::App* sub = app.add_subcommand(name, description);
        sub->add_option("--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "master seed");
        if (name != "verify-theory") {
            sub->add_option("--out", out, "output directory");
            sub->add_option("--method", method, "method name (eval: comma-separated list)");
            sub->add_option("--mode", mode, "flow decoder mode")->check(CLI::IsMember({"refiner", "direct"}));
            sub->add_option("--n-step", n_step, "ODE steps")->check(CLI::PositiveNumber);
            sub->add_option("--sigma0", sigma0, "refiner source noise")->check(CLI::NonNegativeNumber);
            sub->add_option("--ema-decay", ema, "EMA decay")->check(CLI::Range(0.0, 1.0));
        }
        subs.emplace_back(name, sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    for (const auto& [name, sub] : subs) {
        if (!sub->parsed()) continue;
        auto given = [&](const char* opt) { return sub->get_option_no_throw(opt) && sub->count(opt) > 0; };
        if (given("--seed")) o.seed = seed;
        if (given("--method")) o.method = method;
        if (given("--out")) o.out = out;
        if (given("--mode")) o.mode = mode;
        if (given("--n-step")) o.n_step = n_step;
        if (given("--sigma0")) o.sigma0 = sigma0;
        if (given("--ema-decay")) o.ema_decay = ema;
        try {
            return run(name, o);
        } catch (const InvalidConfig& e) {
            std::cerr << "configuration error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 2;
}
