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

#ifndef FLOWCSI_NEURAL_OPTIM_HPP
#define FLOWCSI_NEURAL_OPTIM_HPP

#include "flowcsi/neural/param_store.hpp"

#include <cmath>

namespace flowcsi::nn {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

// Adam with bias-corrected moment estimates.
class Adam {
public:
    Adam(const ParamStore& params, AdamConfig cfg) : cfg_(cfg), m_(zero_gradients(params)), v_(zero_gradients(params)) {}

    void step(ParamStore& params, Gradients grads) {
        if (grads.size() != params.size()) throw DimensionMismatch("gradient count mismatch");
        if (cfg_.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& g : grads) sq += g.squaredNorm();
            const double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm)
                for (auto& g : grads) g *= cfg_.clip_norm / norm;
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < grads.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
            RMat& p = params.value(static_cast<Index>(i));
            p.array() -= cfg_.learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.epsilon);
        }
    }

    long steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    Gradients m_;
    Gradients v_;
    long t_ = 0;
};

// Exponential moving average of parameters: shadow <- decay * shadow + (1 - decay) * live.
struct EmaState {
    ParamStore shadow;
    double decay = 0.999;
};

inline EmaState make_ema(const ParamStore& live, double decay) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw InvalidConfig("EMA decay must lie in [0, 1]");
    return EmaState{live, decay};
}

inline void ema_update(EmaState& ema, const ParamStore& live) {
    if (!ema.shadow.same_layout(live)) throw DimensionMismatch("EMA shadow layout differs from live parameters");
    const double beta = ema.decay;
    for (std::size_t i = 0; i < live.size(); ++i) {
        RMat& s = ema.shadow.value(static_cast<Index>(i));
        s = beta * s + (1.0 - beta) * live.value(static_cast<Index>(i));
    }
}

}  // namespace flowcsi::nn

#endif  // FLOWCSI_NEURAL_OPTIM_HPP
