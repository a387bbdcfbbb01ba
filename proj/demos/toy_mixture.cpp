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

// Two-mode planar toy: where the principal eigenvector and the normalised
// mean of the mixture point, and what each scores under u^H R u.

#include "flowcsi/theory_checks.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

using namespace flowcsi;

int main() {
    Rng rng(1);
    const theory::ToyMixture toy;
    const auto dirs = theory::sample_toy_directions(toy, 200000, rng);
    const SecondMoment r = second_moment(dirs);
    const PrincipalDirection pd = optimal_direction(r);
    const theory::ToyResult res = theory::toy_objectives(toy, 200000, rng);

    auto angle = [](const CVec& u) {
        // Directions are defined up to sign; report the angle in [0, 180).
        double a = std::atan2(u[1].real(), u[0].real()) * 180.0 / std::numbers::pi;
        return a < 0.0 ? a + 180.0 : a;
    };
    std::printf("R = [[%.4f, %.4f], [%.4f, %.4f]]\n", r.R(0, 0).real(), r.R(0, 1).real(), r.R(1, 0).real(), r.R(1, 1).real());
    std::printf("principal direction   angle %6.1f deg   u^H R u = %.4f\n", angle(pd.u_star), pd.lambda_max);
    std::printf("dominant mode v1      angle %6.1f deg   u^H R u = %.4f\n", 0.0, res.objective_v1);
    std::printf("normalised mean       angle %6.1f deg   u^H R u = %.4f\n", angle(res.u_cm), res.objective_cm);
    std::printf("chordal distortion of the mean: %.4f (best possible %.4f)\n", 1.0 - res.objective_cm, pd.min_distortion);
}
