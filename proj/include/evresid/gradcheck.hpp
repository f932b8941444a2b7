#pragma once

#include <functional>
#include <vector>

#include "evresid/autodiff.hpp"

namespace evresid {

// Central finite-difference verification of an analytic gradient.
// `forward` must build a scalar loss from the given leaf tensors inside the
// provided graph; it is re-invoked on perturbed copies of the inputs.
// Returns the maximum relative error over all checked coordinates
// (|analytic - numeric| / max(1, |analytic|, |numeric|)).
struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

inline GradCheckResult grad_check(
    const std::function<Var(Graph&, std::vector<Var>&)>& forward,
    std::vector<Tensor> inputs, double eps = 1e-5, int64_t max_coords_per_input = 64,
    uint64_t seed = 7) {
    // analytic pass
    Graph g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(g.leaf(t, true));
    Var loss = forward(g, vars);
    g.backward(loss);

    Rng rng(seed);
    GradCheckResult res;
    for (size_t k = 0; k < inputs.size(); ++k) {
        const int64_t n = inputs[k].numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_input) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int64_t i = 0; i < max_coords_per_input; ++i)
                coords.push_back(int64_t(rng.below(uint64_t(n))));
        }
        for (int64_t c : coords) {
            auto eval = [&](double delta) {
                std::vector<Tensor> shifted = inputs;
                shifted[k][c] += delta;
                Graph gg;
                gg.set_recording(false);
                std::vector<Var> vs;
                for (auto& t : shifted) vs.push_back(gg.leaf(t, false));
                return forward(gg, vs).val()[0];
            };
            const double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            const double analytic = g.has_grad(vars[k].id) ? g.grad(vars[k].id)[c] : 0.0;
            const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(analytic - numeric) / denom);
            ++res.checked;
        }
    }
    return res;
}

} // namespace evresid
