#pragma once

#include <functional>
#include <vector>

namespace gmfpca {

struct NelderMeadOptions {
    int max_iter = 200;
    double rel_tol = 1e-6;   // relative spread of simplex objective values
    double init_step = 1.0;  // initial simplex edge length per coordinate
    std::vector<double> lower; // optional box, applied by clamping
    std::vector<double> upper;
};

struct NelderMeadResult {
    std::vector<double> x;
    double fmin = 0;
    int n_iter = 0;
    bool converged = false;
    std::vector<double> best_trace; // best objective after each iteration (non-increasing)
};

// Derivative-free simplex minimization with standard reflection, expansion,
// contraction and shrink moves. Bounds are enforced by clamping evaluation
// points into the box.
NelderMeadResult nelder_mead_minimize(const std::function<double(const std::vector<double>&)>& f,
                                      std::vector<double> x0, const NelderMeadOptions& opt);

} // namespace gmfpca
