#include "gmfpca/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gmfpca {

namespace {

void clamp_into_box(std::vector<double>& x, const NelderMeadOptions& opt) {
    if (!opt.lower.empty())
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::max(x[i], opt.lower[i]);
    if (!opt.upper.empty())
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::min(x[i], opt.upper[i]);
}

} // namespace

NelderMeadResult nelder_mead_minimize(const std::function<double(const std::vector<double>&)>& f,
                                      std::vector<double> x0, const NelderMeadOptions& opt) {
    const std::size_t n = x0.size();
    NelderMeadResult res;

    auto eval = [&](std::vector<double> x) {
        clamp_into_box(x, opt);
        return std::make_pair(f(x), std::move(x));
    };

    // Simplex of n+1 vertices.
    std::vector<std::vector<double>> xs;
    std::vector<double> fs;
    {
        auto [f0, p0] = eval(x0);
        xs.push_back(std::move(p0));
        fs.push_back(f0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> xi = xs[0];
        xi[i] += opt.init_step;
        auto [fi, pi] = eval(std::move(xi));
        xs.push_back(std::move(pi));
        fs.push_back(fi);
    }

    const double alpha = 1.0, gamma = 2.0, rho = 0.5, sigma = 0.5;
    std::vector<std::size_t> order(n + 1);

    for (int iter = 0; iter < opt.max_iter; ++iter) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return fs[a] < fs[b]; });
        std::size_t best = order[0], worst = order[n], second_worst = order[n - 1];
        res.best_trace.push_back(fs[best]);
        res.n_iter = iter + 1;

        double spread = std::fabs(fs[worst] - fs[best]);
        if (spread <= opt.rel_tol * (1.0 + std::fabs(fs[best]))) {
            res.converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        std::vector<double> centroid(n, 0.0);
        for (std::size_t v = 0; v <= n; ++v) {
            if (v == worst) continue;
            for (std::size_t i = 0; i < n; ++i) centroid[i] += xs[v][i];
        }
        for (double& c : centroid) c /= static_cast<double>(n);

        auto blend = [&](double coef) {
            std::vector<double> x(n);
            for (std::size_t i = 0; i < n; ++i)
                x[i] = centroid[i] + coef * (centroid[i] - xs[worst][i]);
            return x;
        };

        auto [fr, xr] = eval(blend(alpha));
        if (fr < fs[best]) {
            auto [fe, xe] = eval(blend(gamma));
            if (fe < fr) { xs[worst] = std::move(xe); fs[worst] = fe; }
            else         { xs[worst] = std::move(xr); fs[worst] = fr; }
        } else if (fr < fs[second_worst]) {
            xs[worst] = std::move(xr);
            fs[worst] = fr;
        } else {
            auto [fc, xc] = eval(blend(-rho));
            if (fc < fs[worst]) {
                xs[worst] = std::move(xc);
                fs[worst] = fc;
            } else {
                for (std::size_t v = 0; v <= n; ++v) {
                    if (v == best) continue;
                    for (std::size_t i = 0; i < n; ++i)
                        xs[v][i] = xs[best][i] + sigma * (xs[v][i] - xs[best][i]);
                    auto [fv, pv] = eval(xs[v]);
                    xs[v] = std::move(pv);
                    fs[v] = fv;
                }
            }
        }
    }

    std::size_t best = 0;
    for (std::size_t v = 1; v <= n; ++v)
        if (fs[v] < fs[best]) best = v;
    res.x = xs[best];
    res.fmin = fs[best];
    if (res.best_trace.empty() || res.best_trace.back() > res.fmin)
        res.best_trace.push_back(res.fmin);
    return res;
}

} // namespace gmfpca
