#include "gmfpca/simulation.hpp"
#include "gmfpca/errors.hpp"
#include "gmfpca/rng.hpp"

#include <cmath>
#include <string>

namespace gmfpca {

void SimulationConfig::validate() const {
    if (family == Family::gaussian)
        throw ConfigError("simulation families are binary and poisson");
    if (basis_case != 1 && basis_case != 2)
        throw ConfigError("basis_case must be 1 or 2");
    if (n_points < 20)
        throw ConfigError("n_points must be >= 20 to resolve the highest-frequency basis");
    if (n_subjects < 2 || n_visits < 2)
        throw ConfigError("need at least 2 subjects and 2 visits");
    if (n_components < 1 || n_components > 4)
        throw ConfigError("n_components must be in 1..4");
}

double case1_level1_basis(int l, double s) {
    switch (l) {
        case 0: return std::sqrt(2.0) * std::sin(2 * M_PI * s);
        case 1: return std::sqrt(2.0) * std::cos(2 * M_PI * s);
        case 2: return std::sqrt(2.0) * std::sin(4 * M_PI * s);
        case 3: return std::sqrt(2.0) * std::cos(4 * M_PI * s);
    }
    throw Error("basis index out of range");
}

double case1_level2_basis(int m, double s) {
    switch (m) {
        case 0: return std::sqrt(2.0) * std::sin(6 * M_PI * s);
        case 1: return std::sqrt(2.0) * std::cos(6 * M_PI * s);
        case 2: return std::sqrt(2.0) * std::sin(8 * M_PI * s);
        case 3: return std::sqrt(2.0) * std::cos(8 * M_PI * s);
    }
    throw Error("basis index out of range");
}

double case2_level2_basis(int m, double s) {
    switch (m) {
        case 0: return 1.0;
        case 1: return std::sqrt(3.0) * (2 * s - 1);
        case 2: return std::sqrt(5.0) * (6 * s * s - 6 * s + 1);
        case 3: return std::sqrt(7.0) * (20 * s * s * s - 30 * s * s + 12 * s - 1);
    }
    throw Error("basis index out of range");
}

Eigen::MatrixXd basis_matrix(int basis_case, int level, const std::vector<double>& s, int n) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(s.size()), n);
    for (std::size_t k = 0; k < s.size(); ++k) {
        for (int j = 0; j < n; ++j) {
            double v;
            if (level == 1) v = case1_level1_basis(j, s[k]);
            else v = basis_case == 1 ? case1_level2_basis(j, s[k]) : case2_level2_basis(j, s[k]);
            out(static_cast<Eigen::Index>(k), j) = v;
        }
    }
    return out;
}

std::pair<MultilevelFunctionalDataset, SimulationTruth> simulate(const SimulationConfig& config) {
    config.validate();
    const int I = config.n_subjects, J = config.n_visits, Kp = config.n_points + 1;
    const int R = config.n_components;

    SimulationTruth truth;
    truth.grid = SamplingGrid::uniform(Kp, 0.0, 1.0 / config.n_points, false);
    truth.phi = basis_matrix(config.basis_case, 1, truth.grid.points, R);
    truth.psi = basis_matrix(config.basis_case, 2, truth.grid.points, R);
    truth.lambda1.resize(R);
    truth.lambda2.resize(R);
    for (int r = 0; r < R; ++r) {
        truth.lambda1(r) = std::pow(0.5, r);
        truth.lambda2(r) = std::pow(0.5, r);
    }

    Rng rng(derive_seed(config.seed, 0x51u));
    truth.xi.resize(I, R);
    for (int i = 0; i < I; ++i)
        for (int r = 0; r < R; ++r) truth.xi(i, r) = rng.normal(0, std::sqrt(truth.lambda1(r)));
    truth.zeta.resize(I * J, R);
    for (int p = 0; p < I * J; ++p)
        for (int r = 0; r < R; ++r) truth.zeta(p, r) = rng.normal(0, std::sqrt(truth.lambda2(r)));

    truth.eta.resize(I * J, Kp);
    for (int i = 0; i < I; ++i) {
        for (int j = 0; j < J; ++j) {
            int p = i * J + j;
            for (int k = 0; k < Kp; ++k) {
                double e = config.b0;
                for (int r = 0; r < R; ++r)
                    e += truth.xi(i, r) * truth.phi(k, r) + truth.zeta(p, r) * truth.psi(k, r);
                truth.eta(p, k) = e;
            }
        }
    }

    DatasetBuilder builder(truth.grid, config.family);
    for (int i = 0; i < I; ++i) {
        for (int j = 0; j < J; ++j) {
            int p = i * J + j;
            for (int k = 0; k < Kp; ++k) {
                double eta = truth.eta(p, k);
                double z;
                if (config.family == Family::binary) {
                    z = rng.bernoulli(1.0 / (1.0 + std::exp(-eta)));
                } else {
                    z = static_cast<double>(rng.poisson(std::exp(eta)));
                }
                builder.add(std::to_string(i + 1), std::to_string(j + 1), k, z);
            }
        }
    }
    return {builder.finalize(), std::move(truth)};
}

double ise(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth, double ds) {
    if (estimate.size() != truth.size())
        throw GridMismatch("ise: estimate has " + std::to_string(estimate.size()) +
                           " points, truth has " + std::to_string(truth.size()));
    double sign = estimate.dot(truth) < 0 ? -1.0 : 1.0;
    return (sign * estimate - truth).squaredNorm() * ds;
}

double mse_linear_predictor(const Eigen::MatrixXd& eta_hat, const Eigen::MatrixXd& eta_true) {
    if (eta_hat.rows() != eta_true.rows() || eta_hat.cols() != eta_true.cols())
        throw GridMismatch("mse_linear_predictor: index sets differ");
    double acc = 0;
    long n = 0;
    for (Eigen::Index p = 0; p < eta_hat.rows(); ++p) {
        for (Eigen::Index k = 0; k < eta_hat.cols(); ++k) {
            double a = eta_hat(p, k), b = eta_true(p, k);
            if (std::isnan(a) || std::isnan(b)) continue;
            acc += (a - b) * (a - b);
            ++n;
        }
    }
    if (n == 0) throw GridMismatch("mse_linear_predictor: no overlapping cells");
    return acc / static_cast<double>(n);
}

} // namespace gmfpca
