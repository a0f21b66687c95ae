#pragma once

#include "gmfpca/dataset.hpp"

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

namespace gmfpca {

// Synthetic-data generator for the two-level score model on the grid
// s_k = k / n_points, k = 0..n_points (n_points + 1 sampling points).
struct SimulationConfig {
    Family family = Family::binary; // binary or poisson
    int basis_case = 1;             // 1: trig bases at both levels; 2: Legendre level 2
    int n_subjects = 50;            // I
    int n_visits = 5;               // J
    int n_points = 100;             // K
    double b0 = 0;                  // constant mean on the link scale
    std::uint64_t seed = 1;
    int n_components = 4;           // eigenvalue law 0.5^(l-1)

    void validate() const;
};

struct SimulationTruth {
    SamplingGrid grid;
    Eigen::MatrixXd phi; // (K+1) x n_components, level-1 basis values
    Eigen::MatrixXd psi; // (K+1) x n_components
    Eigen::MatrixXd xi;  // I x n_components
    Eigen::MatrixXd zeta; // (I*J) x n_components, rows in dataset pair order
    Eigen::MatrixXd eta;  // (I*J) x (K+1)
    Eigen::VectorXd lambda1, lambda2;
};

std::pair<MultilevelFunctionalDataset, SimulationTruth> simulate(const SimulationConfig& config);

// Basis functions on [0, 1].
double case1_level1_basis(int l, double s); // l = 0..3
double case1_level2_basis(int m, double s);
double case2_level2_basis(int m, double s); // shifted Legendre, orthonormal on [0,1]
Eigen::MatrixXd basis_matrix(int basis_case, int level, const std::vector<double>& s, int n);

// Sign-aligned integrated squared error: the estimate's sign is chosen to
// minimize the Riemann approximation of the squared-difference integral.
double ise(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth, double ds);

// Mean squared difference over all cells defined in both matrices.
double mse_linear_predictor(const Eigen::MatrixXd& eta_hat, const Eigen::MatrixXd& eta_true);

} // namespace gmfpca
