#pragma once

#include "gmfpca/glmm.hpp"
#include "gmfpca/grid.hpp"

#include <Eigen/Dense>
#include <vector>

namespace gmfpca {

struct CovarianceEstimates {
    Eigen::MatrixXd K_total; // K x K, = K_a + K_b exactly
    Eigen::MatrixXd K_a;     // between-subject component
    Eigen::MatrixXd K_b;     // within-subject (subject-visit) component
    Eigen::VectorXd mu0;     // pointwise mean of the latent predictors
    Eigen::MatrixXd mu_visit; // per-visit pointwise deviation from mu0 (V x K)
};

// Method-of-moments separation: center the latent predictors pointwise,
// estimate the total covariance from all (subject, visit) curves and the
// subject-level covariance from within-subject cross-visit products; the
// subject-visit component is the difference. Throws Level2Inestimable when no
// subject has two visits.
CovarianceEstimates estimate_covariances(const LatentPredictorMatrix& eta,
                                         bool use_visit_means = false);

struct MfpcaOptions {
    double bandwidth = 0;       // kernel half-width in grid-index units; 0 = no smoothing
    double pve_threshold = 0.95;
    int max_components = 10;
    bool drop_level2_diagonal = true; // exclude the K_b diagonal from the smooth, impute back
};

struct MfpcaDecomposition {
    Eigen::VectorXd mu0;      // K; filled by the pipeline from the covariance step
    Eigen::MatrixXd mu_visit; // V x K

    Eigen::MatrixXd phi;     // K x L, Riemann-orthonormal
    Eigen::VectorXd lambda1; // L, non-increasing
    Eigen::MatrixXd psi;     // K x M
    Eigen::VectorXd lambda2; // M

    Eigen::VectorXd pve1_cum; // cumulative within-level variance fractions
    Eigen::VectorXd pve2_cum;
    double level1_total = 0; // sum of all non-negative eigenvalues per level
    double level2_total = 0;
    std::vector<double> sssod1;
    std::vector<double> sssod2;
    double ds = 1.0;

    int n_level1() const { return static_cast<int>(lambda1.size()); }
    int n_level2() const { return static_cast<int>(lambda2.size()); }
    double level1_share() const {
        double t = level1_total + level2_total;
        return t > 0 ? level1_total / t : 0.0;
    }
};

// Smooths each covariance surface, projects to the nearest PSD matrix by
// clipping negative eigenvalues, and extracts Riemann-orthonormal
// eigenfunctions. Component counts are the smallest reaching pve_threshold
// within each level, capped at max_components.
MfpcaDecomposition smooth_and_eigendecompose(const Eigen::MatrixXd& K_a,
                                             const Eigen::MatrixXd& K_b,
                                             const SamplingGrid& grid,
                                             const MfpcaOptions& options);

// Sum of squared second-order differences scaled by n^2; a discrete roughness
// measure for functions sampled on a uniform grid.
double sssod(const std::vector<double>& f);
double sssod(const Eigen::VectorXd& f);

// Nadaraya-Watson smooth of a surface with a product Epanechnikov kernel on
// index distance. mask (optional) marks entries excluded from the fit.
Eigen::MatrixXd kernel_smooth_surface(const Eigen::MatrixXd& S, double bandwidth, bool cyclic,
                                      const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>* exclude = nullptr);

// Flips the sign of each column so its largest-magnitude entry is positive.
void apply_sign_convention(Eigen::MatrixXd& columns);

} // namespace gmfpca
