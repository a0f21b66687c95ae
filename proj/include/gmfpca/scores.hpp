#pragma once

#include "gmfpca/dataset.hpp"

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

namespace gmfpca {

enum class VariancePriorFamily { inv_gamma, half_cauchy, uniform, fixed };

// Prior on a variance component. half_cauchy and uniform are scale priors on
// the standard deviation; fixed pins the variance (used by oracle tests).
struct VariancePrior {
    VariancePriorFamily family = VariancePriorFamily::inv_gamma;
    double a = 1.0;      // inv_gamma shape
    double b = 1.0;      // inv_gamma scale
    double scale = 10.0; // half_cauchy scale
    double upper = 20.0; // uniform upper bound on the SD
    double value = 1.0;  // fixed variance

    static VariancePrior inverse_gamma(double a, double b) {
        VariancePrior p; p.family = VariancePriorFamily::inv_gamma; p.a = a; p.b = b; return p;
    }
    static VariancePrior half_cauchy(double scale) {
        VariancePrior p; p.family = VariancePriorFamily::half_cauchy; p.scale = scale; return p;
    }
    static VariancePrior uniform_sd(double upper) {
        VariancePrior p; p.family = VariancePriorFamily::uniform; p.upper = upper; return p;
    }
    static VariancePrior fixed(double v) {
        VariancePrior p; p.family = VariancePriorFamily::fixed; p.value = v; return p;
    }
};

enum class FixedEffectMode { offset_from_step3, refit_pointwise };

struct ScoreModelSpec {
    Eigen::MatrixXd phi;      // K x L eigenfunctions, Riemann-orthonormal
    Eigen::MatrixXd psi;      // K x M
    Eigen::VectorXd mu0;      // K; fixed-effect offsets on the link scale
    Eigen::MatrixXd mu_visit; // V x K; zero when visits are exchangeable
    Family family = Family::binary;
    VariancePrior prior_level1 = VariancePrior::inverse_gamma(1, 1);
    VariancePrior prior_level2 = VariancePrior::inverse_gamma(1, 1);
    VariancePrior prior_residual = VariancePrior::inverse_gamma(1, 1); // gaussian only
    FixedEffectMode fixed_effect_mode = FixedEffectMode::offset_from_step3;
    double refit_rw_var = 1.0;           // random-walk increment variance across the grid
    std::vector<int> downsample_indices; // strictly increasing 0-based subset; empty = full grid
    std::vector<int> partition;          // per-subject group id; empty = one group

    // Optional warm starts (e.g. projections of the step-2 random effects).
    Eigen::MatrixXd init_xi;   // I x L
    Eigen::MatrixXd init_zeta; // P x M
    Eigen::VectorXd init_lambda1, init_lambda2;
};

struct McmcOptions {
    int warmup = 1000;
    int iters = 1000;
    int chains = 2;
    std::uint64_t seed = 1;
    int workers = 0;
    bool store_score_draws = false; // keep per-iteration score draws (test diagnostics)
};

struct ChainDiagnostics {
    int group = 0;
    int chain = 0;
    double accept_rate_xi = 1.0;
    double accept_rate_zeta = 1.0;
    double accept_rate_mu0 = 1.0;
};

struct ScorePosterior {
    Eigen::MatrixXd xi_mean, xi_sd;     // I x L
    Eigen::MatrixXd zeta_mean, zeta_sd; // P x M
    Eigen::VectorXd lambda1_mean;       // posterior-mean variance components = eigenvalue estimates
    Eigen::VectorXd lambda2_mean;
    Eigen::VectorXd lambda1_sd, lambda2_sd;
    double sigma2_eps_mean = 0;

    Eigen::MatrixXd l2e_sd; // I x M; SD over visits of the level-2 score means; NaN if < 2 visits

    Eigen::VectorXd rhat_lambda1, rhat_lambda2; // split-chain R-hat, max across groups
    bool nonconvergence_warning = false;        // any variance R-hat > 1.1
    std::vector<ChainDiagnostics> chain_diagnostics;

    Eigen::MatrixXd eta_hat;  // P x K reconstruction at posterior means, full grid
    Eigen::VectorXd mu0_hat;  // K; refit posterior mean or the step-3 offsets

    std::vector<Eigen::VectorXd> group_lambda1, group_lambda2; // per-group posterior means
    std::vector<int> group_of_subject;

    // Post-warmup variance-component traces per (group, chain): iters x (L+M).
    std::vector<Eigen::MatrixXd> lambda_traces;
    // Optional score draws per (group, chain): iters x (Ig*L) and iters x (Pg*M),
    // with columns ordered by the group's local indices.
    std::vector<Eigen::MatrixXd> xi_draws, zeta_draws;
    std::vector<std::vector<int>> group_subjects, group_pairs;

    double runtime_seconds = 0;
    std::vector<int> used_indices;

    int n_level1() const { return static_cast<int>(lambda1_mean.size()); }
    int n_level2() const { return static_cast<int>(lambda2_mean.size()); }
};

// Posterior sampling for the global score model conditional on the step-3
// eigenfunctions. Variance components use Gibbs (inverse-gamma) or slice
// updates; score blocks use adaptive random-walk Metropolis, except for the
// gaussian family where the full conditionals are sampled exactly. Chains and
// subject groups run independently; fixed seeds reproduce draws bit-for-bit.
ScorePosterior fit_scores(const MultilevelFunctionalDataset& data, const ScoreModelSpec& spec,
                          const McmcOptions& mcmc);

// Seeded assignment of subjects to ceil(I / group_size) balanced groups.
std::vector<int> partition_subjects(int n_subjects, int group_size, std::uint64_t seed);

// Equally spaced 0-based indices including both endpoints.
std::vector<int> downsample_grid(int K, int target_count);

// Split-chain R-hat for a set of traces of equal length.
double split_rhat(const std::vector<Eigen::VectorXd>& chains);

} // namespace gmfpca
