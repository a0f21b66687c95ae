#pragma once

#include "gmfpca/dataset.hpp"
#include "gmfpca/errors.hpp"
#include "gmfpca/grid.hpp"

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace gmfpca {

struct GlmmOptions {
    int max_iter = 200;        // outer simplex iterations over variance components
    double tol = 1e-6;         // relative change of the outer objective
    int max_inner_iter = 60;   // Newton iterations for conditional modes
    double inner_tol = 1e-11;  // relative change of the penalized log-likelihood
    bool visit_fixed_effects = false;
    double variance_floor = 1e-10;
};

enum class FitStatus {
    converged,
    singular_a,  // subject variance at the zero boundary
    singular_b,  // subject-visit variance at the zero boundary
    singular_ab,
    degenerate,  // all-constant response; intercept-only fallback applied
    failed,      // outer optimizer did not converge
};

std::string fit_status_name(FitStatus s);
FitStatus fit_status_from_name(const std::string& name);

// Bin-restricted data in sufficient-statistic form. The linear predictor is
// constant across the bin's grid points for a given (subject, visit), so each
// pair collapses to one cell with (n, sum, sum of squares).
struct BinObservations {
    struct Cell {
        int subject = 0;     // local subject index
        int visit_level = 0; // local visit-label index; 0 is the reference level
        int pair = -1;       // caller's pair id, passed through
        double n = 0;
        double sum = 0;
        double sum_sq = 0;
        double log_const = 0; // additive log-likelihood constant (e.g. -sum log z! for counts)
    };
    int center = 0;
    int n_subjects = 0;
    int n_visit_levels = 1;
    std::vector<Cell> cells;
    std::vector<std::vector<int>> cells_of_subject;
    std::vector<int> subject_global; // local subject -> caller's subject id

    double total_n() const;
    double total_sum() const;
};

struct LocalFit {
    int center = 0;
    FitStatus status = FitStatus::converged;
    double mu0 = 0;
    std::vector<double> mu_visit; // per local visit level; level 0 pinned to 0
    std::vector<double> a;        // conditional modes, per local subject
    std::vector<double> b;        // conditional modes, per cell
    double sigma2_a = 0;
    double sigma2_b = 0;
    double sigma2_eps = 0;        // gaussian residual variance; 0 otherwise
    double loglik = 0;            // Laplace objective at the optimum
    int n_outer_iters = 0;
    std::vector<double> objective_trace; // best objective after each outer iteration

    bool is_singular_a() const {
        return status == FitStatus::singular_a || status == FitStatus::singular_ab;
    }
    bool is_singular_b() const {
        return status == FitStatus::singular_b || status == FitStatus::singular_ab;
    }
};

// Thrown when the outer optimizer exhausts max_iter; carries the last iterate
// so callers can keep the partial fit.
class GlmmConvergenceFailure : public ConvergenceFailure {
public:
    GlmmConvergenceFailure(const std::string& msg, LocalFit last)
        : ConvergenceFailure(msg), last_iterate(std::move(last)) {}
    LocalFit last_iterate;
};

// Fits the local model: link(E[Z]) = mu0 + mu_visit + a_subject + b_(subject,visit)
// with a ~ N(0, sigma2_a), b ~ N(0, sigma2_b). Variance components maximize the
// Laplace-approximated marginal likelihood (exact for the gaussian family);
// conditional modes come from a blocked Newton solve.
LocalFit fit_local_glmm(const BinObservations& bin, Family family, const GlmmOptions& opt);

// Evaluates the Laplace objective at fixed variance components (profiling the
// fixed effects and conditional modes). Exposed for oracle tests.
double laplace_objective(const BinObservations& bin, Family family, const GlmmOptions& opt,
                         double sigma2_a, double sigma2_b, double sigma2_eps,
                         LocalFit* fit_out = nullptr);

// Intercept-only fallback for degenerate bins (all-constant response).
LocalFit degenerate_fallback(const BinObservations& bin, Family family);

struct LatentPredictorMatrix {
    Eigen::MatrixXd eta;      // pairs x K; mu0 + mu_visit + a + b at every grid point
    Eigen::MatrixXd a;        // subjects x K; 0 where the subject is absent from the bin
    Eigen::MatrixXd b;        // pairs x K; 0 where the pair is absent from the bin
    Eigen::VectorXd mu0;      // K
    Eigen::MatrixXd mu_visit; // visit-labels x K; zero when visit effects are disabled
    std::vector<FitStatus> provenance; // per grid point
    std::vector<int> pair_subject;
    std::vector<int> pair_visit;

    int n_points() const { return static_cast<int>(eta.cols()); }
    int n_pairs() const { return static_cast<int>(eta.rows()); }
    int n_subjects() const { return static_cast<int>(a.rows()); }
    int count_status(FitStatus s) const;
};

// One local fit per grid point, assembled into the latent predictor matrix.
// Bins are independent; execution may be parallel and the result does not
// depend on the worker count. Degenerate bins fall back to a flagged
// intercept-only fit; non-converged bins keep their last iterate. Throws
// PipelineFailure when more than half the bins fail outright.
LatentPredictorMatrix fit_all_bins(const MultilevelFunctionalDataset& data, const BinPlan& plan,
                                   const GlmmOptions& opt, int workers = 0);

// Bin extraction used by fit_all_bins; exposed for tests.
BinObservations extract_bin(const MultilevelFunctionalDataset& data, const std::vector<int>& bin,
                            int center);

} // namespace gmfpca
