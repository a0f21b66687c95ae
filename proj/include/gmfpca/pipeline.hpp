#pragma once

#include "gmfpca/glmm.hpp"
#include "gmfpca/mfpca.hpp"
#include "gmfpca/scores.hpp"
#include "gmfpca/simulation.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gmfpca {

struct PipelineOptions {
    // Step 1
    double bin_width_pct = 5.0; // percent of the grid size; used when bin_width_points == 0
    int bin_width_points = 0;
    BinWidthMode bin_mode = BinWidthMode::index_offset;

    // Step 2
    GlmmOptions glmm;

    // Step 3
    MfpcaOptions mfpca;              // bandwidth 0 = auto
    bool mfpca_auto_bandwidth = true; // 2x bin half-width in grid units
    bool visit_means = false;

    // Step 4
    VariancePrior prior_level1 = VariancePrior::inverse_gamma(1, 1);
    VariancePrior prior_level2 = VariancePrior::inverse_gamma(1, 1);
    VariancePrior prior_residual = VariancePrior::inverse_gamma(1, 1);
    FixedEffectMode fixed_effect_mode = FixedEffectMode::offset_from_step3;
    int downsample = 0; // target point count; 0 = full grid
    int group_size = 0; // subject-partition size; 0 = single joint fit
    McmcOptions mcmc;
    bool init_scores_from_step2 = true;

    int workers = 0;

    int resolve_bin_width(int K) const;
};

struct FitStageResult {
    BinPlan plan;
    LatentPredictorMatrix eta;
    CovarianceEstimates cov;
    MfpcaDecomposition decomp; // mu0 / mu_visit filled from the covariance step
};

// Steps 1-3: binning, local fits, covariance separation, eigendecomposition.
FitStageResult run_fit_stage(const MultilevelFunctionalDataset& data, const PipelineOptions& opt);

// Step 4 conditional on a decomposition. eta (when available) provides warm
// starts by projecting the local random effects onto the eigenfunctions.
ScorePosterior run_scores_stage(const MultilevelFunctionalDataset& data,
                                const MfpcaDecomposition& decomp,
                                const LatentPredictorMatrix* eta, const PipelineOptions& opt);

struct PipelineResult {
    FitStageResult fit;
    ScorePosterior posterior;
};

PipelineResult run_pipeline(const MultilevelFunctionalDataset& data, const PipelineOptions& opt);

// ---------------------------------------------------------------------------
// Replicate harness for the synthetic-data error tables.

enum class TableMetric { mse, ise };

std::string table_metric_name(TableMetric m);

struct ScenarioSpec {
    std::string row_label; // e.g. "Case 1"
    std::string col_label; // e.g. "I = 50"
    SimulationConfig config;
};

struct ReplicateCell {
    bool present = false;
    double mean = 0; // NaN when every replicate failed
    int n_ok = 0;
    int n_fail = 0;
    std::vector<double> values;
};

struct ReplicateOutcome {
    bool ok = false;
    std::string error;
    double mse = 0;
    std::vector<double> ise_level1, ise_level2; // up to 4 components
    Eigen::VectorXd lambda1, lambda2;           // posterior-mean eigenvalues
};

struct ReplicateTable {
    TableMetric metric = TableMetric::mse;
    std::vector<std::string> row_labels; // scenario rows; for ise: "<row> <component>"
    std::vector<std::string> col_labels;
    std::vector<std::vector<ReplicateCell>> cells; // rows x cols
    // per-scenario outcomes, in scenario order (eigenvalue boxplot inputs)
    std::vector<std::string> scenario_labels;
    std::vector<std::vector<ReplicateOutcome>> outcomes;
};

// Runs the full pipeline n_reps times per scenario with derived seeds and
// averages the requested metric. Failures are counted per cell and never
// abort the table.
ReplicateTable replicate_table(const std::vector<ScenarioSpec>& scenarios, int n_reps,
                               TableMetric metric, const PipelineOptions& popt);

// One full-pipeline replicate for a scenario (used by the table and by tests).
ReplicateOutcome run_replicate(const SimulationConfig& config, std::uint64_t rep_seed,
                               const PipelineOptions& popt);

} // namespace gmfpca
