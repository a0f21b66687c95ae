#include "gmfpca/pipeline.hpp"
#include "gmfpca/errors.hpp"
#include "gmfpca/rng.hpp"

#include <algorithm>
#include <cmath>

namespace gmfpca {

int PipelineOptions::resolve_bin_width(int K) const {
    if (bin_width_points > 0) return bin_width_points;
    int w = static_cast<int>(std::lround(bin_width_pct / 100.0 * K));
    return std::max(1, std::min(w, K - 1));
}

FitStageResult run_fit_stage(const MultilevelFunctionalDataset& data, const PipelineOptions& opt) {
    auto report = validate_dataset(data);
    if (!report.ok()) {
        std::string first;
        for (const auto& e : report.entries)
            if (e.severity == Severity::error) { first = e.message; break; }
        throw PipelineFailure("dataset validation failed: " + first);
    }

    FitStageResult out;
    const int K = data.n_points();
    const int w = opt.resolve_bin_width(K);
    out.plan = make_bins(K, w, data.grid.cyclic, opt.bin_mode);
    out.eta = fit_all_bins(data, out.plan, opt.glmm, opt.workers);
    out.cov = estimate_covariances(out.eta, opt.visit_means);

    MfpcaOptions mopt = opt.mfpca;
    if (opt.mfpca_auto_bandwidth && mopt.bandwidth <= 0)
        mopt.bandwidth = 2.0 * out.plan.half_width;
    out.decomp = smooth_and_eigendecompose(out.cov.K_a, out.cov.K_b, data.grid, mopt);
    out.decomp.mu0 = out.cov.mu0;
    out.decomp.mu_visit = out.cov.mu_visit;
    return out;
}

ScorePosterior run_scores_stage(const MultilevelFunctionalDataset& data,
                                const MfpcaDecomposition& decomp,
                                const LatentPredictorMatrix* eta, const PipelineOptions& opt) {
    ScoreModelSpec spec;
    spec.phi = decomp.phi;
    spec.psi = decomp.psi;
    spec.mu0 = decomp.mu0;
    spec.mu_visit = decomp.mu_visit;
    spec.family = data.family;
    spec.prior_level1 = opt.prior_level1;
    spec.prior_level2 = opt.prior_level2;
    spec.prior_residual = opt.prior_residual;
    spec.fixed_effect_mode = opt.fixed_effect_mode;
    if (opt.downsample > 0 && opt.downsample < data.n_points())
        spec.downsample_indices = downsample_grid(data.n_points(), opt.downsample);
    if (opt.group_size >= 2)
        spec.partition = partition_subjects(data.n_subjects(), opt.group_size, opt.mcmc.seed);

    const int L = decomp.n_level1(), M = decomp.n_level2();
    spec.init_lambda1 = decomp.lambda1.cwiseMax(1e-4);
    spec.init_lambda2 = decomp.lambda2.cwiseMax(1e-4);

    if (opt.init_scores_from_step2 && eta != nullptr) {
        // Project the local random effects onto the eigenfunctions for warm starts.
        const double ds = decomp.ds;
        spec.init_xi = eta->a * decomp.phi * ds;     // (I x K)(K x L)
        spec.init_zeta = eta->b * decomp.psi * ds;   // (P x K)(K x M)
    } else {
        spec.init_xi = Eigen::MatrixXd::Zero(data.n_subjects(), L);
        spec.init_zeta = Eigen::MatrixXd::Zero(data.n_pairs(), M);
    }

    McmcOptions mcmc = opt.mcmc;
    if (mcmc.workers == 0) mcmc.workers = opt.workers;
    return fit_scores(data, spec, mcmc);
}

PipelineResult run_pipeline(const MultilevelFunctionalDataset& data, const PipelineOptions& opt) {
    PipelineResult res;
    res.fit = run_fit_stage(data, opt);
    res.posterior = run_scores_stage(data, res.fit.decomp, &res.fit.eta, opt);
    return res;
}

std::string table_metric_name(TableMetric m) {
    return m == TableMetric::mse ? "mse" : "ise";
}

ReplicateOutcome run_replicate(const SimulationConfig& config, std::uint64_t rep_seed,
                               const PipelineOptions& popt) {
    ReplicateOutcome out;
    try {
        SimulationConfig cfg = config;
        cfg.seed = rep_seed;
        auto [data, truth] = simulate(cfg);

        PipelineOptions opt = popt;
        opt.mcmc.seed = derive_seed(rep_seed, 0xabcd);
        auto res = run_pipeline(data, opt);

        out.mse = mse_linear_predictor(res.posterior.eta_hat, truth.eta);
        const double ds = truth.grid.ds();
        int L = std::min<int>(res.fit.decomp.n_level1(), truth.phi.cols());
        int M = std::min<int>(res.fit.decomp.n_level2(), truth.psi.cols());
        for (int l = 0; l < L; ++l)
            out.ise_level1.push_back(
                ise(res.fit.decomp.phi.col(l), truth.phi.col(l), ds));
        for (int m = 0; m < M; ++m)
            out.ise_level2.push_back(
                ise(res.fit.decomp.psi.col(m), truth.psi.col(m), ds));
        out.lambda1 = res.posterior.lambda1_mean;
        out.lambda2 = res.posterior.lambda2_mean;
        out.ok = true;
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
    }
    return out;
}

ReplicateTable replicate_table(const std::vector<ScenarioSpec>& scenarios, int n_reps,
                               TableMetric metric, const PipelineOptions& popt) {
    ReplicateTable table;
    table.metric = metric;

    std::vector<std::string> row_keys, col_keys;
    for (const auto& sc : scenarios) {
        if (std::find(row_keys.begin(), row_keys.end(), sc.row_label) == row_keys.end())
            row_keys.push_back(sc.row_label);
        if (std::find(col_keys.begin(), col_keys.end(), sc.col_label) == col_keys.end())
            col_keys.push_back(sc.col_label);
    }

    // For ISE each scenario row expands into one row per eigenfunction.
    std::vector<std::string> components;
    if (metric == TableMetric::ise) {
        for (int l = 1; l <= 4; ++l) components.push_back("l1e" + std::to_string(l));
        for (int m = 1; m <= 4; ++m) components.push_back("l2e" + std::to_string(m));
    } else {
        components.push_back("");
    }

    for (const auto& rk : row_keys)
        for (const auto& comp : components)
            table.row_labels.push_back(comp.empty() ? rk : rk + " " + comp);
    table.col_labels = col_keys;
    table.cells.assign(table.row_labels.size(),
                       std::vector<ReplicateCell>(col_keys.size()));

    for (const auto& sc : scenarios) {
        std::size_t row_base = 0;
        for (std::size_t r = 0; r < row_keys.size(); ++r)
            if (row_keys[r] == sc.row_label) { row_base = r * components.size(); break; }
        std::size_t col = 0;
        for (std::size_t c = 0; c < col_keys.size(); ++c)
            if (col_keys[c] == sc.col_label) { col = c; break; }

        std::vector<ReplicateOutcome> outcomes(static_cast<std::size_t>(n_reps));
        for (int rep = 0; rep < n_reps; ++rep)
            outcomes[static_cast<std::size_t>(rep)] =
                run_replicate(sc.config, derive_seed(sc.config.seed, static_cast<std::uint64_t>(rep) + 1),
                              popt);
        table.scenario_labels.push_back(sc.row_label + " / " + sc.col_label);
        table.outcomes.push_back(outcomes);

        auto accumulate = [&](std::size_t row, auto value_of) {
            auto& cell = table.cells[row][col];
            cell.present = true;
            for (const auto& oc : outcomes) {
                if (!oc.ok) { ++cell.n_fail; continue; }
                double v = value_of(oc);
                if (std::isnan(v)) { ++cell.n_fail; continue; }
                cell.values.push_back(v);
                ++cell.n_ok;
            }
            if (cell.n_ok > 0) {
                double s = 0;
                for (double v : cell.values) s += v;
                cell.mean = s / cell.n_ok;
            } else {
                cell.mean = std::numeric_limits<double>::quiet_NaN();
            }
        };

        if (metric == TableMetric::mse) {
            accumulate(row_base, [](const ReplicateOutcome& oc) { return oc.mse; });
        } else {
            for (int c = 0; c < 8; ++c) {
                accumulate(row_base + static_cast<std::size_t>(c), [&](const ReplicateOutcome& oc) {
                    const auto& v = c < 4 ? oc.ise_level1 : oc.ise_level2;
                    int idx = c % 4;
                    return idx < static_cast<int>(v.size())
                               ? v[static_cast<std::size_t>(idx)]
                               : std::numeric_limits<double>::quiet_NaN();
                });
            }
        }
    }
    return table;
}

} // namespace gmfpca
