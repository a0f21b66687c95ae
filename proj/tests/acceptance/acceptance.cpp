// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criterion numbers are selected on the command line so ctest can
// run the expensive groups in parallel.

#include "gmfpca/pipeline.hpp"
#include "gmfpca/rng.hpp"
#include "support/oracles.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>
#include <vector>

using namespace gmfpca;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion << ": " << detail
              << std::endl;
    if (!pass) ++g_failures;
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Configuration used for the error-table reproductions. The module defaults
// stay as documented; these are the reproduction-run choices:
//  - four components per level, matching the generator and the reported tables
//  - light covariance smoothing (the 2x-half-width default blurs the
//    highest-frequency level-2 basis at K ~ 100)
//  - for the log link the pointwise mean is refit in the final stage, since
//    the binned local fits carry an upward Jensen offset that the unbinned
//    global model removes
PipelineOptions table_options(Family family) {
    PipelineOptions opt;
    opt.bin_width_pct = 5;
    opt.mfpca.bandwidth = 2;
    opt.mfpca_auto_bandwidth = false;
    opt.mfpca.max_components = 4;
    if (family == Family::poisson) opt.fixed_effect_mode = FixedEffectMode::refit_pointwise;
    return opt;
}

struct TableRun {
    std::vector<double> mse;
    std::vector<double> ise_l1e1, ise_l1e2;
    std::vector<Eigen::VectorXd> lambda1, lambda2;
    int n_fail = 0;
};

TableRun run_table(Family family, int I, int J, int reps, int warmup, int iters,
                   std::uint64_t seed) {
    TableRun out;
    for (int rep = 0; rep < reps; ++rep) {
        SimulationConfig cfg;
        cfg.family = family;
        cfg.basis_case = 1;
        cfg.n_subjects = I;
        cfg.n_visits = J;
        cfg.n_points = 100;
        cfg.b0 = 0;
        cfg.seed = seed;
        PipelineOptions opt = table_options(family);
        opt.mcmc.warmup = warmup;
        opt.mcmc.iters = iters;
        opt.mcmc.chains = 2;
        auto oc = run_replicate(cfg, derive_seed(seed, static_cast<std::uint64_t>(rep) + 1), opt);
        if (!oc.ok) {
            ++out.n_fail;
            std::cout << "  replicate " << rep << " failed: " << oc.error << std::endl;
            continue;
        }
        out.mse.push_back(oc.mse);
        if (oc.ise_level1.size() >= 2) {
            out.ise_l1e1.push_back(oc.ise_level1[0]);
            out.ise_l1e2.push_back(oc.ise_level1[1]);
        }
        out.lambda1.push_back(oc.lambda1);
        out.lambda2.push_back(oc.lambda2);
    }
    return out;
}

// ---------------------------------------------------------------------------

void criterion_1_2() {
    auto t0 = std::chrono::steady_clock::now();
    auto run = run_table(Family::binary, 50, 5, 10, 500, 500, 20250801);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    double mse = mean_of(run.mse);
    {
        std::ostringstream os;
        os << "binary Case 1 I=50 J=5 K=100 w=5%: mean MSE over " << run.mse.size()
           << " replicates = " << mse << " (gate [0.20, 0.45]; " << run.n_fail
           << " failures; " << secs << " s)";
        report(1, run.n_fail == 0 && mse >= 0.20 && mse <= 0.45, os.str());
    }
    {
        double i1 = mean_of(run.ise_l1e1), i2 = mean_of(run.ise_l1e2);
        std::ostringstream os;
        os << "same runs: mean ISE l1e1 = " << i1 << " (gate <= 0.15), l1e2 = " << i2
           << " (gate <= 0.25)";
        report(2, i1 <= 0.15 && i2 <= 0.25, os.str());
    }
}

void criterion_3() {
    auto run = run_table(Family::poisson, 50, 5, 5, 500, 500, 20250803);
    double mse = mean_of(run.mse);
    std::ostringstream os;
    os << "poisson Case 1 I=50 J=5 K=100: mean MSE over " << run.mse.size()
       << " replicates = " << mse << " (gate <= 0.10; " << run.n_fail << " failures)";
    report(3, run.n_fail == 0 && mse <= 0.10, os.str());
}

void criterion_4() {
    auto run = run_table(Family::binary, 500, 10, 10, 1000, 1000, 20250804);
    Eigen::Vector4d truth(1.0, 0.5, 0.25, 0.125);
    Eigen::Vector4d m1 = Eigen::Vector4d::Zero(), m2 = Eigen::Vector4d::Zero();
    for (const auto& l : run.lambda1) m1 += l.head(4);
    for (const auto& l : run.lambda2) m2 += l.head(4);
    m1 /= static_cast<double>(run.lambda1.size());
    m2 /= static_cast<double>(run.lambda2.size());
    double rel1 = ((m1 - truth).cwiseQuotient(truth)).cwiseAbs().maxCoeff();
    double rel2 = ((m2 - truth).cwiseQuotient(truth)).cwiseAbs().maxCoeff();
    std::ostringstream os;
    os << "binary Case 1 I=500 J=10: level-1 eigenvalue means [" << m1.transpose()
       << "] max rel err = " << rel1 << " (gate <= 0.20); level-2 [" << m2.transpose()
       << "] max rel err = " << rel2 << " (gate <= 0.40); " << run.n_fail << " failures";
    report(4, run.n_fail == 0 && rel1 <= 0.20 && rel2 <= 0.40, os.str());
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd orthonormalize(Eigen::MatrixXd F, double ds) {
    for (Eigen::Index c = 0; c < F.cols(); ++c) {
        for (Eigen::Index p = 0; p < c; ++p)
            F.col(c) -= (F.col(c).dot(F.col(p)) * ds) * F.col(p);
        F.col(c) /= std::sqrt(F.col(c).squaredNorm() * ds);
    }
    return F;
}

void criterion_5() {
    // Part A: gaussian end-to-end scores vs the dense closed-form solution.
    const int I = 50, J = 3, K = 60;
    auto grid = SamplingGrid::uniform_unit(K);
    const double ds = grid.ds();
    Eigen::MatrixXd phi = orthonormalize(basis_matrix(1, 1, grid.points, 2), ds);
    Eigen::MatrixXd psi = orthonormalize(basis_matrix(1, 2, grid.points, 2), ds);
    Eigen::Vector2d lam1(1.0, 0.5), lam2(0.5, 0.25);
    const double s2e = 0.25;

    Rng rng(90210);
    DatasetBuilder builder(grid, Family::gaussian);
    std::vector<int> ps;
    for (int i = 0; i < I; ++i) {
        Eigen::Vector2d xi;
        for (int l = 0; l < 2; ++l) xi(l) = rng.normal(0, std::sqrt(lam1(l)));
        for (int j = 0; j < J; ++j) {
            Eigen::Vector2d zeta;
            for (int m = 0; m < 2; ++m) zeta(m) = rng.normal(0, std::sqrt(lam2(m)));
            ps.push_back(i);
            for (int k = 0; k < K; ++k) {
                double eta = phi.row(k).dot(xi) + psi.row(k).dot(zeta);
                builder.add(std::to_string(i + 1), std::to_string(j + 1), k,
                            eta + rng.normal(0, std::sqrt(s2e)));
            }
        }
    }
    auto data = builder.finalize();

    ScoreModelSpec spec;
    spec.phi = phi;
    spec.psi = psi;
    spec.mu0 = Eigen::VectorXd::Zero(K);
    spec.family = Family::gaussian;
    spec.prior_level1.family = VariancePriorFamily::fixed;
    spec.prior_level2.family = VariancePriorFamily::fixed;
    spec.prior_residual = VariancePrior::fixed(s2e);
    spec.init_lambda1 = lam1;
    spec.init_lambda2 = lam2;

    McmcOptions mcmc;
    mcmc.warmup = 500;
    mcmc.iters = 4000;
    mcmc.chains = 2;
    mcmc.seed = 5150;
    auto post = fit_scores(data, spec, mcmc);

    Eigen::MatrixXd z(data.n_pairs(), K);
    for (int p = 0; p < data.n_pairs(); ++p)
        for (int k = 0; k < K; ++k) z(p, k) = data.values(p, k);
    auto oracle = oracles::conjugate_scores(z, Eigen::MatrixXd::Zero(data.n_pairs(), K), phi, psi,
                                            ps, I, lam1, lam2, s2e);

    double err2 = 0, sd2 = 0;
    long n = 0;
    for (int s = 0; s < I; ++s)
        for (int l = 0; l < 2; ++l) {
            err2 += std::pow(post.xi_mean(s, l) - oracle.xi_mean(s, l), 2);
            sd2 += std::pow(oracle.xi_sd(s, l), 2);
            ++n;
        }
    for (int p = 0; p < data.n_pairs(); ++p)
        for (int m = 0; m < 2; ++m) {
            err2 += std::pow(post.zeta_mean(p, m) - oracle.zeta_mean(p, m), 2);
            sd2 += std::pow(oracle.zeta_sd(p, m), 2);
            ++n;
        }
    double score_rel = std::sqrt(err2 / n) / std::sqrt(sd2 / n);

    // Part B: gaussian local fits vs the mixed-model equations.
    Rng rng2(777);
    std::vector<std::vector<double>> y;
    std::vector<int> cs, cv;
    oracles::DenseMixedModel dense;
    {
        const int S = 4, V = 3, T = 4;
        long N = S * V * T;
        dense.y.resize(N);
        dense.X = Eigen::MatrixXd::Ones(N, 1);
        dense.Za = Eigen::MatrixXd::Zero(N, S);
        dense.Zb = Eigen::MatrixXd::Zero(N, S * V);
        long row = 0;
        for (int i = 0; i < S; ++i) {
            double ai = rng2.normal(0, 1);
            for (int j = 0; j < V; ++j) {
                double bij = rng2.normal(0, 0.6);
                cs.push_back(i);
                cv.push_back(j);
                std::vector<double> ys;
                for (int t = 0; t < T; ++t) {
                    double v = 0.5 + ai + bij + rng2.normal(0, 0.5);
                    ys.push_back(v);
                    dense.y(row) = v;
                    dense.Za(row, i) = 1;
                    dense.Zb(row, i * V + j) = 1;
                    ++row;
                }
                y.push_back(ys);
            }
        }
    }
    BinObservations bin;
    bin.center = 0;
    bin.n_subjects = 4;
    bin.n_visit_levels = 3;
    bin.cells_of_subject.resize(4);
    bin.subject_global = {0, 1, 2, 3};
    for (std::size_t c = 0; c < y.size(); ++c) {
        BinObservations::Cell cell;
        cell.subject = cs[c];
        cell.visit_level = cv[c];
        cell.pair = static_cast<int>(c);
        for (double v : y[c]) {
            cell.n += 1;
            cell.sum += v;
            cell.sum_sq += v * v;
        }
        bin.cells_of_subject[static_cast<std::size_t>(cs[c])].push_back(static_cast<int>(c));
        bin.cells.push_back(cell);
    }
    LocalFit fit;
    laplace_objective(bin, Family::gaussian, GlmmOptions{}, 0.8, 0.36, 0.25, &fit);
    auto hs = oracles::henderson_solve(dense, 0.8, 0.36, 0.25);
    double hend_err = std::fabs(fit.mu0 - hs.beta(0));
    for (int i = 0; i < 4; ++i)
        hend_err = std::max(hend_err, std::fabs(fit.a[static_cast<std::size_t>(i)] - hs.a(i)));
    for (int c = 0; c < 12; ++c)
        hend_err = std::max(hend_err, std::fabs(fit.b[static_cast<std::size_t>(c)] - hs.b(c)));
    double scale = std::max(1.0, hs.a.cwiseAbs().maxCoeff());

    std::ostringstream os;
    os << "gaussian oracle equivalence: score RMS error = " << score_rel * 100
       << "% of posterior SD scale (gate 2%); local-fit vs mixed-model equations max |diff| = "
       << hend_err << " (gate 1e-8 relative, scale " << scale << ")";
    report(5, score_rel < 0.02 && hend_err <= 1e-8 * scale, os.str());
}

void criterion_6() {
    const int K = 101;
    auto grid = SamplingGrid::uniform_unit(K);
    const double ds = grid.ds();
    Eigen::MatrixXd phi = orthonormalize(basis_matrix(1, 1, grid.points, 4), ds);
    Eigen::MatrixXd psi = orthonormalize(basis_matrix(1, 2, grid.points, 4), ds);
    Eigen::Vector4d lambda(1.0, 0.5, 0.25, 0.125);
    Eigen::MatrixXd Ka = Eigen::MatrixXd::Zero(K, K), Kb = Eigen::MatrixXd::Zero(K, K);
    for (int r = 0; r < 4; ++r) {
        Ka += lambda(r) * phi.col(r) * phi.col(r).transpose();
        Kb += lambda(r) * psi.col(r) * psi.col(r).transpose();
    }
    MfpcaOptions opt;
    opt.bandwidth = 0;
    auto t0 = std::chrono::steady_clock::now();
    auto dec = smooth_and_eigendecompose(Ka, Kb, grid, opt);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    bool ok = dec.n_level1() == 4 && dec.n_level2() == 4 && secs < 1.0;
    double worst_ise = 0, worst_rel = 0;
    if (ok) {
        for (int r = 0; r < 4; ++r) {
            worst_ise = std::max({worst_ise, ise(dec.phi.col(r), phi.col(r), ds),
                                  ise(dec.psi.col(r), psi.col(r), ds)});
            worst_rel = std::max({worst_rel, std::fabs(dec.lambda1(r) - lambda(r)) / lambda(r),
                                  std::fabs(dec.lambda2(r) - lambda(r)) / lambda(r)});
        }
        ok = worst_ise < 1e-3 && worst_rel <= 1e-6;
    }
    std::ostringstream os;
    os << "noise-free eigenrecovery: worst ISE = " << worst_ise << " (gate < 1e-3), worst "
       << "eigenvalue rel err = " << worst_rel << " (gate <= 1e-6), runtime " << secs
       << " s (gate < 1)";
    report(6, ok, os.str());
}

void criterion_7() {
    auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    std::ostringstream why;

    auto expect = [&](bool cond, const char* what) {
        if (!cond) {
            ok = false;
            why << " [" << what << "]";
        }
    };

    // bin cardinalities and wraparound
    {
        auto plan = make_bins(100, 4, false);
        expect(plan.bins[49] == std::vector<int>{47, 48, 49, 50, 51}, "interior bin");
        expect(plan.bins[0] == std::vector<int>{0, 1, 2}, "boundary truncation");
        auto cyc = make_bins(100, 4, true);
        expect(cyc.bins[0] == std::vector<int>{98, 99, 0, 1, 2}, "cyclic wraparound");
        auto wide = make_bins(100, 5, false);
        expect(wide.bins[50].size() == 7, "ceil width cardinality");
        bool threw = false;
        try {
            make_bins(100, 100, false);
        } catch (const InvalidBinWidth&) {
            threw = true;
        }
        expect(threw, "width guard");
    }

    // reconstruction identity and worker-count determinism
    {
        Rng rng(8181);
        DatasetBuilder b(SamplingGrid::uniform_unit(40), Family::binary);
        for (int i = 0; i < 10; ++i) {
            double ai = rng.normal(0, 0.7);
            for (int j = 0; j < 3; ++j) {
                double bij = rng.normal(0, 0.5);
                for (int k = 0; k < 40; ++k)
                    b.add(std::to_string(i), std::to_string(j), k,
                          rng.bernoulli(1 / (1 + std::exp(-ai - bij))));
            }
        }
        auto data = b.finalize();
        auto plan = make_bins(40, 4, false);
        auto e1 = fit_all_bins(data, plan, GlmmOptions{}, 1);
        auto e2 = fit_all_bins(data, plan, GlmmOptions{}, 2);
        auto e3 = fit_all_bins(data, plan, GlmmOptions{}, 4);
        expect(e1.eta == e2.eta && e2.eta == e3.eta, "worker determinism");
        bool recon = true;
        for (int p = 0; p < e1.n_pairs() && recon; ++p) {
            int s = e1.pair_subject[static_cast<std::size_t>(p)];
            int v = e1.pair_visit[static_cast<std::size_t>(p)];
            for (int k = 0; k < e1.n_points(); ++k)
                if (e1.eta(p, k) != e1.mu0(k) + e1.mu_visit(v, k) + e1.a(s, k) + e1.b(p, k)) {
                    recon = false;
                    break;
                }
        }
        expect(recon, "reconstruction identity");

        // orthonormality within 1e-6 and eigenvalue monotonicity on this fit
        auto cov = estimate_covariances(e1);
        MfpcaOptions mopt;
        mopt.bandwidth = 2;
        auto dec = smooth_and_eigendecompose(cov.K_a, cov.K_b, data.grid, mopt);
        double ds = data.grid.ds();
        Eigen::MatrixXd G = dec.phi.transpose() * dec.phi * ds;
        expect((G - Eigen::MatrixXd::Identity(G.rows(), G.cols())).cwiseAbs().maxCoeff() <= 1e-6,
               "orthonormality");
        bool mono = true;
        for (int r = 1; r < dec.n_level1(); ++r)
            if (dec.lambda1(r) > dec.lambda1(r - 1)) mono = false;
        for (int r = 1; r < dec.n_level2(); ++r)
            if (dec.lambda2(r) > dec.lambda2(r - 1)) mono = false;
        expect(mono, "eigenvalue monotonicity");
    }

    // ISE sign-invariance
    {
        auto grid = SamplingGrid::uniform_unit(101);
        Eigen::MatrixXd l1 = basis_matrix(1, 1, grid.points, 2);
        expect(std::fabs(ise(Eigen::VectorXd(-l1.col(0)), Eigen::VectorXd(l1.col(0)), 0.01)) <
                   1e-12,
               "ise sign alignment");
        expect(std::fabs(ise(l1.col(1), l1.col(0), 0.01) - 2.0) < 0.05, "ise orthogonal pair");
    }

    // SSSOD closed forms
    {
        std::vector<double> lin;
        for (int k = 0; k < 40; ++k) lin.push_back(1.7 * k - 3);
        expect(std::fabs(sssod(lin)) < 1e-18, "sssod linear");
        const int K = 100;
        std::vector<double> quad;
        for (int k = 1; k <= K; ++k) quad.push_back(std::pow(static_cast<double>(k) / K, 2));
        expect(std::fabs(sssod(quad) - 4.0 * (K - 2) / (K * K)) < 1e-12, "sssod quadratic");
    }

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "invariant suite" << why.str() << " (runtime " << secs << " s, gate < 300)";
    report(7, ok && secs < 300, os.str());
}

void criterion_8() {
    // Two replicate datasets; IG(1,1) vs Half-Cauchy(0,10) on the same data
    // and decomposition. The gate is on the spectrum-level (mean) relative
    // difference of the posterior-mean eigenvalues; the worst single component
    // is reported alongside.
    double sum_mean_rel = 0, max_rel = 0;
    for (int rep = 0; rep < 2; ++rep) {
        SimulationConfig cfg;
        cfg.family = Family::binary;
        cfg.basis_case = 1;
        cfg.n_subjects = 100;
        cfg.n_visits = 5;
        cfg.n_points = 100;
        cfg.b0 = 0;
        cfg.seed = derive_seed(20250808, static_cast<std::uint64_t>(rep));
        auto [data, truth] = simulate(cfg);
        PipelineOptions opt = table_options(Family::binary);
        opt.mcmc.warmup = 1000;
        opt.mcmc.iters = 1000;
        opt.mcmc.chains = 2;
        opt.mcmc.seed = 31337 + static_cast<std::uint64_t>(rep);
        auto fit = run_fit_stage(data, opt);

        auto run_prior = [&](VariancePrior pr) {
            PipelineOptions o = opt;
            o.prior_level1 = pr;
            o.prior_level2 = pr;
            auto post = run_scores_stage(data, fit.decomp, &fit.eta, o);
            Eigen::VectorXd all(post.lambda1_mean.size() + post.lambda2_mean.size());
            all << post.lambda1_mean, post.lambda2_mean;
            return all;
        };
        Eigen::VectorXd ig = run_prior(VariancePrior::inverse_gamma(1, 1));
        Eigen::VectorXd hc = run_prior(VariancePrior::half_cauchy(10));
        Eigen::VectorXd rel = (hc - ig).cwiseQuotient(ig).cwiseAbs();
        sum_mean_rel += rel.mean();
        max_rel = std::max(max_rel, rel.maxCoeff());
    }
    double mean_rel = sum_mean_rel / 2;
    std::ostringstream os;
    os << "prior sensitivity I=100 J=5: mean |rel diff| of eigenvalue estimates (IG(1,1) vs "
          "Half-Cauchy(0,10)) = "
       << mean_rel << " (gate <= 0.15; worst single component " << max_rel << ")";
    report(8, mean_rel <= 0.15, os.str());
}

void criterion_9() {
    SimulationConfig cfg;
    cfg.family = Family::binary;
    cfg.basis_case = 1;
    cfg.n_subjects = 150;
    cfg.n_visits = 4;
    cfg.n_points = 500;
    cfg.b0 = 0;
    cfg.seed = 31;
    auto [data, truth] = simulate(cfg);

    PipelineOptions opt;
    opt.bin_width_pct = 2;
    opt.mfpca.max_components = 4;
    opt.mcmc.warmup = 600;
    opt.mcmc.iters = 600;
    opt.mcmc.chains = 2;
    opt.mcmc.seed = 4000;
    auto fit = run_fit_stage(data, opt);
    auto full = run_scores_stage(data, fit.decomp, &fit.eta, opt);
    PipelineOptions od = opt;
    od.downsample = 100;
    auto down = run_scores_stage(data, fit.decomp, &fit.eta, od);

    auto corr = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        double ma = a.mean(), mb = b.mean();
        double num = ((a.array() - ma) * (b.array() - mb)).sum();
        return num /
               std::sqrt((a.array() - ma).square().sum() * (b.array() - mb).square().sum());
    };
    double top = corr(full.xi_mean.col(0), down.xi_mean.col(0));
    double l2_top = corr(full.zeta_mean.col(0), down.zeta_mean.col(0));
    double l2_last = corr(full.zeta_mean.col(fit.decomp.n_level2() - 1),
                          down.zeta_mean.col(fit.decomp.n_level2() - 1));
    std::ostringstream os;
    os << "downsampling K=500 -> 100 points: top level-1 score correlation = " << top
       << " (gate >= 0.9); level-2 first/last component correlations = " << l2_top << " / "
       << l2_last << " (reported; degradation permitted)";
    report(9, top >= 0.9, os.str());
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> which;
    for (int i = 1; i < argc; ++i) which.insert(std::atoi(argv[i]));
    if (which.empty()) which = {1, 2, 3, 4, 5, 6, 7, 8, 9};

    if (which.count(1) || which.count(2)) criterion_1_2();
    if (which.count(3)) criterion_3();
    if (which.count(4)) criterion_4();
    if (which.count(5)) criterion_5();
    if (which.count(6)) criterion_6();
    if (which.count(7)) criterion_7();
    if (which.count(8)) criterion_8();
    if (which.count(9)) criterion_9();

    if (g_failures > 0) {
        std::cout << g_failures << " criterion check(s) failed" << std::endl;
        return 1;
    }
    return 0;
}
