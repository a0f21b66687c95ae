#include "gmfpca/glmm.hpp"
#include "gmfpca/optim.hpp"
#include "gmfpca/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace gmfpca {

std::string fit_status_name(FitStatus s) {
    switch (s) {
        case FitStatus::converged: return "converged";
        case FitStatus::singular_a: return "singular_a";
        case FitStatus::singular_b: return "singular_b";
        case FitStatus::singular_ab: return "singular_ab";
        case FitStatus::degenerate: return "degenerate";
        case FitStatus::failed: return "failed";
    }
    return "unknown";
}

FitStatus fit_status_from_name(const std::string& name) {
    if (name == "converged") return FitStatus::converged;
    if (name == "singular_a") return FitStatus::singular_a;
    if (name == "singular_b") return FitStatus::singular_b;
    if (name == "singular_ab") return FitStatus::singular_ab;
    if (name == "degenerate") return FitStatus::degenerate;
    if (name == "failed") return FitStatus::failed;
    throw Error("unknown fit status '" + name + "'");
}

double BinObservations::total_n() const {
    double t = 0;
    for (const auto& c : cells) t += c.n;
    return t;
}

double BinObservations::total_sum() const {
    double t = 0;
    for (const auto& c : cells) t += c.sum;
    return t;
}

namespace {

inline double softplus(double x) {
    // log(1 + e^x), overflow-safe
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

struct CellEval {
    double ll;
    double score;  // d ll / d eta
    double weight; // -d^2 ll / d eta^2, >= 0
};

inline CellEval eval_cell(const BinObservations::Cell& c, Family family, double eta,
                          double s2eps) {
    CellEval e{};
    switch (family) {
        case Family::binary: {
            double p = 1.0 / (1.0 + std::exp(-eta));
            e.ll = c.sum * eta - c.n * softplus(eta);
            e.score = c.sum - c.n * p;
            e.weight = c.n * p * (1.0 - p);
            break;
        }
        case Family::poisson: {
            double m = std::exp(eta);
            e.ll = c.sum * eta - c.n * m + c.log_const;
            e.score = c.sum - c.n * m;
            e.weight = c.n * m;
            break;
        }
        case Family::gaussian: {
            e.ll = -(c.sum_sq - 2.0 * c.sum * eta + c.n * eta * eta) / (2.0 * s2eps) -
                   0.5 * c.n * std::log(2.0 * M_PI * s2eps);
            e.score = (c.sum - c.n * eta) / s2eps;
            e.weight = c.n / s2eps;
            break;
        }
    }
    return e;
}

struct InnerState {
    Eigen::VectorXd beta; // active fixed effects (intercept first)
    Eigen::VectorXd a;    // per local subject
    Eigen::VectorXd b;    // per cell
};

struct InnerResult {
    InnerState state;
    double F = 0;           // penalized log-likelihood at the mode
    double loglik_data = 0; // data term alone
    double logdet_Hu = 0;   // log det of the random-effect block at the mode
    bool ok = false;
};

// Active fixed-effect layout: column 0 is the intercept; columns 1..p-1 map to
// visit levels (reference level and levels absent from the bin are pinned to 0).
struct FixedLayout {
    int p = 1;
    std::vector<int> col_of_level; // visit level -> column, -1 when pinned
};

FixedLayout make_layout(const BinObservations& bin, bool visit_effects) {
    FixedLayout lay;
    lay.col_of_level.assign(static_cast<std::size_t>(std::max(1, bin.n_visit_levels)), -1);
    lay.p = 1;
    if (visit_effects && bin.n_visit_levels > 1) {
        std::vector<char> present(static_cast<std::size_t>(bin.n_visit_levels), 0);
        for (const auto& c : bin.cells) present[static_cast<std::size_t>(c.visit_level)] = 1;
        for (int v = 1; v < bin.n_visit_levels; ++v)
            if (present[static_cast<std::size_t>(v)])
                lay.col_of_level[static_cast<std::size_t>(v)] = lay.p++;
    }
    return lay;
}

double start_intercept(const BinObservations& bin, Family family) {
    double n = bin.total_n(), s = bin.total_sum();
    switch (family) {
        case Family::binary: {
            double p = std::min(std::max(s / n, 0.5 / n), 1.0 - 0.5 / n);
            return std::log(p / (1.0 - p));
        }
        case Family::poisson:
            return std::log(std::max(s, 0.5) / n);
        case Family::gaussian:
            return s / n;
    }
    return 0;
}

// Penalized log-likelihood of the current state.
double penalized_loglik(const BinObservations& bin, Family family, const FixedLayout& lay,
                        const InnerState& x, double s2a, double s2b, double s2eps,
                        double* data_ll = nullptr) {
    double ll = 0;
    for (std::size_t ci = 0; ci < bin.cells.size(); ++ci) {
        const auto& c = bin.cells[ci];
        int col = lay.col_of_level[static_cast<std::size_t>(c.visit_level)];
        double eta = x.beta(0) + (col > 0 ? x.beta(col) : 0.0) + x.a(c.subject) +
                     x.b(static_cast<Eigen::Index>(ci));
        ll += eval_cell(c, family, eta, s2eps).ll;
    }
    if (data_ll) *data_ll = ll;
    double pen = 0.5 * x.a.squaredNorm() / s2a + 0.5 * x.b.squaredNorm() / s2b;
    return ll - pen;
}

InnerResult solve_modes(const BinObservations& bin, Family family, const GlmmOptions& opt,
                        double s2a, double s2b, double s2eps, const InnerState* warm) {
    const int S = bin.n_subjects;
    const auto C = static_cast<Eigen::Index>(bin.cells.size());
    FixedLayout lay = make_layout(bin, opt.visit_fixed_effects);
    const int p = lay.p;

    InnerResult res;
    InnerState& x = res.state;
    if (warm && warm->beta.size() == p && warm->a.size() == S && warm->b.size() == C) {
        x = *warm;
    } else {
        x.beta = Eigen::VectorXd::Zero(p);
        x.beta(0) = start_intercept(bin, family);
        x.a = Eigen::VectorXd::Zero(S);
        x.b = Eigen::VectorXd::Zero(C);
    }

    double F = penalized_loglik(bin, family, lay, x, s2a, s2b, s2eps);

    std::vector<double> eta(static_cast<std::size_t>(C)), score(static_cast<std::size_t>(C)),
        weight(static_cast<std::size_t>(C));

    Eigen::VectorXd g_beta(p), gb(C), ga(S);
    Eigen::MatrixXd Bmat(p, p);
    Eigen::VectorXd atil(S), g_a_til(S);
    Eigen::MatrixXd U(p, S); // beta-a couplings after b elimination

    for (int iter = 0; iter < opt.max_inner_iter; ++iter) {
        // Scores and weights at current state.
        for (Eigen::Index ci = 0; ci < C; ++ci) {
            const auto& c = bin.cells[static_cast<std::size_t>(ci)];
            int col = lay.col_of_level[static_cast<std::size_t>(c.visit_level)];
            double e = x.beta(0) + (col > 0 ? x.beta(col) : 0.0) + x.a(c.subject) + x.b(ci);
            auto ev = eval_cell(c, family, e, s2eps);
            eta[static_cast<std::size_t>(ci)] = e;
            score[static_cast<std::size_t>(ci)] = ev.score;
            weight[static_cast<std::size_t>(ci)] = ev.weight;
        }

        g_beta.setZero();
        ga.setZero();
        for (Eigen::Index ci = 0; ci < C; ++ci) {
            const auto& c = bin.cells[static_cast<std::size_t>(ci)];
            double r = score[static_cast<std::size_t>(ci)];
            gb(ci) = r - x.b(ci) / s2b;
            ga(c.subject) += r;
            g_beta(0) += r;
            int col = lay.col_of_level[static_cast<std::size_t>(c.visit_level)];
            if (col > 0) g_beta(col) += r;
        }
        for (int i = 0; i < S; ++i) ga(i) -= x.a(i) / s2a;

        double gmax = std::max({g_beta.cwiseAbs().maxCoeff(), S ? ga.cwiseAbs().maxCoeff() : 0.0,
                                C ? gb.cwiseAbs().maxCoeff() : 0.0});
        if (gmax <= 1e-10 * (1.0 + std::fabs(F))) break;

        // Eliminate b, then a, then solve the small fixed-effect system.
        Bmat.setZero();
        U.setZero();
        atil.setConstant(1.0 / s2a);
        g_a_til = ga;
        Eigen::VectorXd g_beta_til = g_beta;
        for (Eigen::Index ci = 0; ci < C; ++ci) {
            const auto& c = bin.cells[static_cast<std::size_t>(ci)];
            double w = weight[static_cast<std::size_t>(ci)];
            double d = w + 1.0 / s2b;
            double f = w / d;
            double wt = w - w * f;
            int col = lay.col_of_level[static_cast<std::size_t>(c.visit_level)];

            atil(c.subject) += wt;
            g_a_til(c.subject) -= f * gb(ci);
            U(0, c.subject) += wt;
            Bmat(0, 0) += wt;
            g_beta_til(0) -= f * gb(ci);
            if (col > 0) {
                U(col, c.subject) += wt;
                Bmat(col, col) += wt;
                Bmat(0, col) += wt;
                Bmat(col, 0) += wt;
                g_beta_til(col) -= f * gb(ci);
            }
        }
        Eigen::MatrixXd Bhat = Bmat;
        Eigen::VectorXd ghat = g_beta_til;
        for (int i = 0; i < S; ++i) {
            Bhat.noalias() -= U.col(i) * (U.col(i).transpose() / atil(i));
            ghat.noalias() -= U.col(i) * (g_a_til(i) / atil(i));
        }
        double ridge = 1e-12 * std::max(1.0, Bhat.diagonal().maxCoeff());
        Bhat.diagonal().array() += ridge;

        Eigen::VectorXd dbeta = Bhat.ldlt().solve(ghat);
        Eigen::VectorXd da(S), db(C);
        for (int i = 0; i < S; ++i) da(i) = (g_a_til(i) - U.col(i).dot(dbeta)) / atil(i);
        for (Eigen::Index ci = 0; ci < C; ++ci) {
            const auto& c = bin.cells[static_cast<std::size_t>(ci)];
            double w = weight[static_cast<std::size_t>(ci)];
            double d = w + 1.0 / s2b;
            int col = lay.col_of_level[static_cast<std::size_t>(c.visit_level)];
            double dx = dbeta(0) + (col > 0 ? dbeta(col) : 0.0) + da(c.subject);
            db(ci) = (gb(ci) - w * dx) / d;
        }

        // Backtracking line search on the penalized log-likelihood.
        double t = 1.0;
        InnerState trial = x;
        double F_new = F;
        bool improved = false;
        for (int ls = 0; ls < 40; ++ls) {
            trial.beta = x.beta + t * dbeta;
            trial.a = x.a + t * da;
            trial.b = x.b + t * db;
            F_new = penalized_loglik(bin, family, lay, trial, s2a, s2b, s2eps);
            if (std::isfinite(F_new) && F_new >= F) { improved = true; break; }
            t *= 0.5;
        }
        if (!improved) break;
        x = trial;
        double dF = F_new - F;
        F = F_new;
        if (dF <= opt.inner_tol * (1.0 + std::fabs(F))) break;
    }

    // log det of the (a, b) block at the mode.
    double logdet = 0;
    Eigen::VectorXd atil2 = Eigen::VectorXd::Constant(S, 1.0 / s2a);
    for (Eigen::Index ci = 0; ci < C; ++ci) {
        const auto& c = bin.cells[static_cast<std::size_t>(ci)];
        int col = lay.col_of_level[static_cast<std::size_t>(c.visit_level)];
        double e = x.beta(0) + (col > 0 ? x.beta(col) : 0.0) + x.a(c.subject) + x.b(ci);
        double w = eval_cell(c, family, e, s2eps).weight;
        double d = w + 1.0 / s2b;
        logdet += std::log(d);
        atil2(c.subject) += w - w * w / d;
    }
    for (int i = 0; i < S; ++i) logdet += std::log(atil2(i));

    res.F = penalized_loglik(bin, family, lay, x, s2a, s2b, s2eps, &res.loglik_data);
    res.logdet_Hu = logdet;
    res.ok = std::isfinite(res.F);
    return res;
}

LocalFit state_to_fit(const BinObservations& bin, const GlmmOptions& opt, const InnerResult& inner,
                      double s2a, double s2b, double s2eps, double objective) {
    FixedLayout lay = make_layout(bin, opt.visit_fixed_effects);
    LocalFit fit;
    fit.center = bin.center;
    fit.mu0 = inner.state.beta(0);
    fit.mu_visit.assign(static_cast<std::size_t>(std::max(1, bin.n_visit_levels)), 0.0);
    for (int v = 0; v < bin.n_visit_levels; ++v) {
        int col = lay.col_of_level[static_cast<std::size_t>(v)];
        if (col > 0) fit.mu_visit[static_cast<std::size_t>(v)] = inner.state.beta(col);
    }
    fit.a.assign(inner.state.a.data(), inner.state.a.data() + inner.state.a.size());
    fit.b.assign(inner.state.b.data(), inner.state.b.data() + inner.state.b.size());
    fit.sigma2_a = s2a;
    fit.sigma2_b = s2b;
    fit.sigma2_eps = s2eps;
    fit.loglik = objective;
    return fit;
}

void detect_degenerate(const BinObservations& bin, Family family) {
    if (bin.cells.empty()) throw DegenerateBin("empty bin");
    double n = bin.total_n(), s = bin.total_sum();
    switch (family) {
        case Family::binary:
            if (s <= 0.0 || s >= n)
                throw DegenerateBin("all-constant binary response in bin");
            break;
        case Family::poisson:
            if (s <= 0.0) throw DegenerateBin("all-zero count response in bin");
            break;
        case Family::gaussian: {
            double mean = s / n;
            double ssq = 0;
            for (const auto& c : bin.cells) ssq += c.sum_sq - 2 * mean * c.sum + c.n * mean * mean;
            if (ssq / n < 1e-14) throw DegenerateBin("constant gaussian response in bin");
            break;
        }
    }
}

} // namespace

double laplace_objective(const BinObservations& bin, Family family, const GlmmOptions& opt,
                         double sigma2_a, double sigma2_b, double sigma2_eps, LocalFit* fit_out) {
    auto inner = solve_modes(bin, family, opt, sigma2_a, sigma2_b, sigma2_eps, nullptr);
    const double S = bin.n_subjects;
    const double C = static_cast<double>(bin.cells.size());
    double obj = inner.F - 0.5 * (S * std::log(sigma2_a) + C * std::log(sigma2_b)) -
                 0.5 * inner.logdet_Hu;
    if (fit_out) *fit_out = state_to_fit(bin, opt, inner, sigma2_a, sigma2_b, sigma2_eps, obj);
    return obj;
}

LocalFit degenerate_fallback(const BinObservations& bin, Family family) {
    LocalFit fit;
    fit.center = bin.center;
    fit.status = FitStatus::degenerate;
    double n = std::max(bin.total_n(), 1.0);
    double s = bin.total_sum();
    switch (family) {
        case Family::binary: {
            double p = s <= 0.0 ? 0.5 / n : (s >= n ? (n - 0.5) / n
                                                    : std::min(std::max(s / n, 0.5 / n), 1 - 0.5 / n));
            fit.mu0 = std::log(p / (1.0 - p));
            break;
        }
        case Family::poisson:
            fit.mu0 = std::log((0.5 + s) / n);
            break;
        case Family::gaussian:
            fit.mu0 = s / n;
            break;
    }
    fit.mu_visit.assign(static_cast<std::size_t>(std::max(1, bin.n_visit_levels)), 0.0);
    fit.a.assign(static_cast<std::size_t>(bin.n_subjects), 0.0);
    fit.b.assign(bin.cells.size(), 0.0);
    fit.loglik = 0.0;
    return fit;
}

LocalFit fit_local_glmm(const BinObservations& bin, Family family, const GlmmOptions& opt) {
    detect_degenerate(bin, family);

    const bool gaussian = family == Family::gaussian;
    const int dim = gaussian ? 3 : 2;
    const double log_floor = std::log(opt.variance_floor);

    // Warm-started inner solves across outer evaluations; the evaluation order
    // of the simplex is deterministic, so this keeps fits reproducible.
    InnerState warm;
    bool have_warm = false;

    auto objective = [&](const std::vector<double>& theta) {
        double s2a = std::exp(theta[0]);
        double s2b = std::exp(theta[1]);
        double s2e = gaussian ? std::exp(theta[2]) : 0.0;
        auto inner = solve_modes(bin, family, opt, s2a, s2b, s2e, have_warm ? &warm : nullptr);
        if (!inner.ok) return 1e300;
        warm = inner.state;
        have_warm = true;
        double S = bin.n_subjects, C = static_cast<double>(bin.cells.size());
        double obj = inner.F - 0.5 * (S * std::log(s2a) + C * std::log(s2b)) -
                     0.5 * inner.logdet_Hu;
        return -obj;
    };

    std::vector<double> theta0;
    if (gaussian) {
        double n = bin.total_n(), s = bin.total_sum();
        double mean = s / n, ssq = 0;
        for (const auto& c : bin.cells) ssq += c.sum_sq - 2 * mean * c.sum + c.n * mean * mean;
        double var = std::max(ssq / n, 1e-6);
        theta0 = {std::log(var / 4), std::log(var / 4), std::log(var / 2)};
    } else {
        theta0 = {std::log(0.25), std::log(0.25)};
    }

    NelderMeadOptions nm;
    nm.max_iter = opt.max_iter;
    nm.rel_tol = opt.tol;
    nm.init_step = 1.0;
    nm.lower.assign(static_cast<std::size_t>(dim), log_floor);
    nm.upper.assign(static_cast<std::size_t>(dim), 35.0);

    auto nr = nelder_mead_minimize(objective, theta0, nm);

    double s2a = std::exp(std::max(nr.x[0], log_floor));
    double s2b = std::exp(std::max(nr.x[1], log_floor));
    double s2e = gaussian ? std::exp(std::max(nr.x[2], log_floor)) : 0.0;

    LocalFit fit;
    laplace_objective(bin, family, opt, s2a, s2b, s2e, &fit);
    fit.n_outer_iters = nr.n_iter;
    fit.objective_trace.resize(nr.best_trace.size());
    for (std::size_t i = 0; i < nr.best_trace.size(); ++i)
        fit.objective_trace[i] = -nr.best_trace[i];

    // The objective flattens as a variance approaches zero, so the simplex can
    // stop slightly above the hard floor; treat anything this small on the
    // link scale as a boundary estimate.
    const double boundary = std::max(1e-6, 10.0 * opt.variance_floor);
    bool sing_a = s2a <= boundary;
    bool sing_b = s2b <= boundary;
    fit.status = sing_a && sing_b ? FitStatus::singular_ab
                 : sing_a         ? FitStatus::singular_a
                 : sing_b         ? FitStatus::singular_b
                                  : FitStatus::converged;

    if (!nr.converged) {
        fit.status = FitStatus::failed;
        std::ostringstream os;
        os << "bin " << bin.center << ": outer optimizer did not converge in " << opt.max_iter
           << " iterations (objective " << fit.loglik << ")";
        throw GlmmConvergenceFailure(os.str(), fit);
    }
    return fit;
}

BinObservations extract_bin(const MultilevelFunctionalDataset& data, const std::vector<int>& bin,
                            int center) {
    BinObservations out;
    out.center = center;
    out.n_visit_levels = std::max<int>(1, static_cast<int>(data.visit_ids.size()));

    std::vector<int> local_of_subject(static_cast<std::size_t>(data.n_subjects()), -1);
    std::vector<int> subject_global;
    const bool poisson = data.family == Family::poisson;

    for (int p = 0; p < data.n_pairs(); ++p) {
        double n = 0, s = 0, ssq = 0, lc = 0;
        for (int k : bin) {
            double v = data.values(p, k);
            if (std::isnan(v)) continue;
            n += 1;
            s += v;
            ssq += v * v;
            if (poisson) lc -= std::lgamma(v + 1.0);
        }
        if (n == 0) continue;
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        int& loc = local_of_subject[static_cast<std::size_t>(pr.subject)];
        if (loc < 0) {
            loc = static_cast<int>(subject_global.size());
            subject_global.push_back(pr.subject);
            out.cells_of_subject.emplace_back();
        }
        BinObservations::Cell cell;
        cell.subject = loc;
        cell.visit_level = pr.visit;
        cell.pair = p;
        cell.n = n;
        cell.sum = s;
        cell.sum_sq = ssq;
        cell.log_const = lc;
        out.cells_of_subject[static_cast<std::size_t>(loc)].push_back(
            static_cast<int>(out.cells.size()));
        out.cells.push_back(cell);
    }
    out.n_subjects = static_cast<int>(subject_global.size());
    out.subject_global = std::move(subject_global);
    return out;
}

int LatentPredictorMatrix::count_status(FitStatus s) const {
    int n = 0;
    for (auto st : provenance)
        if (st == s) ++n;
    return n;
}

LatentPredictorMatrix fit_all_bins(const MultilevelFunctionalDataset& data, const BinPlan& plan,
                                   const GlmmOptions& opt, int workers) {
    const int K = plan.size();
    const int P = data.n_pairs();
    const int S = data.n_subjects();
    const int V = std::max<int>(1, static_cast<int>(data.visit_ids.size()));

    std::vector<LocalFit> fits(static_cast<std::size_t>(K));
    std::vector<BinObservations> bins(static_cast<std::size_t>(K));

    parallel_for(static_cast<std::size_t>(K), workers, [&](std::size_t k) {
        bins[k] = extract_bin(data, plan.bins[k], static_cast<int>(k));
        try {
            fits[k] = fit_local_glmm(bins[k], data.family, opt);
        } catch (const DegenerateBin&) {
            fits[k] = degenerate_fallback(bins[k], data.family);
        } catch (const GlmmConvergenceFailure& e) {
            fits[k] = e.last_iterate;
        }
    });

    int n_failed = 0;
    for (const auto& f : fits)
        if (f.status == FitStatus::failed) ++n_failed;
    if (2 * n_failed > K)
        throw PipelineFailure("local fitting failed in " + std::to_string(n_failed) + " of " +
                              std::to_string(K) + " bins");

    LatentPredictorMatrix out;
    out.mu0 = Eigen::VectorXd::Zero(K);
    out.mu_visit = Eigen::MatrixXd::Zero(V, K);
    out.a = Eigen::MatrixXd::Zero(S, K);
    out.b = Eigen::MatrixXd::Zero(P, K);
    out.eta = Eigen::MatrixXd::Zero(P, K);
    out.provenance.resize(static_cast<std::size_t>(K));
    out.pair_subject.resize(static_cast<std::size_t>(P));
    out.pair_visit.resize(static_cast<std::size_t>(P));
    for (int p = 0; p < P; ++p) {
        out.pair_subject[static_cast<std::size_t>(p)] = data.pairs[static_cast<std::size_t>(p)].subject;
        out.pair_visit[static_cast<std::size_t>(p)] = data.pairs[static_cast<std::size_t>(p)].visit;
    }

    for (int k = 0; k < K; ++k) {
        const auto& fit = fits[static_cast<std::size_t>(k)];
        const auto& bin = bins[static_cast<std::size_t>(k)];
        out.provenance[static_cast<std::size_t>(k)] = fit.status;
        out.mu0(k) = fit.mu0;
        for (int v = 0; v < V && v < static_cast<int>(fit.mu_visit.size()); ++v)
            out.mu_visit(v, k) = fit.mu_visit[static_cast<std::size_t>(v)];
        for (std::size_t i = 0; i < bin.subject_global.size(); ++i)
            out.a(bin.subject_global[i], k) = fit.a[i];
        for (std::size_t ci = 0; ci < bin.cells.size(); ++ci)
            out.b(bin.cells[ci].pair, k) = fit.b[ci];
    }

    for (int p = 0; p < P; ++p) {
        int s = out.pair_subject[static_cast<std::size_t>(p)];
        int v = out.pair_visit[static_cast<std::size_t>(p)];
        for (int k = 0; k < K; ++k)
            out.eta(p, k) = out.mu0(k) + out.mu_visit(v, k) + out.a(s, k) + out.b(p, k);
    }
    return out;
}

} // namespace gmfpca
