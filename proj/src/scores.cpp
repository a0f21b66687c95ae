#include "gmfpca/scores.hpp"
#include "gmfpca/errors.hpp"
#include "gmfpca/parallel.hpp"
#include "gmfpca/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace gmfpca {

std::vector<int> partition_subjects(int n_subjects, int group_size, std::uint64_t seed) {
    if (group_size < 2) throw Error("partition_subjects: group_size must be >= 2");
    if (n_subjects <= 0) return {};
    int G = (n_subjects + group_size - 1) / group_size;
    std::vector<int> order(static_cast<std::size_t>(n_subjects));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 gen(derive_seed(seed, 0x9a27));
    std::shuffle(order.begin(), order.end(), gen);

    std::vector<int> group(static_cast<std::size_t>(n_subjects), 0);
    int base = n_subjects / G, rem = n_subjects % G;
    std::size_t pos = 0;
    for (int g = 0; g < G; ++g) {
        int size = base + (g < rem ? 1 : 0);
        for (int t = 0; t < size; ++t) group[static_cast<std::size_t>(order[pos++])] = g;
    }
    return group;
}

std::vector<int> downsample_grid(int K, int target_count) {
    if (target_count < 2)
        throw InvalidDownsample("downsample target must be >= 2, got " +
                                std::to_string(target_count));
    if (target_count > K)
        throw InvalidDownsample("downsample target " + std::to_string(target_count) +
                                " exceeds grid size " + std::to_string(K));
    std::vector<int> idx(static_cast<std::size_t>(target_count));
    for (int t = 0; t < target_count; ++t) {
        double pos = static_cast<double>(t) * (K - 1) / (target_count - 1);
        idx[static_cast<std::size_t>(t)] = static_cast<int>(std::lround(pos));
    }
    return idx;
}

double split_rhat(const std::vector<Eigen::VectorXd>& chains) {
    // Split each chain in half; R-hat over the resulting semichains.
    std::vector<Eigen::VectorXd> halves;
    for (const auto& c : chains) {
        auto n = c.size() / 2;
        if (n < 2) return 1.0;
        halves.push_back(c.head(n));
        halves.push_back(c.segment(n, n));
    }
    const auto m = static_cast<double>(halves.size());
    const auto n = static_cast<double>(halves[0].size());
    double grand = 0;
    std::vector<double> means, vars;
    for (const auto& h : halves) {
        double mu = h.mean();
        means.push_back(mu);
        grand += mu;
        vars.push_back((h.array() - mu).square().sum() / (n - 1));
    }
    grand /= m;
    double W = 0;
    for (double v : vars) W += v;
    W /= m;
    double B = 0;
    for (double mu : means) B += (mu - grand) * (mu - grand);
    B *= n / (m - 1);
    if (W <= 0) return 1.0;
    double var_plus = (n - 1) / n * W + B / n;
    return std::sqrt(var_plus / W);
}

namespace {

inline double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double point_ll(Family fam, double z, double eta) {
    switch (fam) {
        case Family::binary: return z * eta - softplus(eta);
        case Family::poisson: return z * eta - std::exp(eta);
        case Family::gaussian: return 0; // handled by exact conjugate updates
    }
    return 0;
}

// Univariate slice sampler (stepping out + shrinkage).
template <typename F>
double slice_sample(const F& logf, double x0, double w, Rng& rng) {
    double f0 = logf(x0);
    if (!std::isfinite(f0)) return x0;
    double logy = f0 + std::log(rng.uniform());
    double L = x0 - w * rng.uniform();
    double R = L + w;
    for (int s = 0; s < 50 && logf(L) > logy; ++s) L -= w;
    for (int s = 0; s < 50 && logf(R) > logy; ++s) R += w;
    for (int s = 0; s < 100; ++s) {
        double x1 = rng.uniform(L, R);
        if (logf(x1) > logy) return x1;
        if (x1 < x0) L = x1; else R = x1;
    }
    return x0;
}

double log_variance_prior(const VariancePrior& pr, double v) {
    switch (pr.family) {
        case VariancePriorFamily::inv_gamma:
            return -(pr.a + 1.0) * std::log(v) - pr.b / v;
        case VariancePriorFamily::half_cauchy: {
            // scale prior on sigma, transformed to the variance
            double s = std::sqrt(v);
            return -std::log1p(v / (pr.scale * pr.scale)) - std::log(2.0 * s);
        }
        case VariancePriorFamily::uniform: {
            double s = std::sqrt(v);
            if (s >= pr.upper) return -std::numeric_limits<double>::infinity();
            return -std::log(2.0 * s);
        }
        case VariancePriorFamily::fixed:
            return 0;
    }
    return 0;
}

// One variance-component update given the score sum of squares over n terms.
double update_variance(const VariancePrior& pr, double current, double ssq, double n, Rng& rng) {
    switch (pr.family) {
        case VariancePriorFamily::fixed:
            return current; // pinned at its initial value
        case VariancePriorFamily::inv_gamma:
            return rng.inverse_gamma(pr.a + 0.5 * n, pr.b + 0.5 * ssq);
        default: {
            auto logf = [&](double t) {
                double v = std::exp(t);
                return log_variance_prior(pr, v) + t - 0.5 * n * t - 0.5 * ssq / v;
            };
            double t = slice_sample(logf, std::log(std::max(current, 1e-12)), 1.0, rng);
            return std::exp(t);
        }
    }
}

struct GroupData {
    std::vector<int> subjects; // global subject ids
    std::vector<int> pairs;    // global pair ids
    std::vector<int> pair_subj_local;
    std::vector<std::vector<int>> subj_pairs_local;
    Eigen::MatrixXd z;        // Pg x Kd, NaN = missing
    Eigen::MatrixXd off_base; // Pg x Kd, visit offsets
    Eigen::VectorXd mu0_used; // Kd
    Eigen::MatrixXd phi;      // Kd x L
    Eigen::MatrixXd psi;      // Kd x M
    long n_obs = 0;
    bool complete = true; // no missing cells
};

struct ChainOut {
    Eigen::MatrixXd xi_sum, xi_sumsq;
    Eigen::MatrixXd zeta_sum, zeta_sumsq;
    Eigen::MatrixXd lambda_trace; // iters x (L+M)
    Eigen::VectorXd lambda1_mean, lambda2_mean;
    Eigen::VectorXd mu0_sum;
    double s2e_sum = 0;
    long n_draws = 0;
    double acc_xi = 1.0, acc_zeta = 1.0, acc_mu0 = 1.0;
    Eigen::MatrixXd xi_draws, zeta_draws;
};

class ChainSampler {
public:
    ChainSampler(const GroupData& gd, const ScoreModelSpec& spec, const McmcOptions& mcmc,
                 int group_id, int chain_id)
        : gd_(gd), spec_(spec), mcmc_(mcmc),
          rng_(derive_seed(mcmc.seed, static_cast<std::uint64_t>(chain_id) + 1,
                           static_cast<std::uint64_t>(group_id) + 1, 0x5c02e5)),
          L_(static_cast<int>(spec.phi.cols())), M_(static_cast<int>(spec.psi.cols())),
          Ig_(static_cast<int>(gd.subjects.size())), Pg_(static_cast<int>(gd.pairs.size())),
          Kd_(static_cast<int>(gd.mu0_used.size())) {}

    ChainOut run() {
        init_state();
        const int total = mcmc_.warmup + mcmc_.iters;
        ChainOut out;
        out.xi_sum = Eigen::MatrixXd::Zero(Ig_, L_);
        out.xi_sumsq = Eigen::MatrixXd::Zero(Ig_, L_);
        out.zeta_sum = Eigen::MatrixXd::Zero(Pg_, M_);
        out.zeta_sumsq = Eigen::MatrixXd::Zero(Pg_, M_);
        out.lambda_trace.resize(mcmc_.iters, L_ + M_);
        out.mu0_sum = Eigen::VectorXd::Zero(Kd_);
        if (mcmc_.store_score_draws) {
            out.xi_draws.resize(mcmc_.iters, Ig_ * L_);
            out.zeta_draws.resize(mcmc_.iters, Pg_ * M_);
        }

        long prop_xi = 0, acc_xi = 0, prop_zeta = 0, acc_zeta = 0;

        for (int iter = 0; iter < total; ++iter) {
            bool warm = iter < mcmc_.warmup;
            double gamma = std::min(0.3, 5.0 / std::sqrt(iter + 30.0));

            if (spec_.family == Family::gaussian) {
                gibbs_scores_gaussian();
            } else {
                rwm_scores(warm, gamma, prop_xi, acc_xi, prop_zeta, acc_zeta);
            }

            update_variances();
            if (spec_.family == Family::gaussian) update_residual();
            if (spec_.fixed_effect_mode == FixedEffectMode::refit_pointwise) update_mu0();

            if (!warm) {
                int t = iter - mcmc_.warmup;
                out.xi_sum += xi_;
                out.xi_sumsq += xi_.cwiseProduct(xi_);
                out.zeta_sum += zeta_;
                out.zeta_sumsq += zeta_.cwiseProduct(zeta_);
                for (int l = 0; l < L_; ++l) out.lambda_trace(t, l) = lam1_(l);
                for (int m = 0; m < M_; ++m) out.lambda_trace(t, L_ + m) = lam2_(m);
                out.mu0_sum += mu0c_;
                out.s2e_sum += s2e_;
                ++out.n_draws;
                if (mcmc_.store_score_draws) {
                    for (int i = 0; i < Ig_; ++i)
                        for (int l = 0; l < L_; ++l) out.xi_draws(t, i * L_ + l) = xi_(i, l);
                    for (int p = 0; p < Pg_; ++p)
                        for (int m = 0; m < M_; ++m) out.zeta_draws(t, p * M_ + m) = zeta_(p, m);
                }
            }
        }

        out.lambda1_mean = out.lambda_trace.leftCols(L_).colwise().mean();
        out.lambda2_mean = out.lambda_trace.rightCols(M_).colwise().mean();
        if (prop_xi > 0) out.acc_xi = static_cast<double>(acc_xi) / prop_xi;
        if (prop_zeta > 0) out.acc_zeta = static_cast<double>(acc_zeta) / prop_zeta;
        out.acc_mu0 = 1.0;
        return out;
    }

private:
    void init_state() {
        xi_ = (spec_.init_xi.rows() > 0)
                  ? gather_rows(spec_.init_xi, gd_.subjects)
                  : Eigen::MatrixXd::Zero(Ig_, L_);
        zeta_ = (spec_.init_zeta.rows() > 0)
                    ? gather_rows(spec_.init_zeta, gd_.pairs)
                    : Eigen::MatrixXd::Zero(Pg_, M_);
        auto init_lambda = [](const Eigen::VectorXd& init, int n, const VariancePrior& pr) {
            if (init.size() == n) return Eigen::VectorXd(init);
            double v = pr.family == VariancePriorFamily::fixed ? pr.value : 1.0;
            return Eigen::VectorXd(Eigen::VectorXd::Constant(n, v));
        };
        lam1_ = init_lambda(spec_.init_lambda1, L_, spec_.prior_level1);
        lam2_ = init_lambda(spec_.init_lambda2, M_, spec_.prior_level2);
        lam1_ = lam1_.cwiseMax(1e-8);
        lam2_ = lam2_.cwiseMax(1e-8);
        s2e_ = spec_.prior_residual.family == VariancePriorFamily::fixed
                   ? spec_.prior_residual.value
                   : 1.0;
        mu0c_ = gd_.mu0_used;
        A_ = xi_ * gd_.phi.transpose();
        B_ = zeta_ * gd_.psi.transpose();

        step_xi_ = Eigen::VectorXd::Constant(Ig_, std::log(2.4 / std::sqrt(std::max(1, L_))));
        step_zeta_ = Eigen::VectorXd::Constant(Pg_, std::log(2.4 / std::sqrt(std::max(1, M_))));
        dir_xi_ = lam1_.cwiseSqrt() * 0.5;
        dir_zeta_ = lam2_.cwiseSqrt() * 0.5;
        wf_n_xi_ = 0; wf_mean_xi_ = Eigen::VectorXd::Zero(L_); wf_m2_xi_ = Eigen::VectorXd::Zero(L_);
        wf_n_zeta_ = 0; wf_mean_zeta_ = Eigen::VectorXd::Zero(M_); wf_m2_zeta_ = Eigen::VectorXd::Zero(M_);

        if (spec_.family == Family::gaussian) prepare_gram();
    }

    static Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& src, const std::vector<int>& rows) {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), src.cols());
        for (std::size_t r = 0; r < rows.size(); ++r)
            out.row(static_cast<Eigen::Index>(r)) = src.row(rows[r]);
        return out;
    }

    // Log-likelihood change for pair p when the linear predictor shifts by delta.
    double pair_ll_diff(int p, int subj_local, const Eigen::VectorXd& delta) const {
        double d = 0;
        for (int k = 0; k < Kd_; ++k) {
            double z = gd_.z(p, k);
            if (std::isnan(z)) continue;
            double eta = gd_.off_base(p, k) + mu0c_(k) + A_(subj_local, k) + B_(p, k);
            d += point_ll(spec_.family, z, eta + delta(k)) - point_ll(spec_.family, z, eta);
        }
        return d;
    }

    void rwm_scores(bool warm, double gamma, long& prop_xi, long& acc_xi, long& prop_zeta,
                    long& acc_zeta) {
        Eigen::VectorXd dxi(L_), delta(Kd_);
        for (int i = 0; i < Ig_; ++i) {
            double step = std::exp(step_xi_(i));
            for (int l = 0; l < L_; ++l) dxi(l) = step * dir_xi_(l) * rng_.normal();
            delta.noalias() = gd_.phi * dxi;
            double logd = 0;
            for (int l = 0; l < L_; ++l) {
                double nv = xi_(i, l) + dxi(l);
                logd -= 0.5 * (nv * nv - xi_(i, l) * xi_(i, l)) / lam1_(l);
            }
            for (int p : gd_.subj_pairs_local[static_cast<std::size_t>(i)])
                logd += pair_ll_diff(p, i, delta);
            ++prop_xi;
            bool acc = std::log(rng_.uniform()) < logd;
            if (acc) {
                xi_.row(i) += dxi.transpose();
                A_.row(i) += delta.transpose();
                ++acc_xi;
            }
            if (warm) {
                step_xi_(i) += gamma * ((acc ? 1.0 : 0.0) - 0.3);
                welford(xi_.row(i), wf_n_xi_, wf_mean_xi_, wf_m2_xi_);
                if (wf_n_xi_ > 50)
                    dir_xi_ = (wf_m2_xi_ / (wf_n_xi_ - 1)).cwiseSqrt().cwiseMax(1e-3);
            }
        }

        Eigen::VectorXd dz(M_), deltaz(Kd_);
        for (int p = 0; p < Pg_; ++p) {
            double step = std::exp(step_zeta_(p));
            for (int m = 0; m < M_; ++m) dz(m) = step * dir_zeta_(m) * rng_.normal();
            deltaz.noalias() = gd_.psi * dz;
            double logd = 0;
            for (int m = 0; m < M_; ++m) {
                double nv = zeta_(p, m) + dz(m);
                logd -= 0.5 * (nv * nv - zeta_(p, m) * zeta_(p, m)) / lam2_(m);
            }
            int subj = gd_.pair_subj_local[static_cast<std::size_t>(p)];
            // shift applies only to this pair's cells
            for (int k = 0; k < Kd_; ++k) {
                double z = gd_.z(p, k);
                if (std::isnan(z)) continue;
                double eta = gd_.off_base(p, k) + mu0c_(k) + A_(subj, k) + B_(p, k);
                logd += point_ll(spec_.family, z, eta + deltaz(k)) - point_ll(spec_.family, z, eta);
            }
            ++prop_zeta;
            bool acc = std::log(rng_.uniform()) < logd;
            if (acc) {
                zeta_.row(p) += dz.transpose();
                B_.row(p) += deltaz.transpose();
                ++acc_zeta;
            }
            if (warm) {
                step_zeta_(p) += gamma * ((acc ? 1.0 : 0.0) - 0.3);
                welford(zeta_.row(p), wf_n_zeta_, wf_mean_zeta_, wf_m2_zeta_);
                if (wf_n_zeta_ > 50)
                    dir_zeta_ = (wf_m2_zeta_ / (wf_n_zeta_ - 1)).cwiseSqrt().cwiseMax(1e-3);
            }
        }
    }

    static void welford(const Eigen::RowVectorXd& x, long& n, Eigen::VectorXd& mean,
                        Eigen::VectorXd& m2) {
        ++n;
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            double d = x(j) - mean(j);
            mean(j) += d / static_cast<double>(n);
            m2(j) += d * (x(j) - mean(j));
        }
    }

    void prepare_gram() {
        Gphi_full_ = gd_.phi.transpose() * gd_.phi;
        Gpsi_full_ = gd_.psi.transpose() * gd_.psi;
        if (!gd_.complete) {
            Gphi_pair_.resize(static_cast<std::size_t>(Pg_));
            Gpsi_pair_.resize(static_cast<std::size_t>(Pg_));
            for (int p = 0; p < Pg_; ++p) {
                Eigen::MatrixXd gp = Eigen::MatrixXd::Zero(L_, L_);
                Eigen::MatrixXd gq = Eigen::MatrixXd::Zero(M_, M_);
                for (int k = 0; k < Kd_; ++k) {
                    if (std::isnan(gd_.z(p, k))) continue;
                    gp.noalias() += gd_.phi.row(k).transpose() * gd_.phi.row(k);
                    gq.noalias() += gd_.psi.row(k).transpose() * gd_.psi.row(k);
                }
                Gphi_pair_[static_cast<std::size_t>(p)] = gp;
                Gpsi_pair_[static_cast<std::size_t>(p)] = gq;
            }
        }
    }

    void gibbs_scores_gaussian() {
        Eigen::MatrixXd Q(L_, L_);
        Eigen::VectorXd rhs(L_), draw(L_);
        for (int i = 0; i < Ig_; ++i) {
            Q = Eigen::MatrixXd(lam1_.cwiseInverse().asDiagonal());
            rhs.setZero();
            for (int p : gd_.subj_pairs_local[static_cast<std::size_t>(i)]) {
                const Eigen::MatrixXd& G =
                    gd_.complete ? Gphi_full_ : Gphi_pair_[static_cast<std::size_t>(p)];
                Q += G / s2e_;
                for (int k = 0; k < Kd_; ++k) {
                    double z = gd_.z(p, k);
                    if (std::isnan(z)) continue;
                    double resid = z - gd_.off_base(p, k) - mu0c_(k) - B_(p, k);
                    rhs += gd_.phi.row(k).transpose() * (resid / s2e_);
                }
            }
            Eigen::LLT<Eigen::MatrixXd> llt(Q);
            Eigen::VectorXd mean = llt.solve(rhs);
            for (int l = 0; l < L_; ++l) draw(l) = rng_.normal();
            Eigen::VectorXd x = mean + llt.matrixU().solve(draw);
            xi_.row(i) = x.transpose();
            A_.row(i) = (gd_.phi * x).transpose();
        }

        Eigen::MatrixXd Q2(M_, M_);
        Eigen::VectorXd rhs2(M_), draw2(M_);
        for (int p = 0; p < Pg_; ++p) {
            int subj = gd_.pair_subj_local[static_cast<std::size_t>(p)];
            Q2 = Eigen::MatrixXd(lam2_.cwiseInverse().asDiagonal());
            const Eigen::MatrixXd& G =
                gd_.complete ? Gpsi_full_ : Gpsi_pair_[static_cast<std::size_t>(p)];
            Q2 += G / s2e_;
            rhs2.setZero();
            for (int k = 0; k < Kd_; ++k) {
                double z = gd_.z(p, k);
                if (std::isnan(z)) continue;
                double resid = z - gd_.off_base(p, k) - mu0c_(k) - A_(subj, k);
                rhs2 += gd_.psi.row(k).transpose() * (resid / s2e_);
            }
            Eigen::LLT<Eigen::MatrixXd> llt(Q2);
            Eigen::VectorXd mean = llt.solve(rhs2);
            for (int m = 0; m < M_; ++m) draw2(m) = rng_.normal();
            Eigen::VectorXd x = mean + llt.matrixU().solve(draw2);
            zeta_.row(p) = x.transpose();
            B_.row(p) = (gd_.psi * x).transpose();
        }
    }

    void update_variances() {
        for (int l = 0; l < L_; ++l) {
            double ssq = xi_.col(l).squaredNorm();
            lam1_(l) = update_variance(spec_.prior_level1, lam1_(l), ssq, Ig_, rng_);
        }
        for (int m = 0; m < M_; ++m) {
            double ssq = zeta_.col(m).squaredNorm();
            lam2_(m) = update_variance(spec_.prior_level2, lam2_(m), ssq, Pg_, rng_);
        }
    }

    void update_residual() {
        if (spec_.prior_residual.family == VariancePriorFamily::fixed) {
            s2e_ = spec_.prior_residual.value;
            return;
        }
        double rss = 0;
        long n = 0;
        for (int p = 0; p < Pg_; ++p) {
            int subj = gd_.pair_subj_local[static_cast<std::size_t>(p)];
            for (int k = 0; k < Kd_; ++k) {
                double z = gd_.z(p, k);
                if (std::isnan(z)) continue;
                double r = z - gd_.off_base(p, k) - mu0c_(k) - A_(subj, k) - B_(p, k);
                rss += r * r;
                ++n;
            }
        }
        s2e_ = update_variance(spec_.prior_residual, s2e_, rss, static_cast<double>(n), rng_);
    }

    void update_mu0() {
        const double tau2 = spec_.refit_rw_var;
        for (int k = 0; k < Kd_; ++k) {
            auto logf = [&](double m) {
                double lp = 0;
                if (k == 0) lp -= 0.5 * m * m / 100.0;
                if (k > 0) { double d = m - mu0c_(k - 1); lp -= 0.5 * d * d / tau2; }
                if (k + 1 < Kd_) { double d = mu0c_(k + 1) - m; lp -= 0.5 * d * d / tau2; }
                for (int p = 0; p < Pg_; ++p) {
                    double z = gd_.z(p, k);
                    if (std::isnan(z)) continue;
                    int subj = gd_.pair_subj_local[static_cast<std::size_t>(p)];
                    double eta = gd_.off_base(p, k) + m + A_(subj, k) + B_(p, k);
                    if (spec_.family == Family::gaussian) {
                        double r = z - eta;
                        lp -= 0.5 * r * r / s2e_;
                    } else {
                        lp += point_ll(spec_.family, z, eta);
                    }
                }
                return lp;
            };
            mu0c_(k) = slice_sample(logf, mu0c_(k), 0.5, rng_);
        }
    }

    const GroupData& gd_;
    const ScoreModelSpec& spec_;
    const McmcOptions& mcmc_;
    Rng rng_;
    int L_, M_, Ig_, Pg_, Kd_;

    Eigen::MatrixXd xi_, zeta_, A_, B_;
    Eigen::VectorXd lam1_, lam2_, mu0c_;
    double s2e_ = 1.0;

    Eigen::VectorXd step_xi_, step_zeta_, dir_xi_, dir_zeta_;
    long wf_n_xi_ = 0, wf_n_zeta_ = 0;
    Eigen::VectorXd wf_mean_xi_, wf_m2_xi_, wf_mean_zeta_, wf_m2_zeta_;

    Eigen::MatrixXd Gphi_full_, Gpsi_full_;
    std::vector<Eigen::MatrixXd> Gphi_pair_, Gpsi_pair_;
};

GroupData build_group(const MultilevelFunctionalDataset& data, const ScoreModelSpec& spec,
                      const std::vector<int>& used, const std::vector<int>& group_of_subject,
                      int g) {
    GroupData gd;
    const int Kd = static_cast<int>(used.size());
    std::vector<int> local_of_subject(static_cast<std::size_t>(data.n_subjects()), -1);
    for (int s = 0; s < data.n_subjects(); ++s) {
        if (group_of_subject[static_cast<std::size_t>(s)] != g) continue;
        local_of_subject[static_cast<std::size_t>(s)] = static_cast<int>(gd.subjects.size());
        gd.subjects.push_back(s);
    }
    gd.subj_pairs_local.resize(gd.subjects.size());
    for (int p = 0; p < data.n_pairs(); ++p) {
        int s = data.pairs[static_cast<std::size_t>(p)].subject;
        int loc = local_of_subject[static_cast<std::size_t>(s)];
        if (loc < 0) continue;
        gd.pair_subj_local.push_back(loc);
        gd.subj_pairs_local[static_cast<std::size_t>(loc)].push_back(
            static_cast<int>(gd.pairs.size()));
        gd.pairs.push_back(p);
    }

    const int Pg = static_cast<int>(gd.pairs.size());
    gd.z.resize(Pg, Kd);
    gd.off_base.resize(Pg, Kd);
    gd.mu0_used.resize(Kd);
    for (int t = 0; t < Kd; ++t) gd.mu0_used(t) = spec.mu0(used[static_cast<std::size_t>(t)]);
    const bool have_visit = spec.mu_visit.rows() > 0;
    for (int pl = 0; pl < Pg; ++pl) {
        int p = gd.pairs[static_cast<std::size_t>(pl)];
        int v = data.pairs[static_cast<std::size_t>(p)].visit;
        for (int t = 0; t < Kd; ++t) {
            int k = used[static_cast<std::size_t>(t)];
            double z = data.values(p, k);
            gd.z(pl, t) = z;
            gd.off_base(pl, t) = have_visit && v < spec.mu_visit.rows() ? spec.mu_visit(v, k) : 0.0;
            if (std::isnan(z)) gd.complete = false;
            else ++gd.n_obs;
        }
    }

    gd.phi.resize(Kd, spec.phi.cols());
    gd.psi.resize(Kd, spec.psi.cols());
    for (int t = 0; t < Kd; ++t) {
        gd.phi.row(t) = spec.phi.row(used[static_cast<std::size_t>(t)]);
        gd.psi.row(t) = spec.psi.row(used[static_cast<std::size_t>(t)]);
    }
    return gd;
}

} // namespace

ScorePosterior fit_scores(const MultilevelFunctionalDataset& data, const ScoreModelSpec& spec,
                          const McmcOptions& mcmc) {
    auto t0 = std::chrono::steady_clock::now();

    const int I = data.n_subjects();
    const int P = data.n_pairs();
    const int K = data.n_points();
    const int L = static_cast<int>(spec.phi.cols());
    const int M = static_cast<int>(spec.psi.cols());

    if (data.family != spec.family)
        throw Error("fit_scores: data family does not match the model spec");
    if (spec.phi.rows() != K || spec.psi.rows() != K || spec.mu0.size() != K)
        throw Error("fit_scores: eigenfunction/offset dimensions do not match the grid");

    // Downsample subset: strictly increasing, within range, >= max(L, M) points.
    std::vector<int> used = spec.downsample_indices;
    if (used.empty()) {
        used.resize(static_cast<std::size_t>(K));
        std::iota(used.begin(), used.end(), 0);
    } else {
        for (std::size_t t = 0; t < used.size(); ++t) {
            if (used[t] < 0 || used[t] >= K)
                throw InvalidDownsample("downsample index out of range");
            if (t > 0 && used[t] <= used[t - 1])
                throw InvalidDownsample("downsample indices must be strictly increasing");
        }
        if (static_cast<int>(used.size()) < std::max(L, M))
            throw InvalidDownsample("downsample subset smaller than the component count");
    }

    // Orthonormality precondition (Riemann inner product on the full grid).
    const double ds = data.grid.ds();
    auto check_orth = [&](const Eigen::MatrixXd& F, const char* name) {
        if (F.cols() == 0) return;
        Eigen::MatrixXd G = F.transpose() * F * ds;
        double dev = (G - Eigen::MatrixXd::Identity(F.cols(), F.cols())).cwiseAbs().maxCoeff();
        if (dev > 1e-3)
            throw Error(std::string("fit_scores: ") + name +
                        " not orthonormal under the grid inner product (deviation " +
                        std::to_string(dev) + ")");
    };
    check_orth(spec.phi, "level-1 eigenfunctions");
    check_orth(spec.psi, "level-2 eigenfunctions");

    std::vector<int> group_of_subject = spec.partition;
    if (group_of_subject.empty()) group_of_subject.assign(static_cast<std::size_t>(I), 0);
    if (static_cast<int>(group_of_subject.size()) != I)
        throw Error("fit_scores: partition size does not match the subject count");
    int G = 0;
    for (int g : group_of_subject) G = std::max(G, g + 1);

    std::vector<GroupData> groups;
    groups.reserve(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g) groups.push_back(build_group(data, spec, used, group_of_subject, g));

    // Independent (group, chain) tasks.
    const int tasks = G * mcmc.chains;
    std::vector<ChainOut> outs(static_cast<std::size_t>(tasks));
    parallel_for(static_cast<std::size_t>(tasks), mcmc.workers, [&](std::size_t t) {
        int g = static_cast<int>(t) / mcmc.chains;
        int c = static_cast<int>(t) % mcmc.chains;
        ChainSampler sampler(groups[static_cast<std::size_t>(g)], spec, mcmc, g, c);
        outs[t] = sampler.run();
    });

    ScorePosterior post;
    post.xi_mean = Eigen::MatrixXd::Zero(I, L);
    post.xi_sd = Eigen::MatrixXd::Zero(I, L);
    post.zeta_mean = Eigen::MatrixXd::Zero(P, M);
    post.zeta_sd = Eigen::MatrixXd::Zero(P, M);
    post.lambda1_mean = Eigen::VectorXd::Zero(L);
    post.lambda2_mean = Eigen::VectorXd::Zero(M);
    post.lambda1_sd = Eigen::VectorXd::Zero(L);
    post.lambda2_sd = Eigen::VectorXd::Zero(M);
    post.rhat_lambda1 = Eigen::VectorXd::Ones(L);
    post.rhat_lambda2 = Eigen::VectorXd::Ones(M);
    post.group_of_subject = group_of_subject;
    post.used_indices = used;

    double lam1_wsum = 0, lam2_wsum = 0;
    Eigen::VectorXd lam1_acc = Eigen::VectorXd::Zero(L), lam2_acc = Eigen::VectorXd::Zero(M);
    Eigen::VectorXd lam1_sq = Eigen::VectorXd::Zero(L), lam2_sq = Eigen::VectorXd::Zero(M);
    long lam_draws = 0;
    double s2e_acc = 0;
    long s2e_draws = 0;

    Eigen::VectorXd mu0_hat = spec.mu0;
    Eigen::VectorXd mu0_acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(used.size()));
    long mu0_draws = 0;

    for (int g = 0; g < G; ++g) {
        const auto& gd = groups[static_cast<std::size_t>(g)];
        const int Ig = static_cast<int>(gd.subjects.size());
        const int Pg = static_cast<int>(gd.pairs.size());

        Eigen::MatrixXd xs = Eigen::MatrixXd::Zero(Ig, L), xq = Eigen::MatrixXd::Zero(Ig, L);
        Eigen::MatrixXd zs = Eigen::MatrixXd::Zero(Pg, M), zq = Eigen::MatrixXd::Zero(Pg, M);
        long n = 0;
        Eigen::VectorXd g_lam1 = Eigen::VectorXd::Zero(L), g_lam2 = Eigen::VectorXd::Zero(M);

        for (int c = 0; c < mcmc.chains; ++c) {
            const auto& o = outs[static_cast<std::size_t>(g * mcmc.chains + c)];
            xs += o.xi_sum; xq += o.xi_sumsq;
            zs += o.zeta_sum; zq += o.zeta_sumsq;
            n += o.n_draws;
            g_lam1 += o.lambda1_mean;
            g_lam2 += o.lambda2_mean;
            for (Eigen::Index t = 0; t < o.lambda_trace.rows(); ++t) {
                for (int l = 0; l < L; ++l) {
                    lam1_acc(l) += o.lambda_trace(t, l);
                    lam1_sq(l) += o.lambda_trace(t, l) * o.lambda_trace(t, l);
                }
                for (int m = 0; m < M; ++m) {
                    lam2_acc(m) += o.lambda_trace(t, L + m);
                    lam2_sq(m) += o.lambda_trace(t, L + m) * o.lambda_trace(t, L + m);
                }
                ++lam_draws;
            }
            s2e_acc += o.s2e_sum;
            s2e_draws += o.n_draws;
            mu0_acc += o.mu0_sum;
            mu0_draws += o.n_draws;

            ChainDiagnostics cd;
            cd.group = g;
            cd.chain = c;
            cd.accept_rate_xi = o.acc_xi;
            cd.accept_rate_zeta = o.acc_zeta;
            cd.accept_rate_mu0 = o.acc_mu0;
            post.chain_diagnostics.push_back(cd);
            post.lambda_traces.push_back(o.lambda_trace);
            if (mcmc.store_score_draws) {
                post.xi_draws.push_back(o.xi_draws);
                post.zeta_draws.push_back(o.zeta_draws);
            }
        }
        post.group_subjects.push_back(gd.subjects);
        post.group_pairs.push_back(gd.pairs);

        g_lam1 /= mcmc.chains;
        g_lam2 /= mcmc.chains;
        post.group_lambda1.push_back(g_lam1);
        post.group_lambda2.push_back(g_lam2);
        lam1_wsum += Ig;
        lam2_wsum += Pg;

        auto nd = static_cast<double>(n);
        for (int il = 0; il < Ig; ++il) {
            int s = gd.subjects[static_cast<std::size_t>(il)];
            for (int l = 0; l < L; ++l) {
                double mean = xs(il, l) / nd;
                double var = std::max(0.0, xq(il, l) / nd - mean * mean);
                post.xi_mean(s, l) = mean;
                post.xi_sd(s, l) = std::sqrt(var * nd / std::max(1.0, nd - 1));
            }
        }
        for (int pl = 0; pl < Pg; ++pl) {
            int p = gd.pairs[static_cast<std::size_t>(pl)];
            for (int m = 0; m < M; ++m) {
                double mean = zs(pl, m) / nd;
                double var = std::max(0.0, zq(pl, m) / nd - mean * mean);
                post.zeta_mean(p, m) = mean;
                post.zeta_sd(p, m) = std::sqrt(var * nd / std::max(1.0, nd - 1));
            }
        }

        // Split R-hat per variance component from this group's chains.
        for (int l = 0; l < L; ++l) {
            std::vector<Eigen::VectorXd> tr;
            for (int c = 0; c < mcmc.chains; ++c)
                tr.push_back(outs[static_cast<std::size_t>(g * mcmc.chains + c)]
                                 .lambda_trace.col(l));
            post.rhat_lambda1(l) = std::max(post.rhat_lambda1(l), split_rhat(tr));
        }
        for (int m = 0; m < M; ++m) {
            std::vector<Eigen::VectorXd> tr;
            for (int c = 0; c < mcmc.chains; ++c)
                tr.push_back(outs[static_cast<std::size_t>(g * mcmc.chains + c)]
                                 .lambda_trace.col(L + m));
            post.rhat_lambda2(m) = std::max(post.rhat_lambda2(m), split_rhat(tr));
        }
    }

    // Pooled eigenvalue estimates: subject-weighted means of per-group posteriors.
    for (int g = 0; g < G; ++g) {
        double w1 = static_cast<double>(post.group_subjects[static_cast<std::size_t>(g)].size()) /
                    lam1_wsum;
        double w2 = static_cast<double>(post.group_pairs[static_cast<std::size_t>(g)].size()) /
                    lam2_wsum;
        post.lambda1_mean += w1 * post.group_lambda1[static_cast<std::size_t>(g)];
        post.lambda2_mean += w2 * post.group_lambda2[static_cast<std::size_t>(g)];
    }
    if (lam_draws > 1) {
        for (int l = 0; l < L; ++l) {
            double m = lam1_acc(l) / lam_draws;
            post.lambda1_sd(l) = std::sqrt(std::max(0.0, lam1_sq(l) / lam_draws - m * m));
        }
        for (int m = 0; m < M; ++m) {
            double mm = lam2_acc(m) / lam_draws;
            post.lambda2_sd(m) = std::sqrt(std::max(0.0, lam2_sq(m) / lam_draws - mm * mm));
        }
    }
    post.sigma2_eps_mean = s2e_draws > 0 ? s2e_acc / s2e_draws : 0.0;
    post.nonconvergence_warning = (L > 0 && post.rhat_lambda1.maxCoeff() > 1.1) ||
                                  (M > 0 && post.rhat_lambda2.maxCoeff() > 1.1);

    if (spec.fixed_effect_mode == FixedEffectMode::refit_pointwise && mu0_draws > 0) {
        for (std::size_t t = 0; t < used.size(); ++t)
            mu0_hat(used[t]) = mu0_acc(static_cast<Eigen::Index>(t)) / mu0_draws;
    }
    post.mu0_hat = mu0_hat;

    // Level-2 score SD per subject and component (sample SD over visits of the
    // posterior-mean scores).
    post.l2e_sd = Eigen::MatrixXd::Constant(I, M, std::numeric_limits<double>::quiet_NaN());
    for (int s = 0; s < I; ++s) {
        const auto& ps = data.pairs_of_subject[static_cast<std::size_t>(s)];
        if (ps.size() < 2) continue;
        for (int m = 0; m < M; ++m) {
            double mean = 0;
            for (int p : ps) mean += post.zeta_mean(p, m);
            mean /= static_cast<double>(ps.size());
            double ss = 0;
            for (int p : ps) {
                double d = post.zeta_mean(p, m) - mean;
                ss += d * d;
            }
            post.l2e_sd(s, m) = std::sqrt(ss / static_cast<double>(ps.size() - 1));
        }
    }

    // Reconstruction at posterior means on the full grid.
    post.eta_hat.resize(P, K);
    const bool have_visit = spec.mu_visit.rows() > 0;
    for (int p = 0; p < P; ++p) {
        int s = data.pairs[static_cast<std::size_t>(p)].subject;
        int v = data.pairs[static_cast<std::size_t>(p)].visit;
        for (int k = 0; k < K; ++k) {
            double eta = mu0_hat(k);
            if (have_visit && v < spec.mu_visit.rows()) eta += spec.mu_visit(v, k);
            for (int l = 0; l < L; ++l) eta += post.xi_mean(s, l) * spec.phi(k, l);
            for (int m = 0; m < M; ++m) eta += post.zeta_mean(p, m) * spec.psi(k, m);
            post.eta_hat(p, k) = eta;
        }
    }

    post.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return post;
}

} // namespace gmfpca
