#pragma once

// Test-only dense solvers kept independent of the library's fitting paths.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

namespace oracles {

// Row-expanded two-level gaussian mixed model: y = X beta + Za a + Zb b + eps.
struct DenseMixedModel {
    Eigen::VectorXd y;
    Eigen::MatrixXd X;
    Eigen::MatrixXd Za;
    Eigen::MatrixXd Zb;
};

struct HendersonSolution {
    Eigen::VectorXd beta;
    Eigen::VectorXd a;
    Eigen::VectorXd b;
};

// Mixed-model equations at fixed variance components.
inline HendersonSolution henderson_solve(const DenseMixedModel& m, double s2a, double s2b,
                                         double s2e) {
    const auto p = m.X.cols(), S = m.Za.cols(), C = m.Zb.cols();
    const auto dim = p + S + C;
    Eigen::MatrixXd W(m.y.size(), dim);
    W << m.X, m.Za, m.Zb;
    Eigen::MatrixXd A = W.transpose() * W;
    for (Eigen::Index i = 0; i < S; ++i) A(p + i, p + i) += s2e / s2a;
    for (Eigen::Index i = 0; i < C; ++i) A(p + S + i, p + S + i) += s2e / s2b;
    Eigen::VectorXd rhs = W.transpose() * m.y;
    Eigen::VectorXd sol = A.ldlt().solve(rhs);
    HendersonSolution out;
    out.beta = sol.head(p);
    out.a = sol.segment(p, S);
    out.b = sol.tail(C);
    return out;
}

// Exact gaussian marginal log-likelihood with the fixed effects profiled out,
// evaluated through the dense marginal covariance.
inline double gaussian_profiled_marginal(const DenseMixedModel& m, double s2a, double s2b,
                                         double s2e) {
    const auto n = m.y.size();
    Eigen::MatrixXd V = s2e * Eigen::MatrixXd::Identity(n, n);
    V.noalias() += s2a * m.Za * m.Za.transpose();
    V.noalias() += s2b * m.Zb * m.Zb.transpose();
    Eigen::LLT<Eigen::MatrixXd> chol(V);
    Eigen::MatrixXd Vinv_X = chol.solve(m.X);
    Eigen::VectorXd beta =
        (m.X.transpose() * Vinv_X).ldlt().solve(Vinv_X.transpose() * m.y);
    Eigen::VectorXd r = m.y - m.X * beta;
    double quad = r.dot(chol.solve(r));
    double logdet = 0;
    for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(chol.matrixL()(i, i));
    return -0.5 * (n * std::log(2.0 * M_PI) + logdet + quad);
}

// Closed-form score posterior for the gaussian identity-link model with fixed
// variance components: z_pk = offset_pk + phi_k' xi_{s(p)} + psi_k' zeta_p + eps.
struct ConjugateScorePosterior {
    Eigen::MatrixXd xi_mean, xi_sd;     // I x L
    Eigen::MatrixXd zeta_mean, zeta_sd; // P x M
};

inline ConjugateScorePosterior conjugate_scores(
    const Eigen::MatrixXd& z, const Eigen::MatrixXd& offset, const Eigen::MatrixXd& phi,
    const Eigen::MatrixXd& psi, const std::vector<int>& pair_subject, int n_subjects,
    const Eigen::VectorXd& lam1, const Eigen::VectorXd& lam2, double s2e) {
    const int P = static_cast<int>(z.rows());
    const int K = static_cast<int>(z.cols());
    const int L = static_cast<int>(phi.cols());
    const int M = static_cast<int>(psi.cols());
    const int dim = n_subjects * L + P * M;

    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
    for (int s = 0; s < n_subjects; ++s)
        for (int l = 0; l < L; ++l) Q(s * L + l, s * L + l) = 1.0 / lam1(l);
    for (int p = 0; p < P; ++p)
        for (int m = 0; m < M; ++m) {
            int j = n_subjects * L + p * M + m;
            Q(j, j) = 1.0 / lam2(m);
        }

    std::vector<int> cols(static_cast<std::size_t>(L + M));
    Eigen::VectorXd vals(L + M);
    for (int p = 0; p < P; ++p) {
        int s = pair_subject[static_cast<std::size_t>(p)];
        for (int k = 0; k < K; ++k) {
            if (std::isnan(z(p, k))) continue;
            for (int l = 0; l < L; ++l) {
                cols[static_cast<std::size_t>(l)] = s * L + l;
                vals(l) = phi(k, l);
            }
            for (int m = 0; m < M; ++m) {
                cols[static_cast<std::size_t>(L + m)] = n_subjects * L + p * M + m;
                vals(L + m) = psi(k, m);
            }
            double resid = z(p, k) - offset(p, k);
            for (int u = 0; u < L + M; ++u) {
                rhs(cols[static_cast<std::size_t>(u)]) += vals(u) * resid / s2e;
                for (int v = 0; v < L + M; ++v)
                    Q(cols[static_cast<std::size_t>(u)], cols[static_cast<std::size_t>(v)]) +=
                        vals(u) * vals(v) / s2e;
            }
        }
    }

    Eigen::LLT<Eigen::MatrixXd> chol(Q);
    Eigen::VectorXd mean = chol.solve(rhs);
    Eigen::MatrixXd cov = chol.solve(Eigen::MatrixXd::Identity(dim, dim));

    ConjugateScorePosterior out;
    out.xi_mean.resize(n_subjects, L);
    out.xi_sd.resize(n_subjects, L);
    out.zeta_mean.resize(P, M);
    out.zeta_sd.resize(P, M);
    for (int s = 0; s < n_subjects; ++s)
        for (int l = 0; l < L; ++l) {
            out.xi_mean(s, l) = mean(s * L + l);
            out.xi_sd(s, l) = std::sqrt(cov(s * L + l, s * L + l));
        }
    for (int p = 0; p < P; ++p)
        for (int m = 0; m < M; ++m) {
            int j = n_subjects * L + p * M + m;
            out.zeta_mean(p, m) = mean(j);
            out.zeta_sd(p, m) = std::sqrt(cov(j, j));
        }
    return out;
}

} // namespace oracles
