#include "gmfpca/mfpca.hpp"
#include "gmfpca/errors.hpp"

#include <algorithm>
#include <cmath>

namespace gmfpca {

CovarianceEstimates estimate_covariances(const LatentPredictorMatrix& eta, bool use_visit_means) {
    const int P = eta.n_pairs();
    const int K = eta.n_points();
    const int S = eta.n_subjects();
    if (P == 0) throw Error("estimate_covariances: empty latent predictor matrix");

    long cross_pairs = 0;
    std::vector<std::vector<int>> pairs_of_subject(static_cast<std::size_t>(S));
    for (int p = 0; p < P; ++p)
        pairs_of_subject[static_cast<std::size_t>(eta.pair_subject[static_cast<std::size_t>(p)])]
            .push_back(p);
    for (const auto& ps : pairs_of_subject) {
        long j = static_cast<long>(ps.size());
        cross_pairs += j * (j - 1);
    }
    if (cross_pairs == 0)
        throw Level2Inestimable("no subject has two visits; the subject-level covariance "
                                "cannot be separated");

    CovarianceEstimates out;
    out.mu0 = eta.eta.colwise().mean();

    int V = static_cast<int>(eta.mu_visit.rows());
    out.mu_visit = Eigen::MatrixXd::Zero(V, K);
    if (use_visit_means) {
        Eigen::VectorXi counts = Eigen::VectorXi::Zero(V);
        for (int p = 0; p < P; ++p) {
            int v = eta.pair_visit[static_cast<std::size_t>(p)];
            out.mu_visit.row(v) += eta.eta.row(p);
            counts(v) += 1;
        }
        for (int v = 0; v < V; ++v)
            if (counts(v) > 0)
                out.mu_visit.row(v) = out.mu_visit.row(v) / counts(v) - out.mu0.transpose();
    }

    // Centered curves, pairs x K.
    Eigen::MatrixXd X = eta.eta;
    for (int p = 0; p < P; ++p) {
        X.row(p) -= out.mu0.transpose();
        if (use_visit_means) X.row(p) -= out.mu_visit.row(eta.pair_visit[static_cast<std::size_t>(p)]);
    }

    Eigen::MatrixXd M2 = X.transpose() * X; // sum of per-curve outer products
    out.K_total = M2 / static_cast<double>(P);

    // Within-subject cross-visit products via per-subject curve sums:
    // sum_{p != p'} X_p X_p'^T = S_i S_i^T - sum_p X_p X_p^T.
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(S, K);
    for (int p = 0; p < P; ++p)
        sums.row(eta.pair_subject[static_cast<std::size_t>(p)]) += X.row(p);
    Eigen::MatrixXd M1 = sums.transpose() * sums;
    out.K_a = (M1 - M2) / static_cast<double>(cross_pairs);

    out.K_a = 0.5 * (out.K_a + out.K_a.transpose()).eval();
    out.K_total = 0.5 * (out.K_total + out.K_total.transpose()).eval();
    out.K_b = out.K_total - out.K_a;
    return out;
}

double sssod(const std::vector<double>& f) {
    return sssod(Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size())));
}

double sssod(const Eigen::VectorXd& f) {
    const auto n = f.size();
    if (n < 3) throw GridTooSmall("sssod needs at least 3 points, got " + std::to_string(n));
    double acc = 0;
    for (Eigen::Index k = 0; k + 2 < n; ++k) {
        double d2 = f(k + 2) - 2.0 * f(k + 1) + f(k);
        acc += d2 * d2;
    }
    return static_cast<double>(n) * static_cast<double>(n) * acc;
}

namespace {

inline double epanechnikov(double u) {
    double a = std::fabs(u);
    return a >= 1.0 ? 0.0 : 0.75 * (1.0 - a * a);
}

} // namespace

Eigen::MatrixXd kernel_smooth_surface(const Eigen::MatrixXd& S, double bandwidth, bool cyclic,
                                      const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>* exclude) {
    const int K = static_cast<int>(S.rows());
    if (bandwidth <= 0) return S;
    const int r = static_cast<int>(std::floor(bandwidth));
    // Kernel support is (-bw, bw); scale so offset bw lands on the boundary.
    const double scale = bandwidth + 1e-12;

    std::vector<double> kw(static_cast<std::size_t>(2 * r + 1));
    for (int d = -r; d <= r; ++d) kw[static_cast<std::size_t>(d + r)] = epanechnikov(d / scale);

    Eigen::MatrixXd out(K, K);
    for (int i = 0; i < K; ++i) {
        for (int j = 0; j < K; ++j) {
            double acc = 0, wsum = 0;
            for (int di = -r; di <= r; ++di) {
                int ii = i + di;
                if (cyclic) ii = ((ii % K) + K) % K;
                else if (ii < 0 || ii >= K) continue;
                double wi = kw[static_cast<std::size_t>(di + r)];
                if (wi == 0) continue;
                for (int dj = -r; dj <= r; ++dj) {
                    int jj = j + dj;
                    if (cyclic) jj = ((jj % K) + K) % K;
                    else if (jj < 0 || jj >= K) continue;
                    if (exclude && (*exclude)(ii, jj)) continue;
                    double w = wi * kw[static_cast<std::size_t>(dj + r)];
                    if (w == 0) continue;
                    acc += w * S(ii, jj);
                    wsum += w;
                }
            }
            out(i, j) = wsum > 0 ? acc / wsum : S(i, j);
        }
    }
    return out;
}

void apply_sign_convention(Eigen::MatrixXd& columns) {
    for (Eigen::Index c = 0; c < columns.cols(); ++c) {
        Eigen::Index imax = 0;
        double amax = -1;
        for (Eigen::Index i = 0; i < columns.rows(); ++i) {
            double a = std::fabs(columns(i, c));
            if (a > amax) { amax = a; imax = i; }
        }
        if (columns(imax, c) < 0) columns.col(c) = -columns.col(c);
    }
}

namespace {

struct LevelEigen {
    Eigen::MatrixXd funcs; // K x n_retained
    Eigen::VectorXd vals;
    Eigen::VectorXd pve_cum;
    double total = 0;
};

LevelEigen eigen_level(const Eigen::MatrixXd& C, double ds, double pve_threshold,
                       int max_components) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    if (es.info() != Eigen::Success) throw Error("eigendecomposition failed");
    const int K = static_cast<int>(C.rows());

    // Eigen sorts ascending; walk from the top, clip negatives to zero.
    std::vector<double> vals;
    std::vector<int> idx;
    for (int i = K - 1; i >= 0; --i) {
        double lam = es.eigenvalues()(i) * ds;
        if (lam <= 0) break;
        vals.push_back(lam);
        idx.push_back(i);
    }
    double total = 0;
    for (double v : vals) total += v;

    int keep = 0;
    double cum = 0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        cum += vals[i];
        keep = static_cast<int>(i) + 1;
        if (total > 0 && cum / total >= pve_threshold) break;
    }
    keep = std::min(keep, max_components);

    LevelEigen out;
    out.total = total;
    out.funcs.resize(K, keep);
    out.vals.resize(keep);
    out.pve_cum.resize(keep);
    double c2 = 0;
    const double inv_sqrt_ds = 1.0 / std::sqrt(ds);
    for (int i = 0; i < keep; ++i) {
        out.vals(i) = vals[static_cast<std::size_t>(i)];
        out.funcs.col(i) = es.eigenvectors().col(idx[static_cast<std::size_t>(i)]) * inv_sqrt_ds;
        c2 += vals[static_cast<std::size_t>(i)];
        out.pve_cum(i) = total > 0 ? c2 / total : 0.0;
    }
    apply_sign_convention(out.funcs);
    return out;
}

void check_symmetric(const Eigen::MatrixXd& M, const char* name) {
    if (M.rows() != M.cols())
        throw InvalidCovariance(std::string(name) + " is not square");
    double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
    double asym = (M - M.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-8 * scale)
        throw InvalidCovariance(std::string(name) + " is not symmetric (max asymmetry " +
                                std::to_string(asym) + ")");
}

} // namespace

MfpcaDecomposition smooth_and_eigendecompose(const Eigen::MatrixXd& K_a,
                                             const Eigen::MatrixXd& K_b,
                                             const SamplingGrid& grid,
                                             const MfpcaOptions& options) {
    check_symmetric(K_a, "K_a");
    check_symmetric(K_b, "K_b");
    if (K_a.rows() != grid.size() || K_b.rows() != grid.size())
        throw InvalidCovariance("covariance dimension does not match the grid");

    const int K = grid.size();
    Eigen::MatrixXd Sa = K_a, Sb = K_b;
    if (options.bandwidth > 0) {
        Sa = kernel_smooth_surface(K_a, options.bandwidth, grid.cyclic);
        if (options.drop_level2_diagonal) {
            Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
                Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(K, K, false);
            for (int k = 0; k < K; ++k) mask(k, k) = true;
            Sb = kernel_smooth_surface(K_b, options.bandwidth, grid.cyclic, &mask);
        } else {
            Sb = kernel_smooth_surface(K_b, options.bandwidth, grid.cyclic);
        }
        Sa = 0.5 * (Sa + Sa.transpose()).eval();
        Sb = 0.5 * (Sb + Sb.transpose()).eval();
    } else if (options.drop_level2_diagonal) {
        // No smoother to impute from; keep the raw diagonal.
    }

    const double ds = grid.ds();
    MfpcaDecomposition dec;
    dec.ds = ds;

    LevelEigen l1 = eigen_level(Sa, ds, options.pve_threshold, options.max_components);
    LevelEigen l2 = eigen_level(Sb, ds, options.pve_threshold, options.max_components);

    dec.phi = l1.funcs;
    dec.lambda1 = l1.vals;
    dec.pve1_cum = l1.pve_cum;
    dec.level1_total = l1.total;
    dec.psi = l2.funcs;
    dec.lambda2 = l2.vals;
    dec.pve2_cum = l2.pve_cum;
    dec.level2_total = l2.total;

    for (int l = 0; l < dec.n_level1(); ++l) dec.sssod1.push_back(sssod(Eigen::VectorXd(dec.phi.col(l))));
    for (int m = 0; m < dec.n_level2(); ++m) dec.sssod2.push_back(sssod(Eigen::VectorXd(dec.psi.col(m))));

    dec.mu0 = Eigen::VectorXd::Zero(K);
    dec.mu_visit = Eigen::MatrixXd::Zero(0, K);
    return dec;
}

} // namespace gmfpca
