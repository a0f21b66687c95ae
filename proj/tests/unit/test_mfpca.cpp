#include <doctest.h>

#include "gmfpca/mfpca.hpp"
#include "gmfpca/rng.hpp"
#include "gmfpca/simulation.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>

using namespace gmfpca;

#ifndef TEST_DATA_DIR
#define TEST_DATA_DIR "tests/data"
#endif

namespace {

LatentPredictorMatrix eta_from_matrix(const Eigen::MatrixXd& eta,
                                      const std::vector<int>& pair_subject) {
    LatentPredictorMatrix m;
    m.eta = eta;
    m.pair_subject = pair_subject;
    m.pair_visit.assign(pair_subject.size(), 0);
    int S = 0;
    for (int s : pair_subject) S = std::max(S, s + 1);
    m.a = Eigen::MatrixXd::Zero(S, eta.cols());
    m.b = Eigen::MatrixXd::Zero(eta.rows(), eta.cols());
    m.mu0 = Eigen::VectorXd::Zero(eta.cols());
    m.mu_visit = Eigen::MatrixXd::Zero(1, eta.cols());
    m.provenance.assign(static_cast<std::size_t>(eta.cols()), FitStatus::converged);
    return m;
}

// Riemann-orthonormalization (modified Gram-Schmidt) of sampled functions.
Eigen::MatrixXd orthonormalize(Eigen::MatrixXd F, double ds) {
    for (Eigen::Index c = 0; c < F.cols(); ++c) {
        for (Eigen::Index p = 0; p < c; ++p)
            F.col(c) -= (F.col(c).dot(F.col(p)) * ds) * F.col(p);
        F.col(c) /= std::sqrt(F.col(c).squaredNorm() * ds);
    }
    return F;
}

} // namespace

TEST_CASE("constant latent predictors give zero covariances") {
    Eigen::MatrixXd eta = Eigen::MatrixXd::Constant(6, 5, 3.7);
    auto m = eta_from_matrix(eta, {0, 0, 1, 1, 2, 2});
    auto cov = estimate_covariances(m);
    CHECK(cov.K_a.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK(cov.K_b.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK(cov.mu0(0) == doctest::Approx(3.7));
}

TEST_CASE("moment separation matches the hand-computed vector file") {
    std::ifstream in(std::string(TEST_DATA_DIR) + "/mom_tiny.json");
    REQUIRE(in);
    auto j = nlohmann::json::parse(in);

    Eigen::MatrixXd eta(4, 2);
    for (int p = 0; p < 4; ++p)
        for (int k = 0; k < 2; ++k) eta(p, k) = j["eta"][p][k].get<double>();
    std::vector<int> ps = j["pair_subject"].get<std::vector<int>>();
    auto cov = estimate_covariances(eta_from_matrix(eta, ps));

    for (int k = 0; k < 2; ++k)
        CHECK(cov.mu0(k) == doctest::Approx(j["mu"][k].get<double>()));
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            CHECK(cov.K_total(r, c) == doctest::Approx(j["K_total"][r][c].get<double>()));
            CHECK(cov.K_a(r, c) == doctest::Approx(j["K_a"][r][c].get<double>()));
            CHECK(cov.K_b(r, c) == doctest::Approx(j["K_b"][r][c].get<double>()));
        }
}

TEST_CASE("total covariance decomposes exactly") {
    Rng rng(33);
    Eigen::MatrixXd eta(10, 7);
    for (int p = 0; p < 10; ++p)
        for (int k = 0; k < 7; ++k) eta(p, k) = rng.normal();
    auto cov = estimate_covariances(eta_from_matrix(eta, {0, 0, 1, 1, 2, 2, 3, 3, 4, 4}));
    CHECK((cov.K_total - cov.K_a - cov.K_b).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK((cov.K_a - cov.K_a.transpose()).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("no repeated visits makes level 2 inestimable") {
    Eigen::MatrixXd eta = Eigen::MatrixXd::Random(4, 5);
    auto m = eta_from_matrix(eta, {0, 1, 2, 3});
    CHECK_THROWS_AS(estimate_covariances(m), Level2Inestimable);
}

TEST_CASE("subject covariance estimate approaches the analytic surface") {
    // Latent curves drawn directly from the two-level expansion with trig
    // bases; the cross-visit moment estimator should land within 10% of
    // Sum_l lambda_l phi_l(s) phi_l(t) in aggregate.
    const int I = 1000, J = 10, K = 101;
    auto grid = SamplingGrid::uniform(K, 0.0, 0.01, false);
    Eigen::MatrixXd phi = basis_matrix(1, 1, grid.points, 4);
    Eigen::MatrixXd psi = basis_matrix(1, 2, grid.points, 4);

    Rng rng(2024);
    Eigen::MatrixXd eta(I * J, K);
    std::vector<int> ps(static_cast<std::size_t>(I * J));
    for (int i = 0; i < I; ++i) {
        Eigen::Vector4d xi;
        for (int l = 0; l < 4; ++l) xi(l) = rng.normal(0, std::sqrt(std::pow(0.5, l)));
        for (int j = 0; j < J; ++j) {
            Eigen::Vector4d zeta;
            for (int m = 0; m < 4; ++m) zeta(m) = rng.normal(0, std::sqrt(std::pow(0.5, m)));
            int p = i * J + j;
            ps[static_cast<std::size_t>(p)] = i;
            eta.row(p) = (phi * xi + psi * zeta).transpose();
        }
    }
    auto cov = estimate_covariances(eta_from_matrix(eta, ps));

    Eigen::MatrixXd truth = Eigen::MatrixXd::Zero(K, K);
    for (int l = 0; l < 4; ++l)
        truth += std::pow(0.5, l) * phi.col(l) * phi.col(l).transpose();
    double err = (cov.K_a - truth).cwiseAbs().mean();
    double scale = truth.cwiseAbs().mean();
    CHECK(err / scale < 0.10);
}

TEST_CASE("analytic covariance recovery is exact up to solver precision") {
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
    opt.bandwidth = 0; // raw eigendecomposition
    auto t0 = std::chrono::steady_clock::now();
    auto dec = smooth_and_eigendecompose(Ka, Kb, grid, opt);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 1.0);

    REQUIRE(dec.n_level1() == 4);
    REQUIRE(dec.n_level2() == 4);
    for (int r = 0; r < 4; ++r) {
        CHECK(dec.lambda1(r) == doctest::Approx(lambda(r)).epsilon(1e-6));
        CHECK(dec.lambda2(r) == doctest::Approx(lambda(r)).epsilon(1e-6));
        CHECK(ise(dec.phi.col(r), phi.col(r), ds) < 1e-3);
        CHECK(ise(dec.psi.col(r), psi.col(r), ds) < 1e-3);
    }
    // eigenvalues non-increasing, orthonormal within 1e-6
    for (int r = 1; r < 4; ++r) CHECK(dec.lambda1(r) <= dec.lambda1(r - 1));
    Eigen::MatrixXd G = dec.phi.transpose() * dec.phi * ds;
    CHECK((G - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("component count reaches the variance threshold") {
    const int K = 101;
    auto grid = SamplingGrid::uniform_unit(K);
    Eigen::MatrixXd phi = orthonormalize(basis_matrix(1, 1, grid.points, 4), grid.ds());
    Eigen::Vector4d lambda(1.0, 0.5, 0.25, 0.125);
    Eigen::MatrixXd Ka = Eigen::MatrixXd::Zero(K, K);
    for (int r = 0; r < 4; ++r) Ka += lambda(r) * phi.col(r) * phi.col(r).transpose();

    MfpcaOptions opt;
    opt.bandwidth = 0;
    opt.pve_threshold = 0.95;
    auto dec = smooth_and_eigendecompose(Ka, Eigen::MatrixXd::Zero(K, K), grid, opt);
    CHECK(dec.n_level1() == 4);
    CHECK(dec.pve1_cum(2) == doctest::Approx(1.75 / 1.875).epsilon(1e-9));
    CHECK(dec.pve1_cum(3) == doctest::Approx(1.0).epsilon(1e-9));

    opt.max_components = 2;
    auto capped = smooth_and_eigendecompose(Ka, Eigen::MatrixXd::Zero(K, K), grid, opt);
    CHECK(capped.n_level1() == 2);
}

TEST_CASE("eigenvalue ordering on a diagonal covariance") {
    const int K = 10;
    auto grid = SamplingGrid::uniform_unit(K);
    Eigen::VectorXd d(K);
    for (int k = 0; k < K; ++k) d(k) = K - k;
    Eigen::MatrixXd Ka = d.asDiagonal();
    MfpcaOptions opt;
    opt.bandwidth = 0;
    opt.pve_threshold = 1.0;
    opt.max_components = K;
    auto dec = smooth_and_eigendecompose(Ka, Eigen::MatrixXd::Zero(K, K), grid, opt);
    for (int r = 1; r < dec.n_level1(); ++r) CHECK(dec.lambda1(r) <= dec.lambda1(r - 1));
}

TEST_CASE("sssod closed forms") {
    // linear function: zero
    std::vector<double> lin;
    for (int k = 0; k < 50; ++k) lin.push_back(0.3 * k + 2.0);
    CHECK(sssod(lin) == doctest::Approx(0.0));

    // quadratic (k/K)^2, k = 1..K: 4(K-2)/K^2
    const int K = 100;
    std::vector<double> quad;
    for (int k = 1; k <= K; ++k) quad.push_back(std::pow(static_cast<double>(k) / K, 2));
    CHECK(sssod(quad) == doctest::Approx(4.0 * (K - 2) / (K * K)).epsilon(1e-9));

    // frozen direct-summation value for sqrt(2) sin(2 pi s) on 100 unit-grid points
    std::vector<double> sine;
    for (int k = 0; k < 100; ++k)
        sine.push_back(std::sqrt(2.0) * std::sin(2 * M_PI * (k / 99.0)));
    CHECK(sssod(sine) == doctest::Approx(16.05174765030092).epsilon(1e-9));

    CHECK_THROWS_AS(sssod(std::vector<double>{1.0, 2.0}), GridTooSmall);
}

TEST_CASE("non-symmetric input is rejected") {
    const int K = 10;
    auto grid = SamplingGrid::uniform_unit(K);
    Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(K, K);
    bad(0, 1) = 1.0;
    CHECK_THROWS_AS(smooth_and_eigendecompose(bad, Eigen::MatrixXd::Zero(K, K), grid,
                                              MfpcaOptions{}),
                    InvalidCovariance);
    CHECK_THROWS_AS(smooth_and_eigendecompose(Eigen::MatrixXd::Zero(K - 1, K - 1),
                                              Eigen::MatrixXd::Zero(K, K), grid, MfpcaOptions{}),
                    InvalidCovariance);
}

TEST_CASE("smoothing then projection leaves no negative eigenvalues") {
    Rng rng(7);
    const int K = 40;
    auto grid = SamplingGrid::uniform_unit(K);
    Eigen::MatrixXd noise(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j <= i; ++j) {
            noise(i, j) = rng.normal();
            noise(j, i) = noise(i, j);
        }
    MfpcaOptions opt;
    opt.bandwidth = 3;
    opt.pve_threshold = 1.0;
    opt.max_components = K;
    auto dec = smooth_and_eigendecompose(noise, noise, grid, opt);
    for (int r = 0; r < dec.n_level1(); ++r) CHECK(dec.lambda1(r) >= 0);
    for (int r = 0; r < dec.n_level2(); ++r) CHECK(dec.lambda2(r) >= 0);
}

TEST_CASE("kernel smoother basics") {
    const int K = 30;
    Eigen::MatrixXd S = Eigen::MatrixXd::Constant(K, K, 2.5);
    auto sm = kernel_smooth_surface(S, 4, false);
    CHECK((sm - S).cwiseAbs().maxCoeff() < 1e-12);

    // diagonal exclusion imputes from neighbors
    Eigen::MatrixXd T = Eigen::MatrixXd::Constant(K, K, 1.0);
    for (int k = 0; k < K; ++k) T(k, k) = 50.0; // spike to be ignored
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
        Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(K, K, false);
    for (int k = 0; k < K; ++k) mask(k, k) = true;
    auto imp = kernel_smooth_surface(T, 3, false, &mask);
    for (int k = 0; k < K; ++k) CHECK(imp(k, k) == doctest::Approx(1.0));
}

TEST_CASE("sign convention makes repeated decompositions identical") {
    Rng rng(99);
    const int K = 25;
    auto grid = SamplingGrid::uniform_unit(K);
    Eigen::MatrixXd A(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j <= i; ++j) {
            A(i, j) = rng.normal();
            A(j, i) = A(i, j);
        }
    A = (A * A.transpose()).eval(); // PSD
    MfpcaOptions opt;
    opt.bandwidth = 0;
    auto d1 = smooth_and_eigendecompose(A, A, grid, opt);
    auto d2 = smooth_and_eigendecompose(A, A, grid, opt);
    CHECK(d1.phi == d2.phi);
    CHECK(d1.lambda1 == d2.lambda1);
    for (int c = 0; c < d1.n_level1(); ++c) {
        Eigen::Index imax;
        d1.phi.col(c).cwiseAbs().maxCoeff(&imax);
        CHECK(d1.phi(imax, c) > 0);
    }
}
