#include <doctest.h>

#include "gmfpca/simulation.hpp"
#include "gmfpca/errors.hpp"

#include <cmath>

using namespace gmfpca;

TEST_CASE("balanced binary simulation has roughly half ones") {
    SimulationConfig cfg;
    cfg.family = Family::binary;
    cfg.n_subjects = 60;
    cfg.n_visits = 5;
    cfg.n_points = 100;
    cfg.b0 = 0;
    cfg.seed = 11;
    auto [data, truth] = simulate(cfg);
    CHECK(data.n_points() == 101); // K+1 sampling points
    CHECK(data.n_pairs() == 300);
    double mean = 0;
    long n = 0;
    for (int p = 0; p < data.n_pairs(); ++p)
        for (int k = 0; k < data.n_points(); ++k) { mean += data.values(p, k); ++n; }
    mean /= n;
    CHECK(mean > 0.45);
    CHECK(mean < 0.55);
}

TEST_CASE("first level-1 basis function evaluates in closed form") {
    CHECK(case1_level1_basis(0, 0.25) == doctest::Approx(std::sqrt(2.0)));
    CHECK(case1_level1_basis(1, 0.0) == doctest::Approx(std::sqrt(2.0)));
    CHECK(case1_level2_basis(0, 0.25) == doctest::Approx(std::sqrt(2.0) * std::sin(1.5 * M_PI)));
    CHECK(case2_level2_basis(0, 0.77) == doctest::Approx(1.0));
    CHECK(case2_level2_basis(1, 0.5) == doctest::Approx(0.0));
}

TEST_CASE("legendre level-2 set is orthonormal but not orthogonal to level 1") {
    const int K = 1001;
    std::vector<double> s(K);
    for (int k = 0; k < K; ++k) s[static_cast<std::size_t>(k)] = static_cast<double>(k) / (K - 1);
    double ds = 1.0 / (K - 1);
    // trapezoid quadrature of the basis products
    auto quad = [&](const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
        Eigen::VectorXd w = Eigen::VectorXd::Constant(K, ds);
        w(0) *= 0.5;
        w(K - 1) *= 0.5;
        return Eigen::MatrixXd(A.transpose() * w.asDiagonal() * B);
    };
    Eigen::MatrixXd l2 = basis_matrix(2, 2, s, 4);
    Eigen::MatrixXd G = quad(l2, l2);
    CHECK((G - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-3);

    Eigen::MatrixXd l1 = basis_matrix(2, 1, s, 4);
    Eigen::MatrixXd X = quad(l1, l2);
    CHECK(X.cwiseAbs().maxCoeff() > 0.05); // cross-level products do not vanish
}

TEST_CASE("simulation is reproducible and seed-sensitive") {
    SimulationConfig cfg;
    cfg.n_subjects = 10;
    cfg.n_visits = 3;
    cfg.n_points = 40;
    cfg.seed = 5;
    auto [d1, t1] = simulate(cfg);
    auto [d2, t2] = simulate(cfg);
    CHECK(d1.values == d2.values);
    CHECK(t1.xi == t2.xi);
    cfg.seed = 6;
    auto [d3, t3] = simulate(cfg);
    CHECK(d1.values != d3.values);
}

TEST_CASE("score draws follow the eigenvalue law") {
    SimulationConfig cfg;
    cfg.n_subjects = 250;
    cfg.n_visits = 4;
    cfg.n_points = 30;
    cfg.seed = 99;
    auto [data, truth] = simulate(cfg);
    // level-2 scores: I*J = 1000 draws per component
    const auto n = truth.zeta.rows();
    REQUIRE(n == 1000);
    for (int m = 0; m < 4; ++m) {
        double lam = std::pow(0.5, m);
        double var = truth.zeta.col(m).squaredNorm() / static_cast<double>(n) -
                     std::pow(truth.zeta.col(m).mean(), 2);
        double se = lam * std::sqrt(2.0 / (static_cast<double>(n) - 1));
        CHECK(std::fabs(var - lam) < 3 * se);
    }
}

TEST_CASE("intercept shifts the positive rate") {
    SimulationConfig cfg;
    cfg.n_subjects = 80;
    cfg.n_visits = 5;
    cfg.n_points = 60;
    cfg.b0 = -3.5;
    cfg.seed = 3;
    auto [data, truth] = simulate(cfg);
    double mean = 0;
    long n = 0;
    for (int p = 0; p < data.n_pairs(); ++p)
        for (int k = 0; k < data.n_points(); ++k) { mean += data.values(p, k); ++n; }
    mean /= n;
    // roughly 9% ones once the random effects widen the marginal
    CHECK(mean > 0.04);
    CHECK(mean < 0.16);
}

TEST_CASE("ise closed forms and invariances") {
    const int K = 101;
    std::vector<double> s(K);
    for (int k = 0; k < K; ++k) s[static_cast<std::size_t>(k)] = k / 100.0;
    double ds = 0.01;
    Eigen::MatrixXd l1 = basis_matrix(1, 1, s, 2);
    Eigen::VectorXd sin2 = l1.col(0), cos2 = l1.col(1);

    CHECK(ise(sin2, sin2, ds) == doctest::Approx(0.0));
    CHECK(ise(-sin2, sin2, ds) == doctest::Approx(0.0)); // sign alignment
    CHECK(ise(cos2, sin2, ds) == doctest::Approx(2.0).epsilon(0.03));
    CHECK(ise(sin2, cos2, ds) == doctest::Approx(ise(cos2, sin2, ds))); // symmetric
    CHECK(ise(-cos2, -sin2, ds) == doctest::Approx(ise(cos2, sin2, ds)));

    Eigen::VectorXd shorter = sin2.head(50);
    CHECK_THROWS_AS(ise(shorter, sin2, ds), GridMismatch);
}

TEST_CASE("mse of linear predictors") {
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(6, 11);
    CHECK(mse_linear_predictor(a, a) == doctest::Approx(0.0));
    Eigen::MatrixXd b = a.array() + 1.0;
    CHECK(mse_linear_predictor(b, a) == doctest::Approx(1.0));
    Eigen::MatrixXd c = Eigen::MatrixXd::Random(6, 10);
    CHECK_THROWS_AS(mse_linear_predictor(c, a), GridMismatch);
}

TEST_CASE("config validation") {
    SimulationConfig cfg;
    cfg.n_points = 10;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.n_points = 50;
    cfg.family = Family::gaussian;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.family = Family::poisson;
    cfg.basis_case = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
