#include <doctest.h>

#include "gmfpca/io.hpp"
#include "gmfpca/kvconfig.hpp"

#include <filesystem>
#include <fstream>

using namespace gmfpca;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("gmfpca_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("nested key-value config parsing") {
    auto cfg = parse_kv_text(
        "# settings\n"
        "family = binary\n"
        "grid {\n"
        "  points = 101\n"
        "  cyclic = false\n"
        "}\n"
        "mcmc.iters = 500   # inline comment\n");
    CHECK(kv_get(cfg, "family", "") == "binary");
    CHECK(kv_get_int(cfg, "grid.points", 0) == 101);
    CHECK(kv_get_bool(cfg, "grid.cyclic", true) == false);
    CHECK(kv_get_int(cfg, "mcmc.iters", 0) == 500);
    CHECK(kv_get(cfg, "missing", "dflt") == "dflt");

    CHECK_THROWS_AS(parse_kv_text("}\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("grid {\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("just a line\n"), ConfigError);
    auto bad = parse_kv_text("x = notanumber\n");
    CHECK_THROWS_AS(kv_get_num(bad, "x", 0), ConfigError);
}

TEST_CASE("long CSV round trip preserves the dataset") {
    TempDir tmp;
    DatasetBuilder b(SamplingGrid::uniform_unit(5), Family::binary);
    b.add("alpha", "d1", 0, 1);
    b.add("alpha", "d1", 3, 0);
    b.add("alpha", "d2", 2, 1);
    b.add("beta", "d1", 4, 0);
    auto data = b.finalize();
    write_long_csv(tmp.file("d.csv"), data);

    auto back = read_long_csv(tmp.file("d.csv"), data.grid, Family::binary);
    CHECK(back.subject_ids == data.subject_ids);
    CHECK(back.visit_ids == data.visit_ids);
    CHECK(back.n_pairs() == data.n_pairs());
    for (int p = 0; p < data.n_pairs(); ++p)
        for (int k = 0; k < 5; ++k) {
            CHECK(std::isnan(back.values(p, k)) == std::isnan(data.values(p, k)));
            if (!std::isnan(data.values(p, k))) CHECK(back.values(p, k) == data.values(p, k));
        }
}

TEST_CASE("threshold flag dichotomizes on read") {
    TempDir tmp;
    {
        std::ofstream out(tmp.file("mims.csv"));
        out << "subject_id,visit_id,time_index,value\n";
        out << "s,1,1,3.2\n";
        out << "s,1,2,11.0\n";
        out << "s,1,3,10.558\n";
    }
    auto data = read_long_csv(tmp.file("mims.csv"), SamplingGrid::uniform_unit(3), Family::binary,
                              10.558);
    CHECK(data.values(0, 0) == 0);
    CHECK(data.values(0, 1) == 1);
    CHECK(data.values(0, 2) == 0); // strictly greater
}

TEST_CASE("decomposition export and reload") {
    TempDir tmp;
    const int K = 21;
    auto grid = SamplingGrid::uniform_unit(K);
    MfpcaDecomposition dec;
    dec.phi = Eigen::MatrixXd::Random(K, 2);
    dec.psi = Eigen::MatrixXd::Random(K, 3);
    dec.lambda1 = Eigen::Vector2d(2.0, 1.0);
    dec.lambda2 = Eigen::Vector3d(1.0, 0.6, 0.1);
    dec.pve1_cum = Eigen::Vector2d(0.66, 1.0);
    dec.pve2_cum = Eigen::Vector3d(0.59, 0.94, 1.0);
    dec.level1_total = 3.0;
    dec.level2_total = 1.7;
    dec.sssod1 = {1.0, 2.0};
    dec.sssod2 = {3.0, 4.0, 5.0};
    dec.mu0 = Eigen::VectorXd::LinSpaced(K, -1, 1);
    dec.mu_visit = Eigen::MatrixXd::Zero(2, K);
    dec.mu_visit.row(1).setConstant(0.25);
    dec.ds = grid.ds();

    write_eigenfunctions_csv(tmp.file("eigenfunctions.csv"), dec);
    write_eigenvalues_csv(tmp.file("eigenvalues.csv"), dec);
    write_mean_csv(tmp.file("mean.csv"), dec);

    auto back = read_decomposition(tmp.path.string());
    CHECK(back.phi.rows() == K);
    CHECK(back.phi.cols() == 2);
    CHECK(back.psi.cols() == 3);
    CHECK((back.phi - dec.phi).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((back.lambda2 - dec.lambda2).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((back.mu0 - dec.mu0).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((back.mu_visit - dec.mu_visit).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(back.sssod1 == dec.sssod1);

    CHECK_THROWS_AS(read_decomposition(tmp.file("nowhere")), NoRunFound);
}

TEST_CASE("manifest bytes are reproducible") {
    TempDir tmp;
    std::map<std::string, std::string> cfg{{"a", "1"}, {"b", "two"}};
    std::map<std::string, std::string> hashes{{"f.csv", "deadbeef"}};
    write_manifest(tmp.file("m1.json"), cfg, hashes);
    write_manifest(tmp.file("m2.json"), cfg, hashes);
    CHECK(sha256_file(tmp.file("m1.json")) == sha256_file(tmp.file("m2.json")));

    std::map<std::string, std::string> cfg2 = cfg;
    cfg2["a"] = "2";
    write_manifest(tmp.file("m3.json"), cfg2, hashes);
    CHECK(sha256_file(tmp.file("m1.json")) != sha256_file(tmp.file("m3.json")));
}

TEST_CASE("sha256 of a known vector") {
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("number formatting handles NaN as NA") {
    CHECK(fmt_num(std::numeric_limits<double>::quiet_NaN()) == "NA");
    CHECK(fmt_num(0.25) == "0.25");
    CHECK(fmt_num(1e-12) == "1e-12");
}
