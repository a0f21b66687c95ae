#include "gmfpca/io.hpp"
#include "gmfpca/errors.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace gmfpca {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string fmt_num(double v) {
    if (std::isnan(v)) return "NA";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') { out.push_back(cur); cur.clear(); }
        else if (ch != '\r') cur.push_back(ch);
    }
    out.push_back(cur);
    return out;
}

std::ofstream open_out(const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    return out;
}

} // namespace

MultilevelFunctionalDataset read_long_csv(const std::string& path, const SamplingGrid& grid,
                                          Family family, std::optional<double> threshold) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + " is empty");
    auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "subject_id" || header[1] != "visit_id" ||
        header[2] != "time_index" || header[3] != "value")
        throw IoError(path + ": expected header subject_id,visit_id,time_index,value");

    DatasetBuilder builder(grid, family);
    long lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() < 4) throw IoError(path + ":" + std::to_string(lineno) + ": short row");
        int t = std::stoi(f[2]);
        double v = std::stod(f[3]);
        if (threshold) v = v > *threshold ? 1.0 : 0.0;
        builder.add(f[0], f[1], t - 1, v);
    }
    return builder.finalize();
}

void write_long_csv(const std::string& path, const MultilevelFunctionalDataset& data) {
    auto out = open_out(path);
    out << "subject_id,visit_id,time_index,value\n";
    for (int p = 0; p < data.n_pairs(); ++p) {
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        for (int k = 0; k < data.n_points(); ++k) {
            double v = data.values(p, k);
            if (std::isnan(v)) continue;
            out << data.subject_ids[static_cast<std::size_t>(pr.subject)] << ','
                << data.visit_ids[static_cast<std::size_t>(pr.visit)] << ',' << (k + 1) << ','
                << fmt_num(v) << '\n';
        }
    }
}

void write_eta_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                   const LatentPredictorMatrix& eta) {
    auto out = open_out(path);
    out << "subject_id,visit_id,time_index,eta_hat,provenance\n";
    for (int p = 0; p < eta.n_pairs(); ++p) {
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        for (int k = 0; k < eta.n_points(); ++k) {
            out << data.subject_ids[static_cast<std::size_t>(pr.subject)] << ','
                << data.visit_ids[static_cast<std::size_t>(pr.visit)] << ',' << (k + 1) << ','
                << fmt_num(eta.eta(p, k)) << ','
                << fit_status_name(eta.provenance[static_cast<std::size_t>(k)]) << '\n';
        }
    }
}

LatentPredictorMatrix read_eta_csv(const std::string& path,
                                   const MultilevelFunctionalDataset& data) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    std::getline(in, line);

    std::map<std::pair<std::string, std::string>, int> pair_of;
    for (int p = 0; p < data.n_pairs(); ++p) {
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        pair_of[{data.subject_ids[static_cast<std::size_t>(pr.subject)],
                 data.visit_ids[static_cast<std::size_t>(pr.visit)]}] = p;
    }

    LatentPredictorMatrix eta;
    const int P = data.n_pairs(), K = data.n_points();
    eta.eta = Eigen::MatrixXd::Zero(P, K);
    eta.a = Eigen::MatrixXd::Zero(data.n_subjects(), K);
    eta.b = Eigen::MatrixXd::Zero(P, K);
    eta.mu0 = Eigen::VectorXd::Zero(K);
    eta.mu_visit = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.visit_ids.size()), K);
    eta.provenance.assign(static_cast<std::size_t>(K), FitStatus::converged);
    eta.pair_subject.resize(static_cast<std::size_t>(P));
    eta.pair_visit.resize(static_cast<std::size_t>(P));
    for (int p = 0; p < P; ++p) {
        eta.pair_subject[static_cast<std::size_t>(p)] = data.pairs[static_cast<std::size_t>(p)].subject;
        eta.pair_visit[static_cast<std::size_t>(p)] = data.pairs[static_cast<std::size_t>(p)].visit;
    }

    long lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() < 5) throw IoError(path + ":" + std::to_string(lineno) + ": short row");
        auto it = pair_of.find({f[0], f[1]});
        if (it == pair_of.end())
            throw IoError(path + ":" + std::to_string(lineno) + ": unknown subject/visit " + f[0] +
                          "/" + f[1]);
        int k = std::stoi(f[2]) - 1;
        eta.eta(it->second, k) = std::stod(f[3]);
        eta.provenance[static_cast<std::size_t>(k)] = fit_status_from_name(f[4]);
    }
    return eta;
}

void write_eigenfunctions_csv(const std::string& path, const MfpcaDecomposition& dec) {
    auto out = open_out(path);
    out << "level,component,time_index,value\n";
    for (int l = 0; l < dec.n_level1(); ++l)
        for (int k = 0; k < dec.phi.rows(); ++k)
            out << "1," << (l + 1) << ',' << (k + 1) << ',' << fmt_num(dec.phi(k, l)) << '\n';
    for (int m = 0; m < dec.n_level2(); ++m)
        for (int k = 0; k < dec.psi.rows(); ++k)
            out << "2," << (m + 1) << ',' << (k + 1) << ',' << fmt_num(dec.psi(k, m)) << '\n';
}

void write_eigenvalues_csv(const std::string& path, const MfpcaDecomposition& dec) {
    auto out = open_out(path);
    out << "level,component,eigenvalue,pve_cum_level,pve_total,sssod\n";
    double total = dec.level1_total + dec.level2_total;
    for (int l = 0; l < dec.n_level1(); ++l)
        out << "1," << (l + 1) << ',' << fmt_num(dec.lambda1(l)) << ','
            << fmt_num(dec.pve1_cum(l)) << ',' << fmt_num(total > 0 ? dec.lambda1(l) / total : 0)
            << ',' << fmt_num(dec.sssod1[static_cast<std::size_t>(l)]) << '\n';
    for (int m = 0; m < dec.n_level2(); ++m)
        out << "2," << (m + 1) << ',' << fmt_num(dec.lambda2(m)) << ','
            << fmt_num(dec.pve2_cum(m)) << ',' << fmt_num(total > 0 ? dec.lambda2(m) / total : 0)
            << ',' << fmt_num(dec.sssod2[static_cast<std::size_t>(m)]) << '\n';
}

void write_mean_csv(const std::string& path, const MfpcaDecomposition& dec) {
    auto out = open_out(path);
    out << "time_index,mu0";
    for (int v = 0; v < dec.mu_visit.rows(); ++v) out << ",mu_visit_" << (v + 1);
    out << '\n';
    for (int k = 0; k < dec.mu0.size(); ++k) {
        out << (k + 1) << ',' << fmt_num(dec.mu0(k));
        for (int v = 0; v < dec.mu_visit.rows(); ++v) out << ',' << fmt_num(dec.mu_visit(v, k));
        out << '\n';
    }
}

MfpcaDecomposition read_decomposition(const std::string& dir) {
    MfpcaDecomposition dec;
    std::string efpath = dir + "/eigenfunctions.csv";
    std::ifstream in(efpath);
    if (!in) throw NoRunFound("no decomposition found at " + efpath);
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> l1, l2;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        int level = std::stoi(f[0]);
        std::size_t comp = static_cast<std::size_t>(std::stoi(f[1]));
        auto& store = level == 1 ? l1 : l2;
        if (store.size() < comp) store.resize(comp);
        store[comp - 1].push_back(std::stod(f[3]));
    }
    if (l1.empty() && l2.empty()) throw NoRunFound("empty decomposition at " + efpath);
    std::size_t K = l1.empty() ? l2[0].size() : l1[0].size();
    dec.phi.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(l1.size()));
    for (std::size_t c = 0; c < l1.size(); ++c)
        for (std::size_t k = 0; k < K; ++k) dec.phi(static_cast<Eigen::Index>(k),
                                                    static_cast<Eigen::Index>(c)) = l1[c][k];
    dec.psi.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(l2.size()));
    for (std::size_t c = 0; c < l2.size(); ++c)
        for (std::size_t k = 0; k < K; ++k) dec.psi(static_cast<Eigen::Index>(k),
                                                    static_cast<Eigen::Index>(c)) = l2[c][k];

    std::ifstream evin(dir + "/eigenvalues.csv");
    if (evin) {
        std::getline(evin, line);
        std::vector<double> e1, e2, s1, s2, p1, p2;
        while (std::getline(evin, line)) {
            if (line.empty()) continue;
            auto f = split_csv_line(line);
            if (std::stoi(f[0]) == 1) { e1.push_back(std::stod(f[2])); p1.push_back(std::stod(f[3])); s1.push_back(std::stod(f[5])); }
            else { e2.push_back(std::stod(f[2])); p2.push_back(std::stod(f[3])); s2.push_back(std::stod(f[5])); }
        }
        dec.lambda1 = Eigen::Map<Eigen::VectorXd>(e1.data(), static_cast<Eigen::Index>(e1.size()));
        dec.lambda2 = Eigen::Map<Eigen::VectorXd>(e2.data(), static_cast<Eigen::Index>(e2.size()));
        dec.pve1_cum = Eigen::Map<Eigen::VectorXd>(p1.data(), static_cast<Eigen::Index>(p1.size()));
        dec.pve2_cum = Eigen::Map<Eigen::VectorXd>(p2.data(), static_cast<Eigen::Index>(p2.size()));
        dec.sssod1 = s1;
        dec.sssod2 = s2;
    }

    std::ifstream min(dir + "/mean.csv");
    if (!min) throw NoRunFound("no mean function found in " + dir);
    std::getline(min, line);
    auto header = split_csv_line(line);
    int n_visit = static_cast<int>(header.size()) - 2;
    dec.mu0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
    dec.mu_visit = Eigen::MatrixXd::Zero(n_visit, static_cast<Eigen::Index>(K));
    while (std::getline(min, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        int k = std::stoi(f[0]) - 1;
        dec.mu0(k) = std::stod(f[1]);
        for (int v = 0; v < n_visit; ++v)
            dec.mu_visit(v, k) = std::stod(f[static_cast<std::size_t>(v) + 2]);
    }
    return dec;
}

void write_scores_level1_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                             const ScorePosterior& post) {
    auto out = open_out(path);
    out << "subject_id,component,posterior_mean,posterior_sd\n";
    for (int s = 0; s < data.n_subjects(); ++s)
        for (int l = 0; l < post.n_level1(); ++l)
            out << data.subject_ids[static_cast<std::size_t>(s)] << ',' << (l + 1) << ','
                << fmt_num(post.xi_mean(s, l)) << ',' << fmt_num(post.xi_sd(s, l)) << '\n';
}

void write_scores_level2_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                             const ScorePosterior& post) {
    auto out = open_out(path);
    out << "subject_id,visit_id,component,posterior_mean,posterior_sd\n";
    for (int p = 0; p < data.n_pairs(); ++p) {
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        for (int m = 0; m < post.n_level2(); ++m)
            out << data.subject_ids[static_cast<std::size_t>(pr.subject)] << ','
                << data.visit_ids[static_cast<std::size_t>(pr.visit)] << ',' << (m + 1) << ','
                << fmt_num(post.zeta_mean(p, m)) << ',' << fmt_num(post.zeta_sd(p, m)) << '\n';
    }
}

void write_l2esd_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                     const ScorePosterior& post) {
    auto out = open_out(path);
    out << "subject_id,component,l2e_sd\n";
    for (int s = 0; s < data.n_subjects(); ++s)
        for (int m = 0; m < post.n_level2(); ++m)
            out << data.subject_ids[static_cast<std::size_t>(s)] << ',' << (m + 1) << ','
                << fmt_num(post.l2e_sd(s, m)) << '\n';
}

void write_eta_hat_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                       const ScorePosterior& post) {
    auto out = open_out(path);
    out << "subject_id,visit_id,time_index,eta_hat\n";
    for (int p = 0; p < data.n_pairs(); ++p) {
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        for (int k = 0; k < post.eta_hat.cols(); ++k)
            out << data.subject_ids[static_cast<std::size_t>(pr.subject)] << ','
                << data.visit_ids[static_cast<std::size_t>(pr.visit)] << ',' << (k + 1) << ','
                << fmt_num(post.eta_hat(p, k)) << '\n';
    }
}

void write_score_diagnostics_json(const std::string& path, const ScorePosterior& post) {
    json j;
    j["nonconvergence_warning"] = post.nonconvergence_warning;
    j["rhat_level1"] = std::vector<double>(post.rhat_lambda1.data(),
                                           post.rhat_lambda1.data() + post.rhat_lambda1.size());
    j["rhat_level2"] = std::vector<double>(post.rhat_lambda2.data(),
                                           post.rhat_lambda2.data() + post.rhat_lambda2.size());
    j["lambda1_mean"] = std::vector<double>(post.lambda1_mean.data(),
                                            post.lambda1_mean.data() + post.lambda1_mean.size());
    j["lambda2_mean"] = std::vector<double>(post.lambda2_mean.data(),
                                            post.lambda2_mean.data() + post.lambda2_mean.size());
    j["sigma2_eps_mean"] = post.sigma2_eps_mean;
    j["runtime_seconds"] = post.runtime_seconds;
    j["n_groups"] = post.group_lambda1.size();
    json chains = json::array();
    for (const auto& cd : post.chain_diagnostics) {
        json c;
        c["group"] = cd.group;
        c["chain"] = cd.chain;
        c["accept_rate_level1"] = cd.accept_rate_xi;
        c["accept_rate_level2"] = cd.accept_rate_zeta;
        chains.push_back(c);
    }
    j["chains"] = chains;
    json groups = json::array();
    for (std::size_t g = 0; g < post.group_lambda1.size(); ++g) {
        json gg;
        gg["group"] = g;
        gg["n_subjects"] = post.group_subjects[g].size();
        gg["lambda1_mean"] = std::vector<double>(post.group_lambda1[g].data(),
                                                 post.group_lambda1[g].data() +
                                                     post.group_lambda1[g].size());
        gg["lambda2_mean"] = std::vector<double>(post.group_lambda2[g].data(),
                                                 post.group_lambda2[g].data() +
                                                     post.group_lambda2[g].size());
        groups.push_back(gg);
    }
    j["groups"] = groups;
    json used = json::array();
    for (int k : post.used_indices) used.push_back(k + 1);
    j["used_time_indices"] = used;

    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

void write_truth_files(const std::string& dir, const SimulationTruth& truth) {
    {
        auto out = open_out(dir + "/truth_eigenfunctions.csv");
        out << "level,component,time_index,value\n";
        for (int r = 0; r < truth.phi.cols(); ++r)
            for (int k = 0; k < truth.phi.rows(); ++k)
                out << "1," << (r + 1) << ',' << (k + 1) << ',' << fmt_num(truth.phi(k, r)) << '\n';
        for (int r = 0; r < truth.psi.cols(); ++r)
            for (int k = 0; k < truth.psi.rows(); ++k)
                out << "2," << (r + 1) << ',' << (k + 1) << ',' << fmt_num(truth.psi(k, r)) << '\n';
    }
    {
        auto out = open_out(dir + "/truth_scores.csv");
        out << "level,subject_id,visit_id,component,value\n";
        const int I = static_cast<int>(truth.xi.rows());
        const int R = static_cast<int>(truth.xi.cols());
        const int J = I > 0 ? static_cast<int>(truth.zeta.rows()) / I : 0;
        for (int i = 0; i < I; ++i)
            for (int r = 0; r < R; ++r)
                out << "1," << (i + 1) << ",," << (r + 1) << ',' << fmt_num(truth.xi(i, r)) << '\n';
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j)
                for (int r = 0; r < R; ++r)
                    out << "2," << (i + 1) << ',' << (j + 1) << ',' << (r + 1) << ','
                        << fmt_num(truth.zeta(i * J + j, r)) << '\n';
    }
    {
        auto out = open_out(dir + "/truth_eta.csv");
        out << "subject_id,visit_id,time_index,eta\n";
        const int I = static_cast<int>(truth.xi.rows());
        const int J = I > 0 ? static_cast<int>(truth.zeta.rows()) / I : 0;
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < J; ++j)
                for (int k = 0; k < truth.eta.cols(); ++k)
                    out << (i + 1) << ',' << (j + 1) << ',' << (k + 1) << ','
                        << fmt_num(truth.eta(i * J + j, k)) << '\n';
    }
}

void write_replicate_table_csv(const std::string& path, const ReplicateTable& table) {
    auto out = open_out(path);
    out << "scenario";
    for (const auto& c : table.col_labels) out << ',' << c;
    out << '\n';
    for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
        out << table.row_labels[r];
        for (std::size_t c = 0; c < table.col_labels.size(); ++c) {
            const auto& cell = table.cells[r][c];
            out << ',' << (cell.present ? fmt_num(cell.mean) : "");
        }
        out << '\n';
    }
}

void write_replicate_failures_csv(const std::string& path, const ReplicateTable& table) {
    auto out = open_out(path);
    out << "scenario";
    for (const auto& c : table.col_labels) out << ',' << c;
    out << '\n';
    for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
        out << table.row_labels[r];
        for (std::size_t c = 0; c < table.col_labels.size(); ++c) {
            const auto& cell = table.cells[r][c];
            out << ',' << (cell.present ? std::to_string(cell.n_fail) : "");
        }
        out << '\n';
    }
}

void write_replicate_eigenvalues_csv(const std::string& path, const ReplicateTable& table) {
    auto out = open_out(path);
    out << "scenario,rep,level,component,value\n";
    for (std::size_t s = 0; s < table.outcomes.size(); ++s) {
        for (std::size_t r = 0; r < table.outcomes[s].size(); ++r) {
            const auto& oc = table.outcomes[s][r];
            if (!oc.ok) continue;
            for (Eigen::Index l = 0; l < oc.lambda1.size(); ++l)
                out << table.scenario_labels[s] << ',' << (r + 1) << ",1," << (l + 1) << ','
                    << fmt_num(oc.lambda1(l)) << '\n';
            for (Eigen::Index m = 0; m < oc.lambda2.size(); ++m)
                out << table.scenario_labels[s] << ',' << (r + 1) << ",2," << (m + 1) << ','
                    << fmt_num(oc.lambda2(m)) << '\n';
        }
    }
}

void write_manifest(const std::string& path, const std::map<std::string, std::string>& config,
                    const std::map<std::string, std::string>& file_hashes,
                    const std::map<std::string, std::string>& extra) {
    json j;
    json cfg;
    for (const auto& [k, v] : config) cfg[k] = v;
    j["config"] = cfg;
    std::string blob;
    for (const auto& [k, v] : config) blob += k + "=" + v + "\n";
    j["config_hash"] = sha256_hex(blob);
    json files;
    for (const auto& [k, v] : file_hashes) files[k] = v;
    j["files"] = files;
    for (const auto& [k, v] : extra) j[k] = v;
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

} // namespace gmfpca
