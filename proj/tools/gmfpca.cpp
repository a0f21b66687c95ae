// Command-line driver for the four-step pipeline: data simulation, local
// fitting + decomposition, Bayesian score estimation, and report/table export.

#include "gmfpca/io.hpp"
#include "gmfpca/kvconfig.hpp"
#include "gmfpca/pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace gmfpca;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string input;
    std::string out;
    int grid_points = 0;
    bool grid_cyclic = false;
    double grid_start = 0;
    double grid_step = 0; // 0 = unit domain spacing 1/(K-1)
    std::string family = "binary";
    double threshold = 0; // 0 = off
    bool threshold_set = false;

    int bin_width_points = 0;
    double bin_width_pct = 5.0;
    std::string bin_mode = "offset";

    double bandwidth = -1; // <0 = auto
    double pve = 0.95;
    int max_components = 10;
    bool keep_l2_diagonal = false;
    bool visit_effects = false;

    std::string prior = "inv_gamma";
    double prior_a = 1.0, prior_b = 1.0, prior_scale = 10.0, prior_upper = 20.0;
    std::string fixed_effects = "offset";
    int downsample = 0;
    int group_size = 0;
    int warmup = 1000, iters = 1000, chains = 2;

    std::uint64_t seed = 1;
    int workers = 0;
};

void apply_config_file(CommonArgs& a) {
    if (a.config_path.empty()) return;
    KvConfig cfg = parse_kv_file(a.config_path);
    a.input = kv_get(cfg, "input", a.input);
    a.out = kv_get(cfg, "out", a.out);
    a.family = kv_get(cfg, "family", a.family);
    a.grid_points = kv_get_int(cfg, "grid.points", a.grid_points);
    a.grid_cyclic = kv_get_bool(cfg, "grid.cyclic", a.grid_cyclic);
    a.grid_start = kv_get_num(cfg, "grid.start", a.grid_start);
    a.grid_step = kv_get_num(cfg, "grid.step", a.grid_step);
    if (cfg.count("threshold")) {
        a.threshold = kv_get_num(cfg, "threshold", 0);
        a.threshold_set = true;
    }
    a.bin_width_points = kv_get_int(cfg, "bins.width_points", a.bin_width_points);
    a.bin_width_pct = kv_get_num(cfg, "bins.width_pct", a.bin_width_pct);
    a.bin_mode = kv_get(cfg, "bins.mode", a.bin_mode);
    a.bandwidth = kv_get_num(cfg, "mfpca.bandwidth", a.bandwidth);
    a.pve = kv_get_num(cfg, "mfpca.pve", a.pve);
    a.max_components = kv_get_int(cfg, "mfpca.max_components", a.max_components);
    a.keep_l2_diagonal = kv_get_bool(cfg, "mfpca.keep_l2_diagonal", a.keep_l2_diagonal);
    a.visit_effects = kv_get_bool(cfg, "glmm.visit_effects", a.visit_effects);
    a.prior = kv_get(cfg, "scores.prior", a.prior);
    a.prior_a = kv_get_num(cfg, "scores.prior_a", a.prior_a);
    a.prior_b = kv_get_num(cfg, "scores.prior_b", a.prior_b);
    a.prior_scale = kv_get_num(cfg, "scores.prior_scale", a.prior_scale);
    a.prior_upper = kv_get_num(cfg, "scores.prior_upper", a.prior_upper);
    a.fixed_effects = kv_get(cfg, "scores.fixed_effects", a.fixed_effects);
    a.downsample = kv_get_int(cfg, "scores.downsample", a.downsample);
    a.group_size = kv_get_int(cfg, "scores.group_size", a.group_size);
    a.warmup = kv_get_int(cfg, "mcmc.warmup", a.warmup);
    a.iters = kv_get_int(cfg, "mcmc.iters", a.iters);
    a.chains = kv_get_int(cfg, "mcmc.chains", a.chains);
    a.seed = static_cast<std::uint64_t>(kv_get_num(cfg, "seed", static_cast<double>(a.seed)));
    a.workers = kv_get_int(cfg, "workers", a.workers);
}

VariancePrior parse_prior(const CommonArgs& a) {
    if (a.prior == "inv_gamma") return VariancePrior::inverse_gamma(a.prior_a, a.prior_b);
    if (a.prior == "half_cauchy") return VariancePrior::half_cauchy(a.prior_scale);
    if (a.prior == "uniform") return VariancePrior::uniform_sd(a.prior_upper);
    throw ConfigError("unknown prior '" + a.prior + "' (inv_gamma|half_cauchy|uniform)");
}

PipelineOptions build_pipeline_options(const CommonArgs& a) {
    PipelineOptions opt;
    opt.bin_width_points = a.bin_width_points;
    opt.bin_width_pct = a.bin_width_pct;
    if (a.bin_mode == "offset") opt.bin_mode = BinWidthMode::index_offset;
    else if (a.bin_mode == "total") opt.bin_mode = BinWidthMode::total_points;
    else throw ConfigError("unknown bin mode '" + a.bin_mode + "' (offset|total)");
    opt.glmm.visit_fixed_effects = a.visit_effects;
    opt.mfpca.pve_threshold = a.pve;
    opt.mfpca.max_components = a.max_components;
    opt.mfpca.drop_level2_diagonal = !a.keep_l2_diagonal;
    if (a.bandwidth >= 0) {
        opt.mfpca.bandwidth = a.bandwidth;
        opt.mfpca_auto_bandwidth = false;
    }
    opt.visit_means = a.visit_effects;
    opt.prior_level1 = parse_prior(a);
    opt.prior_level2 = parse_prior(a);
    opt.fixed_effect_mode = a.fixed_effects == "refit" ? FixedEffectMode::refit_pointwise
                                                       : FixedEffectMode::offset_from_step3;
    opt.downsample = a.downsample;
    opt.group_size = a.group_size;
    opt.mcmc.warmup = a.warmup;
    opt.mcmc.iters = a.iters;
    opt.mcmc.chains = a.chains;
    opt.mcmc.seed = a.seed;
    opt.workers = a.workers;
    opt.mcmc.workers = a.workers;
    return opt;
}

SamplingGrid build_grid(const CommonArgs& a) {
    if (a.grid_points < 3) throw ConfigError("grid.points must be >= 3 (use --grid-points)");
    double step = a.grid_step > 0 ? a.grid_step
                                  : (a.grid_points > 1 ? 1.0 / (a.grid_points - 1) : 1.0);
    return SamplingGrid::uniform(a.grid_points, a.grid_start, step, a.grid_cyclic);
}

std::map<std::string, std::string> echo_config(const CommonArgs& a, const std::string& command) {
    std::map<std::string, std::string> m;
    m["command"] = command;
    m["family"] = a.family;
    m["input"] = a.input;
    m["out"] = a.out;
    m["grid.points"] = std::to_string(a.grid_points);
    m["grid.cyclic"] = a.grid_cyclic ? "true" : "false";
    m["grid.start"] = fmt_num(a.grid_start);
    m["grid.step"] = fmt_num(a.grid_step);
    m["bins.width_points"] = std::to_string(a.bin_width_points);
    m["bins.width_pct"] = fmt_num(a.bin_width_pct);
    m["bins.mode"] = a.bin_mode;
    m["mfpca.bandwidth"] = fmt_num(a.bandwidth);
    m["mfpca.pve"] = fmt_num(a.pve);
    m["mfpca.max_components"] = std::to_string(a.max_components);
    m["mfpca.keep_l2_diagonal"] = a.keep_l2_diagonal ? "true" : "false";
    m["glmm.visit_effects"] = a.visit_effects ? "true" : "false";
    m["scores.prior"] = a.prior;
    m["scores.prior_a"] = fmt_num(a.prior_a);
    m["scores.prior_b"] = fmt_num(a.prior_b);
    m["scores.prior_scale"] = fmt_num(a.prior_scale);
    m["scores.prior_upper"] = fmt_num(a.prior_upper);
    m["scores.fixed_effects"] = a.fixed_effects;
    m["scores.downsample"] = std::to_string(a.downsample);
    m["scores.group_size"] = std::to_string(a.group_size);
    m["mcmc.warmup"] = std::to_string(a.warmup);
    m["mcmc.iters"] = std::to_string(a.iters);
    m["mcmc.chains"] = std::to_string(a.chains);
    m["seed"] = std::to_string(a.seed);
    if (a.threshold_set) m["threshold"] = fmt_num(a.threshold);
    return m;
}

void add_common_flags(CLI::App* cmd, CommonArgs& a, bool with_pipeline) {
    cmd->add_option("--config", a.config_path, "config file (nested key-value text)");
    cmd->add_option("--seed", a.seed, "global seed");
    cmd->add_option("--workers", a.workers, "parallel workers (0 = all cores)");
    cmd->add_option("--out", a.out, "output directory");
    if (with_pipeline) {
        cmd->add_option("--input", a.input, "long-format CSV input");
        cmd->add_option("--family", a.family, "binary|poisson|gaussian");
        cmd->add_option("--grid-points", a.grid_points, "grid size K");
        cmd->add_flag("--grid-cyclic", a.grid_cyclic, "treat the domain as cyclic");
        cmd->add_option("--grid-start", a.grid_start, "first grid point");
        cmd->add_option("--grid-step", a.grid_step, "grid spacing (default 1/(K-1))");
        cmd->add_option("--threshold", a.threshold, "dichotomize input at this value")
            ->each([&a](const std::string&) { a.threshold_set = true; });
    }
}

int cmd_simulate(const CommonArgs& args, int subjects, int visits, int points, int basis_case,
                 double b0) {
    SimulationConfig cfg;
    cfg.family = family_from_name(args.family);
    cfg.basis_case = basis_case;
    cfg.n_subjects = subjects;
    cfg.n_visits = visits;
    cfg.n_points = points;
    cfg.b0 = b0;
    cfg.seed = args.seed;

    auto [data, truth] = simulate(cfg);
    fs::create_directories(args.out);
    write_long_csv(args.out + "/dataset.csv", data);
    write_truth_files(args.out, truth);

    double total = 0, n = 0;
    for (int p = 0; p < data.n_pairs(); ++p)
        for (int k = 0; k < data.n_points(); ++k)
            if (data.has_value(p, k)) { total += data.values(p, k); ++n; }

    std::map<std::string, std::string> cfg_echo;
    cfg_echo["command"] = "simulate";
    cfg_echo["family"] = args.family;
    cfg_echo["case"] = std::to_string(basis_case);
    cfg_echo["subjects"] = std::to_string(subjects);
    cfg_echo["visits"] = std::to_string(visits);
    cfg_echo["points"] = std::to_string(points);
    cfg_echo["b0"] = fmt_num(b0);
    cfg_echo["seed"] = std::to_string(args.seed);
    std::map<std::string, std::string> hashes;
    for (const char* f : {"dataset.csv", "truth_eigenfunctions.csv", "truth_scores.csv",
                          "truth_eta.csv"})
        hashes[f] = sha256_file(args.out + "/" + std::string(f));
    write_manifest(args.out + "/manifest_simulate.json", cfg_echo, hashes);

    json summary;
    summary["n_subjects"] = data.n_subjects();
    summary["n_pairs"] = data.n_pairs();
    summary["n_points"] = data.n_points();
    summary["n_observations"] = data.n_observations();
    if (cfg.family == Family::binary) summary["positive_rate"] = n > 0 ? total / n : 0.0;
    else summary["mean_count"] = n > 0 ? total / n : 0.0;
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_fit(CommonArgs& args) {
    apply_config_file(args);
    if (args.input.empty()) throw ConfigError("--input is required");
    if (args.out.empty()) throw ConfigError("--out is required");

    SamplingGrid grid = build_grid(args);
    Family family = family_from_name(args.family);
    std::optional<double> thr;
    if (args.threshold_set) thr = args.threshold;
    auto data = read_long_csv(args.input, grid, family, thr);

    auto report = validate_dataset(data);
    for (const auto& e : report.entries) {
        const char* tag = e.severity == Severity::error ? "error"
                          : e.severity == Severity::warning ? "warning" : "info";
        std::cerr << "[validate:" << tag << "] " << e.message << "\n";
    }

    PipelineOptions opt = build_pipeline_options(args);
    auto fit = run_fit_stage(data, opt);

    fs::create_directories(args.out);
    write_eta_csv(args.out + "/eta.csv", data, fit.eta);
    write_eigenfunctions_csv(args.out + "/eigenfunctions.csv", fit.decomp);
    write_eigenvalues_csv(args.out + "/eigenvalues.csv", fit.decomp);
    write_mean_csv(args.out + "/mean.csv", fit.decomp);

    std::map<std::string, std::string> hashes;
    hashes["input"] = sha256_file(args.input);
    for (const char* f : {"eta.csv", "eigenfunctions.csv", "eigenvalues.csv", "mean.csv"})
        hashes[f] = sha256_file(args.out + "/" + std::string(f));
    std::map<std::string, std::string> extra;
    extra["provenance_converged"] = std::to_string(fit.eta.count_status(FitStatus::converged));
    extra["provenance_singular_a"] = std::to_string(fit.eta.count_status(FitStatus::singular_a));
    extra["provenance_singular_b"] = std::to_string(fit.eta.count_status(FitStatus::singular_b));
    extra["provenance_singular_ab"] = std::to_string(fit.eta.count_status(FitStatus::singular_ab));
    extra["provenance_degenerate"] = std::to_string(fit.eta.count_status(FitStatus::degenerate));
    extra["provenance_failed"] = std::to_string(fit.eta.count_status(FitStatus::failed));
    write_manifest(args.out + "/manifest_fit.json", echo_config(args, "fit"), hashes, extra);

    json summary;
    summary["n_bins"] = fit.plan.size();
    summary["bin_points_interior"] = 2 * fit.plan.half_width + 1;
    summary["level1_components"] = fit.decomp.n_level1();
    summary["level2_components"] = fit.decomp.n_level2();
    summary["level1_share"] = fit.decomp.level1_share();
    summary["provenance_converged"] = fit.eta.count_status(FitStatus::converged);
    summary["provenance_degenerate"] = fit.eta.count_status(FitStatus::degenerate);
    summary["provenance_failed"] = fit.eta.count_status(FitStatus::failed);
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_scores(CommonArgs& args, const std::string& decomposition_dir) {
    apply_config_file(args);
    if (args.input.empty()) throw ConfigError("--input is required");
    if (args.out.empty()) throw ConfigError("--out is required");
    if (decomposition_dir.empty()) throw ConfigError("--decomposition is required");

    SamplingGrid grid = build_grid(args);
    Family family = family_from_name(args.family);
    std::optional<double> thr;
    if (args.threshold_set) thr = args.threshold;
    auto data = read_long_csv(args.input, grid, family, thr);

    auto decomp = read_decomposition(decomposition_dir);
    decomp.ds = grid.ds();

    PipelineOptions opt = build_pipeline_options(args);

    // Warm start from the fit stage's eta dump when present.
    std::unique_ptr<LatentPredictorMatrix> eta;
    std::string eta_path = decomposition_dir + "/eta.csv";
    if (fs::exists(eta_path)) {
        eta = std::make_unique<LatentPredictorMatrix>(read_eta_csv(eta_path, data));
        // Only the eta values are recoverable from the dump; project them
        // after removing the mean rather than using the unavailable a/b split.
        Eigen::MatrixXd centered = eta->eta;
        for (Eigen::Index p = 0; p < centered.rows(); ++p)
            centered.row(p) -= decomp.mu0.transpose();
        Eigen::MatrixXd subj_mean = Eigen::MatrixXd::Zero(data.n_subjects(), data.n_points());
        for (int p = 0; p < data.n_pairs(); ++p)
            subj_mean.row(data.pairs[static_cast<std::size_t>(p)].subject) += centered.row(p);
        for (int s = 0; s < data.n_subjects(); ++s)
            subj_mean.row(s) /= static_cast<double>(data.n_visits_of(s));
        eta->a = subj_mean;
        for (int p = 0; p < data.n_pairs(); ++p)
            eta->b.row(p) = centered.row(p) -
                            subj_mean.row(data.pairs[static_cast<std::size_t>(p)].subject);
    }

    auto post = run_scores_stage(data, decomp, eta.get(), opt);

    fs::create_directories(args.out);
    write_scores_level1_csv(args.out + "/scores_level1.csv", data, post);
    write_scores_level2_csv(args.out + "/scores_level2.csv", data, post);
    write_l2esd_csv(args.out + "/l2e_sd.csv", data, post);
    write_eta_hat_csv(args.out + "/eta_hat.csv", data, post);
    write_score_diagnostics_json(args.out + "/diagnostics.json", post);

    std::map<std::string, std::string> hashes;
    hashes["input"] = sha256_file(args.input);
    hashes["decomposition/eigenfunctions.csv"] =
        sha256_file(decomposition_dir + "/eigenfunctions.csv");
    for (const char* f : {"scores_level1.csv", "scores_level2.csv", "l2e_sd.csv", "eta_hat.csv"})
        hashes[f] = sha256_file(args.out + "/" + std::string(f));
    std::map<std::string, std::string> extra;
    extra["decomposition"] = decomposition_dir;
    if (!post.used_indices.empty() &&
        static_cast<int>(post.used_indices.size()) != data.n_points()) {
        std::ostringstream os;
        for (std::size_t i = 0; i < post.used_indices.size(); ++i) {
            if (i) os << ' ';
            os << post.used_indices[i] + 1;
        }
        extra["downsample_time_indices"] = os.str();
    }
    int n_groups = 1;
    for (int g : post.group_of_subject) n_groups = std::max(n_groups, g + 1);
    extra["n_groups"] = std::to_string(n_groups);
    write_manifest(args.out + "/manifest_scores.json", echo_config(args, "scores"), hashes, extra);

    json summary;
    summary["n_groups"] = n_groups;
    summary["nonconvergence_warning"] = post.nonconvergence_warning;
    summary["lambda1_mean"] = std::vector<double>(
        post.lambda1_mean.data(), post.lambda1_mean.data() + post.lambda1_mean.size());
    summary["lambda2_mean"] = std::vector<double>(
        post.lambda2_mean.data(), post.lambda2_mean.data() + post.lambda2_mean.size());
    summary["runtime_seconds"] = post.runtime_seconds;
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

// Kernel-smoothed group-mean activity profiles for subjects in the top and
// bottom tails of each level-1 score.
void write_highlow_profiles(const std::string& run_dir, const std::string& out_dir,
                            const MultilevelFunctionalDataset& data) {
    std::ifstream sc(run_dir + "/scores_level1.csv");
    if (!sc) return;
    std::string line;
    std::getline(sc, line);
    std::map<std::string, std::map<int, double>> score_of; // subject -> component -> mean
    int max_comp = 0;
    while (std::getline(sc, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string sid, comp, mean, sd;
        std::getline(ss, sid, ',');
        std::getline(ss, comp, ',');
        std::getline(ss, mean, ',');
        std::getline(ss, sd, ',');
        int c = std::stoi(comp);
        score_of[sid][c] = std::stod(mean);
        max_comp = std::max(max_comp, c);
    }

    const int K = data.n_points();
    std::ofstream out(out_dir + "/plotdata_highlow_level1.csv");
    out << "component,tail,time_index,mean_value,smoothed_value\n";
    int n_comp = std::min(max_comp, 3);
    for (int c = 1; c <= n_comp; ++c) {
        std::vector<std::pair<double, int>> ranked;
        for (int s = 0; s < data.n_subjects(); ++s) {
            auto it = score_of.find(data.subject_ids[static_cast<std::size_t>(s)]);
            if (it != score_of.end() && it->second.count(c))
                ranked.push_back({it->second[c], s});
        }
        if (ranked.size() < 4) continue;
        std::sort(ranked.begin(), ranked.end());
        std::size_t tail = std::max<std::size_t>(1, ranked.size() / 20);
        for (int hi = 0; hi < 2; ++hi) {
            std::vector<int> subjects;
            for (std::size_t t = 0; t < tail; ++t)
                subjects.push_back(hi ? ranked[ranked.size() - 1 - t].second : ranked[t].second);
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(K);
            Eigen::VectorXd count = Eigen::VectorXd::Zero(K);
            for (int s : subjects)
                for (int p : data.pairs_of_subject[static_cast<std::size_t>(s)])
                    for (int k = 0; k < K; ++k)
                        if (data.has_value(p, k)) { mean(k) += data.values(p, k); count(k) += 1; }
            for (int k = 0; k < K; ++k) mean(k) = count(k) > 0 ? mean(k) / count(k) : 0;
            // light kernel smooth for display
            int bw = std::max(2, K / 50);
            Eigen::VectorXd smooth = Eigen::VectorXd::Zero(K);
            for (int k = 0; k < K; ++k) {
                double acc = 0, w = 0;
                for (int d = -bw; d <= bw; ++d) {
                    int kk = k + d;
                    if (data.grid.cyclic) kk = ((kk % K) + K) % K;
                    else if (kk < 0 || kk >= K) continue;
                    double u = static_cast<double>(d) / (bw + 1e-12);
                    double ww = std::fabs(u) >= 1 ? 0 : 0.75 * (1 - u * u);
                    acc += ww * mean(kk);
                    w += ww;
                }
                smooth(k) = w > 0 ? acc / w : mean(k);
            }
            for (int k = 0; k < K; ++k)
                out << c << ',' << (hi ? "high" : "low") << ',' << (k + 1) << ','
                    << fmt_num(mean(k)) << ',' << fmt_num(smooth(k)) << '\n';
        }
    }
}

int cmd_report(const std::string& run_dir, std::string out_dir, const CommonArgs& args) {
    if (out_dir.empty()) out_dir = run_dir + "/report";
    bool found_any = false;
    json summary;
    summary["run"] = run_dir;

    fs::create_directories(out_dir);

    // Pass-through tables produced by earlier stages.
    for (const char* f : {"table.csv", "table_failures.csv", "table_eigenvalues.csv",
                          "eigenvalues.csv", "eigenfunctions.csv", "l2e_sd.csv"}) {
        fs::path src = fs::path(run_dir) / f;
        if (fs::exists(src)) {
            fs::copy_file(src, fs::path(out_dir) / f, fs::copy_options::overwrite_existing);
            summary["artifacts"].push_back(f);
            found_any = true;
        }
    }
    for (const char* f : {"manifest_simulate.json", "manifest_fit.json", "manifest_scores.json",
                          "diagnostics.json"}) {
        if (fs::exists(fs::path(run_dir) / f)) {
            summary["artifacts"].push_back(f);
            found_any = true;
        }
    }

    // High/low score profiles need both the dataset and level-1 scores.
    fs::path dataset_path = fs::path(run_dir) / "dataset.csv";
    fs::path scores_path = fs::path(run_dir) / "scores_level1.csv";
    if (fs::exists(dataset_path) && fs::exists(scores_path)) {
        // Grid parameters come from the fit manifest when available.
        int K = args.grid_points;
        bool cyclic = args.grid_cyclic;
        std::string family = args.family;
        fs::path mf = fs::path(run_dir) / "manifest_fit.json";
        if (fs::exists(mf)) {
            std::ifstream in(mf);
            json j = json::parse(in);
            K = std::stoi(j["config"]["grid.points"].get<std::string>());
            cyclic = j["config"]["grid.cyclic"].get<std::string>() == "true";
            family = j["config"]["family"].get<std::string>();
        }
        if (K >= 3) {
            auto grid = SamplingGrid::uniform(K, 0.0, 1.0 / std::max(1, K - 1), cyclic);
            auto data = read_long_csv(dataset_path.string(), grid, family_from_name(family));
            write_highlow_profiles(run_dir, out_dir, data);
            summary["artifacts"].push_back("plotdata_highlow_level1.csv");
            found_any = true;
        }
    }

    if (!found_any) throw NoRunFound("no run artifacts found in " + run_dir);

    std::ofstream out(out_dir + "/summary.json");
    out << summary.dump(2) << '\n';
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_replicate(CommonArgs& args, const std::string& subjects_list, int visits, int points,
                  const std::string& case_list, double b0, int reps, const std::string& metric) {
    apply_config_file(args);
    if (args.out.empty()) throw ConfigError("--out is required");

    std::vector<int> subject_counts;
    {
        std::istringstream ss(subjects_list);
        std::string tok;
        while (std::getline(ss, tok, ',')) subject_counts.push_back(std::stoi(tok));
    }
    std::vector<int> cases;
    {
        std::istringstream ss(case_list);
        std::string tok;
        while (std::getline(ss, tok, ',')) cases.push_back(std::stoi(tok));
    }
    if (subject_counts.empty() || cases.empty())
        throw ConfigError("--subjects and --case must be non-empty lists");

    std::vector<ScenarioSpec> scenarios;
    for (int c : cases) {
        for (int I : subject_counts) {
            ScenarioSpec sc;
            sc.row_label = "Case " + std::to_string(c);
            sc.col_label = "I = " + std::to_string(I);
            sc.config.family = family_from_name(args.family);
            sc.config.basis_case = c;
            sc.config.n_subjects = I;
            sc.config.n_visits = visits;
            sc.config.n_points = points;
            sc.config.b0 = b0;
            sc.config.seed = args.seed;
            scenarios.push_back(sc);
        }
    }

    TableMetric tm;
    if (metric == "mse") tm = TableMetric::mse;
    else if (metric == "ise") tm = TableMetric::ise;
    else throw ConfigError("--metric must be mse or ise");

    PipelineOptions popt = build_pipeline_options(args);
    auto table = replicate_table(scenarios, reps, tm, popt);

    fs::create_directories(args.out);
    write_replicate_table_csv(args.out + "/table.csv", table);
    write_replicate_failures_csv(args.out + "/table_failures.csv", table);
    write_replicate_eigenvalues_csv(args.out + "/table_eigenvalues.csv", table);

    std::map<std::string, std::string> cfg = echo_config(args, "replicate");
    cfg["replicate.subjects"] = subjects_list;
    cfg["replicate.cases"] = case_list;
    cfg["replicate.visits"] = std::to_string(visits);
    cfg["replicate.points"] = std::to_string(points);
    cfg["replicate.b0"] = fmt_num(b0);
    cfg["replicate.reps"] = std::to_string(reps);
    cfg["replicate.metric"] = metric;
    std::map<std::string, std::string> hashes;
    hashes["table.csv"] = sha256_file(args.out + "/table.csv");
    write_manifest(args.out + "/manifest_replicate.json", cfg, hashes);

    std::cout << "wrote " << args.out << "/table.csv" << std::endl;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generalized multilevel functional PCA pipeline"};
    app.require_subcommand(1);

    CommonArgs args;

    auto* sim = app.add_subcommand("simulate", "generate synthetic multilevel functional data");
    int sim_subjects = 50, sim_visits = 5, sim_points = 100, sim_case = 1;
    double sim_b0 = 0;
    add_common_flags(sim, args, false);
    sim->add_option("--family", args.family, "binary|poisson");
    sim->add_option("--case", sim_case, "basis case (1 or 2)");
    sim->add_option("--subjects", sim_subjects, "number of subjects")->required();
    sim->add_option("--visits", sim_visits, "visits per subject")->required();
    sim->add_option("--points", sim_points, "K; the grid has K+1 points")->required();
    sim->add_option("--b0", sim_b0, "link-scale intercept");

    auto* fit = app.add_subcommand("fit", "run binning, local fits and the decomposition");
    add_common_flags(fit, args, true);
    fit->add_option("--bin-width", args.bin_width_points, "window width in grid points");
    fit->add_option("--bin-width-pct", args.bin_width_pct, "window width as percent of K");
    fit->add_option("--bin-mode", args.bin_mode, "offset|total width interpretation");
    fit->add_option("--bandwidth", args.bandwidth, "covariance smoother bandwidth (grid units)");
    fit->add_option("--pve", args.pve, "variance threshold for component counts");
    fit->add_option("--max-components", args.max_components, "component cap per level");
    fit->add_flag("--visit-effects", args.visit_effects, "include visit fixed effects");
    fit->add_flag("--keep-l2-diagonal", args.keep_l2_diagonal,
                  "keep the level-2 covariance diagonal in the smooth");

    auto* sco = app.add_subcommand("scores", "Bayesian score estimation from a decomposition");
    std::string decomposition_dir;
    add_common_flags(sco, args, true);
    sco->add_option("--decomposition", decomposition_dir, "directory with fit outputs");
    sco->add_option("--downsample", args.downsample, "downsample the grid to this many points");
    sco->add_option("--group-size", args.group_size, "subject-partition group size");
    sco->add_option("--warmup", args.warmup, "warmup iterations");
    sco->add_option("--iters", args.iters, "post-warmup iterations");
    sco->add_option("--chains", args.chains, "number of chains");
    sco->add_option("--prior", args.prior, "inv_gamma|half_cauchy|uniform");
    sco->add_option("--prior-a", args.prior_a, "inv_gamma shape");
    sco->add_option("--prior-b", args.prior_b, "inv_gamma scale");
    sco->add_option("--prior-scale", args.prior_scale, "half_cauchy scale");
    sco->add_option("--prior-upper", args.prior_upper, "uniform upper bound");
    sco->add_option("--fixed-effects", args.fixed_effects, "offset|refit");

    auto* rep = app.add_subcommand("report", "summaries and plot data for a run directory");
    std::string run_dir, report_out;
    rep->add_option("--run", run_dir, "run directory")->required();
    rep->add_option("--out", report_out, "report output directory");
    rep->add_option("--grid-points", args.grid_points, "grid size fallback for plot data");

    auto* tab = app.add_subcommand("replicate", "desk-scale error tables over seeded replicates");
    std::string subjects_list = "50", case_list = "1", metric = "mse";
    int tab_visits = 5, tab_points = 100, tab_reps = 20;
    double tab_b0 = 0;
    add_common_flags(tab, args, false);
    tab->add_option("--family", args.family, "binary|poisson");
    tab->add_option("--subjects", subjects_list, "comma-separated subject counts");
    tab->add_option("--case", case_list, "comma-separated basis cases");
    tab->add_option("--visits", tab_visits, "visits per subject");
    tab->add_option("--points", tab_points, "K per scenario");
    tab->add_option("--b0", tab_b0, "link-scale intercept");
    tab->add_option("--reps", tab_reps, "replicates per scenario");
    tab->add_option("--metric", metric, "mse|ise");
    tab->add_option("--bin-width-pct", args.bin_width_pct, "window width as percent of K");
    tab->add_option("--bandwidth", args.bandwidth, "covariance smoother bandwidth (grid units)");
    tab->add_option("--pve", args.pve, "variance threshold for component counts");
    tab->add_option("--max-components", args.max_components, "component cap per level");
    tab->add_option("--fixed-effects", args.fixed_effects, "offset|refit");
    tab->add_option("--warmup", args.warmup, "warmup iterations");
    tab->add_option("--iters", args.iters, "post-warmup iterations");
    tab->add_option("--chains", args.chains, "number of chains");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << std::endl;
        return 2;
    }

    try {
        if (sim->parsed()) return cmd_simulate(args, sim_subjects, sim_visits, sim_points,
                                               sim_case, sim_b0);
        if (fit->parsed()) return cmd_fit(args);
        if (sco->parsed()) return cmd_scores(args, decomposition_dir);
        if (rep->parsed()) return cmd_report(run_dir, report_out, args);
        if (tab->parsed()) return cmd_replicate(args, subjects_list, tab_visits, tab_points,
                                                case_list, tab_b0, tab_reps, metric);
    } catch (const ConfigError& e) {
        json err;
        err["error"] = e.what();
        err["type"] = "usage";
        std::cerr << err.dump() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        json err;
        err["error"] = e.what();
        err["type"] = "pipeline";
        std::cerr << err.dump() << std::endl;
        return 1;
    }
    return 2;
}
