#pragma once

#include "gmfpca/dataset.hpp"
#include "gmfpca/glmm.hpp"
#include "gmfpca/mfpca.hpp"
#include "gmfpca/pipeline.hpp"
#include "gmfpca/scores.hpp"
#include "gmfpca/simulation.hpp"

#include <map>
#include <optional>
#include <string>

namespace gmfpca {

// Stable numeric formatting for reproducible text outputs.
std::string fmt_num(double v);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

// Long-format ingestion: header `subject_id,visit_id,time_index,value`,
// 1-based time_index. An optional threshold dichotomizes continuous inputs
// (value = 1 when raw > threshold).
MultilevelFunctionalDataset read_long_csv(const std::string& path, const SamplingGrid& grid,
                                          Family family,
                                          std::optional<double> threshold = std::nullopt);
void write_long_csv(const std::string& path, const MultilevelFunctionalDataset& data);

void write_eta_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                   const LatentPredictorMatrix& eta);
// Reads an eta dump back into (a+b)-free form: only eta values and provenance.
LatentPredictorMatrix read_eta_csv(const std::string& path,
                                   const MultilevelFunctionalDataset& data);

void write_eigenfunctions_csv(const std::string& path, const MfpcaDecomposition& dec);
void write_eigenvalues_csv(const std::string& path, const MfpcaDecomposition& dec);
void write_mean_csv(const std::string& path, const MfpcaDecomposition& dec);
MfpcaDecomposition read_decomposition(const std::string& dir);

void write_scores_level1_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                             const ScorePosterior& post);
void write_scores_level2_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                             const ScorePosterior& post);
void write_l2esd_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                     const ScorePosterior& post);
void write_score_diagnostics_json(const std::string& path, const ScorePosterior& post);
void write_eta_hat_csv(const std::string& path, const MultilevelFunctionalDataset& data,
                       const ScorePosterior& post);

void write_truth_files(const std::string& dir, const SimulationTruth& truth);

void write_replicate_table_csv(const std::string& path, const ReplicateTable& table);
void write_replicate_failures_csv(const std::string& path, const ReplicateTable& table);
// Per-replicate posterior-mean eigenvalues (boxplot inputs).
void write_replicate_eigenvalues_csv(const std::string& path, const ReplicateTable& table);

// Deterministic JSON manifest: echoed configuration plus content hashes of the
// inputs and outputs. No timestamps, so identical runs produce identical bytes.
void write_manifest(const std::string& path, const std::map<std::string, std::string>& config,
                    const std::map<std::string, std::string>& file_hashes,
                    const std::map<std::string, std::string>& extra = {});

} // namespace gmfpca
