#pragma once

#include "gmfpca/grid.hpp"

#include <Eigen/Dense>
#include <string>
#include <unordered_map>
#include <vector>

namespace gmfpca {

enum class Family { binary, poisson, gaussian };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

// Long-format observations on a shared grid, stored densely per
// (subject, visit) pair with NaN marking missing cells. Subject and visit
// labels are mapped to dense indices in order of first appearance, which
// keeps the whole pipeline equivariant under relabeling.
class MultilevelFunctionalDataset {
public:
    struct Pair {
        int subject; // dense subject index
        int visit;   // dense visit-label index
    };

    struct DuplicateTriple {
        std::string subject_id;
        std::string visit_id;
        int k; // 0-based grid index
    };

    SamplingGrid grid;
    Family family = Family::binary;

    std::vector<std::string> subject_ids; // dense subject index -> label
    std::vector<std::string> visit_ids;   // dense visit-label index -> label
    std::vector<Pair> pairs;              // dense pair index -> (subject, visit)
    Eigen::MatrixXd values;               // pairs x K, NaN = missing

    std::vector<std::vector<int>> pairs_of_subject; // subject -> pair indices
    std::vector<DuplicateTriple> duplicate_triples; // retained for validation

    int n_subjects() const { return static_cast<int>(subject_ids.size()); }
    int n_pairs() const { return static_cast<int>(pairs.size()); }
    int n_points() const { return grid.size(); }
    int n_visits_of(int subject) const {
        return static_cast<int>(pairs_of_subject[static_cast<std::size_t>(subject)].size());
    }
    bool has_value(int pair, int k) const {
        return !std::isnan(values(pair, k));
    }
    long n_observations() const;

    // Returns a copy with subject labels renamed via the map (structure and
    // record order untouched).
    MultilevelFunctionalDataset relabel_subjects(
        const std::unordered_map<std::string, std::string>& mapping) const;
};

// Incremental construction from long-format records. Keeps the first value
// for duplicate (subject, visit, k) triples and remembers the duplicates so
// validate_dataset can report them.
class DatasetBuilder {
public:
    DatasetBuilder(SamplingGrid grid, Family family);

    // k is a 0-based grid index.
    void add(const std::string& subject_id, const std::string& visit_id, int k, double value);

    MultilevelFunctionalDataset finalize();

private:
    SamplingGrid grid_;
    Family family_;
    std::vector<std::string> subject_ids_;
    std::vector<std::string> visit_ids_;
    std::unordered_map<std::string, int> subject_index_;
    std::unordered_map<std::string, int> visit_index_;
    std::unordered_map<long long, int> pair_index_; // subject * 2^32 + visit
    std::vector<MultilevelFunctionalDataset::Pair> pairs_;
    std::vector<std::vector<std::pair<int, double>>> cells_; // per pair: (k, value)
    std::vector<MultilevelFunctionalDataset::DuplicateTriple> duplicates_;
};

enum class Severity { info, warning, error };

struct ValidationEntry {
    Severity severity;
    std::string code;    // e.g. "duplicate_triple", "family_violation"
    std::string message; // names the offending record where applicable
};

struct ValidationReport {
    std::vector<ValidationEntry> entries;
    std::vector<long> observations_per_point; // per 0-based grid index

    int n_errors() const;
    int n_warnings() const;
    bool ok() const { return n_errors() == 0; }
};

// Never throws; all findings are carried in the report.
ValidationReport validate_dataset(const MultilevelFunctionalDataset& data);

} // namespace gmfpca
