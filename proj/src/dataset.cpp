#include "gmfpca/dataset.hpp"
#include "gmfpca/errors.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace gmfpca {

std::string family_name(Family f) {
    switch (f) {
        case Family::binary: return "binary";
        case Family::poisson: return "poisson";
        case Family::gaussian: return "gaussian";
    }
    return "unknown";
}

Family family_from_name(const std::string& name) {
    if (name == "binary") return Family::binary;
    if (name == "poisson") return Family::poisson;
    if (name == "gaussian") return Family::gaussian;
    throw ConfigError("unknown family '" + name + "' (expected binary|poisson|gaussian)");
}

long MultilevelFunctionalDataset::n_observations() const {
    long n = 0;
    for (int p = 0; p < n_pairs(); ++p)
        for (int k = 0; k < n_points(); ++k)
            if (has_value(p, k)) ++n;
    return n;
}

MultilevelFunctionalDataset MultilevelFunctionalDataset::relabel_subjects(
    const std::unordered_map<std::string, std::string>& mapping) const {
    MultilevelFunctionalDataset out = *this;
    for (auto& id : out.subject_ids) {
        auto it = mapping.find(id);
        if (it != mapping.end()) id = it->second;
    }
    for (auto& d : out.duplicate_triples) {
        auto it = mapping.find(d.subject_id);
        if (it != mapping.end()) d.subject_id = it->second;
    }
    return out;
}

DatasetBuilder::DatasetBuilder(SamplingGrid grid, Family family)
    : grid_(std::move(grid)), family_(family) {}

void DatasetBuilder::add(const std::string& subject_id, const std::string& visit_id,
                         int k, double value) {
    if (k < 0 || k >= grid_.size())
        throw Error("record (" + subject_id + ", " + visit_id + ") has grid index " +
                    std::to_string(k + 1) + " outside [1, " + std::to_string(grid_.size()) + "]");

    int si;
    if (auto it = subject_index_.find(subject_id); it != subject_index_.end()) {
        si = it->second;
    } else {
        si = static_cast<int>(subject_ids_.size());
        subject_index_.emplace(subject_id, si);
        subject_ids_.push_back(subject_id);
    }
    int vi;
    if (auto it = visit_index_.find(visit_id); it != visit_index_.end()) {
        vi = it->second;
    } else {
        vi = static_cast<int>(visit_ids_.size());
        visit_index_.emplace(visit_id, vi);
        visit_ids_.push_back(visit_id);
    }

    long long key = (static_cast<long long>(si) << 32) | static_cast<unsigned>(vi);
    int pi;
    if (auto it = pair_index_.find(key); it != pair_index_.end()) {
        pi = it->second;
    } else {
        pi = static_cast<int>(pairs_.size());
        pair_index_.emplace(key, pi);
        pairs_.push_back({si, vi});
        cells_.emplace_back();
    }

    for (const auto& [kk, vv] : cells_[static_cast<std::size_t>(pi)]) {
        (void)vv;
        if (kk == k) {
            duplicates_.push_back({subject_id, visit_id, k});
            return; // keep first value
        }
    }
    cells_[static_cast<std::size_t>(pi)].emplace_back(k, value);
}

MultilevelFunctionalDataset DatasetBuilder::finalize() {
    MultilevelFunctionalDataset d;
    d.grid = grid_;
    d.family = family_;
    d.subject_ids = std::move(subject_ids_);
    d.visit_ids = std::move(visit_ids_);
    d.pairs = std::move(pairs_);
    d.duplicate_triples = std::move(duplicates_);

    const int P = static_cast<int>(d.pairs.size());
    const int K = d.grid.size();
    d.values.setConstant(P, K, std::numeric_limits<double>::quiet_NaN());
    for (int p = 0; p < P; ++p)
        for (const auto& [k, v] : cells_[static_cast<std::size_t>(p)])
            d.values(p, k) = v;

    d.pairs_of_subject.resize(d.subject_ids.size());
    for (int p = 0; p < P; ++p)
        d.pairs_of_subject[static_cast<std::size_t>(d.pairs[static_cast<std::size_t>(p)].subject)]
            .push_back(p);
    return d;
}

int ValidationReport::n_errors() const {
    int n = 0;
    for (const auto& e : entries)
        if (e.severity == Severity::error) ++n;
    return n;
}

int ValidationReport::n_warnings() const {
    int n = 0;
    for (const auto& e : entries)
        if (e.severity == Severity::warning) ++n;
    return n;
}

namespace {

bool family_violation(Family f, double v) {
    if (std::isnan(v)) return false;
    switch (f) {
        case Family::binary:
            return !(v == 0.0 || v == 1.0);
        case Family::poisson:
            return v < 0.0 || v != std::floor(v);
        case Family::gaussian:
            return !std::isfinite(v);
    }
    return false;
}

} // namespace

ValidationReport validate_dataset(const MultilevelFunctionalDataset& data) {
    ValidationReport rep;
    const int K = data.n_points();
    rep.observations_per_point.assign(static_cast<std::size_t>(K), 0);

    if (data.n_pairs() == 0) {
        rep.entries.push_back({Severity::error, "empty_dataset", "dataset contains no records"});
        return rep;
    }

    for (const auto& dup : data.duplicate_triples) {
        std::ostringstream os;
        os << "duplicate record for subject " << dup.subject_id << ", visit " << dup.visit_id
           << ", time_index " << (dup.k + 1) << " (first value kept)";
        rep.entries.push_back({Severity::error, "duplicate_triple", os.str()});
    }

    for (int p = 0; p < data.n_pairs(); ++p) {
        const auto& pr = data.pairs[static_cast<std::size_t>(p)];
        for (int k = 0; k < K; ++k) {
            double v = data.values(p, k);
            if (std::isnan(v)) continue;
            ++rep.observations_per_point[static_cast<std::size_t>(k)];
            if (family_violation(data.family, v)) {
                std::ostringstream os;
                os << "value " << v << " violates family " << family_name(data.family)
                   << " at subject " << data.subject_ids[static_cast<std::size_t>(pr.subject)]
                   << ", visit " << data.visit_ids[static_cast<std::size_t>(pr.visit)]
                   << ", time_index " << (k + 1);
                rep.entries.push_back({Severity::error, "family_violation", os.str()});
            }
        }
    }

    // Level-2 estimability: with one visit per subject, the subject-visit
    // intercept is only identified through within-bin replication, which a
    // width-1 bin cannot provide.
    bool all_single_visit = true;
    for (int s = 0; s < data.n_subjects(); ++s)
        if (data.n_visits_of(s) > 1) { all_single_visit = false; break; }
    if (all_single_visit) {
        rep.entries.push_back(
            {Severity::warning, "level2_single_visit",
             "every subject has a single visit; subject-visit intercepts are "
             "identifiable only through within-bin replication (requires bin width > 1)"});
    }

    long empty_points = 0;
    for (long c : rep.observations_per_point)
        if (c == 0) ++empty_points;
    if (empty_points > 0) {
        rep.entries.push_back({Severity::warning, "empty_grid_points",
                               std::to_string(empty_points) +
                                   " grid points have no observations"});
    }

    std::ostringstream os;
    os << data.n_subjects() << " subjects, " << data.n_pairs() << " subject-visits, "
       << data.n_observations() << " observations on " << K << " grid points";
    rep.entries.push_back({Severity::info, "summary", os.str()});
    return rep;
}

} // namespace gmfpca
