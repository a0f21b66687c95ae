#pragma once

#include <vector>

namespace gmfpca {

// Ordered sampling grid over the functional domain. Indices are 0-based
// internally; file formats use 1-based time_index.
struct SamplingGrid {
    std::vector<double> points; // strictly increasing
    bool cyclic = false;

    SamplingGrid() = default;
    SamplingGrid(std::vector<double> pts, bool cyc);

    // K equally spaced points on [0, 1].
    static SamplingGrid uniform_unit(int K, bool cyclic = false);
    // K points start, start+step, ...
    static SamplingGrid uniform(int K, double start, double step, bool cyclic = false);

    int size() const { return static_cast<int>(points.size()); }

    // Riemann cell width used for inner products; uniform-spacing convention.
    double ds() const;
};

// Per-center index windows from the sliding-window partition.
struct BinPlan {
    std::vector<std::vector<int>> bins; // bins[k] = sorted 0-based indices, center first wrapped in order
    int half_width = 0;                 // h = ceil(w/2)
    bool cyclic = false;

    int size() const { return static_cast<int>(bins.size()); }
};

enum class BinWidthMode {
    // w is an index offset: bin = {k-ceil(w/2), ..., k+ceil(w/2)}, cardinality 2*ceil(w/2)+1.
    index_offset,
    // w is the total number of points in an interior bin.
    total_points,
};

// Sliding-window bins for a grid of K points. Cyclic grids wrap indices
// modulo K; otherwise boundary bins are truncated.
BinPlan make_bins(int K, int w, bool cyclic, BinWidthMode mode = BinWidthMode::index_offset);

} // namespace gmfpca
