#include "gmfpca/grid.hpp"
#include "gmfpca/errors.hpp"

#include <cmath>
#include <string>

namespace gmfpca {

SamplingGrid::SamplingGrid(std::vector<double> pts, bool cyc)
    : points(std::move(pts)), cyclic(cyc) {
    if (points.size() < 3)
        throw GridTooSmall("sampling grid needs at least 3 points, got " +
                           std::to_string(points.size()));
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (!(points[i] > points[i - 1]))
            throw Error("grid points must be strictly increasing (index " +
                        std::to_string(i) + ")");
    }
}

SamplingGrid SamplingGrid::uniform_unit(int K, bool cyclic) {
    return uniform(K, 0.0, K > 1 ? 1.0 / (K - 1) : 1.0, cyclic);
}

SamplingGrid SamplingGrid::uniform(int K, double start, double step, bool cyclic) {
    std::vector<double> pts(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) pts[static_cast<std::size_t>(k)] = start + step * k;
    return SamplingGrid(std::move(pts), cyclic);
}

double SamplingGrid::ds() const {
    if (points.size() < 2) return 1.0;
    return (points.back() - points.front()) / static_cast<double>(points.size() - 1);
}

BinPlan make_bins(int K, int w, bool cyclic, BinWidthMode mode) {
    if (K < 3) throw GridTooSmall("make_bins: grid size " + std::to_string(K) + " < 3");
    if (w < 1 || w >= K)
        throw InvalidBinWidth("make_bins: window width " + std::to_string(w) +
                              " outside [1, " + std::to_string(K) + ")");

    int lo, hi; // offsets below/above the center
    if (mode == BinWidthMode::index_offset) {
        int h = (w + 1) / 2; // ceil(w/2)
        lo = hi = h;
    } else {
        lo = (w - 1) / 2;
        hi = w - 1 - lo;
    }
    if (cyclic && lo + hi + 1 > K)
        throw InvalidBinWidth("make_bins: cyclic window of " + std::to_string(lo + hi + 1) +
                              " points would wrap onto itself on a grid of " +
                              std::to_string(K));

    BinPlan plan;
    plan.half_width = (mode == BinWidthMode::index_offset) ? (w + 1) / 2 : lo;
    plan.cyclic = cyclic;
    plan.bins.resize(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        auto& bin = plan.bins[static_cast<std::size_t>(k)];
        if (cyclic) {
            // 2h+1 indices always; wrap must not self-overlap (guaranteed by w < K).
            for (int d = -lo; d <= hi; ++d) {
                int idx = ((k + d) % K + K) % K;
                bin.push_back(idx);
            }
        } else {
            for (int d = -lo; d <= hi; ++d) {
                int idx = k + d;
                if (idx >= 0 && idx < K) bin.push_back(idx);
            }
        }
    }
    return plan;
}

} // namespace gmfpca
