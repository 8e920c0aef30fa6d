#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/sphere.hpp"

namespace tracto {

// Ordered RAS-mm points.
struct Streamline {
    std::vector<Vec3> points;

    int size() const { return static_cast<int>(points.size()); }

    double length() const {
        double total = 0.0;
        for (std::size_t i = 1; i < points.size(); ++i)
            total += (points[i] - points[i - 1]).norm();
        return total;
    }
};

// All coordinates are RAS-mm.
struct Tractogram {
    std::vector<Streamline> streamlines;

    int size() const { return static_cast<int>(streamlines.size()); }
};

// Arc-length parameterized resampling: points at arc lengths 0, h, 2h, ...
// plus the original endpoint, so the final segment may be shorter than h.
inline Streamline resample_streamline(const Streamline& s, double step_size) {
    if (step_size <= 0.0) throw std::invalid_argument("resample_streamline: step_size must be > 0");
    if (s.size() < 2) throw std::invalid_argument("resample_streamline: need at least 2 points");

    std::vector<double> cum(s.points.size(), 0.0);
    for (std::size_t i = 1; i < s.points.size(); ++i)
        cum[i] = cum[i - 1] + (s.points[i] - s.points[i - 1]).norm();
    double total = cum.back();
    if (total <= 0.0)
        throw DegenerateStreamlineError("resample_streamline: zero-length streamline");

    Streamline out;
    std::size_t seg = 0;
    for (long k = 0;; ++k) {
        double t = static_cast<double>(k) * step_size;
        if (t >= total - 1e-9) break;
        while (seg + 1 < cum.size() && cum[seg + 1] < t) ++seg;
        double seg_len = cum[seg + 1] - cum[seg];
        double f = seg_len > 0.0 ? (t - cum[seg]) / seg_len : 0.0;
        out.points.push_back(s.points[seg] + f * (s.points[seg + 1] - s.points[seg]));
    }
    out.points.push_back(s.points.back());
    return out;
}

inline Streamline reverse_streamline(const Streamline& s) {
    Streamline out;
    out.points.assign(s.points.rbegin(), s.points.rend());
    return out;
}

// Supervision labels for a resampled streamline: one per point. Point i<n-1
// is labeled with the (smoothed or one-hot) class of unit(s_{i+1} - s_i);
// the terminal point is labeled EoF.
inline std::vector<SoftLabel> direction_targets(const Streamline& s, const Sphere& sphere,
                                                const SmoothingConfig& cfg, bool smooth = true) {
    if (s.size() < 2) throw std::invalid_argument("direction_targets: need at least 2 points");
    std::vector<SoftLabel> out;
    out.reserve(s.points.size());
    for (std::size_t i = 0; i + 1 < s.points.size(); ++i) {
        Vec3 d = s.points[i + 1] - s.points[i];
        double n = d.norm();
        if (n <= 0.0)
            throw DegenerateStreamlineError("direction_targets: duplicated consecutive points");
        d /= n;
        out.push_back(smooth ? smooth_label(d, sphere, cfg) : hard_label(d, sphere));
    }
    out.push_back(eof_label(sphere.k()));
    return out;
}

// Half-open [start, end) windows of at most `cap` points with `overlap`
// points shared between consecutive windows; the last window is anchored
// to the end of the sequence.
inline std::vector<std::pair<int, int>> split_windows(int n, int cap, int overlap) {
    if (cap < 2) throw std::invalid_argument("split_windows: cap must be >= 2");
    if (overlap < 0 || overlap >= cap)
        throw std::invalid_argument("split_windows: overlap must be in [0, cap)");
    if (n <= 0) return {};
    if (n <= cap) return {{0, n}};
    std::vector<std::pair<int, int>> out;
    int stride = cap - overlap;
    for (int start = 0;; start += stride) {
        int end = start + cap;
        if (end >= n) {
            out.emplace_back(std::max(0, n - cap), n);
            break;
        }
        out.emplace_back(start, end);
    }
    return out;
}

} // namespace tracto
