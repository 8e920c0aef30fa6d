#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/parallel.hpp"
#include "tracto/rng.hpp"
#include "tracto/sphere.hpp"
#include "tracto/streamline.hpp"
#include "tracto/volume.hpp"

namespace tracto {

struct BundleSpec {
    std::string name;
    std::vector<Vec3> centerline;   // polyline in RAS mm
    double radius = 2.2;            // tube radius, mm
};

struct PhantomSpec {
    int H = 32, W = 32, D = 32;
    double voxel_size = 1.0;                       // mm, isotropic
    std::vector<BundleSpec> bundles;
    double lambda_parallel = 1.7e-3;               // mm^2/s
    double lambda_perp = 3.0e-4;
    double bvalue = 1000.0;                        // s/mm^2
    int n_gradients = 32;                          // DWI directions (plus one b0)
    double s0 = 1.0;
    double noise_sigma = 0.0;                      // Rician sigma as a fraction of s0
    uint64_t rng_seed = 42;
    std::vector<Vec3> gradient_override;           // empty: Fibonacci directions
    double ref_step = 1.0;                         // reference streamline spacing, mm
    double roi_fraction = 0.85;                    // endpoint ROI arc-length fraction

    void validate() const {
        if (H < 3 || W < 3 || D < 3) throw std::invalid_argument("PhantomSpec: grid too small");
        if (voxel_size <= 0.0) throw std::invalid_argument("PhantomSpec: voxel_size must be > 0");
        if (!(lambda_parallel > lambda_perp && lambda_perp > 0.0))
            throw std::invalid_argument("PhantomSpec: need lambda_parallel > lambda_perp > 0");
        if (bvalue <= 0.0) throw std::invalid_argument("PhantomSpec: bvalue must be > 0");
        if (n_gradients < 2 && gradient_override.empty())
            throw std::invalid_argument("PhantomSpec: need at least 2 gradients");
        if (s0 <= 0.0) throw std::invalid_argument("PhantomSpec: s0 must be > 0");
        if (noise_sigma < 0.0) throw std::invalid_argument("PhantomSpec: noise_sigma must be >= 0");
        if (ref_step <= 0.0) throw std::invalid_argument("PhantomSpec: ref_step must be > 0");
        if (roi_fraction <= 0.5 || roi_fraction >= 1.0)
            throw std::invalid_argument("PhantomSpec: roi_fraction must be in (0.5, 1)");
        if (bundles.empty()) throw std::invalid_argument("PhantomSpec: no bundles");
        Vec3 lo = Vec3::Zero();
        Vec3 hi((H - 1) * voxel_size, (W - 1) * voxel_size, (D - 1) * voxel_size);
        for (const auto& b : bundles) {
            if (b.radius <= 0.0) throw std::invalid_argument("PhantomSpec: radius must be > 0");
            if (b.centerline.size() < 2)
                throw std::invalid_argument("PhantomSpec: centerline needs >= 2 points");
            for (const auto& p : b.centerline)
                for (int a = 0; a < 3; ++a)
                    if (p[a] - b.radius < lo[a] || p[a] + b.radius > hi[a])
                        throw std::invalid_argument("PhantomSpec: bundle '" + b.name +
                                                    "' does not fit inside the grid");
        }
    }
};

struct BundleGT {
    std::string name;
    std::vector<std::uint8_t> occupancy;   // ground-truth voxels (rasterized references)
    std::vector<std::uint8_t> head_roi;    // occupancy with arc param <= f*L
    std::vector<std::uint8_t> tail_roi;    // occupancy with arc param >= (1-f)*L
};

struct BundleGroundTruth {
    int H = 0, W = 0, D = 0;
    Affine affine = Affine::Identity();
    std::vector<BundleGT> bundles;
    Tractogram references;
};

struct PhantomOutput {
    DwiVolume dwi;
    ScalarMap wm_mask;
    ScalarMap fa_map;
    BundleGroundTruth gt;
};

namespace detail {

// Distance from p to a polyline, plus the arc-length parameter and unit
// tangent of the closest point.
struct PolylineHit {
    double distance;
    double arc_param;
    Vec3 tangent;
};

inline PolylineHit polyline_nearest(const Vec3& p, const std::vector<Vec3>& pts) {
    PolylineHit best{std::numeric_limits<double>::infinity(), 0.0, Vec3(1, 0, 0)};
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        Vec3 d = pts[i + 1] - pts[i];
        double len = d.norm();
        if (len < 1e-12) continue;
        double t = std::clamp((p - pts[i]).dot(d) / (len * len), 0.0, 1.0);
        Vec3 nearest = pts[i] + t * d;
        double dist = (p - nearest).norm();
        if (dist < best.distance) best = {dist, cum + t * len, d / len};
        cum += len;
    }
    return best;
}

inline double polyline_length(const std::vector<Vec3>& pts) {
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) cum += (pts[i + 1] - pts[i]).norm();
    return cum;
}

// Perpendicular frame at a tangent, stable for tubes that stay off the
// reference axis.
inline void tangent_frame(const Vec3& u, Vec3& n1, Vec3& n2) {
    Vec3 up(0, 0, 1);
    if (std::abs(u.dot(up)) > 0.9) up = Vec3(1, 0, 0);
    n1 = u.cross(up).normalized();
    n2 = u.cross(n1).normalized();
}

// Mark every voxel a streamline passes through (substep walk + rounding).
inline void rasterize_streamline(const Streamline& s, const Affine& ras_to_vox, int H, int W,
                                 int D, double substep_vox, std::vector<std::uint8_t>& flags) {
    auto mark = [&](const Vec3& ras) {
        Vec3 v = apply_affine(ras_to_vox, ras);
        int i = static_cast<int>(std::llround(v.x()));
        int j = static_cast<int>(std::llround(v.y()));
        int k = static_cast<int>(std::llround(v.z()));
        if (i < 0 || i >= H || j < 0 || j >= W || k < 0 || k >= D) return;
        flags[static_cast<std::size_t>(i) +
              static_cast<std::size_t>(H) * (static_cast<std::size_t>(j) +
                                             static_cast<std::size_t>(W) * k)] = 1;
    };
    if (s.points.empty()) return;
    mark(s.points.front());
    for (std::size_t i = 0; i + 1 < s.points.size(); ++i) {
        Vec3 a = s.points[i], b = s.points[i + 1];
        double len = (apply_affine(ras_to_vox, b) - apply_affine(ras_to_vox, a)).norm();
        int n_sub = std::max(1, static_cast<int>(std::ceil(len / substep_vox)));
        for (int j = 1; j <= n_sub; ++j) mark(a + (b - a) * (static_cast<double>(j) / n_sub));
    }
}

inline Eigen::Matrix3d bundle_tensor(const Vec3& tangent, double l_par, double l_perp) {
    return l_perp * Eigen::Matrix3d::Identity() +
           (l_par - l_perp) * (tangent * tangent.transpose());
}

} // namespace detail

// Offsets (in the tube cross-section) of the reference streamlines: the
// centerline plus two rings. Dense enough that their rasterization stands
// in for the bundle's ground-truth voxel footprint.
inline std::vector<std::pair<double, double>> reference_offsets(double radius) {
    std::vector<std::pair<double, double>> offs{{0.0, 0.0}};
    auto ring = [&](int count, double r) {
        for (int i = 0; i < count; ++i) {
            double a = 2.0 * std::numbers::pi * i / count;
            offs.emplace_back(r * std::cos(a), r * std::sin(a));
        }
    };
    double r_outer = std::max(0.3, radius - 0.9);
    ring(6, 0.5 * r_outer);
    ring(10, r_outer);
    return offs;
}

inline PhantomOutput generate_phantom(const PhantomSpec& spec, int threads = 1) {
    spec.validate();
    const int H = spec.H, W = spec.W, D = spec.D;
    const std::size_t n_vox = static_cast<std::size_t>(H) * W * D;

    std::vector<Vec3> dirs = spec.gradient_override;
    if (dirs.empty()) dirs = make_sphere(spec.n_gradients).directions();
    const int n_dwi = static_cast<int>(dirs.size());
    const int G = n_dwi + 1;   // leading b0 channel

    Affine affine = Affine::Identity();
    affine(0, 0) = affine(1, 1) = affine(2, 2) = spec.voxel_size;
    Affine ras_to_vox = Affine::Identity();
    ras_to_vox(0, 0) = ras_to_vox(1, 1) = ras_to_vox(2, 2) = 1.0 / spec.voxel_size;

    PhantomOutput out;
    out.dwi.H = H;
    out.dwi.W = W;
    out.dwi.D = D;
    out.dwi.G = G;
    out.dwi.affine = affine;
    out.dwi.data.assign(n_vox * static_cast<std::size_t>(G), 0.0);
    out.dwi.gradients.resize(static_cast<std::size_t>(G));
    out.dwi.bvalues.resize(static_cast<std::size_t>(G));
    out.dwi.gradients[0] = Vec3::Zero();
    out.dwi.bvalues[0] = 0.0;
    for (int g = 0; g < n_dwi; ++g) {
        out.dwi.gradients[static_cast<std::size_t>(g + 1)] = dirs[static_cast<std::size_t>(g)];
        out.dwi.bvalues[static_cast<std::size_t>(g + 1)] = spec.bvalue;
    }

    out.fa_map.H = H;
    out.fa_map.W = W;
    out.fa_map.D = D;
    out.fa_map.kind = ScalarMap::Kind::Fa;
    out.fa_map.affine = affine;
    out.fa_map.data.assign(n_vox, 0.0);

    const double l_par = spec.lambda_parallel, l_perp = spec.lambda_perp;
    const double lambda_iso = (l_par + 2.0 * l_perp) / 3.0;
    const double background = spec.s0 * std::exp(-spec.bvalue * lambda_iso);

    // per-voxel signal: mean of contributing bundle tensors, isotropic
    // background elsewhere; FA analytic from the mean generating tensor
    parallel_for(n_vox, threads, [&](std::size_t idx) {
        int i = static_cast<int>(idx % static_cast<std::size_t>(H));
        int j = static_cast<int>((idx / static_cast<std::size_t>(H)) % static_cast<std::size_t>(W));
        int k = static_cast<int>(idx / (static_cast<std::size_t>(H) * W));
        Vec3 ras = apply_affine(affine, Vec3(i, j, k));

        std::vector<Vec3> tangents;
        for (const auto& b : spec.bundles) {
            auto hit = detail::polyline_nearest(ras, b.centerline);
            if (hit.distance <= b.radius) tangents.push_back(hit.tangent);
        }

        std::size_t base = idx;   // channel stride is n_vox in fortran order
        if (tangents.empty()) {
            out.dwi.data[base] = spec.s0;
            for (int g = 0; g < n_dwi; ++g)
                out.dwi.data[base + n_vox * static_cast<std::size_t>(g + 1)] = background;
            return;
        }
        Eigen::Matrix3d mean_tensor = Eigen::Matrix3d::Zero();
        out.dwi.data[base] = spec.s0;
        for (int g = 0; g < n_dwi; ++g) {
            const Vec3& dir = dirs[static_cast<std::size_t>(g)];
            double acc = 0.0;
            for (const auto& u : tangents) {
                double gtdg = l_perp + (l_par - l_perp) * std::pow(dir.dot(u), 2);
                acc += spec.s0 * std::exp(-spec.bvalue * gtdg);
            }
            out.dwi.data[base + n_vox * static_cast<std::size_t>(g + 1)] =
                acc / static_cast<double>(tangents.size());
        }
        for (const auto& u : tangents) mean_tensor += detail::bundle_tensor(u, l_par, l_perp);
        mean_tensor /= static_cast<double>(tangents.size());
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(mean_tensor);
        out.fa_map.data[idx] =
            fa_from_eigenvalues(es.eigenvalues()[0], es.eigenvalues()[1], es.eigenvalues()[2]);
    });

    if (spec.noise_sigma > 0.0) {
        Rng rng(derive_seed(spec.rng_seed, 0x4015eu));
        double sigma = spec.noise_sigma * spec.s0;
        for (double& v : out.dwi.data) {
            double re = v + sigma * rng.normal();
            double im = sigma * rng.normal();
            v = std::sqrt(re * re + im * im);
        }
    }

    // references: centerline plus cross-section ring offsets, resampled to
    // the training step size
    out.gt.H = H;
    out.gt.W = W;
    out.gt.D = D;
    out.gt.affine = affine;
    const double substep_vox = 0.25;   // must match score_tractogram's rasterizer
    for (const auto& b : spec.bundles) {
        BundleGT gt_b;
        gt_b.name = b.name;
        gt_b.occupancy.assign(n_vox, 0);
        gt_b.head_roi.assign(n_vox, 0);
        gt_b.tail_roi.assign(n_vox, 0);

        // dense centerline samples with frames
        std::vector<Vec3> dense;
        std::vector<Vec3> frames1, frames2;
        const double dense_step = 0.2;
        double total = detail::polyline_length(b.centerline);
        int n_dense = std::max(2, static_cast<int>(std::ceil(total / dense_step)) + 1);
        for (int s = 0; s < n_dense; ++s) {
            double t = total * s / (n_dense - 1);
            // walk to arc-length t
            double cum = 0.0;
            Vec3 point = b.centerline.back();
            Vec3 tangent = (b.centerline.back() - b.centerline.front()).normalized();
            for (std::size_t e = 0; e + 1 < b.centerline.size(); ++e) {
                Vec3 d = b.centerline[e + 1] - b.centerline[e];
                double len = d.norm();
                if (len < 1e-12) continue;
                if (cum + len >= t - 1e-9) {
                    double f = std::clamp((t - cum) / len, 0.0, 1.0);
                    point = b.centerline[e] + f * d;
                    tangent = d / len;
                    break;
                }
                cum += len;
            }
            dense.push_back(point);
            Vec3 n1, n2;
            detail::tangent_frame(tangent, n1, n2);
            frames1.push_back(n1);
            frames2.push_back(n2);
        }

        for (auto [a, c] : reference_offsets(b.radius)) {
            Streamline raw;
            for (int s = 0; s < n_dense; ++s)
                raw.points.push_back(dense[static_cast<std::size_t>(s)] +
                                     a * frames1[static_cast<std::size_t>(s)] +
                                     c * frames2[static_cast<std::size_t>(s)]);
            Streamline ref = resample_streamline(raw, spec.ref_step);
            detail::rasterize_streamline(ref, ras_to_vox, H, W, D, substep_vox, gt_b.occupancy);
            out.gt.references.streamlines.push_back(std::move(ref));
        }

        // endpoint ROIs by arc-length parameter of the nearest centerline point
        double head_max = spec.roi_fraction * total;
        double tail_min = (1.0 - spec.roi_fraction) * total;
        for (std::size_t idx = 0; idx < n_vox; ++idx) {
            if (!gt_b.occupancy[idx]) continue;
            int i = static_cast<int>(idx % static_cast<std::size_t>(H));
            int j = static_cast<int>((idx / static_cast<std::size_t>(H)) % static_cast<std::size_t>(W));
            int k = static_cast<int>(idx / (static_cast<std::size_t>(H) * W));
            auto hit = detail::polyline_nearest(apply_affine(affine, Vec3(i, j, k)), b.centerline);
            if (hit.arc_param <= head_max) gt_b.head_roi[idx] = 1;
            if (hit.arc_param >= tail_min) gt_b.tail_roi[idx] = 1;
        }
        out.gt.bundles.push_back(std::move(gt_b));
    }

    // WM mask: union of the bundle ground-truth footprints
    out.wm_mask.H = H;
    out.wm_mask.W = W;
    out.wm_mask.D = D;
    out.wm_mask.kind = ScalarMap::Kind::WmMask;
    out.wm_mask.affine = affine;
    out.wm_mask.data.assign(n_vox, 0.0);
    for (const auto& b : out.gt.bundles)
        for (std::size_t idx = 0; idx < n_vox; ++idx)
            if (b.occupancy[idx]) out.wm_mask.data[idx] = 1.0;

    out.dwi.validate();
    out.wm_mask.validate();
    out.fa_map.validate();
    return out;
}

// The acceptance phantom: one straight bundle, one 90-degree arc, and an
// orthogonal crossing pair on a 32^3 millimetre grid.
inline PhantomSpec default_phantom_spec() {
    PhantomSpec spec;
    BundleSpec straight;
    straight.name = "straight";
    straight.centerline = {Vec3(4, 16, 8), Vec3(28, 16, 8)};
    spec.bundles.push_back(straight);

    BundleSpec arc;
    arc.name = "arc";
    for (int s = 0; s <= 45; ++s) {
        double theta = std::numbers::pi * (1.0 - 0.5 * s / 45.0);   // 180 deg -> 90 deg
        arc.centerline.emplace_back(20.0 + 8.0 * std::cos(theta), 19.0 + 8.0 * std::sin(theta),
                                    24.0);
    }
    spec.bundles.push_back(arc);

    BundleSpec cross_x;
    cross_x.name = "cross_x";
    cross_x.centerline = {Vec3(4, 16, 16), Vec3(28, 16, 16)};
    spec.bundles.push_back(cross_x);

    BundleSpec cross_y;
    cross_y.name = "cross_y";
    cross_y.centerline = {Vec3(16, 4, 16), Vec3(16, 28, 16)};
    spec.bundles.push_back(cross_y);
    return spec;
}

// --- scoring -----------------------------------------------------------------

struct Scores {
    double vc = 0.0;   // % of streamlines connecting a bundle's two endpoint ROIs
    double ol = 0.0;   // mean % of ground-truth voxels covered by valid streamlines
    double overreach = 0.0;   // mean % coverage outside the ground truth
    double f1 = 0.0;
    std::vector<double> bundle_ol, bundle_or, bundle_f1;
    std::vector<long> bundle_vc_count;
    long n_valid = 0;
};

// Endpoint-ROI assignment plus voxel-coverage tallies per bundle.
inline Scores score_tractogram(const Tractogram& candidate, const BundleGroundTruth& gt) {
    if (candidate.size() == 0) throw EmptyTractogramError("score_tractogram: empty candidate");
    if (gt.bundles.empty()) throw std::invalid_argument("score_tractogram: no ground truth");
    const std::size_t n_vox =
        static_cast<std::size_t>(gt.H) * static_cast<std::size_t>(gt.W) * gt.D;
    Affine ras_to_vox = gt.affine.inverse();

    auto roi_hit = [&](const std::vector<std::uint8_t>& roi, const Vec3& ras) {
        Vec3 v = apply_affine(ras_to_vox, ras);
        int i = static_cast<int>(std::llround(v.x()));
        int j = static_cast<int>(std::llround(v.y()));
        int k = static_cast<int>(std::llround(v.z()));
        if (i < 0 || i >= gt.H || j < 0 || j >= gt.W || k < 0 || k >= gt.D) return false;
        return roi[static_cast<std::size_t>(i) +
                   static_cast<std::size_t>(gt.H) *
                       (static_cast<std::size_t>(j) + static_cast<std::size_t>(gt.W) * k)] != 0;
    };

    const std::size_t n_bundles = gt.bundles.size();
    std::vector<std::vector<std::uint8_t>> coverage(n_bundles,
                                                    std::vector<std::uint8_t>(n_vox, 0));
    Scores scores;
    scores.bundle_vc_count.assign(n_bundles, 0);

    for (const auto& s : candidate.streamlines) {
        if (s.size() < 2) continue;   // a degenerate streamline is never a valid connection
        const Vec3& e0 = s.points.front();
        const Vec3& e1 = s.points.back();
        for (std::size_t b = 0; b < n_bundles; ++b) {
            const auto& gtb = gt.bundles[b];
            bool fwd = roi_hit(gtb.head_roi, e0) && roi_hit(gtb.tail_roi, e1);
            bool bwd = roi_hit(gtb.tail_roi, e0) && roi_hit(gtb.head_roi, e1);
            if (!fwd && !bwd) continue;
            ++scores.n_valid;
            ++scores.bundle_vc_count[b];
            detail::rasterize_streamline(s, ras_to_vox, gt.H, gt.W, gt.D, 0.25, coverage[b]);
            break;
        }
    }

    scores.vc = 100.0 * static_cast<double>(scores.n_valid) /
                static_cast<double>(candidate.size());
    for (std::size_t b = 0; b < n_bundles; ++b) {
        long gt_total = 0, covered_gt = 0, covered_out = 0;
        for (std::size_t idx = 0; idx < n_vox; ++idx) {
            bool in_gt = gt.bundles[b].occupancy[idx] != 0;
            gt_total += in_gt;
            if (!coverage[b][idx]) continue;
            covered_gt += in_gt;
            covered_out += !in_gt;
        }
        double ol = gt_total ? 100.0 * static_cast<double>(covered_gt) / gt_total : 0.0;
        double orr = gt_total ? 100.0 * static_cast<double>(covered_out) / gt_total : 0.0;
        double f1 = 0.0;
        if (covered_gt > 0) {
            double p = static_cast<double>(covered_gt) / (covered_gt + covered_out);
            double r = static_cast<double>(covered_gt) / gt_total;
            f1 = 100.0 * 2.0 * p * r / (p + r);
        }
        scores.bundle_ol.push_back(ol);
        scores.bundle_or.push_back(orr);
        scores.bundle_f1.push_back(f1);
        scores.ol += ol / static_cast<double>(n_bundles);
        scores.overreach += orr / static_cast<double>(n_bundles);
        scores.f1 += f1 / static_cast<double>(n_bundles);
    }
    return scores;
}

} // namespace tracto
