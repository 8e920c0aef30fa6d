#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "tracto/phantom.hpp"

using namespace tracto;

namespace {

std::size_t flat(const BundleGroundTruth& gt, int i, int j, int k) {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(gt.H) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(gt.W) * k);
}

// test-side FA, written out from the definition
double fa_closed_form(double l1, double l2, double l3) {
    double mean = (l1 + l2 + l3) / 3.0;
    double num = (l1 - mean) * (l1 - mean) + (l2 - mean) * (l2 - mean) + (l3 - mean) * (l3 - mean);
    double den = l1 * l1 + l2 * l2 + l3 * l3;
    return std::sqrt(1.5 * num / den);
}

PhantomSpec single_bundle_spec() {
    PhantomSpec spec;
    spec.H = spec.W = spec.D = 16;
    BundleSpec b;
    b.name = "line";
    b.centerline = {Vec3(3, 8, 8), Vec3(13, 8, 8)};
    b.radius = 2.0;
    spec.bundles.push_back(b);
    return spec;
}

// two parallel straight bundles used for the hand-tallied scoring oracle
PhantomSpec two_bundle_spec() {
    PhantomSpec spec;
    spec.H = spec.W = spec.D = 16;
    BundleSpec a;
    a.name = "low";
    a.centerline = {Vec3(3, 4, 8), Vec3(12, 4, 8)};
    a.radius = 1.6;
    BundleSpec b;
    b.name = "high";
    b.centerline = {Vec3(3, 11, 8), Vec3(12, 11, 8)};
    b.radius = 1.6;
    spec.bundles = {a, b};
    return spec;
}

Streamline from_points(std::initializer_list<Vec3> pts) {
    Streamline s;
    s.points.assign(pts);
    return s;
}

} // namespace

TEST_CASE("single-bundle signal matches the tensor model exactly") {
    PhantomSpec spec = single_bundle_spec();
    spec.gradient_override = {Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    PhantomOutput out = generate_phantom(spec);

    REQUIRE(out.dwi.G == 4);
    REQUIRE(out.dwi.bvalues[0] == 0.0);
    REQUIRE(out.dwi.bvalues[1] == spec.bvalue);

    const std::size_t n_vox = static_cast<std::size_t>(16) * 16 * 16;
    auto value = [&](int i, int j, int k, int g) {
        return out.dwi.data[static_cast<std::size_t>(i) + 16 * (j + 16 * (k + 16 * g))];
    };

    // voxel on the centerline: diffusion is fast along the bundle (+x) and
    // slow across it
    double along = spec.s0 * std::exp(-spec.bvalue * spec.lambda_parallel);
    double across = spec.s0 * std::exp(-spec.bvalue * spec.lambda_perp);
    CHECK(value(8, 8, 8, 0) == Catch::Approx(spec.s0).margin(1e-14));
    CHECK(value(8, 8, 8, 1) == Catch::Approx(along).margin(1e-14));
    CHECK(value(8, 8, 8, 2) == Catch::Approx(across).margin(1e-14));
    CHECK(value(8, 8, 8, 3) == Catch::Approx(across).margin(1e-14));

    // far from the bundle: isotropic background at the mean diffusivity
    double lambda_iso = (spec.lambda_parallel + 2.0 * spec.lambda_perp) / 3.0;
    double bg = spec.s0 * std::exp(-spec.bvalue * lambda_iso);
    for (int g = 1; g < 4; ++g) CHECK(value(1, 1, 1, g) == Catch::Approx(bg).margin(1e-14));
    CHECK(value(1, 1, 1, 0) == Catch::Approx(spec.s0).margin(1e-14));

    REQUIRE(out.dwi.data.size() == n_vox * 4);
}

TEST_CASE("signal formula holds across the whole default gradient set") {
    PhantomSpec spec = single_bundle_spec();
    PhantomOutput out = generate_phantom(spec);
    REQUIRE(out.dwi.G == spec.n_gradients + 1);

    Vec3 axis(1, 0, 0);
    for (int g = 1; g < out.dwi.G; ++g) {
        const Vec3& dir = out.dwi.gradients[static_cast<std::size_t>(g)];
        double gtdg = spec.lambda_perp +
                      (spec.lambda_parallel - spec.lambda_perp) * std::pow(dir.dot(axis), 2);
        double expected = spec.s0 * std::exp(-spec.bvalue * gtdg);
        double got = out.dwi.data[8 + 16 * (8 + 16 * (8 + 16 * static_cast<std::size_t>(g)))];
        CHECK(got == Catch::Approx(expected).margin(1e-14));
    }
}

TEST_CASE("fa map matches the closed form of the generating tensors") {
    PhantomSpec spec = single_bundle_spec();
    PhantomOutput out = generate_phantom(spec);

    double expected = fa_closed_form(spec.lambda_parallel, spec.lambda_perp, spec.lambda_perp);
    auto fa = [&](int i, int j, int k) { return out.fa_map.data[flat(out.gt, i, j, k)]; };

    // constant over the tube, zero in the background
    for (int i = 4; i <= 12; ++i) CHECK(fa(i, 8, 8) == Catch::Approx(expected).margin(1e-10));
    CHECK(fa(8, 9, 8) == Catch::Approx(expected).margin(1e-10));
    CHECK(fa(1, 1, 1) == 0.0);
    CHECK(fa(15, 15, 15) == 0.0);
    CHECK(expected > 0.7);   // strongly anisotropic single-fiber voxels
}

TEST_CASE("orthogonal crossing voxels average the bundle tensors") {
    PhantomSpec spec;
    spec.H = spec.W = spec.D = 20;
    BundleSpec bx;
    bx.name = "x";
    bx.centerline = {Vec3(3, 10, 10), Vec3(16.5, 10, 10)};
    BundleSpec by;
    by.name = "y";
    by.centerline = {Vec3(10, 3, 10), Vec3(10, 16.5, 10)};
    spec.bundles = {bx, by};
    spec.gradient_override = {Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    PhantomOutput out = generate_phantom(spec);

    auto value = [&](int g) {
        return out.dwi.data[10 + 20 * (10 + 20 * (10 + 20 * static_cast<std::size_t>(g)))];
    };
    double along = spec.s0 * std::exp(-spec.bvalue * spec.lambda_parallel);
    double across = spec.s0 * std::exp(-spec.bvalue * spec.lambda_perp);

    // crossing voxel (10,10,10): mean of the two single-bundle signals
    CHECK(value(1) == Catch::Approx(0.5 * (along + across)).margin(1e-14));
    CHECK(value(2) == Catch::Approx(0.5 * (across + along)).margin(1e-14));
    CHECK(value(3) == Catch::Approx(across).margin(1e-14));

    // FA of the mean tensor diag((lp+lt)/2, (lp+lt)/2, lt)
    double mixed = 0.5 * (spec.lambda_parallel + spec.lambda_perp);
    double expected_fa = fa_closed_form(mixed, mixed, spec.lambda_perp);
    CHECK(out.fa_map.data[flat(out.gt, 10, 10, 10)] == Catch::Approx(expected_fa).margin(1e-10));
    double single_fa = fa_closed_form(spec.lambda_parallel, spec.lambda_perp, spec.lambda_perp);
    CHECK(expected_fa < single_fa);   // crossings are less anisotropic
    CHECK(expected_fa > 0.3);         // but still well above the tracking floor
}

TEST_CASE("ground truth wiring: occupancy, mask, rois, references") {
    PhantomOutput out = generate_phantom(default_phantom_spec());
    const auto& gt = out.gt;
    REQUIRE(gt.bundles.size() == 4);
    REQUIRE(gt.references.size() == 4 * 17);   // centerline + 6-ring + 10-ring each

    const std::size_t n_vox = static_cast<std::size_t>(gt.H) * gt.W * gt.D;

    // mask is exactly the union of the bundle footprints
    for (std::size_t idx = 0; idx < n_vox; ++idx) {
        bool any = false;
        for (const auto& b : gt.bundles) any = any || b.occupancy[idx];
        CHECK(out.wm_mask.data[idx] == (any ? 1.0 : 0.0));
    }

    auto nearest_flag = [&](const std::vector<std::uint8_t>& roi, const Vec3& ras) {
        Vec3 v = apply_affine(gt.affine.inverse(), ras);
        int i = static_cast<int>(std::llround(v.x()));
        int j = static_cast<int>(std::llround(v.y()));
        int k = static_cast<int>(std::llround(v.z()));
        REQUIRE(i >= 0);
        REQUIRE(i < gt.H);
        return roi[flat(gt, i, j, k)] != 0;
    };

    long occupied = 0;
    for (std::size_t b = 0; b < gt.bundles.size(); ++b) {
        const auto& gtb = gt.bundles[b];
        long occ = std::count(gtb.occupancy.begin(), gtb.occupancy.end(), 1);
        long head = std::count(gtb.head_roi.begin(), gtb.head_roi.end(), 1);
        long tail = std::count(gtb.tail_roi.begin(), gtb.tail_roi.end(), 1);
        occupied += occ;
        CHECK(occ > 30);
        CHECK(head > 0);
        CHECK(tail > 0);
        CHECK(head < occ);   // rois are proper subsets
        CHECK(tail < occ);
        for (std::size_t idx = 0; idx < n_vox; ++idx) {
            if (gtb.head_roi[idx]) CHECK(gtb.occupancy[idx] == 1);
            if (gtb.tail_roi[idx]) CHECK(gtb.occupancy[idx] == 1);
        }

        // every reference runs head-to-tail of its own bundle
        for (int r = 0; r < 17; ++r) {
            const auto& ref = gt.references.streamlines[b * 17 + static_cast<std::size_t>(r)];
            REQUIRE(ref.size() >= 2);
            CHECK(nearest_flag(gtb.head_roi, ref.points.front()));
            CHECK(nearest_flag(gtb.tail_roi, ref.points.back()));
            // arc-length steps: chords on curved bundles fall just short of h
            for (std::size_t p = 0; p + 2 < ref.points.size(); ++p) {
                double chord = (ref.points[p + 1] - ref.points[p]).norm();
                CHECK(chord <= 1.0 + 1e-9);
                CHECK(chord > 0.97);
            }
        }
    }
    CHECK(occupied > 400);
    CHECK(occupied < 4000);
}

TEST_CASE("references score perfectly against their own ground truth") {
    PhantomOutput out = generate_phantom(default_phantom_spec());
    Scores s = score_tractogram(out.gt.references, out.gt);
    CHECK(s.vc == Catch::Approx(100.0).margin(1e-9));
    CHECK(s.ol == Catch::Approx(100.0).margin(1e-9));
    CHECK(s.overreach == Catch::Approx(0.0).margin(1e-9));
    CHECK(s.f1 == Catch::Approx(100.0).margin(1e-9));
    CHECK(s.n_valid == out.gt.references.size());
    for (std::size_t b = 0; b < out.gt.bundles.size(); ++b) {
        CHECK(s.bundle_ol[b] == Catch::Approx(100.0).margin(1e-9));
        CHECK(s.bundle_or[b] == Catch::Approx(0.0).margin(1e-9));
        CHECK(s.bundle_vc_count[b] == 17);
    }
}

TEST_CASE("a streamline returning to the same roi is not a valid connection") {
    PhantomOutput out = generate_phantom(default_phantom_spec());
    // stays near the head end of the straight bundle: both endpoints in the
    // head roi, neither reaching the tail roi
    Tractogram cand;
    cand.streamlines.push_back(
        from_points({Vec3(4.5, 16, 8), Vec3(5.5, 16, 8), Vec3(6.5, 16, 8), Vec3(5.5, 16, 8)}));
    Scores s = score_tractogram(cand, out.gt);
    CHECK(s.vc == 0.0);
    CHECK(s.n_valid == 0);
    CHECK(s.ol == 0.0);
    CHECK(s.f1 == 0.0);

    // a single-point streamline is never a valid connection either
    Tractogram dot;
    dot.streamlines.push_back(from_points({Vec3(4, 16, 8)}));
    Scores s2 = score_tractogram(dot, out.gt);
    CHECK(s2.vc == 0.0);
}

TEST_CASE("scores match hand-counted voxel tallies on a two-bundle toy") {
    PhantomOutput out = generate_phantom(two_bundle_spec());
    const auto& gt = out.gt;
    REQUIRE(gt.bundles.size() == 2);

    // candidate 1 walks the low centerline exactly: voxels (3..12, 4, 8)
    Streamline c1;
    for (int x = 3; x <= 12; ++x) c1.points.emplace_back(x, 4, 8);

    // candidate 2 follows the high bundle but detours around x=8:
    // (3..7,11) -> (7,12..14) -> (8..9,14) -> (9,13..11) -> (10..12,11)
    Streamline c2;
    for (int x = 3; x <= 7; ++x) c2.points.emplace_back(x, 11, 8);
    c2.points.emplace_back(7, 14, 8);
    c2.points.emplace_back(9, 14, 8);
    c2.points.emplace_back(9, 11, 8);
    for (int x = 10; x <= 12; ++x) c2.points.emplace_back(x, 11, 8);

    std::set<std::tuple<int, int, int>> cov1, cov2;
    for (int x = 3; x <= 12; ++x) cov1.insert({x, 4, 8});
    for (int x = 3; x <= 7; ++x) cov2.insert({x, 11, 8});
    for (int y = 12; y <= 14; ++y) cov2.insert({7, y, 8});
    cov2.insert({8, 14, 8});
    cov2.insert({9, 14, 8});
    for (int y = 11; y <= 13; ++y) cov2.insert({9, y, 8});
    for (int x = 10; x <= 12; ++x) cov2.insert({x, 11, 8});

    Tractogram cand;
    cand.streamlines = {c1, c2};
    Scores s = score_tractogram(cand, gt);
    CHECK(s.vc == Catch::Approx(100.0).margin(1e-12));
    CHECK(s.n_valid == 2);
    CHECK(s.bundle_vc_count[0] == 1);
    CHECK(s.bundle_vc_count[1] == 1);

    for (int b = 0; b < 2; ++b) {
        const auto& cov = b == 0 ? cov1 : cov2;
        const auto& occ = gt.bundles[static_cast<std::size_t>(b)].occupancy;
        long gt_total = std::count(occ.begin(), occ.end(), 1);
        long covered_gt = 0, covered_out = 0;
        for (const auto& [x, y, z] : cov)
            (occ[flat(gt, x, y, z)] ? covered_gt : covered_out) += 1;
        REQUIRE(gt_total > 0);

        double ol = 100.0 * static_cast<double>(covered_gt) / static_cast<double>(gt_total);
        double orr = 100.0 * static_cast<double>(covered_out) / static_cast<double>(gt_total);
        double p = static_cast<double>(covered_gt) /
                   static_cast<double>(covered_gt + covered_out);
        double r = static_cast<double>(covered_gt) / static_cast<double>(gt_total);
        double f1 = 100.0 * 2.0 * p * r / (p + r);
        CHECK(s.bundle_ol[static_cast<std::size_t>(b)] == Catch::Approx(ol).margin(1e-9));
        CHECK(s.bundle_or[static_cast<std::size_t>(b)] == Catch::Approx(orr).margin(1e-9));
        CHECK(s.bundle_f1[static_cast<std::size_t>(b)] == Catch::Approx(f1).margin(1e-9));
    }
    // the detour leaves the high bundle's footprint
    CHECK(s.bundle_or[1] > 0.0);
    CHECK(s.bundle_or[0] == 0.0);
    CHECK(s.ol == Catch::Approx(0.5 * (s.bundle_ol[0] + s.bundle_ol[1])).margin(1e-12));
    CHECK(s.overreach == Catch::Approx(0.5 * (s.bundle_or[0] + s.bundle_or[1])).margin(1e-12));
    CHECK(s.f1 == Catch::Approx(0.5 * (s.bundle_f1[0] + s.bundle_f1[1])).margin(1e-12));
}

TEST_CASE("scoring is invariant to streamline order") {
    PhantomOutput out = generate_phantom(default_phantom_spec());
    Tractogram shuffled = out.gt.references;
    std::reverse(shuffled.streamlines.begin(), shuffled.streamlines.end());
    std::swap(shuffled.streamlines[3], shuffled.streamlines[40]);
    Scores a = score_tractogram(out.gt.references, out.gt);
    Scores b = score_tractogram(shuffled, out.gt);
    CHECK(a.vc == b.vc);
    CHECK(a.ol == b.ol);
    CHECK(a.overreach == b.overreach);
    CHECK(a.f1 == b.f1);
}

TEST_CASE("phantom generation is deterministic, including rician noise") {
    PhantomSpec spec = single_bundle_spec();
    spec.noise_sigma = 0.05;
    PhantomOutput a = generate_phantom(spec);
    PhantomOutput b = generate_phantom(spec, /*threads=*/2);
    REQUIRE(a.dwi.data.size() == b.dwi.data.size());
    CHECK(a.dwi.data == b.dwi.data);
    CHECK(a.fa_map.data == b.fa_map.data);
    CHECK(a.wm_mask.data == b.wm_mask.data);

    spec.rng_seed = 99;
    PhantomOutput c = generate_phantom(spec);
    CHECK(a.dwi.data != c.dwi.data);

    // rician magnitudes stay non-negative and actually perturb the signal
    PhantomSpec clean = single_bundle_spec();
    PhantomOutput d = generate_phantom(clean);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.dwi.data.size(); ++i) {
        CHECK(a.dwi.data[i] >= 0.0);
        any_diff = any_diff || a.dwi.data[i] != d.dwi.data[i];
    }
    CHECK(any_diff);
}

TEST_CASE("spec validation rejects broken geometry and tensors") {
    PhantomSpec spec = single_bundle_spec();
    spec.bundles[0].centerline[1] = Vec3(15, 8, 8);   // 15 + 2.0 > 15
    CHECK_THROWS_AS(generate_phantom(spec), std::invalid_argument);

    PhantomSpec flat_tensor = single_bundle_spec();
    flat_tensor.lambda_perp = flat_tensor.lambda_parallel;
    CHECK_THROWS_AS(generate_phantom(flat_tensor), std::invalid_argument);

    PhantomSpec no_bundles = single_bundle_spec();
    no_bundles.bundles.clear();
    CHECK_THROWS_AS(generate_phantom(no_bundles), std::invalid_argument);

    PhantomOutput out = generate_phantom(single_bundle_spec());
    CHECK_THROWS_AS(score_tractogram(Tractogram{}, out.gt), EmptyTractogramError);
}
