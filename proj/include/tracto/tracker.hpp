#pragma once

#include <array>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/model.hpp"
#include "tracto/parallel.hpp"
#include "tracto/rng.hpp"
#include "tracto/sphere.hpp"
#include "tracto/streamline.hpp"
#include "tracto/volume.hpp"

namespace tracto {

struct TrackingConfig {
    double step_size = 1.0;         // mm
    double angle_threshold = 70.0;  // degrees between consecutive steps
    double fa_threshold = 0.05;
    int max_steps = 200;
    int n_seeds = 500;
    uint64_t rng_seed = 42;

    void validate() const {
        if (step_size <= 0.0) throw std::invalid_argument("TrackingConfig: step_size must be > 0");
        if (angle_threshold <= 0.0 || angle_threshold >= 180.0)
            throw std::invalid_argument("TrackingConfig: angle_threshold must be in (0,180)");
        if (fa_threshold < 0.0 || fa_threshold >= 1.0)
            throw std::invalid_argument("TrackingConfig: fa_threshold must be in [0,1)");
        if (max_steps < 1) throw std::invalid_argument("TrackingConfig: max_steps must be >= 1");
        if (n_seeds < 0) throw std::invalid_argument("TrackingConfig: n_seeds must be >= 0");
    }
};

enum class StopReason : int {
    EofPredicted = 0,
    OutOfBounds = 1,
    OutOfMask = 2,
    AngleExceeded = 3,
    LowFa = 4,
    MaxStepsReached = 5,
};

constexpr int kStopReasonCount = 6;

inline const char* to_string(StopReason r) {
    switch (r) {
        case StopReason::EofPredicted: return "eof_predicted";
        case StopReason::OutOfBounds: return "out_of_bounds";
        case StopReason::OutOfMask: return "out_of_mask";
        case StopReason::AngleExceeded: return "angle_exceeded";
        case StopReason::LowFa: return "low_fa";
        case StopReason::MaxStepsReached: return "max_steps_reached";
    }
    return "unknown";
}

// Uniformly chosen positive mask voxels with uniform jitter inside each
// voxel, mapped to RAS. Deterministic given rng_seed.
inline std::vector<Vec3> sample_seeds(const ScalarMap& mask, int n, uint64_t rng_seed) {
    if (n < 0) throw std::invalid_argument("sample_seeds: n must be >= 0");
    std::vector<std::array<int, 3>> positive;
    for (int k = 0; k < mask.D; ++k)
        for (int j = 0; j < mask.W; ++j)
            for (int i = 0; i < mask.H; ++i)
                if (mask.at(i, j, k) > 0.5) positive.push_back({i, j, k});
    if (positive.empty()) throw std::invalid_argument("sample_seeds: mask has no positive voxels");

    Rng rng(derive_seed(rng_seed, 0x5eedu));
    std::vector<Vec3> seeds;
    seeds.reserve(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
        const auto& v = positive[static_cast<std::size_t>(rng.uniform_below(positive.size()))];
        Vec3 voxel(v[0] + rng.uniform(-0.5, 0.5), v[1] + rng.uniform(-0.5, 0.5),
                   v[2] + rng.uniform(-0.5, 0.5));
        seeds.push_back(apply_affine(mask.affine, voxel));
    }
    return seeds;
}

// First violated criterion in fixed order; the EoF check (criterion 1)
// happens before a candidate point exists, in track_one.
inline std::optional<StopReason> check_stop(const Vec3* prev_dir, const Vec3& new_dir,
                                            const Vec3& next_point, const DwiVolume& volume,
                                            const ScalarMap& wm_mask, const ScalarMap& fa_map,
                                            const TrackingConfig& cfg) {
    Vec3 v = volume.voxel_from_ras(next_point);
    if (!detail::inside_voxel_box(v, volume.H, volume.W, volume.D))
        return StopReason::OutOfBounds;

    auto mv = nearest_voxel(wm_mask, next_point);
    if (!wm_mask.in_bounds(mv[0], mv[1], mv[2]) || wm_mask.at(mv[0], mv[1], mv[2]) < 0.5)
        return StopReason::OutOfMask;

    if (prev_dir) {
        double c = std::clamp(prev_dir->dot(new_dir), -1.0, 1.0);
        double angle_deg = std::acos(c) * 180.0 / std::numbers::pi;
        if (angle_deg > cfg.angle_threshold) return StopReason::AngleExceeded;
    }

    if (trilinear_sample(fa_map, next_point) < cfg.fa_threshold) return StopReason::LowFa;
    return std::nullopt;
}

// Deterministic argmax propagation: at each step the trailing max_len
// window of the streamline is fed through the decoder and the final
// position's fODF picks the next direction (lowest class index on ties).
inline std::pair<Streamline, StopReason> track_one(const ModelParams& params,
                                                   const Sphere& sphere, const DwiVolume& volume,
                                                   const ScalarMap& wm_mask,
                                                   const ScalarMap& fa_map, const Vec3& seed,
                                                   const TrackingConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = params.config;
    if (sphere.k() != mc.k)
        throw std::invalid_argument("track_one: sphere size != model class count");
    Vec3 v = volume.voxel_from_ras(seed);
    if (!detail::inside_voxel_box(v, volume.H, volume.W, volume.D))
        throw std::invalid_argument("track_one: seed outside volume");

    Streamline s;
    s.points.push_back(seed);
    std::vector<VoxelCube> cubes{extract_cube(volume, seed)};
    Vec3 prev_dir = Vec3::Zero();
    bool have_prev = false;

    for (int step = 0; step < cfg.max_steps; ++step) {
        std::size_t first = cubes.size() > static_cast<std::size_t>(mc.max_len)
                                ? cubes.size() - static_cast<std::size_t>(mc.max_len)
                                : 0u;
        std::vector<VoxelCube> window(cubes.begin() + static_cast<std::ptrdiff_t>(first),
                                      cubes.end());
        std::vector<bool> pad(window.size(), false);
        Tensor logits = forward_sequence(window, pad, params, mc);
        SoftLabel fodf = predict_fodf(logits, static_cast<int>(window.size()) - 1);
        int cls = static_cast<int>(fodf.argmax());
        if (cls == mc.k) return {std::move(s), StopReason::EofPredicted};

        Vec3 dir = sphere.direction(cls);
        Vec3 candidate = s.points.back() + cfg.step_size * dir;
        auto reason = check_stop(have_prev ? &prev_dir : nullptr, dir, candidate, volume, wm_mask,
                                 fa_map, cfg);
        if (reason) return {std::move(s), *reason};

        s.points.push_back(candidate);
        cubes.push_back(extract_cube(volume, candidate));
        prev_dir = dir;
        have_prev = true;
    }
    return {std::move(s), StopReason::MaxStepsReached};
}

struct TrackResult {
    Tractogram tractogram;                          // one streamline per seed, seed order
    std::vector<std::optional<StopReason>> reasons; // nullopt = recorded per-seed failure
    std::array<long, kStopReasonCount> histogram{};
    long failures = 0;
};

inline TrackResult track_all(const ModelParams& params, const Sphere& sphere,
                             const DwiVolume& volume, const ScalarMap& wm_mask,
                             const ScalarMap& fa_map, const TrackingConfig& cfg,
                             int threads = 1) {
    cfg.validate();
    std::vector<Vec3> seeds = sample_seeds(wm_mask, cfg.n_seeds, cfg.rng_seed);

    TrackResult result;
    result.tractogram.streamlines.resize(seeds.size());
    result.reasons.resize(seeds.size());
    parallel_for(seeds.size(), threads, [&](std::size_t i) {
        try {
            auto [streamline, reason] =
                track_one(params, sphere, volume, wm_mask, fa_map, seeds[i], cfg);
            result.tractogram.streamlines[i] = std::move(streamline);
            result.reasons[i] = reason;
        } catch (const std::exception&) {
            Streamline only_seed;
            only_seed.points.push_back(seeds[i]);
            result.tractogram.streamlines[i] = std::move(only_seed);
            result.reasons[i] = std::nullopt;
        }
    });
    for (const auto& r : result.reasons) {
        if (r)
            ++result.histogram[static_cast<std::size_t>(static_cast<int>(*r))];
        else
            ++result.failures;
    }
    return result;
}

} // namespace tracto
