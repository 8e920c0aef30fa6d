#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tracto {

using Vec3 = Eigen::Vector3d;

// Standard deviation (radians) of the angular Gaussian used for soft labels.
struct SmoothingConfig {
    double sigma = 0.1;
};

inline void require_unit(const Vec3& v, double tol, const char* what) {
    double n = v.norm();
    if (std::abs(n - 1.0) > tol)
        throw std::invalid_argument(std::string(what) + ": vector norm " +
                                    std::to_string(n) + " is not 1");
}

// Discrete direction class space: k unit vectors covering the full sphere.
// Class index k (one past the last direction) is reserved for end-of-fiber.
class Sphere {
public:
    explicit Sphere(std::vector<Vec3> directions) : dirs_(std::move(directions)) {
        if (dirs_.size() < 2)
            throw std::invalid_argument("Sphere: need at least 2 directions");
        for (const auto& d : dirs_) require_unit(d, 1e-9, "Sphere direction");
    }

    // Fibonacci lattice: z_i = 1 - (2i+1)/k, golden-angle azimuth.
    // Deterministic and near-uniform over the full sphere.
    static Sphere fibonacci(int k) {
        if (k < 2) throw std::invalid_argument("make_sphere: k must be >= 2");
        const double golden_angle = M_PI * (3.0 - std::sqrt(5.0));
        std::vector<Vec3> dirs;
        dirs.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) {
            double z = 1.0 - (2.0 * i + 1.0) / k;
            double r = std::sqrt(std::max(0.0, 1.0 - z * z));
            double phi = golden_angle * i;
            dirs.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
        }
        for (auto& d : dirs) d.normalize();
        return Sphere(std::move(dirs));
    }

    int k() const { return static_cast<int>(dirs_.size()); }
    const Vec3& direction(int i) const { return dirs_[static_cast<std::size_t>(i)]; }
    const std::vector<Vec3>& directions() const { return dirs_; }

private:
    std::vector<Vec3> dirs_;
};

inline Sphere make_sphere(int k) { return Sphere::fibonacci(k); }

// Probability vector over k+1 classes; the last entry is the EoF class.
struct SoftLabel {
    std::vector<double> probs;

    int size() const { return static_cast<int>(probs.size()); }

    // lowest index wins ties
    int argmax() const {
        int best = 0;
        for (int i = 1; i < size(); ++i)
            if (probs[static_cast<std::size_t>(i)] > probs[static_cast<std::size_t>(best)])
                best = i;
        return best;
    }

    double sum() const {
        double s = 0.0;
        for (double p : probs) s += p;
        return s;
    }
};

// arccos of the clamped dot product, in [0, pi]
inline double angular_distance(const Vec3& u, const Vec3& v) {
    require_unit(u, 1e-6, "angular_distance");
    require_unit(v, 1e-6, "angular_distance");
    double d = std::clamp(u.dot(v), -1.0, 1.0);
    return std::acos(d);
}

inline int nearest_class(const Vec3& theta, const Sphere& sphere) {
    require_unit(theta, 1e-6, "nearest_class");
    // max dot product == min angular distance; strict > keeps the lowest index
    int best = 0;
    double best_dot = theta.dot(sphere.direction(0));
    for (int i = 1; i < sphere.k(); ++i) {
        double d = theta.dot(sphere.direction(i));
        if (d > best_dot) {
            best_dot = d;
            best = i;
        }
    }
    return best;
}

// Gaussian smoothing of a unit direction over the class space:
//   w_i = exp(-d_i^2 / (2 sigma^2)),  probs_i = w_i / sum_j w_j
// The exponent is shifted by the minimum d^2, which leaves the normalized
// ratios unchanged but avoids all-zero underflow at small sigma.
// The EoF entry receives no smoothing mass.
inline SoftLabel smooth_label(const Vec3& theta, const Sphere& sphere,
                              const SmoothingConfig& cfg) {
    require_unit(theta, 1e-6, "smooth_label");
    if (!(cfg.sigma > 0.0))
        throw std::invalid_argument("smooth_label: sigma must be positive");
    const int k = sphere.k();
    std::vector<double> d2(static_cast<std::size_t>(k));
    double d2_min = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
        double d = angular_distance(theta, sphere.direction(i));
        d2[static_cast<std::size_t>(i)] = d * d;
        d2_min = std::min(d2_min, d * d);
    }
    const double inv_two_sigma2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    SoftLabel label;
    label.probs.assign(static_cast<std::size_t>(k) + 1, 0.0);
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        double w = std::exp(-(d2[static_cast<std::size_t>(i)] - d2_min) * inv_two_sigma2);
        label.probs[static_cast<std::size_t>(i)] = w;
        total += w;
    }
    for (int i = 0; i < k; ++i) label.probs[static_cast<std::size_t>(i)] /= total;
    return label;
}

// One-hot label on the EoF class, used at the terminal point of a streamline.
inline SoftLabel eof_label(int k) {
    if (k < 2) throw std::invalid_argument("eof_label: k must be >= 2");
    SoftLabel label;
    label.probs.assign(static_cast<std::size_t>(k) + 1, 0.0);
    label.probs.back() = 1.0;
    return label;
}

// Hard one-hot directional label (the -SmoothLabels ablation).
inline SoftLabel hard_label(const Vec3& theta, const Sphere& sphere) {
    SoftLabel label;
    label.probs.assign(static_cast<std::size_t>(sphere.k()) + 1, 0.0);
    label.probs[static_cast<std::size_t>(nearest_class(theta, sphere))] = 1.0;
    return label;
}

} // namespace tracto
