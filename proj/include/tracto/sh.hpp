#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "tracto/parallel.hpp"
#include "tracto/sphere.hpp"
#include "tracto/volume.hpp"

namespace tracto {

// Number of real even symmetric SH basis functions up to `order`.
inline int sh_basis_size(int order) {
    if (order < 0 || order % 2 != 0)
        throw std::invalid_argument("sh_basis_size: order must be a non-negative even integer");
    return (order + 1) * (order + 2) / 2;
}

// Largest even order (capped at 8) whose basis stays overdetermined for
// n_dwi measurements.
inline int auto_sh_order(int n_dwi) {
    int order = 0;
    for (int l = 2; l <= 8; l += 2)
        if (sh_basis_size(l) <= n_dwi) order = l;
    if (sh_basis_size(order) > n_dwi)
        throw std::invalid_argument("auto_sh_order: too few measurements for any even order");
    return order;
}

namespace detail {

inline double factorial(int n) {
    double f = 1.0;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
}

// N(l,m) for m >= 0 such that Y_lm = N P_l^m(cos theta) e^{i m phi}.
inline double sh_normalization(int l, int m) {
    return std::sqrt((2.0 * l + 1.0) / (4.0 * M_PI) * factorial(l - m) / factorial(l + m));
}

} // namespace detail

// Matrix B with B(i, j) = basis_j(direction_i) over the real even basis:
// columns ordered by l = 0,2,...,order and m = -l..l within each l, with
// m<0 -> sqrt(2)*Im(Y_l^|m|), m=0 -> Y_l^0, m>0 -> sqrt(2)*Re(Y_l^m).
inline Eigen::MatrixXd sh_basis_matrix(const std::vector<Vec3>& directions, int order) {
    int R = sh_basis_size(order);
    Eigen::MatrixXd B(static_cast<Eigen::Index>(directions.size()), R);
    for (std::size_t i = 0; i < directions.size(); ++i) {
        const Vec3& d = directions[i];
        double n = d.norm();
        if (std::abs(n - 1.0) > 1e-3)
            throw std::invalid_argument("sh_basis_matrix: direction is not unit-norm");
        double ct = std::clamp(d.z() / n, -1.0, 1.0);
        double phi = std::atan2(d.y(), d.x());
        int col = 0;
        for (int l = 0; l <= order; l += 2) {
            for (int m = -l; m <= l; ++m) {
                int am = std::abs(m);
                double p = std::assoc_legendre(static_cast<unsigned>(l),
                                               static_cast<unsigned>(am), ct);
                double v = detail::sh_normalization(l, am) * p;
                if (m < 0)
                    v *= std::sqrt(2.0) * std::sin(am * phi);
                else if (m > 0)
                    v *= std::sqrt(2.0) * std::cos(am * phi);
                B(static_cast<Eigen::Index>(i), col++) = v;
            }
        }
    }
    return B;
}

// Holds the factorization of the basis for a fixed gradient set so that
// many voxels can be fit through an identical code path.
class ShFitter {
public:
    ShFitter(const std::vector<Vec3>& gradients, int order)
        : order_(order), basis_(sh_basis_matrix(gradients, order)), qr_(basis_) {
        if (order < 0 || order % 2 != 0)
            throw std::invalid_argument("ShFitter: order must be even");
        if (basis_.rows() < basis_.cols())
            throw std::invalid_argument("ShFitter: underdetermined system (G < basis size)");
    }

    int order() const { return order_; }
    const Eigen::MatrixXd& basis() const { return basis_; }

    Eigen::VectorXd fit(const Eigen::VectorXd& signal) const {
        if (signal.size() != basis_.rows())
            throw std::invalid_argument("ShFitter: signal length does not match gradient count");
        return qr_.solve(signal);
    }

private:
    int order_;
    Eigen::MatrixXd basis_;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

// Least-squares SH coefficients of one signal.
inline Eigen::VectorXd sh_fit(const Eigen::VectorXd& signal, const std::vector<Vec3>& gradients,
                              int order) {
    return ShFitter(gradients, order).fit(signal);
}

inline Eigen::VectorXd sh_sample(const Eigen::VectorXd& coeffs,
                                 const std::vector<Vec3>& directions) {
    int order = -1;
    for (int l = 0; l <= 16; l += 2)
        if (sh_basis_size(l) == coeffs.size()) {
            order = l;
            break;
        }
    if (order < 0)
        throw std::invalid_argument("sh_sample: coefficient length is not a valid basis size");
    return sh_basis_matrix(directions, order) * coeffs;
}

// Per-voxel SH fit on the b>0 channels followed by evaluation at the
// target sphere directions.
//
// When b=0 channels exist, each voxel's dwi signal is normalized by its
// mean b=0 value before fitting, so the output holds attenuations S/S0
// (voxels with mean b=0 signal <= 0 become all-zeros). Without b=0
// channels the raw signal is projected unchanged.
inline DwiVolume resample_volume(const DwiVolume& volume, const Sphere& target, int order,
                                 int threads = 1) {
    volume.validate();
    std::vector<int> b0, dwi;
    for (int g = 0; g < volume.G; ++g)
        (volume.bvalues[static_cast<std::size_t>(g)] < 1e-6 ? b0 : dwi).push_back(g);
    if (dwi.empty()) throw std::invalid_argument("resample_volume: no b>0 channels");

    std::vector<Vec3> dwi_dirs;
    double mean_b = 0.0;
    for (int g : dwi) {
        dwi_dirs.push_back(volume.gradients[static_cast<std::size_t>(g)]);
        mean_b += volume.bvalues[static_cast<std::size_t>(g)];
    }
    mean_b /= static_cast<double>(dwi.size());

    ShFitter fitter(dwi_dirs, order);
    Eigen::MatrixXd target_basis = sh_basis_matrix(target.directions(), order);

    DwiVolume out;
    out.H = volume.H;
    out.W = volume.W;
    out.D = volume.D;
    out.G = target.k();
    out.affine = volume.affine;
    out.data.assign(static_cast<std::size_t>(out.H) * out.W * out.D * out.G, 0.0);
    out.gradients = target.directions();
    out.bvalues.assign(static_cast<std::size_t>(out.G), mean_b);

    std::size_t n_vox = static_cast<std::size_t>(volume.H) * volume.W * volume.D;
    parallel_for(n_vox, threads, [&](std::size_t v) {
        int i = static_cast<int>(v % volume.H);
        int j = static_cast<int>((v / volume.H) % volume.W);
        int k = static_cast<int>(v / (static_cast<std::size_t>(volume.H) * volume.W));
        double s0 = 1.0;
        if (!b0.empty()) {
            s0 = 0.0;
            for (int g : b0) s0 += volume.at(i, j, k, g);
            s0 /= static_cast<double>(b0.size());
            if (s0 <= 0.0) return;                 // background stays all-zeros
        }
        Eigen::VectorXd signal(static_cast<Eigen::Index>(dwi.size()));
        for (std::size_t r = 0; r < dwi.size(); ++r)
            signal[static_cast<Eigen::Index>(r)] = volume.at(i, j, k, dwi[r]) / s0;
        Eigen::VectorXd sampled = target_basis * fitter.fit(signal);
        for (int g = 0; g < out.G; ++g) out.at(i, j, k, g) = sampled[g];
    });
    return out;
}

} // namespace tracto
