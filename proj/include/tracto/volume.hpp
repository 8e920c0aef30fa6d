#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/sphere.hpp"

namespace tracto {

using Affine = Eigen::Matrix4d;

inline Vec3 apply_affine(const Affine& m, const Vec3& p) {
    Eigen::Vector4d h = m * Eigen::Vector4d(p.x(), p.y(), p.z(), 1.0);
    return h.head<3>();
}

// Continuous voxel coordinate; no rounding.
inline Vec3 ras_to_voxel(const Affine& affine, const Vec3& ras) {
    return apply_affine(affine.inverse(), ras);
}

// 4D diffusion volume. Storage is the file-native order: index i varies
// fastest, then j, k, and the gradient channel g last.
struct DwiVolume {
    int H = 0, W = 0, D = 0, G = 0;
    Affine affine = Affine::Identity();
    std::vector<double> data;           // size H*W*D*G
    std::vector<Vec3> gradients;        // G b-vectors (unit for b>0, may be zero for b=0)
    std::vector<double> bvalues;        // G values in s/mm^2

    std::size_t flat_index(int i, int j, int k, int g) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(H) *
                   (static_cast<std::size_t>(j) +
                    static_cast<std::size_t>(W) *
                        (static_cast<std::size_t>(k) +
                         static_cast<std::size_t>(D) * static_cast<std::size_t>(g)));
    }
    double at(int i, int j, int k, int g) const { return data[flat_index(i, j, k, g)]; }
    double& at(int i, int j, int k, int g) { return data[flat_index(i, j, k, g)]; }

    bool in_bounds(int i, int j, int k) const {
        return i >= 0 && i < H && j >= 0 && j < W && k >= 0 && k < D;
    }

    Eigen::VectorXd channels(int i, int j, int k) const {
        Eigen::VectorXd out(G);
        for (int g = 0; g < G; ++g) out[g] = at(i, j, k, g);
        return out;
    }

    Vec3 voxel_from_ras(const Vec3& ras) const { return apply_affine(affine_inverse(), ras); }

    const Affine& affine_inverse() const {
        if (!inv_valid_) {
            affine_inv_ = affine.inverse();
            inv_valid_ = true;
        }
        return affine_inv_;
    }

    void validate() const {
        if (H <= 0 || W <= 0 || D <= 0 || G <= 0)
            throw std::invalid_argument("DwiVolume: non-positive dimension");
        if (data.size() != static_cast<std::size_t>(H) * W * D * G)
            throw std::invalid_argument("DwiVolume: data size mismatch");
        if (static_cast<int>(gradients.size()) != G || static_cast<int>(bvalues.size()) != G)
            throw std::invalid_argument("DwiVolume: gradient table size must equal G");
        if (std::abs(affine.determinant()) < 1e-12)
            throw std::invalid_argument("DwiVolume: affine is not invertible");
        for (int g = 0; g < G; ++g)
            if (bvalues[g] > 0.0 && std::abs(gradients[g].norm() - 1.0) > 1e-3)
                throw std::invalid_argument("DwiVolume: non-unit gradient for b>0 entry");
    }

private:
    mutable Affine affine_inv_ = Affine::Identity();
    mutable bool inv_valid_ = false;
};

struct ScalarMap {
    enum class Kind { WmMask, Fa };

    int H = 0, W = 0, D = 0;
    Affine affine = Affine::Identity();
    std::vector<double> data;           // size H*W*D, same index order as DwiVolume
    Kind kind = Kind::Fa;

    std::size_t flat_index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(H) *
                   (static_cast<std::size_t>(j) + static_cast<std::size_t>(W) * k);
    }
    double at(int i, int j, int k) const { return data[flat_index(i, j, k)]; }
    double& at(int i, int j, int k) { return data[flat_index(i, j, k)]; }

    bool in_bounds(int i, int j, int k) const {
        return i >= 0 && i < H && j >= 0 && j < W && k >= 0 && k < D;
    }

    Vec3 voxel_from_ras(const Vec3& ras) const { return apply_affine(affine_inverse(), ras); }

    const Affine& affine_inverse() const {
        if (!inv_valid_) {
            affine_inv_ = affine.inverse();
            inv_valid_ = true;
        }
        return affine_inv_;
    }

    void validate() const {
        if (H <= 0 || W <= 0 || D <= 0)
            throw std::invalid_argument("ScalarMap: non-positive dimension");
        if (data.size() != static_cast<std::size_t>(H) * W * D)
            throw std::invalid_argument("ScalarMap: data size mismatch");
        for (double v : data) {
            if (kind == Kind::WmMask && v != 0.0 && v != 1.0)
                throw std::invalid_argument("ScalarMap: mask entries must be 0 or 1");
            if (kind == Kind::Fa && (v < 0.0 || v > 1.0))
                throw std::invalid_argument("ScalarMap: FA entries must lie in [0,1]");
        }
    }

private:
    mutable Affine affine_inv_ = Affine::Identity();
    mutable bool inv_valid_ = false;
};

// 3x3x3xG neighborhood block. Storage: ((dz*3 + dy)*3 + dx)*G + g with
// dx,dy,dz in {0,1,2} relative to the (-1,-1,-1) corner.
struct VoxelCube {
    int G = 0;
    std::array<int, 3> center{0, 0, 0};
    std::vector<double> values;         // size 27*G

    std::size_t flat_index(int dx, int dy, int dz, int g) const {
        return (static_cast<std::size_t>((dz * 3 + dy) * 3 + dx)) * G + g;
    }
    double at(int dx, int dy, int dz, int g) const { return values[flat_index(dx, dy, dz, g)]; }
    double& at(int dx, int dy, int dz, int g) { return values[flat_index(dx, dy, dz, g)]; }
};

namespace detail {

// Shared trilinear kernel over one channel of a fortran-ordered grid.
// Continuous voxel coords must satisfy 0 <= x <= H-1 (etc.); the caller
// has already bounds-checked.
struct TrilinearWeights {
    int i0, j0, k0, i1, j1, k1;
    double fx, fy, fz;
};

inline TrilinearWeights trilinear_weights(const Vec3& v, int H, int W, int D) {
    TrilinearWeights w;
    auto cell = [](double x, int n, int& lo, int& hi, double& f) {
        lo = static_cast<int>(std::floor(x));
        if (lo > n - 2) lo = n - 2;          // upper edge: keep the cell inside
        if (lo < 0) lo = 0;                   // n == 1 degenerate axis
        hi = std::min(lo + 1, n - 1);
        f = x - lo;
    };
    cell(v.x(), H, w.i0, w.i1, w.fx);
    cell(v.y(), W, w.j0, w.j1, w.fy);
    cell(v.z(), D, w.k0, w.k1, w.fz);
    return w;
}

inline bool inside_voxel_box(const Vec3& v, int H, int W, int D) {
    return v.x() >= 0.0 && v.x() <= H - 1.0 && v.y() >= 0.0 && v.y() <= W - 1.0 &&
           v.z() >= 0.0 && v.z() <= D - 1.0;
}

} // namespace detail

// Channel-wise trilinear interpolation of the 8 surrounding voxels.
inline Eigen::VectorXd trilinear_sample(const DwiVolume& volume, const Vec3& ras) {
    Vec3 v = volume.voxel_from_ras(ras);
    if (!detail::inside_voxel_box(v, volume.H, volume.W, volume.D))
        throw OutOfBoundsError("trilinear_sample: point outside volume");
    auto w = detail::trilinear_weights(v, volume.H, volume.W, volume.D);
    Eigen::VectorXd out(volume.G);
    for (int g = 0; g < volume.G; ++g) {
        double c00 = volume.at(w.i0, w.j0, w.k0, g) * (1 - w.fx) + volume.at(w.i1, w.j0, w.k0, g) * w.fx;
        double c10 = volume.at(w.i0, w.j1, w.k0, g) * (1 - w.fx) + volume.at(w.i1, w.j1, w.k0, g) * w.fx;
        double c01 = volume.at(w.i0, w.j0, w.k1, g) * (1 - w.fx) + volume.at(w.i1, w.j0, w.k1, g) * w.fx;
        double c11 = volume.at(w.i0, w.j1, w.k1, g) * (1 - w.fx) + volume.at(w.i1, w.j1, w.k1, g) * w.fx;
        double c0 = c00 * (1 - w.fy) + c10 * w.fy;
        double c1 = c01 * (1 - w.fy) + c11 * w.fy;
        out[g] = c0 * (1 - w.fz) + c1 * w.fz;
    }
    return out;
}

inline double trilinear_sample(const ScalarMap& map, const Vec3& ras) {
    Vec3 v = map.voxel_from_ras(ras);
    if (!detail::inside_voxel_box(v, map.H, map.W, map.D))
        throw OutOfBoundsError("trilinear_sample: point outside map");
    auto w = detail::trilinear_weights(v, map.H, map.W, map.D);
    double c00 = map.at(w.i0, w.j0, w.k0) * (1 - w.fx) + map.at(w.i1, w.j0, w.k0) * w.fx;
    double c10 = map.at(w.i0, w.j1, w.k0) * (1 - w.fx) + map.at(w.i1, w.j1, w.k0) * w.fx;
    double c01 = map.at(w.i0, w.j0, w.k1) * (1 - w.fx) + map.at(w.i1, w.j0, w.k1) * w.fx;
    double c11 = map.at(w.i0, w.j1, w.k1) * (1 - w.fx) + map.at(w.i1, w.j1, w.k1) * w.fx;
    double c0 = c00 * (1 - w.fy) + c10 * w.fy;
    double c1 = c01 * (1 - w.fy) + c11 * w.fy;
    return c0 * (1 - w.fz) + c1 * w.fz;
}

inline std::array<int, 3> nearest_voxel(const DwiVolume& volume, const Vec3& ras) {
    Vec3 v = volume.voxel_from_ras(ras);
    return {static_cast<int>(std::llround(v.x())), static_cast<int>(std::llround(v.y())),
            static_cast<int>(std::llround(v.z()))};
}

inline std::array<int, 3> nearest_voxel(const ScalarMap& map, const Vec3& ras) {
    Vec3 v = map.voxel_from_ras(ras);
    return {static_cast<int>(std::llround(v.x())), static_cast<int>(std::llround(v.y())),
            static_cast<int>(std::llround(v.z()))};
}

// 3x3x3xG block centered on the nearest voxel; out-of-grid neighbors are
// zero-filled.
inline VoxelCube extract_cube(const DwiVolume& volume, const Vec3& ras) {
    auto c = nearest_voxel(volume, ras);
    if (!volume.in_bounds(c[0], c[1], c[2]))
        throw OutOfBoundsError("extract_cube: center voxel outside volume");
    VoxelCube cube;
    cube.G = volume.G;
    cube.center = c;
    cube.values.assign(27u * volume.G, 0.0);
    for (int dz = 0; dz < 3; ++dz)
        for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) {
                int i = c[0] + dx - 1, j = c[1] + dy - 1, k = c[2] + dz - 1;
                if (!volume.in_bounds(i, j, k)) continue;
                for (int g = 0; g < volume.G; ++g)
                    cube.at(dx, dy, dz, g) = volume.at(i, j, k, g);
            }
    return cube;
}

// --- DTI fit and fractional anisotropy ---------------------------------

inline double fa_from_eigenvalues(double l1, double l2, double l3) {
    double mean = (l1 + l2 + l3) / 3.0;
    double num = (l1 - mean) * (l1 - mean) + (l2 - mean) * (l2 - mean) + (l3 - mean) * (l3 - mean);
    double den = l1 * l1 + l2 * l2 + l3 * l3;
    if (den <= 0.0) return 0.0;
    double fa = std::sqrt(1.5 * num / den);
    return std::clamp(fa, 0.0, 1.0);
}

// Log-linear least-squares tensor fit of -ln(S/S0)/b = g^T D g over the
// b>0 channels.
inline Eigen::Matrix3d dti_fit(const Eigen::VectorXd& signal, const std::vector<Vec3>& gradients,
                               const std::vector<double>& bvalues, double s0) {
    if (signal.size() != static_cast<Eigen::Index>(gradients.size()) ||
        gradients.size() != bvalues.size())
        throw std::invalid_argument("dti_fit: signal/gradient table size mismatch");
    if (s0 <= 0.0) throw std::invalid_argument("dti_fit: non-positive s0");
    std::vector<int> dwi;
    for (std::size_t g = 0; g < bvalues.size(); ++g)
        if (bvalues[g] > 0.0) dwi.push_back(static_cast<int>(g));
    if (dwi.size() < 6) throw std::invalid_argument("dti_fit: need at least 6 b>0 gradients");

    Eigen::MatrixXd design(dwi.size(), 6);
    Eigen::VectorXd rhs(dwi.size());
    for (std::size_t r = 0; r < dwi.size(); ++r) {
        int g = dwi[r];
        if (signal[g] <= 0.0) throw std::invalid_argument("dti_fit: non-positive signal");
        const Vec3& v = gradients[static_cast<std::size_t>(g)];
        design.row(static_cast<Eigen::Index>(r)) << v.x() * v.x(), v.y() * v.y(), v.z() * v.z(),
            2 * v.x() * v.y(), 2 * v.x() * v.z(), 2 * v.y() * v.z();
        rhs[static_cast<Eigen::Index>(r)] = -std::log(signal[g] / s0) / bvalues[static_cast<std::size_t>(g)];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < 6) throw std::invalid_argument("dti_fit: singular design matrix");
    Eigen::VectorXd d = qr.solve(rhs);
    Eigen::Matrix3d tensor;
    tensor << d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2];
    return tensor;
}

inline double fa_from_signal(const Eigen::VectorXd& signal, const std::vector<Vec3>& gradients,
                             const std::vector<double>& bvalues, double s0) {
    Eigen::Matrix3d tensor = dti_fit(signal, gradients, bvalues, s0);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(tensor);
    const auto& l = es.eigenvalues();
    return fa_from_eigenvalues(l[0], l[1], l[2]);
}

} // namespace tracto
