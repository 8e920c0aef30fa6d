#include "catch_amalgamated.hpp"

#include "tracto/rng.hpp"
#include "tracto/sh.hpp"

using namespace tracto;

namespace {

// independent least-squares oracle: normal equations B^T B c = B^T s
// solved by hand-rolled Gaussian elimination with partial pivoting
std::vector<double> normal_equations_fit(const Eigen::MatrixXd& B, const Eigen::VectorXd& s) {
    int n = static_cast<int>(B.cols());
    std::vector<std::vector<double>> A(static_cast<std::size_t>(n),
                                       std::vector<double>(static_cast<std::size_t>(n + 1), 0.0));
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c)
            for (int k = 0; k < B.rows(); ++k) A[r][c] += B(k, r) * B(k, c);
        for (int k = 0; k < B.rows(); ++k) A[r][n] += B(k, r) * s[k];
    }
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(A[r][col]) > std::abs(A[pivot][col])) pivot = r;
        std::swap(A[static_cast<std::size_t>(col)], A[static_cast<std::size_t>(pivot)]);
        for (int r = col + 1; r < n; ++r) {
            double f = A[r][col] / A[col][col];
            for (int c = col; c <= n; ++c) A[r][c] -= f * A[col][c];
        }
    }
    std::vector<double> x(static_cast<std::size_t>(n));
    for (int r = n - 1; r >= 0; --r) {
        double acc = A[r][n];
        for (int c = r + 1; c < n; ++c) acc -= A[r][c] * x[static_cast<std::size_t>(c)];
        x[static_cast<std::size_t>(r)] = acc / A[r][r];
    }
    return x;
}

DwiVolume band_limited_volume(const Sphere& sphere, int order, int H, unsigned seed) {
    // per-voxel random coefficients, signal sampled at the sphere directions
    Rng rng(seed);
    DwiVolume v;
    v.H = v.W = v.D = H;
    v.G = sphere.k();
    v.data.assign(static_cast<std::size_t>(H) * H * H * v.G, 0.0);
    v.gradients = sphere.directions();
    v.bvalues.assign(static_cast<std::size_t>(v.G), 1000.0);
    Eigen::MatrixXd basis = sh_basis_matrix(sphere.directions(), order);
    for (int k = 0; k < H; ++k)
        for (int j = 0; j < H; ++j)
            for (int i = 0; i < H; ++i) {
                Eigen::VectorXd coeffs(sh_basis_size(order));
                for (int c = 0; c < coeffs.size(); ++c) coeffs[c] = rng.uniform(-1, 1);
                Eigen::VectorXd signal = basis * coeffs;
                for (int g = 0; g < v.G; ++g) v.at(i, j, k, g) = signal[g];
            }
    return v;
}

} // namespace

TEST_CASE("basis size and automatic order selection") {
    REQUIRE(sh_basis_size(0) == 1);
    REQUIRE(sh_basis_size(4) == 15);
    REQUIRE(sh_basis_size(8) == 45);
    REQUIRE_THROWS_AS(sh_basis_size(3), std::invalid_argument);

    REQUIRE(auto_sh_order(100) == 8);
    REQUIRE(auto_sh_order(45) == 8);
    REQUIRE(auto_sh_order(44) == 6);
    REQUIRE(auto_sh_order(32) == 6);
    REQUIRE(auto_sh_order(6) == 2);
    REQUIRE(auto_sh_order(1) == 0);
}

TEST_CASE("constant signal fits to the DC coefficient only") {
    Sphere s = make_sphere(32);
    double value = 2.75;
    Eigen::VectorXd signal = Eigen::VectorXd::Constant(32, value);
    Eigen::VectorXd coeffs = sh_fit(signal, s.directions(), 4);
    REQUIRE(coeffs.size() == 15);
    REQUIRE(coeffs[0] == Catch::Approx(value * std::sqrt(4.0 * M_PI)).epsilon(1e-10));
    for (int c = 1; c < coeffs.size(); ++c) REQUIRE(std::abs(coeffs[c]) < 1e-9);
}

TEST_CASE("band-limited signals are recovered exactly") {
    Sphere s = make_sphere(100);
    Rng rng(77);
    Eigen::VectorXd truth(sh_basis_size(4));
    for (int c = 0; c < truth.size(); ++c) truth[c] = rng.uniform(-2, 2);
    Eigen::VectorXd signal = sh_basis_matrix(s.directions(), 4) * truth;
    Eigen::VectorXd fitted = sh_fit(signal, s.directions(), 4);
    REQUIRE((fitted - truth).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("least-squares fit equals the normal-equations oracle") {
    Sphere s = make_sphere(100);
    Rng rng(101);
    for (int order : {4, 8}) {
        Eigen::VectorXd noisy(100);
        for (int g = 0; g < 100; ++g) noisy[g] = rng.uniform(-1, 1);
        Eigen::VectorXd fitted = sh_fit(noisy, s.directions(), order);
        auto oracle = normal_equations_fit(sh_basis_matrix(s.directions(), order), noisy);
        REQUIRE(fitted.size() == static_cast<Eigen::Index>(oracle.size()));
        for (int c = 0; c < fitted.size(); ++c)
            REQUIRE(fitted[c] == Catch::Approx(oracle[static_cast<std::size_t>(c)]).margin(1e-8));
    }
}

TEST_CASE("fit error paths") {
    Sphere s = make_sphere(10);
    Eigen::VectorXd signal = Eigen::VectorXd::Ones(10);
    REQUIRE_THROWS_AS(sh_fit(signal, s.directions(), 4), std::invalid_argument);  // 15 > 10
    REQUIRE_THROWS_AS(sh_fit(signal, s.directions(), 3), std::invalid_argument);  // odd order
}

TEST_CASE("sampling the DC basis function gives a constant") {
    Eigen::VectorXd coeffs = Eigen::VectorXd::Zero(1);
    coeffs[0] = std::sqrt(4.0 * M_PI);
    Sphere s = make_sphere(50);
    Eigen::VectorXd values = sh_sample(coeffs, s.directions());
    for (int i = 0; i < values.size(); ++i) REQUIRE(values[i] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fit-then-sample reproduces band-limited signals (projector identity)") {
    Sphere s = make_sphere(100);
    Rng rng(55);
    for (int trial = 0; trial < 100; ++trial) {
        int order = 2 * rng.uniform_below(5);  // 0,2,4,6,8
        Eigen::VectorXd truth(sh_basis_size(order));
        for (int c = 0; c < truth.size(); ++c) truth[c] = rng.uniform(-2, 2);
        Eigen::VectorXd signal = sh_basis_matrix(s.directions(), order) * truth;
        Eigen::VectorXd back = sh_sample(sh_fit(signal, s.directions(), order), s.directions());
        REQUIRE((back - signal).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("even basis is antipodally symmetric") {
    Sphere s = make_sphere(40);
    Rng rng(63);
    Eigen::VectorXd coeffs(sh_basis_size(6));
    for (int c = 0; c < coeffs.size(); ++c) coeffs[c] = rng.uniform(-1, 1);
    std::vector<Vec3> dirs, flipped;
    for (int trial = 0; trial < 30; ++trial) {
        Vec3 v(rng.normal(), rng.normal(), rng.normal());
        v.normalize();
        dirs.push_back(v);
        flipped.push_back(-v);
    }
    Eigen::VectorXd a = sh_sample(coeffs, dirs);
    Eigen::VectorXd b = sh_sample(coeffs, flipped);
    for (int i = 0; i < a.size(); ++i) REQUIRE(a[i] == Catch::Approx(b[i]).margin(1e-10));
}

TEST_CASE("sh_sample rejects invalid coefficient lengths") {
    Sphere s = make_sphere(10);
    REQUIRE_THROWS_AS(sh_sample(Eigen::VectorXd::Zero(10), s.directions()), std::invalid_argument);
}

TEST_CASE("resample_volume is a fixed point on band-limited input at the target sphere") {
    Sphere target = make_sphere(32);
    DwiVolume v = band_limited_volume(target, 4, 3, 9001);
    DwiVolume out = resample_volume(v, target, 4);
    REQUIRE(out.G == 32);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        REQUIRE(out.data[i] == Catch::Approx(v.data[i]).margin(1e-6));
}

TEST_CASE("resample_volume maps constant volumes to constant attenuation") {
    // with a b=0 channel present the output holds S/S0
    DwiVolume v;
    v.H = v.W = v.D = 2;
    v.G = 30;
    v.data.assign(8u * 30, 5.0);
    Sphere s = make_sphere(29);
    v.gradients.push_back(Vec3(0, 0, 0));
    v.bvalues.push_back(0.0);
    for (const auto& d : s.directions()) {
        v.gradients.push_back(d);
        v.bvalues.push_back(1000.0);
    }
    Sphere target = make_sphere(20);
    DwiVolume out = resample_volume(v, target, 4);
    REQUIRE(out.G == 20);
    for (double x : out.data) REQUIRE(x == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("resample_volume composes sh_fit and sh_sample bit-identically") {
    Sphere source = make_sphere(40);
    Sphere target = make_sphere(25);
    DwiVolume v = band_limited_volume(source, 4, 2, 777);
    DwiVolume out = resample_volume(v, target, 4);

    int i = 1, j = 0, k = 1;
    Eigen::VectorXd manual =
        sh_sample(sh_fit(v.channels(i, j, k), source.directions(), 4), target.directions());
    for (int g = 0; g < target.k(); ++g) REQUIRE(out.at(i, j, k, g) == manual[g]);
}

TEST_CASE("resample_volume zeroes background voxels with no b=0 signal") {
    DwiVolume v;
    v.H = v.W = v.D = 1;
    v.G = 16;
    v.data.assign(16, 1.0);
    Sphere s = make_sphere(15);
    v.gradients.push_back(Vec3(0, 0, 0));
    v.bvalues.push_back(0.0);
    for (const auto& d : s.directions()) {
        v.gradients.push_back(d);
        v.bvalues.push_back(1000.0);
    }
    v.data[0] = 0.0;                           // zero b=0 signal
    Sphere target = make_sphere(10);
    DwiVolume out = resample_volume(v, target, 2);
    for (double x : out.data) REQUIRE(x == 0.0);
}

TEST_CASE("resample_volume is deterministic across thread counts") {
    Sphere target = make_sphere(20);
    DwiVolume v = band_limited_volume(make_sphere(32), 4, 4, 31337);
    DwiVolume serial = resample_volume(v, target, 4, 1);
    DwiVolume threaded = resample_volume(v, target, 4, 4);
    REQUIRE(serial.data == threaded.data);
}
