#include "catch_amalgamated.hpp"

#include <cstring>
#include <functional>

#include "tracto/rng.hpp"
#include "tracto/tensor.hpp"

using namespace tracto;

namespace {

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

// central-difference check of d(build())/d(leaf) for every leaf entry
double max_fd_error(const std::function<Tensor()>& build, std::vector<Tensor> leaves,
                    double eps = 1e-5) {
    Tensor root = build();
    for (auto& leaf : leaves) leaf.zero_grad();
    root.backward();
    double worst = 0.0;
    for (auto& leaf : leaves) {
        Mat analytic = leaf.grad();
        for (int i = 0; i < leaf.rows(); ++i)
            for (int j = 0; j < leaf.cols(); ++j) {
                double saved = leaf.value()(i, j);
                leaf.value()(i, j) = saved + eps;
                double up = build().value()(0, 0);
                leaf.value()(i, j) = saved - eps;
                double down = build().value()(0, 0);
                leaf.value()(i, j) = saved;
                double numeric = (up - down) / (2 * eps);
                double denom = std::max({1.0, std::abs(numeric), std::abs(analytic(i, j))});
                worst = std::max(worst, std::abs(numeric - analytic(i, j)) / denom);
            }
    }
    return worst;
}

} // namespace

TEST_CASE("backward of a parameter sum gives an all-ones gradient") {
    Rng rng(1);
    Tensor w = Tensor::from_matrix(random_mat(3, 5, rng), true);
    w.zero_grad();
    sum_all(w).backward();
    REQUIRE(w.grad().rows() == 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) REQUIRE(w.grad()(i, j) == 1.0);
}

TEST_CASE("matmul gradients match finite differences") {
    Rng rng(2);
    Tensor a = Tensor::from_matrix(random_mat(3, 4, rng), true);
    Tensor b = Tensor::from_matrix(random_mat(4, 2, rng), true);
    Tensor r = Tensor::from_matrix(random_mat(3, 2, rng));
    auto build = [&] { return sum_all(mul(matmul(a, b), r)); };
    REQUIRE(max_fd_error(build, {a, b}) < 1e-6);
}

TEST_CASE("matmul_nt equals matmul with explicit transpose and checks out numerically") {
    Rng rng(3);
    Tensor a = Tensor::from_matrix(random_mat(3, 4, rng), true);
    Tensor b = Tensor::from_matrix(random_mat(5, 4, rng), true);
    Mat direct = a.value() * b.value().transpose();
    REQUIRE((matmul_nt(a, b).value() - direct).cwiseAbs().maxCoeff() < 1e-14);
    Tensor r = Tensor::from_matrix(random_mat(3, 5, rng));
    auto build = [&] { return sum_all(mul(matmul_nt(a, b), r)); };
    REQUIRE(max_fd_error(build, {a, b}) < 1e-6);
}

TEST_CASE("elementwise and broadcast op gradients match finite differences") {
    Rng rng(4);
    Tensor x = Tensor::from_matrix(random_mat(4, 3, rng), true);
    Tensor y = Tensor::from_matrix(random_mat(4, 3, rng), true);
    Tensor bias = Tensor::from_matrix(random_mat(1, 3, rng), true);
    Tensor r = Tensor::from_matrix(random_mat(4, 3, rng));
    auto build = [&] {
        return sum_all(mul(scale(add_rowvec(add(mul(x, y), x), bias), 1.7), r));
    };
    REQUIRE(max_fd_error(build, {x, y, bias}) < 1e-6);
}

TEST_CASE("relu forward and gradient away from the kink") {
    Rng rng(5);
    Mat m = random_mat(4, 4, rng);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            m(i, j) += m(i, j) >= 0 ? 0.2 : -0.2;   // keep off the kink
    Tensor x = Tensor::from_matrix(m, true);
    Tensor out = relu(x);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) REQUIRE(out.value()(i, j) == std::max(0.0, m(i, j)));
    Tensor r = Tensor::from_matrix(random_mat(4, 4, rng));
    auto build = [&] { return sum_all(mul(relu(x), r)); };
    REQUIRE(max_fd_error(build, {x}) < 1e-6);
}

TEST_CASE("layernorm normalizes rows and its gradients match finite differences") {
    Rng rng(6);
    Tensor x = Tensor::from_matrix(random_mat(5, 8, rng, -3, 3), true);
    Tensor gamma = Tensor::from_matrix(Mat::Ones(1, 8), true);
    Tensor beta = Tensor::from_matrix(Mat::Zero(1, 8), true);

    Tensor normed = layernorm_rows(x, gamma, beta);
    for (int i = 0; i < 5; ++i) {
        double mean = normed.value().row(i).mean();
        double var = (normed.value().row(i).array() - mean).square().mean();
        REQUIRE(std::abs(mean) < 1e-6);
        REQUIRE(std::abs(var - 1.0) < 1e-4);
    }

    Tensor g2 = Tensor::from_matrix(random_mat(1, 8, rng, 0.5, 1.5), true);
    Tensor b2 = Tensor::from_matrix(random_mat(1, 8, rng), true);
    Tensor r = Tensor::from_matrix(random_mat(5, 8, rng));
    auto build = [&] { return sum_all(mul(layernorm_rows(x, g2, b2), r)); };
    REQUIRE(max_fd_error(build, {x, g2, b2}) < 1e-6);
}

TEST_CASE("masked softmax rows sum to one with exact zeros at masked entries") {
    Rng rng(7);
    Tensor x = Tensor::from_matrix(random_mat(4, 6, rng, -2, 2), true);
    Mat mask = Mat::Zero(4, 6);
    mask(0, 3) = mask(0, 4) = mask(0, 5) = -1e30;
    mask(2, 0) = -1e30;
    Tensor p = softmax_rows_masked(x, mask);
    for (int i = 0; i < 4; ++i) {
        REQUIRE(p.value().row(i).sum() == Catch::Approx(1.0).margin(1e-12));
        for (int j = 0; j < 6; ++j) {
            if (mask(i, j) < 0)
                REQUIRE(p.value()(i, j) == 0.0);
            else
                REQUIRE(p.value()(i, j) > 0.0);
        }
    }

    // changing a masked input leaves every output bit unchanged
    Mat before = p.value();
    x.value()(0, 4) += 1234.5;
    Mat after = softmax_rows_masked(x, mask).value();
    REQUIRE(std::memcmp(before.data(), after.data(),
                        sizeof(double) * static_cast<std::size_t>(before.size())) == 0);
    x.value()(0, 4) -= 1234.5;

    Tensor r = Tensor::from_matrix(random_mat(4, 6, rng));
    auto build = [&] { return sum_all(mul(softmax_rows_masked(x, mask), r)); };
    REQUIRE(max_fd_error(build, {x}) < 1e-6);
}

TEST_CASE("slice and concat invert each other and propagate gradients") {
    Rng rng(8);
    Tensor x = Tensor::from_matrix(random_mat(3, 9, rng), true);
    Tensor a = slice_cols(x, 0, 3), b = slice_cols(x, 3, 6), c = slice_cols(x, 6, 9);
    Tensor back = concat_cols({a, b, c});
    REQUIRE((back.value() - x.value()).cwiseAbs().maxCoeff() == 0.0);

    Tensor r = Tensor::from_matrix(random_mat(3, 9, rng));
    auto build = [&] {
        Tensor h = concat_cols({slice_cols(x, 3, 9), slice_cols(x, 0, 3)});
        return sum_all(mul(h, r));
    };
    REQUIRE(max_fd_error(build, {x}) < 1e-6);
}

TEST_CASE("dropout scales kept entries and is seed-deterministic") {
    Rng rng(9);
    Tensor x = Tensor::from_matrix(random_mat(6, 6, rng, 0.5, 1.5), true);

    Rng d1(42), d2(42);
    Tensor out1 = dropout(x, 0.5, d1);
    Tensor out2 = dropout(x, 0.5, d2);
    REQUIRE(std::memcmp(out1.value().data(), out2.value().data(),
                        sizeof(double) * 36) == 0);

    int kept = 0;
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) {
            double v = out1.value()(i, j);
            if (v != 0.0) {
                REQUIRE(v == Catch::Approx(2.0 * x.value()(i, j)).margin(1e-15));
                ++kept;
            }
        }
    REQUIRE(kept > 5);
    REQUIRE(kept < 31);

    x.zero_grad();
    sum_all(out1).backward();
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
            REQUIRE(x.grad()(i, j) == (out1.value()(i, j) != 0.0 ? 2.0 : 0.0));

    Rng d3(1);
    Tensor same = dropout(x, 0.0, d3);
    REQUIRE(same.node() == x.node());          // p = 0 is the identity
}

TEST_CASE("repeated backward passes are bit-identical") {
    auto run = [](Mat& grad_out) {
        Rng rng(31);
        Tensor x = Tensor::from_matrix(random_mat(4, 6, rng), true);
        Tensor w = Tensor::from_matrix(random_mat(6, 5, rng), true);
        Tensor g = Tensor::from_matrix(Mat::Ones(1, 5), true);
        Tensor b = Tensor::from_matrix(Mat::Zero(1, 5), true);
        Rng drop(7);
        Tensor h = dropout(relu(matmul(x, w)), 0.3, drop);
        Tensor out = layernorm_rows(h, g, b);
        w.zero_grad();
        sum_all(out).backward();
        grad_out = w.grad();
    };
    Mat g1, g2;
    run(g1);
    run(g2);
    REQUIRE(std::memcmp(g1.data(), g2.data(), sizeof(double) * static_cast<std::size_t>(g1.size())) == 0);
}

TEST_CASE("gradient accumulation and shared leaves") {
    Rng rng(11);
    Tensor w = Tensor::from_matrix(random_mat(2, 2, rng), true);
    w.zero_grad();
    sum_all(w).backward();
    sum_all(w).backward();
    REQUIRE(w.grad()(0, 0) == 2.0);            // accumulates across passes

    Tensor alias = w.shared_leaf();
    REQUIRE(alias.value()(0, 0) == w.value()(0, 0));
    alias.zero_grad();
    sum_all(scale(alias, 3.0)).backward();
    REQUIRE(alias.grad()(0, 0) == 3.0);
    REQUIRE(w.grad()(0, 0) == 2.0);            // alias grads stay separate
}

TEST_CASE("backward usage errors") {
    Rng rng(12);
    Tensor x = Tensor::from_matrix(random_mat(2, 3, rng), true);
    REQUIRE_THROWS_AS(x.backward(), std::logic_error);             // non-scalar
    Tensor frozen = Tensor::from_matrix(random_mat(2, 3, rng), false);
    REQUIRE_THROWS_AS(sum_all(frozen).backward(), std::logic_error);  // untracked
    REQUIRE_THROWS_AS(frozen.grad(), std::logic_error);
}

TEST_CASE("op shape validation") {
    Rng rng(13);
    Tensor a = Tensor::from_matrix(random_mat(2, 3, rng));
    Tensor b = Tensor::from_matrix(random_mat(3, 2, rng));
    REQUIRE_THROWS_AS(add(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(mul(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(matmul(a, a), std::invalid_argument);
    REQUIRE_THROWS_AS(add_rowvec(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(slice_cols(a, 2, 2), std::invalid_argument);
    Rng d(1);
    REQUIRE_THROWS_AS(dropout(a, 1.0, d), std::invalid_argument);
}
