#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "merging/kernels.hpp"
#include "merging/rng.hpp"
#include "merging/tensor.hpp"
#include "oracles.hpp"

using namespace merging;

namespace {
Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}
}  // namespace

TEST_CASE("matmul matches the naive triple-loop oracle exactly") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.below(12), k = 1 + rng.below(12), n = 1 + rng.below(12);
        Tensor a = random_tensor({m, k}, rng);
        Tensor b = random_tensor({k, n}, rng);
        Tensor c({m, n});
        kernels::matmul(a.data(), b.data(), c.data(), m, k, n);
        CHECK(c == oracles::matmul(a, b));
    }
}

TEST_CASE("openmp kernels are bitwise identical to the serial reference") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t m = 1 + rng.below(40), k = 1 + rng.below(40), n = 1 + rng.below(40);
        Tensor a = random_tensor({m, k}, rng);
        Tensor b = random_tensor({k, n}, rng);

        Tensor c1({m, n}), c2({m, n});
        kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n);
        kernels::openmp::matmul(a.data(), b.data(), c2.data(), m, k, n);
        CHECK(c1 == c2);

        Tensor bt = random_tensor({n, k}, rng);
        Tensor d1({m, n}), d2({m, n});
        kernels::serial::matmul_nt(a.data(), bt.data(), d1.data(), m, k, n);
        kernels::openmp::matmul_nt(a.data(), bt.data(), d2.data(), m, k, n);
        CHECK(d1 == d2);

        Tensor e = random_tensor({m, n}, rng);
        Tensor f1({k, n}), f2({k, n});
        kernels::serial::matmul_tn(a.data(), e.data(), f1.data(), m, k, n);
        kernels::openmp::matmul_tn(a.data(), e.data(), f2.data(), m, k, n);
        CHECK(f1 == f2);

        Tensor x = random_tensor({m * k}, rng);
        Tensor y1 = random_tensor({m * k}, rng);
        Tensor y2 = y1;
        kernels::serial::axpy(0.37, x.data(), y1.data(), x.size());
        kernels::openmp::axpy(0.37, x.data(), y2.data(), x.size());
        CHECK(y1 == y2);

        Tensor z1({m * k}), z2({m * k});
        kernels::serial::hadamard(x.data(), y1.data(), z1.data(), x.size());
        kernels::openmp::hadamard(x.data(), y1.data(), z2.data(), x.size());
        CHECK(z1 == z2);
    }
}

TEST_CASE("dispatch honors the parallel switch and results do not change") {
    Rng rng(3);
    Tensor a = random_tensor({17, 23}, rng);
    Tensor b = random_tensor({23, 9}, rng);
    Tensor c1({17, 9}), c2({17, 9});

    const bool saved = kernels::parallel_enabled();
    kernels::set_parallel(false);
    CHECK_FALSE(kernels::parallel_enabled());
    kernels::matmul(a.data(), b.data(), c1.data(), 17, 23, 9);
    kernels::set_parallel(true);
    kernels::matmul(a.data(), b.data(), c2.data(), 17, 23, 9);
    kernels::set_parallel(saved);
    CHECK(c1 == c2);
}

TEST_CASE("reductions are left-to-right deterministic") {
    Rng rng(5);
    Tensor a = random_tensor({64}, rng);
    Tensor b = random_tensor({64}, rng);
    double expect = 0.0;
    for (std::size_t i = 0; i < 64; ++i) expect += a[i] * b[i];
    CHECK(kernels::dot(a.data(), b.data(), 64) == expect);
    double s = 0.0;
    for (std::size_t i = 0; i < 64; ++i) s += a[i];
    CHECK(kernels::sum(a.data(), 64) == s);
}
