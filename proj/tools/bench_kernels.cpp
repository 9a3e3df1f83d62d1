// Timing comparison of the serial reference kernels against the OpenMP
// variants, plus a forward-pass benchmark at the default model size.

#include <chrono>
#include <cstdio>
#include <vector>

#include "merging/kernels.hpp"
#include "merging/rng.hpp"
#include "merging/task_suite.hpp"

using namespace merging;

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int iters) {
    fn();  // warm up
    const auto t0 = Clock::now();
    for (int i = 0; i < iters; ++i) fn();
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

std::vector<double> random_buf(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

}  // namespace

int main() {
    std::printf("threads available: %d\n\n", kernels::max_threads());
    std::printf("%-28s %10s %10s %8s\n", "kernel", "serial ms", "openmp ms", "speedup");

    Rng rng(1);
    for (std::size_t n : {64, 128, 256, 512}) {
        auto a = random_buf(n * n, rng);
        auto b = random_buf(n * n, rng);
        std::vector<double> c(n * n);
        const int iters = n <= 128 ? 50 : 10;
        const double serial = time_ms(
            [&] { kernels::serial::matmul(a.data(), b.data(), c.data(), n, n, n); }, iters);
        const double parallel = time_ms(
            [&] { kernels::openmp::matmul(a.data(), b.data(), c.data(), n, n, n); }, iters);
        std::printf("%-28s %10.3f %10.3f %7.2fx\n",
                    ("matmul " + std::to_string(n) + "^3").c_str(), serial, parallel,
                    serial / parallel);
    }

    {
        const std::size_t n = 1 << 20;
        auto x = random_buf(n, rng);
        std::vector<double> y(n, 0.5);
        const double serial =
            time_ms([&] { kernels::serial::axpy(0.3, x.data(), y.data(), n); }, 50);
        const double parallel =
            time_ms([&] { kernels::openmp::axpy(0.3, x.data(), y.data(), n); }, 50);
        std::printf("%-28s %10.3f %10.3f %7.2fx\n", "axpy 1M", serial, parallel,
                    serial / parallel);
    }

    {
        ModelConfig cfg;
        ModelParams params = ModelParams::random_init(cfg, 7);
        std::vector<int> tokens(cfg.max_seq_len);
        for (std::size_t i = 0; i < tokens.size(); ++i)
            tokens[i] = static_cast<int>(i % cfg.vocab_size);
        kernels::set_parallel(false);
        const double serial = time_ms([&] { (void)forward(params, tokens); }, 50);
        kernels::set_parallel(true);
        const double parallel = time_ms([&] { (void)forward(params, tokens); }, 50);
        std::printf("%-28s %10.3f %10.3f %7.2fx\n", "forward (default config)", serial,
                    parallel, serial / parallel);
    }
    return 0;
}
