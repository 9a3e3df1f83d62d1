#pragma once

#include <cstddef>

namespace merging::kernels {

// Hot inner loops, each in two variants: `serial` is the reference
// implementation, `openmp` parallelizes over independent output rows or
// elements. Every element's accumulation order is identical in both, so
// results are bitwise equal; the dispatching wrappers pick the variant
// from the process-wide mode. Whole-array reductions are deliberately
// not parallelized (fixed left-to-right order).

bool parallel_enabled() noexcept;
void set_parallel(bool enabled) noexcept;
int max_threads() noexcept;

namespace serial {
// c[m,n] = a[m,k] * b[k,n]
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
// c[m,k] = a[m,n] * b[k,n]^T
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t n, std::size_t k);
// c[k,n] = a[m,k]^T * b[m,n]
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void hadamard(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double s, double* out, std::size_t n);
}  // namespace serial

namespace openmp {
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t n, std::size_t k);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void hadamard(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double s, double* out, std::size_t n);
}  // namespace openmp

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t n, std::size_t k);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void hadamard(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double s, double* out, std::size_t n);

// left-to-right reduction; kept serial for determinism
double dot(const double* a, const double* b, std::size_t n);
double sum(const double* a, std::size_t n);
double abs_mean(const double* a, std::size_t n);

}  // namespace merging::kernels
