#pragma once

// Dense double-precision inner loops used by the tensor substrate.
//
// Every kernel has a scalar reference implementation and, where the target
// supports it, an AVX2 (x86-64) or NEON (aarch64) variant. The variant is
// chosen once at startup from the CPU's capabilities and can be pinned with
// set_isa() for equivalence testing.
//
// Elementwise kernels and axpy perform exactly the same IEEE operations per
// element in every variant (no fused multiply-add), so they agree bitwise.
// Reductions (dot, sum) use lane-parallel partial sums and agree with the
// scalar reference only up to reassociation error.

#include <cstddef>
#include <span>
#include <string_view>

namespace mrt::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

struct KernelTable {
  Isa isa;
  // out[i] = a[i] + b[i]
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = a[i] - b[i]
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = alpha * x[i]
  void (*scale)(double alpha, const double* x, double* out, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y[i] += a[i] * b[i]
  void (*mul_acc)(const double* a, const double* b, double* y, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled for this target.
const KernelTable* avx2_table();
const KernelTable* neon_table();

bool isa_supported(Isa isa);
Isa best_isa();

// The table used by every tensor op.
const KernelTable& active();
Isa active_isa();
// Throws std::invalid_argument when the ISA is not available on this CPU.
void set_isa(Isa isa);
Isa parse_isa(std::string_view name);

// C[m x n] += A[m x k] * B[k x n], all row-major and contiguous.
// Built on axpy, so the result is bitwise identical across variants.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a,
              const double* b, double* c);

}  // namespace mrt::kernels
