#include <atomic>
#include <stdexcept>
#include <string>

#include "mrt/kernels.hpp"

namespace mrt::kernels {

#if !defined(MRT_HAVE_AVX2)
const KernelTable* avx2_table() { return nullptr; }
#endif
#if !defined(MRT_HAVE_NEON)
const KernelTable* neon_table() { return nullptr; }
#endif

namespace {

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return &scalar_table();
    case Isa::avx2:
      return avx2_table();
    case Isa::neon:
      return neon_table();
  }
  return nullptr;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{table_for(best_isa())};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "unknown";
}

bool isa_supported(Isa isa) {
  if (table_for(isa) == nullptr) return false;
#if defined(MRT_HAVE_AVX2)
  if (isa == Isa::avx2) return __builtin_cpu_supports("avx2") != 0;
#endif
  return true;
}

Isa best_isa() {
  if (isa_supported(Isa::avx2)) return Isa::avx2;
  if (isa_supported(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

const KernelTable& active() { return *active_slot().load(std::memory_order_relaxed); }

Isa active_isa() { return active().isa; }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw std::invalid_argument("kernel variant '" + std::string(isa_name(isa)) +
                                "' is not available on this CPU");
  }
  active_slot().store(table_for(isa), std::memory_order_relaxed);
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "neon") return Isa::neon;
  if (name == "auto") return best_isa();
  throw std::invalid_argument("unknown kernel variant '" + std::string(name) + "'");
}

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a,
              const double* b, double* c) {
  const KernelTable& kt = active();
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c + i * n;
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double alpha = a_row[p];
      if (alpha != 0.0) kt.axpy(alpha, b + p * n, c_row, n);
    }
  }
}

}  // namespace mrt::kernels
