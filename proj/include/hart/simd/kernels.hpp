#pragma once

// Inner-loop kernels with a portable scalar reference and ISA-specific
// variants chosen once at startup. Every variant must agree with the scalar
// reference to a few ulps; tests/unit/test_kernels.cpp checks this.

#include <cstddef>
#include <string_view>

namespace hart::simd {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  const char* name;

  // Row-major GEMMs. When accumulate is false C is overwritten.
  // C(MxN) = A(MxK) * B(KxN)
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C(MxN) = A(MxK) * B(NxK)^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C(MxN) = A(KxM)^T * B(KxN)
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

  void (*mul)(const double* x, const double* y, double* z, std::size_t n);      // z = x*y
  void (*mul_add)(const double* x, const double* y, double* z, std::size_t n);  // z += x*y
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);        // y += alpha*x
  double (*dot)(const double* x, const double* y, std::size_t n);
  void (*exp)(const double* x, double* y, std::size_t n);

  // Dense attention kernel: y = x + 1 for x >= 0, e^x otherwise.
  void (*dak)(const double* x, double* y, std::size_t n);
  // gx += g * dak'(x), where dak'(x) = 1 for x >= 0 and y = e^x otherwise.
  void (*dak_backward)(const double* x, const double* y, const double* g, double* gx, std::size_t n);
};

const KernelTable& scalar_kernels();

/// AVX2/FMA table, or nullptr when not compiled in or not supported by this CPU.
const KernelTable* avx2_kernels();

/// The table used by all tensor operations. Defaults to the widest supported
/// ISA; the HART_SIMD environment variable ("scalar" or "avx2") overrides it.
const KernelTable& kernels();

/// Switches the active table. Returns false when the ISA is unavailable.
bool set_isa(Isa isa);
Isa active_isa();
std::string_view isa_name(Isa isa);

/// RAII guard that switches ISA for a scope and restores the previous one.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()), ok_(set_isa(isa)) {}
  ~ScopedIsa() { set_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;
  bool ok() const { return ok_; }

 private:
  Isa previous_;
  bool ok_;
};

}  // namespace hart::simd
