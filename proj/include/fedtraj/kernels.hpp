#pragma once

#include <cstddef>
#include <string_view>

// Dense f64 kernels used by the autodiff graph and the masking protocol.
// Two implementations ship: a scalar reference and an AVX2/FMA variant.
// The active backend is picked once at startup from CPUID and can be
// overridden with FEDTRAJ_KERNELS=scalar|avx2 (or force_backend in tests).
// Transcendentals (gelu, exp) are scalar in both backends; only the
// linear-algebra kernels below have vector variants.

namespace fedtraj::kernels {

struct Backend {
  const char* name;
  void (*add)(const double*, const double*, double*, std::size_t);
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*mul)(const double*, const double*, double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scale)(const double*, double, double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  double (*sum)(const double*, std::size_t);
  double (*sq_norm)(const double*, std::size_t);
  // C[m x n] = A[m x k] * B[k x n], all row-major; C is overwritten
  void (*matmul_nn)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
  // C[m x n] = A^T * B with A[k x m], B[k x n]
  void (*matmul_tn)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
  // C[m x n] = A * B^T with A[m x k], B[n x k]
  void (*matmul_nt)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
};

extern const Backend kScalarBackend;
extern const Backend kAvx2Backend;

bool cpu_has_avx2();

// Currently active backend (selected on first use).
const Backend& active();
std::string_view backend_name();

// Test hook; "scalar", "avx2" or "auto".
void force_backend(std::string_view name);

inline void add(const double* a, const double* b, double* dst, std::size_t n) { active().add(a, b, dst, n); }
inline void sub(const double* a, const double* b, double* dst, std::size_t n) { active().sub(a, b, dst, n); }
inline void mul(const double* a, const double* b, double* dst, std::size_t n) { active().mul(a, b, dst, n); }
inline void axpy(double a, const double* x, double* y, std::size_t n) { active().axpy(a, x, y, n); }
inline void scale(const double* x, double a, double* dst, std::size_t n) { active().scale(x, a, dst, n); }
inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline double sum(const double* x, std::size_t n) { return active().sum(x, n); }
inline double sq_norm(const double* x, std::size_t n) { return active().sq_norm(x, n); }
inline void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  active().matmul_nn(a, b, c, m, k, n);
}
inline void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  active().matmul_tn(a, b, c, m, k, n);
}
inline void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  active().matmul_nt(a, b, c, m, k, n);
}

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
void gelu(const double* x, double* y, std::size_t n);
// gx += gy * gelu'(x)
void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n);

bool all_finite(const double* x, std::size_t n);

}  // namespace fedtraj::kernels
