#pragma once

#include <cstddef>
#include <string_view>

// Data-parallel primitives behind the tensor ops. A scalar reference
// implementation always exists; an AVX2+FMA variant is selected at runtime
// when the CPU supports it. Override with KLITE_KERNELS=scalar|avx2.
namespace klite::kernels {

template <typename T>
struct Table {
  T (*dot)(const T* x, const T* y, std::size_t n);
  void (*axpy)(T a, const T* x, T* y, std::size_t n);      // y += a*x
  void (*scale)(const T* x, T a, T* out, std::size_t n);   // out = a*x
  void (*add)(const T* x, const T* y, T* out, std::size_t n);
  void (*mul)(const T* x, const T* y, T* out, std::size_t n);
  void (*relu)(const T* x, T* out, std::size_t n);
  // dx += dy where x > 0
  void (*relu_backward)(const T* x, const T* dy, T* dx, std::size_t n);
  T (*sum)(const T* x, std::size_t n);
  T (*max)(const T* x, std::size_t n);  // n >= 1, finite input
  // C[m,n] (+)= A[m,k] * B[k,n]
  void (*matmul_nn)(const T* a, const T* b, T* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate);
  // C[m,n] (+)= A[m,k] * B[n,k]^T
  void (*matmul_nt)(const T* a, const T* b, T* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate);
  // C[m,n] (+)= A[k,m]^T * B[k,n]
  void (*matmul_tn)(const T* a, const T* b, T* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate);
};

enum class Backend { scalar, avx2 };

template <typename T> const Table<T>& scalar_table();
template <typename T> const Table<T>* avx2_table();  // nullptr when unavailable

// Active table for the process-wide backend.
template <typename T> const Table<T>& active();

Backend active_backend();
std::string_view backend_name();
// Testing hook; requests for an unavailable backend fall back to scalar.
void force_backend(Backend b);

}  // namespace klite::kernels
