#include "klite/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace klite::kernels {
namespace {

template <typename T>
T dot_s(const T* x, const T* y, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void axpy_s(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void scale_s(const T* x, T a, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i];
}

template <typename T>
void add_s(const T* x, const T* y, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

template <typename T>
void mul_s(const T* x, const T* y, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

template <typename T>
void relu_s(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward_s(const T* x, const T* dy, T* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > T(0)) dx[i] += dy[i];
}

template <typename T>
T sum_s(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T max_s(const T* x, std::size_t n) {
  T m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

template <typename T>
void matmul_nn_s(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_nt_s(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T v = dot_s(a + i * k, b + j * k, k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
}

template <typename T>
void matmul_tn_s(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
Table<T> make_table() {
  Table<T> t;
  t.dot = dot_s<T>;
  t.axpy = axpy_s<T>;
  t.scale = scale_s<T>;
  t.add = add_s<T>;
  t.mul = mul_s<T>;
  t.relu = relu_s<T>;
  t.relu_backward = relu_backward_s<T>;
  t.sum = sum_s<T>;
  t.max = max_s<T>;
  t.matmul_nn = matmul_nn_s<T>;
  t.matmul_nt = matmul_nt_s<T>;
  t.matmul_tn = matmul_tn_s<T>;
  return t;
}

}  // namespace

template <>
const Table<float>& scalar_table<float>() {
  static const Table<float> t = make_table<float>();
  return t;
}

template <>
const Table<double>& scalar_table<double>() {
  static const Table<double> t = make_table<double>();
  return t;
}

}  // namespace klite::kernels
