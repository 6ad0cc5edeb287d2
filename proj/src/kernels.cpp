#include "klite/kernels.hpp"

#include <cstdlib>

namespace klite::kernels {

#if !defined(KLITE_HAVE_AVX2)
template <>
const Table<float>* avx2_table<float>() { return nullptr; }
template <>
const Table<double>* avx2_table<double>() { return nullptr; }
#endif

namespace {

Backend detect_backend() {
  if (const char* env = std::getenv("KLITE_KERNELS")) {
    std::string_view v(env);
    if (v == "scalar") return Backend::scalar;
    if (v == "avx2" && avx2_table<float>()) return Backend::avx2;
    if (v == "avx2") return Backend::scalar;  // requested but unavailable
  }
  return avx2_table<float>() ? Backend::avx2 : Backend::scalar;
}

Backend& backend_state() {
  static Backend b = detect_backend();
  return b;
}

}  // namespace

Backend active_backend() { return backend_state(); }

std::string_view backend_name() {
  return active_backend() == Backend::avx2 ? "avx2" : "scalar";
}

void force_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_table<float>()) b = Backend::scalar;
  backend_state() = b;
}

template <typename T>
const Table<T>& active() {
  if (active_backend() == Backend::avx2)
    if (const Table<T>* t = avx2_table<T>()) return *t;
  return scalar_table<T>();
}

template const Table<float>& active<float>();
template const Table<double>& active<double>();

}  // namespace klite::kernels
