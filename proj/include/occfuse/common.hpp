#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <iterator>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace occfuse {

using ClassId = std::uint16_t;
using InstanceId = std::uint32_t;

// Stuff classes carry a canonical class-level instance id, kept far above any
// per-sample box id.
inline constexpr InstanceId kStuffIdBase = 1u << 30;

inline constexpr InstanceId stuff_instance_id(ClassId c) { return kStuffIdBase + c; }
inline constexpr bool is_stuff_instance_id(InstanceId id) { return id >= kStuffIdBase; }

// Input that violates a documented contract (bad config, malformed file).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file named in a dataset could not be read or has the wrong shape.
class LoadError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// ---------------------------------------------------------------------------
// Little-endian binary helpers. Every on-disk array in this project is LE.

namespace detail {

template <typename T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  std::reverse(std::begin(b), std::end(b));
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    return detail::byteswap_value(v);
  }
}

template <typename T>
T from_little_endian(T v) {
  return to_little_endian(v);
}

template <typename T>
void write_le(std::ostream& os, T v) {
  v = to_little_endian(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw LoadError("unexpected end of binary stream");
  return from_little_endian(v);
}

template <typename T>
void write_le_array(std::ostream& os, const std::vector<T>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (const T& v : values) write_le(os, v);
  }
}

template <typename T>
void read_le_array(std::istream& is, std::vector<T>& values) {
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!is) throw LoadError("unexpected end of binary stream");
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : values) v = detail::byteswap_value(v);
  }
}

// ---------------------------------------------------------------------------
// Parallelism.

// Number of workers from OCCFUSE_WORKERS, falling back to hardware concurrency.
inline unsigned default_worker_count() {
  if (const char* env = std::getenv("OCCFUSE_WORKERS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Splits [0, n) into contiguous chunks, one per worker. fn(begin, end) must only
// write to state owned by its own index range.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  if (n == 0) return;
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, &errors, w, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace occfuse
