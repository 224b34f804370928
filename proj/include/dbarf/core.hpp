// Dense array storage, deterministic RNG streams and error types shared by
// every other header in the library.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbarf {

using Shape = std::vector<int64_t>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

// Dense row-major n-d array. Plain storage, no autodiff; the tape in
// tensor.hpp wraps these.
template <typename S>
class ArrayT {
 public:
  ArrayT() = default;
  explicit ArrayT(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  ArrayT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("array: data size does not match shape " + shape_str(shape_));
  }

  static ArrayT zeros(Shape s) { return ArrayT(std::move(s), S(0)); }
  static ArrayT full(Shape s, S v) { return ArrayT(std::move(s), v); }
  static ArrayT scalar(S v) { return ArrayT(Shape{}, std::vector<S>{v}); }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& at(std::initializer_list<int64_t> idx) { return data_[flat(idx)]; }
  const S& at(std::initializer_list<int64_t> idx) const { return data_[flat(idx)]; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const ArrayT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const S& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  size_t flat(std::initializer_list<int64_t> idx) const {
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return static_cast<size_t>(off);
  }

  Shape shape_;
  std::vector<S> data_;
};

using Array = ArrayT<double>;
using ArrayF = ArrayT<float>;

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** seeded via splitmix64. All random draws in the project go
// through this so runs are reproducible on one platform independent of the
// standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  int64_t uniform_int(int64_t n) {  // [0, n)
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Derives an independent stream; used to key per-scene / per-step RNGs.
  Rng fork(uint64_t stream) const {
    uint64_t h = s_[0] ^ (stream * 0x9e3779b97f4a7c15ULL);
    h ^= s_[3] + 0x632be59bd9b4e019ULL;
    return Rng(h);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) std::swap(first[i], first[uniform_int(i + 1)]);
  }

 private:
  uint64_t s_[4] = {};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dbarf
