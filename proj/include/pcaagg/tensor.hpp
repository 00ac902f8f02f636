#pragma once
// Dense row-major n-dimensional arrays plus the small numeric utilities
// (deterministic RNG, broadcasting, portable file format) everything else
// builds on.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcaagg {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

using Dims = std::vector<int64_t>;

inline int64_t dims_numel(const Dims& d) {
  int64_t n = 1;
  for (int64_t x : d) n *= x;
  return n;
}

inline std::string dims_str(const Dims& d) {
  std::string s = "[";
  for (size_t i = 0; i < d.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(d[i]);
  }
  return s + "]";
}

namespace detail {

// splitmix64: stable across platforms, unlike std distributions.
struct Rng {
  uint64_t state;
  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // uniform in [0,1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  // uniform in (0,1]
  double uniform_pos() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform_pos();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }
  uint64_t below(uint64_t n) { return next_u64() % n; }

 private:
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t fnv1a_bytes(const void* p, size_t n, uint64_t h = 1469598103934665603ULL) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Row-major dense tensor. Rank 0 (empty dims) is a scalar holding one value.
template <typename T>
struct Tensor {
  static_assert(std::is_floating_point_v<T>);

  Dims dims;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Dims d) : dims(std::move(d)), data(size_t(dims_numel(dims)), T(0)) {
    check_dims();
  }
  Tensor(Dims d, std::vector<T> v) : dims(std::move(d)), data(std::move(v)) {
    check_dims();
    if (int64_t(data.size()) != dims_numel(dims))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match dims " + dims_str(dims));
  }

  static Tensor zeros(Dims d) { return Tensor(std::move(d)); }
  static Tensor full(Dims d, T v) {
    Tensor t(std::move(d));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }
  static Tensor randn(Dims d, detail::Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(d));
    for (T& x : t.data) x = T(rng.normal()) * stddev;
    return t;
  }

  int64_t numel() const { return int64_t(data.size()); }
  int rank() const { return int(dims.size()); }

  int64_t dim(int axis) const { return dims[size_t(axis)]; }

  // Row-major strides.
  Dims strides() const {
    Dims s(dims.size());
    int64_t acc = 1;
    for (int i = rank() - 1; i >= 0; --i) {
      s[size_t(i)] = acc;
      acc *= dims[size_t(i)];
    }
    return s;
  }

  T& at(const Dims& idx) { return data[size_t(flat_index(idx))]; }
  T at(const Dims& idx) const { return data[size_t(flat_index(idx))]; }

  template <typename... I>
  T& operator()(I... idx) {
    return data[size_t(flat_index(Dims{int64_t(idx)...}))];
  }
  template <typename... I>
  T operator()(I... idx) const {
    return data[size_t(flat_index(Dims{int64_t(idx)...}))];
  }

  int64_t flat_index(const Dims& idx) const {
    if (idx.size() != dims.size()) throw ShapeError("index rank mismatch");
    int64_t f = 0, stride = 1;
    for (int i = rank() - 1; i >= 0; --i) {
      f += idx[size_t(i)] * stride;
      stride *= dims[size_t(i)];
    }
    return f;
  }

  bool all_finite() const {
    for (T x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.dims = dims;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }

  uint64_t content_hash() const {
    uint64_t h = detail::fnv1a(dims_str(dims));
    return detail::fnv1a_bytes(data.data(), data.size() * sizeof(T), h);
  }

 private:
  void check_dims() const {
    for (int64_t x : dims)
      if (x <= 0) throw ShapeError("non-positive dim in " + dims_str(dims));
  }
};

namespace detail {

// Trailing-dimension broadcasting: align ranks at the tail; a dim matches if
// equal or one side is 1 (missing leading dims count as 1).
inline Dims broadcast_dims(const Dims& a, const Dims& b, const char* what) {
  size_t r = std::max(a.size(), b.size());
  Dims out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(what) + ": dims not broadcastable " + dims_str(a) +
                       " vs " + dims_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `from` viewed through broadcast shape `to` (0 where broadcast).
inline Dims broadcast_strides(const Dims& from, const Dims& to) {
  Dims s(to.size(), 0);
  int64_t acc = 1;
  for (int i = int(from.size()) - 1; i >= 0; --i) {
    size_t j = to.size() - (from.size() - size_t(i));
    s[j] = from[size_t(i)] == 1 && to[j] != 1 ? 0 : acc;
    acc *= from[size_t(i)];
  }
  return s;
}

// Apply f(out_index, a_offset, b_offset) over a broadcast iteration space.
template <typename F>
void for_each_broadcast(const Dims& out, const Dims& sa, const Dims& sb, F&& f) {
  int64_t n = dims_numel(out);
  size_t r = out.size();
  Dims idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int ax = int(r) - 1; ax >= 0; --ax) {
      size_t a = size_t(ax);
      if (++idx[a] < out[a]) {
        oa += sa[a];
        ob += sb[a];
        break;
      }
      idx[a] = 0;
      oa -= sa[a] * (out[a] - 1);
      ob -= sb[a] * (out[a] - 1);
    }
  }
}

// Sum `g` (shaped `from`) down to `target` dims (inverse of broadcasting).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Dims& target) {
  if (g.dims == target) return g;
  Tensor<T> out(target.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>::zeros(target));
  Dims st = broadcast_strides(target, g.dims);
  int64_t n = g.numel();
  size_t r = g.dims.size();
  Dims idx(r, 0);
  int64_t ot = 0;
  for (int64_t i = 0; i < n; ++i) {
    out.data[size_t(ot)] += g.data[size_t(i)];
    for (int ax = int(r) - 1; ax >= 0; --ax) {
      size_t a = size_t(ax);
      if (++idx[a] < g.dims[a]) {
        ot += st[a];
        break;
      }
      idx[a] = 0;
      ot -= st[a] * (g.dims[a] - 1);
    }
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<int>& perm) {
  if (int(perm.size()) != t.rank()) throw ShapeError("permute: rank mismatch");
  Dims nd(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) nd[i] = t.dims[size_t(perm[i])];
  Tensor<T> out(nd);
  Dims in_strides = t.strides();
  Dims ps(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) ps[i] = in_strides[size_t(perm[i])];
  size_t r = nd.size();
  Dims idx(r, 0);
  int64_t off = 0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    out.data[size_t(i)] = t.data[size_t(off)];
    for (int ax = int(r) - 1; ax >= 0; --ax) {
      size_t a = size_t(ax);
      if (++idx[a] < nd[a]) {
        off += ps[a];
        break;
      }
      idx[a] = 0;
      off -= ps[a] * (nd[a] - 1);
    }
  }
  return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
  return inv;
}

}  // namespace detail

// Argmax along the last axis; first occurrence wins on ties.
template <typename T>
std::vector<int> argmax_last(const Tensor<T>& t) {
  int64_t inner = t.dims.back();
  int64_t outer = t.numel() / inner;
  std::vector<int> out(static_cast<size_t>(outer));
  for (int64_t o = 0; o < outer; ++o) {
    const T* row = t.data.data() + o * inner;
    int best = 0;
    for (int64_t j = 1; j < inner; ++j)
      if (row[j] > row[best]) best = int(j);
    out[size_t(o)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Portable tensor file: magic "PTNS", u8 dtype (1=f32, 2=f64), u8 rank,
// rank x u32 little-endian dims, then row-major little-endian payload.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "ptns I/O assumes a little-endian host");

template <typename T>
void save_ptns(const Tensor<T>& t, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f.write("PTNS", 4);
  uint8_t dtype = std::is_same_v<T, float> ? 1 : 2;
  uint8_t rank = uint8_t(t.rank());
  f.write(reinterpret_cast<const char*>(&dtype), 1);
  f.write(reinterpret_cast<const char*>(&rank), 1);
  for (int64_t d : t.dims) {
    uint32_t u = uint32_t(d);
    f.write(reinterpret_cast<const char*>(&u), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data.data()),
          std::streamsize(t.data.size() * sizeof(T)));
  if (!f) throw IoError("short write: " + path.string());
}

template <typename T>
Tensor<T> load_ptns(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "PTNS", 4) != 0)
    throw IoError("bad magic in " + path.string());
  uint8_t dtype = 0, rank = 0;
  f.read(reinterpret_cast<char*>(&dtype), 1);
  f.read(reinterpret_cast<char*>(&rank), 1);
  if (!f || (dtype != 1 && dtype != 2)) throw IoError("bad dtype in " + path.string());
  Dims dims(rank);
  for (int i = 0; i < rank; ++i) {
    uint32_t u = 0;
    f.read(reinterpret_cast<char*>(&u), 4);
    dims[size_t(i)] = int64_t(u);
  }
  int64_t n = dims_numel(dims);
  Tensor<T> out;
  auto read_payload = [&](auto tag) {
    using U = decltype(tag);
    std::vector<U> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(U)));
    if (!f) throw IoError("short read: " + path.string());
    out.dims = dims;
    out.data.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) out.data[size_t(i)] = T(buf[size_t(i)]);
  };
  if (dtype == 1)
    read_payload(float{});
  else
    read_payload(double{});
  return out;
}

}  // namespace pcaagg
