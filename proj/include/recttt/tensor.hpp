#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "recttt/common.hpp"

namespace recttt {

// Allocator whose default-construct is a no-op for trivial types: scratch
// buffers and op outputs that are fully overwritten skip the zero fill a
// plain vector would pay for.
template <class T>
struct uninit_allocator : std::allocator<T> {
  using std::allocator<T>::allocator;
  template <class U>
  struct rebind {
    using other = uninit_allocator<U>;
  };
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T>
using TensorData = std::vector<T, uninit_allocator<T>>;

// Allocator-agnostic comparison so tensor payloads compare against plain
// std::vector literals in tests.
template <class T, class A, class B>
bool operator==(const std::vector<T, A>& a, const std::vector<T, B>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// Dense n-dimensional tensor, outermost extent first. Image batches are
// stored batch x channels x height x width. The artifact computes in float32
// (BasicTensor<float>); the double instantiation exists for the 64-bit
// shadow forwards the finite-difference oracle runs. The enumerated
// reductions (dot, sums, means, batch statistics) always accumulate in
// double and round once at the end.
template <class T>
struct BasicTensor {
  std::vector<int> shape;
  TensorData<T> data;

  BasicTensor() = default;

  // Zero-filled.
  explicit BasicTensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(checked_numel(shape)), T(0));
  }

  BasicTensor(std::vector<int> s, TensorData<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != checked_numel(shape))
      throw ShapeError("tensor data length does not match shape");
  }

  // Uninitialized storage for outputs that are fully overwritten.
  static BasicTensor uninit(std::vector<int> s) {
    BasicTensor t;
    const auto n = static_cast<std::size_t>(checked_numel(s));
    t.shape = std::move(s);
    t.data.resize(n);
    return t;
  }

  static std::int64_t checked_numel(const std::vector<int>& s) {
    if (s.empty()) throw ShapeError("empty shape");
    std::int64_t n = 1;
    for (int e : s) {
      if (e < 1) throw ShapeError("non-positive extent " + std::to_string(e));
      n *= e;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }
  bool empty() const { return data.empty(); }

  T& at4(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  T at4(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << shape[i] << (i + 1 < shape.size() ? "," : "");
    os << ']';
    return os.str();
  }
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  BasicTensor<To> out(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

template <class T = float>
BasicTensor<T> zeros(std::vector<int> shape) {
  return BasicTensor<T>(std::move(shape));
}

template <class T>
BasicTensor<T> full(std::vector<int> shape, T value) {
  BasicTensor<T> t(std::move(shape));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

template <class T = float>
BasicTensor<T> ones(std::vector<int> shape) {
  return full(std::move(shape), T(1));
}

template <class T>
BasicTensor<T> scalar_tensor(T v) {
  return BasicTensor<T>({1}, {v});
}

template <class A, class B>
void require_same_shape(const BasicTensor<A>& a, const BasicTensor<B>& b, const char* op) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  BasicTensor<T> out = BasicTensor<T>::uninit(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  BasicTensor<T> out = BasicTensor<T>::uninit(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  BasicTensor<T> out = BasicTensor<T>::uninit(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out = BasicTensor<T>::uninit(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * s;
  return out;
}

// Dot over flattened elements; requires equal element counts.
template <class T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.numel() != b.numel())
    throw ShapeError("dot: element count mismatch " + a.shape_str() + " vs " + b.shape_str());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
  return acc;
}

template <class T>
double norm2(const BasicTensor<T>& a) {
  return std::sqrt(dot(a, a));
}

template <class T>
double sum(const BasicTensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data) acc += v;
  return acc;
}

template <class T>
double mean(const BasicTensor<T>& a) {
  return sum(a) / static_cast<double>(a.numel());
}

// Single-axis reductions. The reduced axis keeps extent 1.
template <class T>
BasicTensor<T> reduce_sum(const BasicTensor<T>& a, int axis) {
  if (axis < 0 || axis >= a.rank()) throw ShapeError("reduce_sum: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
  const std::int64_t extent = a.shape[axis];
  std::vector<int> os = a.shape;
  os[axis] = 1;
  BasicTensor<T> out(os);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      double acc = 0.0;
      for (std::int64_t e = 0; e < extent; ++e)
        acc += a.data[(o * extent + e) * inner + in];
      out.data[o * inner + in] = static_cast<T>(acc);
    }
  return out;
}

template <class T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& a, int axis) {
  BasicTensor<T> out = reduce_sum(a, axis);
  const T inv = T(1) / static_cast<T>(a.shape[axis]);
  for (T& v : out.data) v *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// GEMM. Inner products accumulate in the compute precision of the tensor
// (the double shadow instantiation therefore accumulates in 64-bit). Every
// output element is produced by exactly one thread with a fixed accumulation
// order, so results are bitwise reproducible for any thread count or
// schedule; threads fork only when a call carries real work.
// ---------------------------------------------------------------------------

template <class T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool parallel = true) {
  const bool fork = parallel && m > 1 &&
                    static_cast<double>(m) * k * n > 4e5;
#pragma omp parallel if (fork)
  {
    TensorData<T> row(static_cast<std::size_t>(n));
#pragma omp for schedule(static)
    for (int i = 0; i < m; ++i) {
      std::fill(row.begin(), row.end(), T(0));
      const T* arow = a + static_cast<std::size_t>(i) * k;
      for (int kk = 0; kk < k; ++kk) {
        const T av = arow[kk];
        const T* brow = b + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) row[j] += av * brow[j];
      }
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] = row[j];
    }
  }
}

// C[m x n] = A[m x k] * B[n x k]^T, optionally accumulating into C.
// The dot runs eight interleaved lanes (combined in a fixed order) so the
// reduction vectorizes instead of serializing on FMA latency.
template <class T>
void gemm_abt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate,
              bool parallel = true) {
  const bool fork = parallel && m > 1 &&
                    static_cast<double>(m) * k * n > 4e5;
#pragma omp parallel for schedule(static) if (fork)
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
      int kk = 0;
      for (; kk + 8 <= k; kk += 8)
        for (int l = 0; l < 8; ++l)
          lane[l] += arow[kk + l] * brow[kk + l];
      T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
              ((lane[4] + lane[5]) + (lane[6] + lane[7]));
      for (; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 tensors");
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul: inner extents differ " + a.shape_str() + " vs " + b.shape_str());
  BasicTensor<T> out = BasicTensor<T>::uninit({a.shape[0], b.shape[1]});
  gemm(a.data.data(), b.data.data(), out.data.data(), a.shape[0], a.shape[1], b.shape[1]);
  return out;
}

template <class T>
BasicTensor<T> transpose2d(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: expects rank-2 tensor");
  BasicTensor<T> out = BasicTensor<T>::uninit({a.shape[1], a.shape[0]});
  for (int i = 0; i < a.shape[0]; ++i)
    for (int j = 0; j < a.shape[1]; ++j)
      out.data[static_cast<std::size_t>(j) * a.shape[0] + i] =
          a.data[static_cast<std::size_t>(i) * a.shape[1] + j];
  return out;
}

// Reverses the width axis (last extent) of a CHW or NCHW image tensor.
template <class T>
BasicTensor<T> hflip(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("hflip: expects an image tensor");
  const int w = x.shape.back();
  const std::int64_t rows = x.numel() / w;
  BasicTensor<T> out = BasicTensor<T>::uninit(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.data.data() + r * w;
    T* dst = out.data.data() + r * w;
    for (int i = 0; i < w; ++i) dst[i] = src[w - 1 - i];
  }
  return out;
}

template <class T>
bool all_finite(const BasicTensor<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

}  // namespace recttt
