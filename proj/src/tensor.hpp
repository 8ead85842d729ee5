#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pinv {

// Thrown when an operation is called with inconsistent shapes or modes.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a computation produces or receives non-finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown on malformed files (container magic, truncation, bad header).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Large feature maps churn through malloc every forward pass; with default
// glibc thresholds each one is a fresh mmap/munmap pair and the pages fault
// back in on every call. Pin the thresholds high so buffers are recycled.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

// Hand freed arena pages back to the OS so the next allocation burst lands on
// fresh, densely mapped pages. Called before building a network whose buffers
// are traversed on every inference: carving them out of a large arena left
// behind by the wave solver spreads them over sparse page ranges and slows
// the per-layer passes by ~30%.
inline void compact_heap() {
#if defined(__GLIBC__)
    malloc_trim(0);
#endif
}

using Shape = std::vector<std::size_t>;

// Allocator that leaves elements default-initialized unless a value is given.
// Tensor buffers that are fully overwritten right after allocation use it to
// skip the vector's zero-fill pass (Tensor::uninit below); the plain shape
// constructor still zero-fills.
template <class T>
struct default_init_alloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = default_init_alloc<U>;
    };
    template <class U>
    void construct(U* p) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. T is float or double.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T, default_init_alloc<T>> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}

    // Allocate without the zero-fill; every element must be written before use.
    static Tensor uninit(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.resize(numel(t.shape));
        return t;
    }

    std::size_t size() const { return data.size(); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // 4-d accessor for [N,C,H,W] layouts.
    T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    // 2-d accessor for [N,F] layouts.
    T& at2(std::size_t n, std::size_t f) { return data[n * shape[1] + f]; }
    const T& at2(std::size_t n, std::size_t f) const { return data[n * shape[1] + f]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // A value is non-finite iff its exponent field is all ones, so a running
    // integer max of the masked exponents checks the whole buffer in one
    // vectorizable pass (std::isfinite per element does not vectorize).
    bool all_finite() const {
        if constexpr (sizeof(T) == 4) {
            std::uint32_t m = 0;
            for (T v : data) {
                const std::uint32_t e = std::bit_cast<std::uint32_t>(v) & 0x7f800000u;
                m = m > e ? m : e;
            }
            return m != 0x7f800000u;
        } else {
            std::uint64_t m = 0;
            for (T v : data) {
                const std::uint64_t e =
                    std::bit_cast<std::uint64_t>(v) & 0x7ff0000000000000ull;
                m = m > e ? m : e;
            }
            return m != 0x7ff0000000000000ull;
        }
    }

    void require_shape(const Shape& s, const char* where) const {
        if (shape != s)
            throw ContractError(std::string(where) + ": expected shape " + shape_str(s) +
                                ", got " + shape_str(shape));
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

template <class T>
double norm2(const Tensor<T>& a) {
    double s = 0;
    for (T v : a.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

template <class T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// ||a - b|| / ||b||, the relative l2 error used throughout.
template <class T>
double relative_l2(const Tensor<T>& a, const Tensor<T>& b_ref) {
    if (!a.same_shape(b_ref)) throw ContractError("relative_l2: shape mismatch");
    double nref = norm2(b_ref);
    if (nref == 0) throw ContractError("relative_l2: zero reference");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b_ref[i]);
        s += d * d;
    }
    return std::sqrt(s) / nref;
}

}  // namespace pinv
