#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sttis {

// Allocator whose value-initialization is a no-op, so buffer growth does not
// zero memory that is about to be overwritten. Explicit fills still work.
template <class T>
struct NoInitAlloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = NoInitAlloc<U>;
    };
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

// Dense row-major tensor of 64-bit reals. Rank 0 (scalar), 1 and 2 are the
// common cases; conv outputs are stored flattened as rank 2.
struct Tensor {
    using Buffer = std::vector<double, NoInitAlloc<double>>;

    std::vector<std::size_t> shape;
    Buffer data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(count(shape), 0.0);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)) {
        if (d.size() != count(shape))
            throw std::invalid_argument("tensor: data length does not match shape");
        data.assign(d.begin(), d.end());
    }

    // Allocated but not zeroed; every element must be written before use.
    static Tensor uninit(std::vector<std::size_t> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.resize(count(t.shape));
        return t;
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double v) { return Tensor({}, {v}); }

    std::size_t size() const { return data.size(); }
    bool is_scalar() const { return shape.empty() || (shape.size() == 1 && shape[0] == 1); }

    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const {
        if (shape.size() < 2) return shape.empty() ? 1 : shape[0];
        std::size_t c = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double v) { data.assign(data.size(), v); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

}  // namespace sttis
