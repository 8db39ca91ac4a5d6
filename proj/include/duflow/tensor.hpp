#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "duflow/error.hpp"

namespace duflow {

/// Dimensions of a rank-4 NCHW array.
struct Shape4 {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t size() const {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
               static_cast<std::size_t>(w);
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    bool valid() const { return n > 0 && c > 0 && h > 0 && w > 0; }

    friend bool operator==(const Shape4 &, const Shape4 &) = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

/// Dense row-major NCHW array. Gradients live in the autodiff graph, not here.
template <typename T>
class Tensor4 {
   public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
        if (!shape.valid()) throw Error(ErrorCode::InvalidShape, "non-positive tensor dims " + shape.str());
        data_.assign(shape.size(), fill);
    }
    Tensor4(int n, int c, int h, int w, T fill = T(0)) : Tensor4(Shape4{n, c, h, w}, fill) {}
    Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (!shape.valid()) throw Error(ErrorCode::InvalidShape, "non-positive tensor dims " + shape.str());
        if (data_.size() != shape.size())
            throw Error(ErrorCode::ShapeMismatch,
                        "data length " + std::to_string(data_.size()) + " does not match " + shape.str());
    }

    static Tensor4 scalar(T v) { return Tensor4(Shape4{1, 1, 1, 1}, v); }

    const Shape4 &shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T *data() { return data_.data(); }
    const T *data() const { return data_.data(); }
    std::vector<T> &vec() { return data_; }
    const std::vector<T> &vec() const { return data_; }

    std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    T &at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    const T &at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }
    T &operator[](std::size_t i) { return data_[i]; }
    const T &operator[](std::size_t i) const { return data_[i]; }

    /// Pointer to the (n, c) plane.
    T *plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
    const T *plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

    T item() const {
        if (data_.size() != 1) throw Error(ErrorCode::ShapeMismatch, "item() on non-scalar " + shape_.str());
        return data_[0];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor4<U> cast() const {
        Tensor4<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    /// Copies batch item `n` into a one-item tensor.
    Tensor4 item_at(int n) const {
        Tensor4 out(Shape4{1, shape_.c, shape_.h, shape_.w});
        std::copy_n(plane(n, 0), out.size(), out.data());
        return out;
    }

   private:
    Shape4 shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

inline void require_same_shape(const Shape4 &a, const Shape4 &b, const char *what) {
    if (!(a == b)) throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + a.str() + " vs " + b.str());
}

/// Stacks one-item tensors along the batch axis.
template <typename T>
Tensor4<T> stack_batch(const std::vector<Tensor4<T>> &items) {
    if (items.empty()) throw Error(ErrorCode::InvalidArgument, "stack_batch of nothing");
    Shape4 s = items.front().shape();
    int total = 0;
    for (const auto &t : items) {
        Shape4 u = t.shape();
        if (u.c != s.c || u.h != s.h || u.w != s.w)
            throw Error(ErrorCode::ShapeMismatch, "stack_batch: " + s.str() + " vs " + u.str());
        total += u.n;
    }
    Tensor4<T> out(Shape4{total, s.c, s.h, s.w});
    std::size_t off = 0;
    for (const auto &t : items) {
        std::copy(t.vec().begin(), t.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off));
        off += t.size();
    }
    return out;
}

}  // namespace duflow
