#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddp/common.hpp"

namespace ddp {

// Dense 4-D extents, NCHW. All four are strictly positive.
struct Shape {
    std::int64_t n = 1;
    std::int64_t c = 1;
    std::int64_t h = 1;
    std::int64_t w = 1;

    std::int64_t numel() const { return n * c * h * w; }

    bool operator==(const Shape& o) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

inline void validate(const Shape& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
        throw ShapeError("non-positive extent in " + s.str());
}

// Row-major NCHW tensor; w varies fastest, then h, then c, then n.
// Operations never mutate their inputs.
template <typename T>
class TensorT {
public:
    TensorT() : shape_{1, 1, 1, 1}, data_(1, T(0)) {}

    explicit TensorT(Shape s, T fill = T(0)) : shape_(s) {
        validate(s);
        data_.assign(static_cast<std::size_t>(s.numel()), fill);
    }

    TensorT(Shape s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
        validate(s);
        if (static_cast<std::int64_t>(data_.size()) != s.numel())
            throw ShapeError("storage length " + std::to_string(data_.size()) +
                             " does not match " + s.str());
    }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }
    bool empty_storage() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(index(n, c, h, w))];
    }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(index(n, c, h, w))];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const TensorT& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: empty part list");
    const Shape& s0 = parts[0].shape();
    std::int64_t c_total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw ShapeError("concat_channels: mismatched extents " + s.str() + " vs " + s0.str());
        c_total += s.c;
    }
    TensorT<T> out(Shape{s0.n, c_total, s0.h, s0.w});
    const std::int64_t plane = s0.h * s0.w;
    for (std::int64_t n = 0; n < s0.n; ++n) {
        std::int64_t c_off = 0;
        for (const auto& p : parts) {
            const std::int64_t cp = p.shape().c;
            const T* src = p.data() + n * cp * plane;
            T* dst = out.data() + (n * c_total + c_off) * plane;
            std::copy(src, src + cp * plane, dst);
            c_off += cp;
        }
    }
    return out;
}

template <typename T>
std::vector<TensorT<T>> split_channels(const TensorT<T>& t, const std::vector<std::int64_t>& sizes) {
    std::int64_t sum = 0;
    for (auto s : sizes) {
        if (s <= 0) throw ShapeError("split_channels: non-positive part size");
        sum += s;
    }
    if (sum != t.shape().c)
        throw ShapeError("split_channels: sizes sum " + std::to_string(sum) + " != channels " +
                         std::to_string(t.shape().c));
    const Shape& s0 = t.shape();
    const std::int64_t plane = s0.h * s0.w;
    std::vector<TensorT<T>> out;
    out.reserve(sizes.size());
    std::int64_t c_off = 0;
    for (auto cp : sizes) {
        TensorT<T> part(Shape{s0.n, cp, s0.h, s0.w});
        for (std::int64_t n = 0; n < s0.n; ++n) {
            const T* src = t.data() + (n * s0.c + c_off) * plane;
            std::copy(src, src + cp * plane, part.data() + n * cp * plane);
        }
        out.push_back(std::move(part));
        c_off += cp;
    }
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!(a.shape() == b.shape()))
        throw ShapeError("add: " + a.shape().str() + " vs " + b.shape().str());
    TensorT<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

// Per-pixel integer class map; ignore label pixels take no part in loss or metrics.
struct LabelMap {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<std::int32_t> v;

    LabelMap() = default;
    LabelMap(std::int64_t h_, std::int64_t w_, std::int32_t fill = 0)
        : h(h_), w(w_), v(static_cast<std::size_t>(h_ * w_), fill) {}

    std::int32_t& at(std::int64_t y, std::int64_t x) { return v[static_cast<std::size_t>(y * w + x)]; }
    std::int32_t at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }

    bool operator==(const LabelMap& o) const = default;
};

constexpr std::int32_t kIgnoreLabel = 255;

}  // namespace ddp
