#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "coopgen/errors.hpp"
#include "coopgen/rng.hpp"

namespace coopgen {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major n-d array. The value type is float or double; tests run
// at double, training defaults to float via the CLI precision switch.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape) : shape_(std::move(shape)) {
        for (auto d : shape_)
            if (d <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape_));
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static TensorT from_data(Shape shape, std::vector<T> data) {
        TensorT t;
        t.shape_ = std::move(shape);
        if (static_cast<std::int64_t>(data.size()) != shape_numel(t.shape_))
            throw ShapeError("from_data: element count does not match shape " + shape_str(t.shape_));
        t.data_ = std::move(data);
        return t;
    }

    static TensorT randn(Shape shape, RngStream& rng, T scale = T(1)) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * scale;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return {data_.data(), data_.size()}; }
    std::span<const T> span() const { return {data_.data(), data_.size()}; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Row-major offset helpers for the common ranks.
    T& at2(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    const T& at2(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    TensorT reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw ShapeError("reshape from " + shape_str(shape_) + " to " + shape_str(shape) + " changes element count");
        TensorT t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void check_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite value in " + what);
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    // In-place axpy: this += a * x.
    void add_scaled(const TensorT& x, T a) {
        if (!same_shape(x)) throw ShapeError("add_scaled: shape mismatch");
        const T* xs = x.data();
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * xs[i];
    }

    void scale_inplace(T a) {
        for (auto& v : data_) v *= a;
    }

    double sum() const {
        double s = 0;
        for (T v : data_) s += static_cast<double>(v);
        return s;
    }

    double squared_norm() const {
        double s = 0;
        for (T v : data_) s += static_cast<double>(v) * static_cast<double>(v);
        return s;
    }

    double max_abs() const {
        double m = 0;
        for (T v : data_) m = std::max(m, std::abs(static_cast<double>(v)));
        return m;
    }

    bool operator==(const TensorT& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        std::vector<U> d(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
        return TensorT<U>::from_data(shape_, std::move(d));
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace coopgen
