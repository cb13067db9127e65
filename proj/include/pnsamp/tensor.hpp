#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pnsamp/error.hpp"
#include "pnsamp/random.hpp"

namespace pnsamp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Dense N-dimensional array, row-major and contiguous (the last extent varies
// fastest). No strided views: operations that need windows copy them.
template <typename T>
class Tensor {
public:
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty, or one entry per element

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0), bool req_grad = false)
        : shape(std::move(s)), data(shape_numel(shape), fill), requires_grad(req_grad) {
        validate_shape();
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    Tensor(Shape s, std::vector<T> values, bool req_grad = false)
        : shape(std::move(s)), data(std::move(values)), requires_grad(req_grad) {
        validate_shape();
        if (data.size() != shape_numel(shape)) {
            throw ShapeError(detail::cat("tensor data length ", data.size(),
                                         " does not match shape ", shape_str(shape)));
        }
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    static Tensor uniform(Shape s, Rng& rng, T lo, T hi, bool req_grad = false) {
        Tensor t(std::move(s), T(0), req_grad);
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void zero_grad() { grad.assign(grad.size(), T(0)); }

    bool all_finite() const {
        for (const T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.requires_grad = requires_grad;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        if (out.requires_grad) out.grad.assign(out.data.size(), U(0));
        return out;
    }

private:
    void validate_shape() const {
        for (auto e : shape) {
            if (e == 0) throw ShapeError(detail::cat("zero extent in shape ", shape_str(shape)));
        }
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace pnsamp
