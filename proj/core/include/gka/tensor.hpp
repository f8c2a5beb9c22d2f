#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "gka/errors.hpp"

namespace gka {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array with an explicit shape.
///
/// A default-constructed tensor is empty (rank 0, no data) and only useful as
/// a placeholder; every constructed tensor has rank >= 1 and extents >= 1.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0});
    Tensor(Shape shape, std::vector<T> data);

    /// 2-D tensor from nested rows, mostly for tests.
    static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // Unchecked in release builds; the rank must match the index count.
    T& at(std::size_t i, std::size_t j) noexcept {
        assert(shape_.size() == 2);
        return data_[i * shape_[1] + j];
    }
    const T& at(std::size_t i, std::size_t j) const noexcept {
        assert(shape_.size() == 2);
        return data_[i * shape_[1] + j];
    }
    T& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
        assert(shape_.size() == 3);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        assert(shape_.size() == 3);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Same buffer, new extents. Element count must match.
    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    void fill(T value);

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

  private:
    Shape shape_;
    std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Throws ShapeError unless `t` has exactly the given extents.
template <typename T>
void expect_shape(const Tensor<T>& t, const Shape& shape, const char* what);

}  // namespace gka
