#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace calm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  /// Throws DimensionError when the data length does not match the shape.
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

bool all_finite(const Tensor& t) noexcept;

/// Throws NonFiniteError naming `what` if any entry is NaN or infinite.
void check_finite(const Tensor& t, std::string_view what);

/// Row-major matrix of token ids.
struct IdMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> values;

  IdMatrix() = default;
  IdMatrix(std::size_t r, std::size_t c, std::int32_t fill = 0)
      : rows(r), cols(c), values(r * c, fill) {}

  std::int32_t& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::int32_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  friend bool operator==(const IdMatrix&, const IdMatrix&) = default;
};

}  // namespace calm
