#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cprompt {

// Error hierarchy. Every failure surfaced by the library derives from Error so
// callers (the CLI in particular) can tag and report it uniformly.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CPROMPT_DEFINE_ERROR(Name)            \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  }

CPROMPT_DEFINE_ERROR(ShapeError);
CPROMPT_DEFINE_ERROR(IndexError);
CPROMPT_DEFINE_ERROR(ContractError);
CPROMPT_DEFINE_ERROR(ConfigError);
CPROMPT_DEFINE_ERROR(LengthError);
CPROMPT_DEFINE_ERROR(CompatibilityError);
CPROMPT_DEFINE_ERROR(DataError);
CPROMPT_DEFINE_ERROR(NumericError);
CPROMPT_DEFINE_ERROR(FrozenWeightViolation);
CPROMPT_DEFINE_ERROR(DivergenceError);
CPROMPT_DEFINE_ERROR(FilesystemError);

// Checkpoint corruption. Each failure mode has its own type.
CPROMPT_DEFINE_ERROR(CorruptionError);
class BadMagicError : public CorruptionError {
 public:
  using CorruptionError::CorruptionError;
};
class BadVersionError : public CorruptionError {
 public:
  using CorruptionError::CorruptionError;
};
class TruncatedError : public CorruptionError {
 public:
  using CorruptionError::CorruptionError;
};
class DigestMismatchError : public CorruptionError {
 public:
  using CorruptionError::CorruptionError;
};

#undef CPROMPT_DEFINE_ERROR

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_string(const Shape& shape);

// Dense row-major f32 tensor. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor matrix(std::size_t rows, std::size_t cols) {
    return Tensor(Shape{rows, cols});
  }
  static Tensor scalar(float value) { return Tensor(Shape{1}, {value}); }
  static Tensor from_rows(const std::vector<std::vector<float>>& rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix views. A rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;

  // Bitwise equality of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_.size() == b.data_.size() &&
           (a.data_.empty() ||
            std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace cprompt
